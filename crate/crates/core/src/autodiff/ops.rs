use super::{numel, Graph, Op, Tensor, BN_EPS};
use crate::error::{GrafitError, Result};
use crate::matrix::NORM_FLOOR;

pub(super) struct Output {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub cache: Vec<f64>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> GrafitError {
    GrafitError::Shape { op, left: a.to_vec(), right: b.to_vec() }
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(mismatch(op, shape, &[])),
    }
}

fn plain(shape: Vec<usize>, value: Vec<f64>) -> Output {
    Output { shape, value, cache: Vec::new() }
}

fn elementwise(g: &Graph, name: &'static str, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Output> {
    let (na, nb) = (g.node(a), g.node(b));
    if na.shape != nb.shape {
        return Err(mismatch(name, &na.shape, &nb.shape));
    }
    let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
    Ok(plain(na.shape.clone(), value))
}

fn map(g: &Graph, a: Tensor, f: impl Fn(f64) -> f64) -> Output {
    let n = g.node(a);
    plain(n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
}

pub(super) fn compute(g: &Graph, op: &Op) -> Result<Output> {
    let name = op.name();
    let out = match *op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::MatMul(a, b) => {
            let (sa, sb) = (&g.node(a).shape, &g.node(b).shape);
            let (n, k) = as_matrix(name, sa)?;
            let (k2, m) = as_matrix(name, sb)?;
            if k != k2 {
                return Err(mismatch(name, sa, sb));
            }
            let (av, bv) = (&g.node(a).value, &g.node(b).value);
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, av, (k, 1), bv, (m, 1), &mut out, (m, 1));
            plain(vec![n, m], out)
        }
        Op::AddBias(x, b) => {
            let (sx, sb) = (&g.node(x).shape, &g.node(b).shape);
            let (_, m) = as_matrix(name, sx)?;
            if sb.as_slice() != [m] {
                return Err(mismatch(name, sx, sb));
            }
            let bv = &g.node(b).value;
            let value = g.node(x).value.chunks_exact(m.max(1)).flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b)).collect();
            plain(sx.clone(), value)
        }
        Op::Add(a, b) => elementwise(g, name, a, b, |x, y| x + y)?,
        Op::Sub(a, b) => elementwise(g, name, a, b, |x, y| x - y)?,
        Op::Mul(a, b) => elementwise(g, name, a, b, |x, y| x * y)?,
        Op::Scale(a, c) => map(g, a, |x| c * x),
        Op::AddScalar(a, c) => map(g, a, |x| x + c),
        Op::Neg(a) => map(g, a, |x| -x),
        Op::Relu(a) => map(g, a, |x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp(a) => map(g, a, f64::exp),
        Op::Log(a) => map(g, a, f64::ln),
        Op::Sum(a) => plain(vec![], vec![g.node(a).value.iter().sum()]),
        Op::Mean(a) => {
            let v = &g.node(a).value;
            plain(vec![], vec![v.iter().sum::<f64>() / v.len() as f64])
        }
        Op::BatchNormTrain { x, gamma, beta } => {
            let (n, m) = check_bn(g, name, x, gamma, beta)?;
            let xv = &g.node(x).value;
            let mut mean = vec![0.0; m];
            let mut var = vec![0.0; m];
            for row in xv.chunks_exact(m) {
                mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            mean.iter_mut().for_each(|s| *s /= n as f64);
            for row in xv.chunks_exact(m) {
                for j in 0..m {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let value = affine_norm(xv, m, &mean, &inv_std, &g.node(gamma).value, &g.node(beta).value);
            let mut cache = mean;
            cache.extend(var);
            cache.extend(inv_std);
            Output { shape: vec![n, m], value, cache }
        }
        Op::BatchNormEval { x, gamma, beta, ref mean, ref var } => {
            let (n, m) = check_bn(g, name, x, gamma, beta)?;
            if mean.len() != m || var.len() != m {
                return Err(mismatch(name, &[n, m], &[mean.len()]));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let value = affine_norm(&g.node(x).value, m, mean, &inv_std, &g.node(gamma).value, &g.node(beta).value);
            Output { shape: vec![n, m], value, cache: inv_std }
        }
        Op::L2Normalize(x) => {
            let (n, d) = as_matrix(name, &g.node(x).shape)?;
            let xv = &g.node(x).value;
            let mut value = vec![0.0; n * d];
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let row = &xv[i * d..(i + 1) * d];
                let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.push(r);
                if r >= NORM_FLOOR {
                    for (o, v) in value[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o = v / r;
                    }
                }
            }
            Output { shape: vec![n, d], value, cache: norms }
        }
        Op::CosineRows(a, b) => {
            let (sa, sb) = (&g.node(a).shape, &g.node(b).shape);
            if sa != sb {
                return Err(mismatch(name, sa, sb));
            }
            let (n, d) = as_matrix(name, sa)?;
            let (av, bv) = (&g.node(a).value, &g.node(b).value);
            let mut value = Vec::with_capacity(n);
            let mut cache = Vec::with_capacity(2 * n);
            let mut norms_b = Vec::with_capacity(n);
            for i in 0..n {
                let ra = &av[i * d..(i + 1) * d];
                let rb = &bv[i * d..(i + 1) * d];
                let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let c =
                    if na < NORM_FLOOR || nb < NORM_FLOOR { 0.0 } else { ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * nb) };
                value.push(c);
                cache.push(na);
                norms_b.push(nb);
            }
            cache.extend(norms_b);
            Output { shape: vec![n], value, cache }
        }
        Op::LogSumExpRows { x, ref mask } => {
            let (n, m) = as_matrix(name, &g.node(x).shape)?;
            if let Some(mask) = mask {
                if mask.len() != n * m {
                    return Err(mismatch(name, &[n, m], &[mask.len()]));
                }
            }
            let xv = &g.node(x).value;
            let selected = |idx: usize| mask.as_ref().is_none_or(|mk| mk[idx]);
            let mut value = Vec::with_capacity(n);
            for i in 0..n {
                let mut hi = f64::NEG_INFINITY;
                for j in 0..m {
                    if selected(i * m + j) {
                        hi = hi.max(xv[i * m + j]);
                    }
                }
                let mut s = 0.0;
                for j in 0..m {
                    if selected(i * m + j) {
                        s += (xv[i * m + j] - hi).exp();
                    }
                }
                value.push(hi + s.ln());
            }
            plain(vec![n], value)
        }
        Op::Gather { x, ref indices } => {
            let (n, m) = as_matrix(name, &g.node(x).shape)?;
            if indices.len() != n {
                return Err(mismatch(name, &[n, m], &[indices.len()]));
            }
            if let Some(&bad) = indices.iter().find(|&&j| j >= m) {
                return Err(GrafitError::LabelOutOfRange { label: bad as u32, classes: m });
            }
            let xv = &g.node(x).value;
            plain(vec![n], indices.iter().enumerate().map(|(i, &j)| xv[i * m + j]).collect())
        }
    };
    if out.value.iter().any(|v| !v.is_finite()) {
        return Err(GrafitError::NonFinite { op: name });
    }
    debug_assert_eq!(numel(&out.shape), out.value.len());
    Ok(out)
}

fn check_bn(g: &Graph, name: &'static str, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<(usize, usize)> {
    let sx = &g.node(x).shape;
    let (n, m) = as_matrix(name, sx)?;
    for p in [gamma, beta] {
        if g.node(p).shape.as_slice() != [m] {
            return Err(mismatch(name, sx, &g.node(p).shape));
        }
    }
    if n == 0 {
        return Err(mismatch(name, sx, &[]));
    }
    Ok((n, m))
}

fn affine_norm(xv: &[f64], m: usize, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    xv.chunks_exact(m).flat_map(|row| (0..m).map(move |j| gamma[j] * (row[j] - mean[j]) * inv_std[j] + beta[j])).collect()
}

/// Accumulates `node_index`'s upstream gradient into the adjoints of its
/// inputs that require gradients.
pub(super) fn propagate(g: &Graph, node_index: usize, up: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &g.nodes[node_index];
    let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [f64])| {
        let input = g.node(t);
        if !input.requires_grad {
            return;
        }
        let slot = adj[t.0].get_or_insert_with(|| vec![0.0; input.value.len()]);
        f(slot);
    };
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (g.node(a).shape[0], g.node(a).shape[1]);
            let m = g.node(b).shape[1];
            let (av, bv) = (&g.node(a).value, &g.node(b).value);
            // dA = U B^T, dB = A^T U
            acc(a, &mut |da| gemm(n, m, k, up, (m, 1), bv, (1, m), da, (k, 1)));
            acc(b, &mut |db| gemm(k, n, m, av, (1, k), up, (m, 1), db, (m, 1)));
        }
        Op::AddBias(x, b) => {
            let m = g.node(b).value.len();
            acc(x, &mut |dx| add_into(dx, up));
            acc(b, &mut |db| {
                for row in up.chunks_exact(m.max(1)) {
                    add_into(db, row);
                }
            });
        }
        Op::Add(a, b) => {
            acc(a, &mut |d| add_into(d, up));
            acc(b, &mut |d| add_into(d, up));
        }
        Op::Sub(a, b) => {
            acc(a, &mut |d| add_into(d, up));
            acc(b, &mut |d| d.iter_mut().zip(up).for_each(|(d, u)| *d -= u));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&g.node(a).value, &g.node(b).value);
            acc(a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += up[i] * bv[i];
                }
            });
            acc(b, &mut |d| {
                for i in 0..d.len() {
                    d[i] += up[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => acc(a, &mut |d| d.iter_mut().zip(up).for_each(|(d, u)| *d += c * u)),
        Op::AddScalar(a, _) => acc(a, &mut |d| add_into(d, up)),
        Op::Neg(a) => acc(a, &mut |d| d.iter_mut().zip(up).for_each(|(d, u)| *d -= u)),
        Op::Relu(a) => {
            let av = &g.node(a).value;
            acc(a, &mut |d| {
                for i in 0..d.len() {
                    if av[i] > 0.0 {
                        d[i] += up[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            acc(a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += up[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let av = &g.node(a).value;
            acc(a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += up[i] / av[i];
                }
            });
        }
        Op::Sum(a) => acc(a, &mut |d| d.iter_mut().for_each(|d| *d += up[0])),
        Op::Mean(a) => acc(a, &mut |d| {
            let s = up[0] / d.len() as f64;
            d.iter_mut().for_each(|d| *d += s);
        }),
        Op::BatchNormTrain { x, gamma, beta } => {
            let (n, m) = (node.shape[0], node.shape[1]);
            let mean = &node.cache[..m];
            let inv_std = &node.cache[2 * m..3 * m];
            let xv = &g.node(x).value;
            let gv = &g.node(gamma).value;
            let xhat = |i: usize, j: usize| (xv[i * m + j] - mean[j]) * inv_std[j];
            acc(gamma, &mut |d| {
                for i in 0..n {
                    for j in 0..m {
                        d[j] += up[i * m + j] * xhat(i, j);
                    }
                }
            });
            acc(beta, &mut |d| {
                for row in up.chunks_exact(m) {
                    add_into(d, row);
                }
            });
            acc(x, &mut |d| {
                let nf = n as f64;
                for j in 0..m {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..n {
                        let dxhat = up[i * m + j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat(i, j);
                    }
                    for i in 0..n {
                        let dxhat = up[i * m + j] * gv[j];
                        d[i * m + j] += inv_std[j] / nf * (nf * dxhat - sum_dxhat - xhat(i, j) * sum_dxhat_xhat);
                    }
                }
            });
        }
        Op::BatchNormEval { x, gamma, beta, ref mean, .. } => {
            let m = node.shape[1];
            let inv_std = &node.cache;
            let xv = &g.node(x).value;
            let gv = &g.node(gamma).value;
            acc(gamma, &mut |d| {
                for (row_u, row_x) in up.chunks_exact(m).zip(xv.chunks_exact(m)) {
                    for j in 0..m {
                        d[j] += row_u[j] * (row_x[j] - mean[j]) * inv_std[j];
                    }
                }
            });
            acc(beta, &mut |d| {
                for row in up.chunks_exact(m) {
                    add_into(d, row);
                }
            });
            acc(x, &mut |d| {
                for (i, u) in up.iter().enumerate() {
                    let j = i % m;
                    d[i] += u * gv[j] * inv_std[j];
                }
            });
        }
        Op::L2Normalize(x) => {
            let d = node.shape[1];
            let y = &node.value;
            let norms = &node.cache;
            acc(x, &mut |dx| {
                for (i, &r) in norms.iter().enumerate() {
                    if r < NORM_FLOOR {
                        continue;
                    }
                    let yr = &y[i * d..(i + 1) * d];
                    let ur = &up[i * d..(i + 1) * d];
                    let proj: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] += (ur[j] - yr[j] * proj) / r;
                    }
                }
            });
        }
        Op::CosineRows(a, b) => {
            let (n, d) = (g.node(a).shape[0], g.node(a).shape[1]);
            let (av, bv) = (&g.node(a).value, &g.node(b).value);
            let (na, nb) = node.cache.split_at(n);
            let c = &node.value;
            // d cos / d a = b/(|a||b|) - cos * a/|a|^2, symmetric in b
            let mut grad_side = |t: Tensor, this: &[f64], other: &[f64], n_this: &[f64], n_other: &[f64]| {
                acc(t, &mut |dt| {
                    for i in 0..n {
                        if n_this[i] < NORM_FLOOR || n_other[i] < NORM_FLOOR {
                            continue;
                        }
                        let inv = 1.0 / (n_this[i] * n_other[i]);
                        let self_term = c[i] / (n_this[i] * n_this[i]);
                        for j in 0..d {
                            let k = i * d + j;
                            dt[k] += up[i] * (other[k] * inv - self_term * this[k]);
                        }
                    }
                });
            };
            grad_side(a, av, bv, na, nb);
            grad_side(b, bv, av, nb, na);
        }
        Op::LogSumExpRows { x, ref mask } => {
            let m = g.node(x).shape[1];
            let xv = &g.node(x).value;
            let y = &node.value;
            acc(x, &mut |d| {
                for (i, &lse) in y.iter().enumerate() {
                    for j in 0..m {
                        let k = i * m + j;
                        if mask.as_ref().is_none_or(|mk| mk[k]) {
                            d[k] += up[i] * (xv[k] - lse).exp();
                        }
                    }
                }
            });
        }
        Op::Gather { x, ref indices } => {
            let m = g.node(x).shape[1];
            acc(x, &mut |d| {
                for (i, &j) in indices.iter().enumerate() {
                    d[i * m + j] += up[i];
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c += a * b` for `[n, k] x [k, m]` operands given as `(row, column)`
/// strides, so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], sc: (usize, usize)) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (n - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(b.len() > (k - 1) * sb.0 + (m - 1) * sb.1);
    debug_assert!(c.len() > (n - 1) * sc.0 + (m - 1) * sc.1);
    // SAFETY: the asserted extents keep every strided access in bounds, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
