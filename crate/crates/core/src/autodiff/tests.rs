use super::gradcheck::check_default;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn cosine_of_orthogonal_rows_is_zero() {
    let mut g = Graph::new();
    let a = g.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
    let b = g.constant(vec![0.0, 1.0], &[1, 2]).unwrap();
    let c = g.cosine_rows(a, b).unwrap();
    assert_eq!(g.value(c), &[0.0]);
}

#[test]
fn logsumexp_does_not_overflow() {
    let mut g = Graph::new();
    let x = g.constant(vec![1000.0, 1000.0], &[1, 2]).unwrap();
    let y = g.logsumexp_rows(x).unwrap();
    // shifted-exponent reference: m + ln(sum exp(x - m))
    let reference = 1000.0 + ((0.0f64).exp() + (0.0f64).exp()).ln();
    assert!((g.value(y)[0] - reference).abs() < 1e-12);
    assert!((g.value(y)[0] - 1000.6931).abs() < 1e-4);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = g.constant(vec![0.0; 4], &[2, 2]).unwrap();
    match g.matmul(a, b) {
        Err(GrafitError::Shape { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_reports_primitive() {
    let mut g = Graph::new();
    let x = g.constant(vec![0.0], &[1]).unwrap();
    match g.log(x) {
        Err(GrafitError::NonFinite { op }) => assert_eq!(op, "log"),
        other => panic!("expected numeric error, got {other:?}"),
    }
    let masked = g.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
    assert!(matches!(g.logsumexp_rows_masked(masked, vec![false, false]), Err(GrafitError::NonFinite { op: "logsumexp_rows" })));
}

#[test]
fn identity_gradient_is_one() {
    let mut g = Graph::new();
    let x = g.param(vec![3.0], &[]).unwrap();
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    // accumulation without reset
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grad();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(g.backward(x), Err(GrafitError::Contract(_))));
}

#[test]
fn constants_never_receive_gradients() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[1, 2]).unwrap();
    let c = g.constant(vec![0.5, -1.0], &[1, 2]).unwrap();
    let y = g.cosine_rows(x, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(c).is_none());
}

#[test]
fn normalize_then_cosine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut g = Graph::new();
        let a = g.param(random_vec(&mut rng, 8), &[1, 8]).unwrap();
        let b = g.param(random_vec(&mut rng, 8), &[1, 8]).unwrap();
        let na = g.l2_normalize_rows(a).unwrap();
        let nb = g.l2_normalize_rows(b).unwrap();
        let c = g.cosine_rows(na, nb).unwrap();
        let root = g.sum(c).unwrap();
        let report = check_default(&mut g, root, &[a, b]).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.param(random_vec(&mut rng, 15), &[5, 3]).unwrap();
        let gamma = g.param(random_vec(&mut rng, 3), &[3]).unwrap();
        let beta = g.param(random_vec(&mut rng, 3), &[3]).unwrap();
        let w = g.constant(random_vec(&mut rng, 15), &[5, 3]).unwrap();
        let y = g.batch_norm_train(x, gamma, beta).unwrap();
        let yw = g.mul(y, w).unwrap();
        let root = g.sum(yw).unwrap();
        let report = check_default(&mut g, root, &[x, gamma, beta]).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn forward_eval_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.param(random_vec(&mut rng, 12), &[4, 3]).unwrap();
    let w = g.param(random_vec(&mut rng, 6), &[3, 2]).unwrap();
    let h = g.matmul(x, w).unwrap();
    let l = g.logsumexp_rows(h).unwrap();
    let root = g.mean(l).unwrap();
    let first = g.forward_eval(root).unwrap().to_vec();
    let second = g.forward_eval(root).unwrap().to_vec();
    assert_eq!(first[0].to_bits(), second[0].to_bits());
}

#[test]
fn degenerate_row_normalizes_to_zero() {
    let mut g = Graph::new();
    let x = g.param(vec![0.0, 0.0, 3.0, 4.0], &[2, 2]).unwrap();
    let y = g.l2_normalize_rows(x).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.6, 0.8]);
    assert_eq!(g.degenerate_rows(), 1);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(&g.grad(x).unwrap()[..2], &[0.0, 0.0]);
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let x = g.constant(random_vec(&mut rng, 40), &[8, 5]).unwrap();
    let y = g.l2_normalize_rows(x).unwrap();
    for row in g.value(y).chunks(5) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
