//! Run manifests: a `manifest.txt` of `key=value` lines recording what ran,
//! with which resolved options, and which files it read and wrote.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    /// Hex SHA-256 of the canonical resolved configuration.
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
    /// Input files by role, relative to the run directory.
    pub inputs: BTreeMap<String, String>,
    /// Written files by role, relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self {
            command: command.to_string(),
            config_digest: config_digest(&config),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            config,
        }
    }

    /// Records `path` under `role`, relative to `run_dir`. Both must exist.
    pub fn add_input(&mut self, role: &str, path: &Path, run_dir: &Path) -> CliResult<()> {
        self.inputs.insert(role.to_string(), relative_path(path, run_dir)?);
        Ok(())
    }

    pub fn add_artifact(&mut self, role: &str, path: &Path, run_dir: &Path) -> CliResult<()> {
        self.artifacts.insert(role.to_string(), relative_path(path, run_dir)?);
        Ok(())
    }

    pub fn verify_digest(&self) -> bool {
        config_digest(&self.config) == self.config_digest
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# grafit run manifest\n");
        let mut line = |k: &str, v: &str| {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        };
        line("command", &self.command);
        line("tool_version", &self.tool_version);
        line("seed", &self.seed.to_string());
        line("config_digest", &self.config_digest);
        for (prefix, map) in [("input.", &self.inputs), ("artifact.", &self.artifacts), ("config.", &self.config)] {
            for (k, v) in map {
                line(&format!("{prefix}{k}"), v);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let bad = |msg: String| CliError::Core(grafit_core::GrafitError::Contract(format!("manifest: {msg}")));
        let mut scalars: BTreeMap<&str, &str> = BTreeMap::new();
        let mut m = RunManifest::new("", 0, BTreeMap::new());
        for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            if let Some(rest) = k.strip_prefix("input.") {
                m.inputs.insert(rest.into(), v.into());
            } else if let Some(rest) = k.strip_prefix("artifact.") {
                m.artifacts.insert(rest.into(), v.into());
            } else if let Some(rest) = k.strip_prefix("config.") {
                m.config.insert(rest.into(), v.into());
            } else {
                scalars.insert(k, v);
            }
        }
        let mut take = |k: &str| scalars.remove(k).ok_or_else(|| bad(format!("missing {k}")));
        m.command = take("command")?.into();
        m.tool_version = take("tool_version")?.into();
        m.seed = take("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?;
        m.config_digest = take("config_digest")?.into();
        Ok(m)
    }

    pub fn write(&self, run_dir: &Path) -> CliResult<()> {
        let all = [&self.inputs, &self.artifacts, &self.config];
        if all.iter().flat_map(|m| m.iter()).any(|(k, v)| k.contains(['\n', '=']) || v.contains('\n')) {
            return Err(CliError::Usage("manifest keys and values must be single-line".into()));
        }
        std::fs::write(run_dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}

/// Hex SHA-256 over `key=value\n` lines in key order.
pub fn config_digest(config: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in config {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// `path` expressed relative to `base`, both resolved through the file
/// system first. Uses `/` separators.
pub fn relative_path(path: &Path, base: &Path) -> CliResult<String> {
    let path = std::fs::canonicalize(path)?;
    let base = std::fs::canonicalize(base)?;
    Ok(relative_components(&path, &base))
}

fn relative_components(path: &Path, base: &Path) -> String {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &p[common..] {
        rel.push(c.as_os_str());
    }
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.is_empty() {
        ".".into()
    } else {
        parts.join("/")
    }
}
