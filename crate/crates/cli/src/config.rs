//! Option resolution. A `--config` file holds `key=value` lines whose keys
//! are long flag names of the chosen subcommand. Its entries are spliced in
//! ahead of the command-line flags and, because each subcommand lets a
//! repeated flag override itself, anything given on the command line wins.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::{ArgMatches, CommandFactory, FromArgMatches};

use crate::args::Cli;
use crate::CliError;

/// Keys that never enter the resolved configuration: they locate inputs of
/// the resolution itself or the output root, not the computation.
const UNRESOLVED: [&str; 2] = ["config", "out"];

#[derive(Debug)]
pub struct Invocation {
    pub cli: Cli,
    /// Every option of the subcommand with its effective value, keyed by long
    /// flag name. Lists are comma-joined.
    pub resolved: BTreeMap<String, String>,
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Cli(CliError),
}

/// Parses a `key=value` file. Blank lines and lines starting with `#` are
/// skipped; keys and values are trimmed.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", lineno + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_with_config(argv: &[OsString]) -> Result<Invocation, ParseFailure> {
    let mut argv = argv.to_vec();
    // The config is located before clap runs so that required options may
    // come from the file. The subcommand is always argv[1]: the top level
    // has no options besides --help and --version.
    if let (Some(sub), Some(path)) = (argv.get(1).and_then(|s| s.to_str()).map(str::to_owned), config_path(&argv)) {
        if Cli::command().find_subcommand(&sub).is_some() {
            let entries = read_config(Path::new(&path)).map_err(ParseFailure::Cli)?;
            let injected = config_flags(&sub, &entries).map_err(ParseFailure::Cli)?;
            argv.splice(2..2, injected);
        }
    }
    let matches = Cli::command().try_get_matches_from(&argv).map_err(ParseFailure::Clap)?;
    let resolved = resolve(&matches);
    let cli = Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)?;
    Ok(Invocation { cli, resolved })
}

/// Value of the last `--config` flag, in either `--config p` or
/// `--config=p` form.
fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut found = None;
    let mut it = argv.iter().skip(2);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            found = Some(OsString::from(v));
        }
    }
    found
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

/// Translates config entries into `--key value` pairs after checking each
/// key names an option of the subcommand.
fn config_flags(subcommand: &str, entries: &[(String, String)]) -> Result<Vec<OsString>, CliError> {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(subcommand).expect("subcommand was just parsed");
    let longs: Vec<&str> = sub.get_arguments().filter_map(|a| a.get_long()).collect();
    let mut flags = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage("a config file cannot name another config file".into()));
        }
        if !longs.contains(&key.as_str()) {
            let hint = longs.iter().find(|l| edit_distance(l, key) <= 2).map(|l| format!("; did you mean {l:?}?")).unwrap_or_default();
            return Err(CliError::Usage(format!("config key {key:?} is not an option of {subcommand}{hint}")));
        }
        flags.push(OsString::from(format!("--{key}")));
        flags.push(OsString::from(value));
    }
    Ok(flags)
}

fn resolve(matches: &ArgMatches) -> BTreeMap<String, String> {
    let (name, sub_matches) = matches.subcommand().expect("clap requires a subcommand");
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(name).expect("subcommand was just parsed");
    let mut resolved = BTreeMap::new();
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if UNRESOLVED.contains(&long) {
            continue;
        }
        if let Some(raw) = sub_matches.get_raw(arg.get_id().as_str()) {
            let joined: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            resolved.insert(long.to_string(), joined.join(","));
        }
    }
    resolved
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur.push((prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}
