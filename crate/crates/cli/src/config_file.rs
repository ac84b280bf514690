//! `key = value` config files merged into the command line.
//!
//! Each key names a long flag of the chosen subcommand (`steps = 300` acts
//! like `--steps 300`). Flags given on the command line win. Blank lines and
//! lines starting with `#` are ignored; `true` turns a switch on, `false`
//! leaves it off.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};

const FLAG: &str = "--config-file";

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {line:?}", i + 1);
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((key, value));
    }
    Ok(out)
}

fn given(args: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let with_eq = format!("{long}=");
    args.iter().any(|a| {
        a.to_str()
            .is_some_and(|s| s == long || s.starts_with(&with_eq))
    })
}

/// Expands `--config-file PATH` into explicit flags placed after the
/// subcommand; keys already present in `args` are skipped.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == FLAG || a.to_str().is_some_and(|s| s.starts_with("--config-file="))) else {
        return Ok(args);
    };
    let (path, consumed) = match args[pos].to_str().and_then(|s| s.strip_prefix("--config-file=")) {
        Some(p) => (OsString::from(p), 1),
        None => (
            args.get(pos + 1).cloned().context("--config-file needs a path")?,
            2,
        ),
    };
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading config file {}", path.to_string_lossy()))?;
    let mut rest: Vec<OsString> = args[..pos].to_vec();
    rest.extend_from_slice(&args[pos + consumed..]);
    let mut extra = Vec::new();
    for (key, value) in parse(&text)? {
        if given(&rest, &key) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
        }
    }
    // the subcommand is the first argument after the program name that is not a flag
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 2)
        .unwrap_or(rest.len());
    let mut out = rest[..sub.min(rest.len())].to_vec();
    out.extend(extra);
    out.extend_from_slice(&rest[sub.min(rest.len())..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let kv = parse("# demo\nsteps = 300\n\nbatch_size=8\n").unwrap();
        assert_eq!(kv, vec![("steps".into(), "300".into()), ("batch-size".into(), "8".into())]);
        assert!(parse("nonsense").is_err());
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        fs::write(&path, "steps = 300\nlr = 0.1\nverbose = true\n").unwrap();
        let args: Vec<OsString> = ["ircan", "train", "--steps", "5", "--config-file"]
            .iter()
            .map(OsString::from)
            .chain([path.into_os_string()])
            .collect();
        let out: Vec<String> = expand(args)
            .unwrap()
            .into_iter()
            .map(|a| a.into_string().unwrap())
            .collect();
        assert_eq!(out, ["ircan", "train", "--lr", "0.1", "--verbose", "--steps", "5"]);
    }
}
