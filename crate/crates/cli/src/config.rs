//! `--config FILE` support: every `key = value` line becomes a `--key value`
//! flag placed before the user's own flags, so anything given on the command
//! line wins.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value, got {raw:?}", origin.display(), n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key {:?}", origin.display(), n + 1, k.trim());
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn flags(pairs: Vec<(String, String)>) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => out.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    out
}

/// Removes `--config FILE` (or `--config=FILE`) and splices the file's flags
/// in right after the subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut file = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            file = Some(it.next().context("--config needs a file")?);
        } else if let Some(f) = s.strip_prefix("--config=") {
            file = Some(OsString::from(f));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let path = Path::new(&file);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let injected = flags(parse_pairs(&text, path)?);
    let Some(sub) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        bail!("--config given without a subcommand");
    };
    let at = sub + 2;
    rest.splice(at..at, injected);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn injects_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nmax_epochs = 3\naugment = true\nrecord_wall_time = false\n").unwrap();
        let got = expand(os(&["csau", "train", "--config", p.to_str().unwrap(), "--max-epochs", "5"])).unwrap();
        assert_eq!(got, os(&["csau", "train", "--max-epochs", "3", "--augment", "--max-epochs", "5"]));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(parse_pairs("no equals sign", Path::new("x")).is_err());
    }
}
