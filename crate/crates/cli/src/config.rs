//! `key = value` config files, spliced into the argument list so that
//! explicit flags win.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use crate::UsageError;

/// Parses `key = value` lines. `#` starts a comment; keys may use `_` or `-`.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value'", i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("line {}: invalid key '{key}'", i + 1));
        }
        let value = value.trim().trim_matches('"').to_string();
        out.push((key, value));
    }
    Ok(out)
}

fn to_flags(entries: Vec<(String, String)>) -> Vec<OsString> {
    let mut args = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    args
}

/// Removes `--config FILE` from `argv` and inserts the file's settings
/// right after the subcommand, ahead of any explicit flags.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, UsageError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config: Option<PathBuf> = None;
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let path = it.next().ok_or_else(|| UsageError("--config needs a file".into()))?;
            config = Some(path.into());
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(path.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text =
        fs::read_to_string(&path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    let position = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    let tail = rest.split_off(position.min(rest.len()));
    rest.extend(to_flags(entries));
    rest.extend(tail);
    Ok(rest)
}
