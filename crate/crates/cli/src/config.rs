//! TOML config files become ordinary flags spliced in front of the user's,
//! so clap's "last occurrence wins" rule lets explicit flags override them.
//!
//! Top-level keys apply to every subcommand; a table named after the
//! subcommand (`[train-source]`) applies to that subcommand only.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use toml::Value;

pub fn flags_from_file(path: &Path, subcommand: &str) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let mut flags = Vec::new();
    for (key, value) in &table {
        match value {
            Value::Table(section) if key == subcommand => {
                for (k, v) in section {
                    push_flag(&mut flags, k, v)?;
                }
            }
            Value::Table(_) => {}
            v => push_flag(&mut flags, key, v)?,
        }
    }
    Ok(flags)
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        other => bail!("config key '{key}': unsupported value {other}"),
    })
}

fn push_flag(flags: &mut Vec<OsString>, key: &str, v: &Value) -> Result<()> {
    if key == "config" {
        bail!("config files cannot include other config files");
    }
    let name = format!("--{}", key.replace('_', "-"));
    match v {
        Value::Boolean(true) => flags.push(name.into()),
        Value::Boolean(false) => {}
        Value::Array(items) => {
            let parts = items.iter().map(|i| scalar(key, i)).collect::<Result<Vec<_>>>()?;
            flags.push(format!("{name}={}", parts.join(",")).into());
        }
        v => flags.push(format!("{name}={}", scalar(key, v)?).into()),
    }
    Ok(())
}

/// Inserts `extra` right after the subcommand token.
pub fn splice(argv: Vec<OsString>, subcommand: &str, extra: Vec<OsString>) -> Vec<OsString> {
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| a == subcommand)
        .map(|p| p + 2)
        .unwrap_or(argv.len());
    let mut out = argv[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos..]);
    out
}
