//! Config-file defaults.
//!
//! Top-level keys apply to every subcommand that has a flag of that name;
//! keys in a `[subcommand]` table apply to that subcommand only. Flags given
//! on the command line always win.
//!
//! ```toml
//! schemas = "schemas"
//!
//! [infer]
//! backend = "wire"
//! endpoint = "http://localhost:8000/v1"
//! parallelism = 8
//! ```

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};
use clap::CommandFactory;
use toml::Value;

use crate::args::Cli;

/// Returns the config path and subcommand name found in `argv`, if any.
fn scan(argv: &[OsString]) -> (Option<OsString>, Option<(usize, String)>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--config" {
            config = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.into());
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some((i, a.into_owned()));
        }
        i += 1;
    }
    (config, sub)
}

fn scalar(key: &str, v: &Value) -> anyhow::Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(n) => n.to_string(),
        Value::Float(f) => f.to_string(),
        other => bail!("config key {key:?}: unsupported value {other}"),
    })
}

/// Inserts `--flag value` pairs from the config file into `argv` right after
/// the subcommand name.
pub fn apply(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let (Some(path), Some((at, sub))) = scan(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;

    let cmd = Cli::command();
    let Some(sub_cmd) = cmd.find_subcommand(&sub) else {
        return Ok(argv);
    };
    let known = |key: &str| sub_cmd.get_arguments().find(|a| a.get_long() == Some(key)).cloned();
    let given = |flag: &str| {
        argv.iter().any(|a| {
            let a = a.to_string_lossy();
            a == flag || a.starts_with(&format!("{flag}="))
        })
    };

    let mut entries: Vec<(String, Value, bool)> = Vec::new();
    for (k, v) in &table {
        match v {
            Value::Table(t) if k == &sub => entries.extend(t.iter().map(|(k, v)| (k.clone(), v.clone(), true))),
            Value::Table(_) => {}
            v => entries.push((k.clone(), v.clone(), false)),
        }
    }

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value, scoped) in entries {
        let long = key.replace('_', "-");
        if long == "config" {
            continue;
        }
        let Some(arg) = known(&long) else {
            if scoped {
                bail!("config key {key:?} is not a flag of {sub}");
            }
            continue;
        };
        let flag = format!("--{long}");
        if given(&flag) {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        match value {
            Value::Boolean(b) if !takes_value => {
                if b {
                    extra.push(flag.into());
                }
            }
            Value::Array(items) => {
                for item in &items {
                    extra.push(flag.clone().into());
                    extra.push(scalar(&key, item)?.into());
                }
            }
            v => {
                extra.push(flag.into());
                extra.push(scalar(&key, &v)?.into());
            }
        }
    }
    let mut out = argv;
    out.splice(at + 1..at + 1, extra);
    Ok(out)
}
