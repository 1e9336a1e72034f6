//! Layered run configuration: desk defaults, then a JSON file, then dotted
//! `--a.b value` overrides taken straight from the command line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hybridcrop::experiment::RunConfig;
use serde_json::Value;

/// Flags that clap handles itself even though they name config fields.
const NAMED_FLAGS: [&str; 6] = ["config", "seed", "mcab", "epochs", "lr", "out"];

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn top_level_fields() -> Vec<String> {
    match serde_json::to_value(RunConfig::desk()).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

/// Splits config overrides out of `args`. An override is `--path value` or
/// `--path=value` where `path` is dotted or names a top-level field that has
/// no dedicated flag.
/// `(path, raw value)` pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let fields = top_level_fields();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let root = name.split('.').next().unwrap_or_default();
        let is_override = fields.iter().any(|f| f == root)
            && (name.contains('.') || !NAMED_FLAGS.contains(&name.as_str()));
        if !is_override {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| UsageError(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => bail!(UsageError(format!("unknown config field `{sub}`"))),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut slot = root;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| UsageError(format!("unknown config field `{path}`")))?;
    }
    // bare words such as `max` or a path are taken as strings
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::desk()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        merge(&mut v, patch, "")?;
    }
    for (path, raw) in overrides {
        set_path(&mut v, path, raw)?;
    }
    serde_json::from_value(v).map_err(|e| UsageError(format!("invalid config: {e}")).into())
}
