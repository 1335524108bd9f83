//! Layered experiment configuration: defaults, then a TOML file, then
//! `--set path=value` overrides in command-line order.

use std::path::Path;

use pivit_core::trainer::ExperimentConfig;
use toml::{Table, Value};

use crate::CliError;

/// Builds and validates the experiment config for one invocation.
pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut doc = match Value::try_from(ExperimentConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => return Err(CliError::Config("default config does not serialise to a table".into())),
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let user: Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut doc, user);
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
        set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
    }
    let mut cfg: ExperimentConfig = Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn merge(base: &mut Table, update: Table) {
    for (k, v) in update {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = doc;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
