//! Layered run configuration: defaults, then a TOML file, then `key=value`
//! overrides from the command line.

use std::path::Path;

use m2gan::data::RainSynthesisConfig;
use m2gan::generator::PipelineConfig;
use m2gan::training::TrainConfig;
use m2gan::{M2ganError, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synthesis: RainSynthesisConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        self.pipeline.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| M2ganError::Config(format!("cannot render config: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml()?)?;
        Ok(())
    }
}

fn as_table(cfg: &RunConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| M2ganError::Config(e.to_string()))
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| M2ganError::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(M2ganError::Config(format!("override key {key:?} is malformed")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = match cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(M2ganError::Config(format!("{} is not a table", path.join(".")))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Keys present in `given` but absent from `known`.
fn unknown_keys(given: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (Value::Table(g), Some(Value::Table(kn))) => unknown_keys(g, kn, &name, out),
            (_, Some(_)) => {}
            (_, None) => out.push(name),
        }
    }
}

/// Defaults < file < overrides.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = as_table(&RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| M2ganError::Config(format!("cannot read {}: {e}", path.display())))?;
        let layer: Table = text.parse().map_err(|e| M2ganError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, layer);
    }
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut table, &path, value)?;
    }
    let cfg: RunConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| M2ganError::Config(e.message().to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&table, &as_table(&cfg)?, "", &mut unknown);
    // Unset optional fields do not survive the round trip.
    unknown.retain(|k| !OPTIONAL_KEYS.contains(&k.as_str()));
    if !unknown.is_empty() {
        return Err(M2ganError::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    cfg.validate()?;
    Ok(cfg)
}

const OPTIONAL_KEYS: [&str; 2] = ["train.crop_size", "train.steps_per_epoch"];
