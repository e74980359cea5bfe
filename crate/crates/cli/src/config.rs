//! Run configuration: a TOML file, `--set key=value` overrides, and the
//! `CLNET_SEED` environment override.

use std::path::{Path, PathBuf};

use clnet::config::ModelConfig;
use clnet::synth::GenConfig;
use clnet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SEED_ENV: &str = "CLNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "train.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            log: "train_log.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Base model preset the `[model]` table is layered on: `desk`, `tiny` or
    /// `full`.
    pub preset: String,
    pub model: ModelConfig,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

fn preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "tiny" => Ok(ModelConfig::tiny()),
        "full" => Ok(ModelConfig::default()),
        other => Err(CliError::Usage(format!(
            "invalid config field `preset`: unknown preset `{other}` (expected desk, tiny or full)"
        ))),
    }
}

/// Data defaults sized for the preset's image resolution.
fn preset_data(model: &ModelConfig) -> GenConfig {
    let d = GenConfig::default();
    let k = model.image_size as f64 / d.image_size as f64;
    GenConfig {
        image_size: model.image_size,
        min_radius: (d.min_radius * k).max(1.5),
        max_radius: (d.max_radius * k).max(2.5),
        ..d
    }
}

/// A `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed --set key `{key}`")));
    }
    let mut t = root;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set `{key}`: `{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First key of `user` that the typed config does not know.
fn unknown_key(user: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(Value::Table(kt)), Value::Table(ut)) => {
                if let Some(p) = unknown_key(ut, kt, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config types serialize to TOML")
}

impl RunConfig {
    /// Loads `file` (or defaults), applies `sets` in order, then the seed
    /// environment override, then validates.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
            set_path(&mut user, k.trim(), parse_value(v.trim()))?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
            user.insert("seed".into(), Value::Integer(seed as i64));
        }
        Self::from_table(user)
    }

    fn from_table(user: Table) -> Result<Self, CliError> {
        let name = match user.get("preset") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(CliError::Usage("invalid config field `preset`: expected a string".into())),
            None => "desk".to_string(),
        };
        let model = preset(&name)?;
        let defaults = RunConfig {
            seed: 0,
            preset: name.clone(),
            data: preset_data(&model),
            model,
            train: TrainConfig::default(),
            paths: Paths::default(),
        };
        let known = to_table(&defaults);
        if let Some(k) = unknown_key(&user, &known, "") {
            return Err(CliError::Usage(format!("unknown config field `{k}`")));
        }
        let mut merged = known;
        merge(&mut merged, user);
        let mut cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {}", e.message())))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(CliError::Usage(format!(
                "invalid config field `data.image_size`: {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        let p = &self.paths;
        if p.data == p.checkpoint || p.data == p.log || p.checkpoint == p.log {
            return Err(CliError::Usage(
                "invalid config field `paths`: data, checkpoint and log must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str, sets: &[&str]) -> Result<RunConfig, CliError> {
        let mut user: Table = text.parse().unwrap();
        for s in sets {
            let (k, v) = s.split_once('=').unwrap();
            set_path(&mut user, k, parse_value(v)).unwrap();
        }
        RunConfig::from_table(user)
    }

    #[test]
    fn preset_then_file_then_set() {
        let c = load_str("seed = 4\n[model]\nmodel_dim = 32\n", &["model.num_queries=8", "model.variant=vild_only"]).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.model.model_dim, 32);
        assert_eq!(c.model.num_queries, 8);
        assert_eq!(c.model.decoder_layers, ModelConfig::desk().decoder_layers);
        assert_eq!(c.model.variant, clnet::config::Variant::VildOnly);
    }

    #[test]
    fn errors_name_the_field() {
        let e = load_str("", &["data.p_occ=2"]).unwrap_err();
        assert!(e.to_string().contains("p_occ"), "{e}");
        let e = load_str("[model]\nmodel_dims = 3\n", &[]).unwrap_err();
        assert!(e.to_string().contains("model.model_dims"), "{e}");
        let e = load_str("", &["paths.log=model.ckpt"]).unwrap_err();
        assert!(e.to_string().contains("paths"), "{e}");
    }

    #[test]
    fn round_trips_through_toml() {
        let c = load_str("preset = \"tiny\"\n", &[]).unwrap();
        let back = RunConfig::from_table(c.to_toml().parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
