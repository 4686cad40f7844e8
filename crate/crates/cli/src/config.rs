//! Flat key-value run configuration. Keys are the field names of
//! `TrainConfig` and `ModelConfig`; each key must belong to exactly one.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};
use xcsrl::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Small model and large learning rates; trains from scratch on a CPU.
    Desk,
    /// Full-size encoders with the published optimization settings.
    Full,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

fn object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn toml_to_json(v: toml::Value) -> Result<Value> {
    serde_json::to_value(v).context("config value")
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string so `--set stage=sc` works without quotes.
fn parse_override(item: &str) -> Result<(String, Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override {item:?} is not of the form key=value"))?;
    let key = key.trim().to_string();
    let doc = format!("v = {}", raw.trim());
    let value = match doc.parse::<toml::Table>() {
        Ok(mut t) => toml_to_json(t.remove("v").expect("parsed key"))?,
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((key, value))
}

impl RunConfig {
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (train, model) = match preset {
            Preset::Desk => (TrainConfig::desk(), ModelConfig::default()),
            Preset::Full => (TrainConfig::default(), ModelConfig::full_scale()),
        };
        let mut train = object(serde_json::to_value(train)?);
        let mut model = object(serde_json::to_value(model)?);

        let mut entries = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            for (k, v) in table {
                if v.is_table() {
                    bail!("{}: nested table {k:?}; the config file is flat", path.display());
                }
                entries.push((k, toml_to_json(v)?));
            }
        }
        for item in overrides {
            entries.push(parse_override(item)?);
        }
        for (key, value) in entries {
            let target = match (train.contains_key(&key), model.contains_key(&key)) {
                (true, false) => &mut train,
                (false, true) => &mut model,
                (true, true) => bail!("config key {key:?} is ambiguous"),
                (false, false) => bail!("unknown config key {key:?}"),
            };
            target.insert(key, value);
        }
        let train: TrainConfig = serde_json::from_value(Value::Object(train)).context("training config")?;
        let model: ModelConfig = serde_json::from_value(Value::Object(model)).context("model config")?;
        train.validate()?;
        model.validate()?;
        Ok(RunConfig { train, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_overrides() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "batch_size = 4\nhidden = 32\nmax_lr = 0.01").unwrap();
        let cfg = RunConfig::load(
            Preset::Desk,
            Some(f.path()),
            &["batch_size=6".into(), "stage=sc".into(), "variant=\"standard\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 6);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.train.max_lr, 0.01);
        assert_eq!(cfg.train.stage, xcsrl::Stage::Sc);
        assert_eq!(cfg.model.variant, xcsrl::Variant::Standard);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::load(Preset::Desk, None, &["no_such_key=1".into()]).unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn presets_differ() {
        let full = RunConfig::load(Preset::Full, None, &[]).unwrap();
        assert_eq!(full.model.hidden, 512);
        assert_eq!(full.train.batch_size, 24);
        assert_eq!(full.train.max_lr, 5e-5);
        let desk = RunConfig::load(Preset::Desk, None, &["target_f1=0.9".into()]).unwrap();
        assert_eq!(desk.train.target_f1, Some(0.9));
    }
}
