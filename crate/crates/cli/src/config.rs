//! Run configuration: JSON file, dotted `key=value` overrides, then flag and
//! environment precedence for the seed and the output directory.

use std::path::{Path, PathBuf};

use dapt_core::baseline::{DEFAULT_EPOCHS, DEFAULT_LAMBDA_GRID};
use dapt_core::corpus::SplitSpec;
use dapt_core::model::EncoderConfig;
use dapt_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Overrides `output_dir` when `--out` is absent.
pub const OUTPUT_DIR_ENV: &str = "DAPT_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Unlabeled text files, concatenated in order.
    pub corpus: Vec<PathBuf>,
    /// Labeled dataset for fine-tuning and the baseline.
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Starting checkpoint directory. For fine-tuning, `vanilla` means a fresh initialization.
    pub base: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitMode {
    /// Train/validation/test fractions from `train.classification_split`.
    Fixed,
    /// `test_ratio` held out as test, then `val_fraction` of the remainder as validation.
    Holdout { test_ratio: f64, val_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub lambda_grid: Vec<f64>,
    pub epochs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(), epochs: DEFAULT_EPOCHS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every generator in a run derives from this value.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub paths: Paths,
    pub vocab_size: usize,
    /// `vocab_size` 0 here means "take it from the vocabulary file".
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub split_mode: SplitMode,
    pub baseline: BaselineConfig,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: None,
            paths: Paths::default(),
            vocab_size: 1000,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            split_mode: SplitMode::Fixed,
            baseline: BaselineConfig::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Reads a config file, or the `config` object of a run manifest, and
    /// applies `key=value` overrides. Missing keys keep their defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let mut file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if let Some(inner) = file.get_mut("config").filter(|_| text.contains("\"command\"")) {
                file = inner.take();
            }
            merge(&mut value, file);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Fixes the seed and output directory and copies the seed into every
    /// component config. Precedence: flag, then environment, then file.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        let seed = seed
            .or(self.seed)
            .ok_or_else(|| CliError::Usage("no seed: pass --seed or set `seed` in the config".into()))?;
        self.seed = Some(seed);
        let env_out = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        self.output_dir = out.or(env_out).or(self.output_dir.take());
        if self.output_dir.is_none() {
            return Err(CliError::Usage(format!(
                "no output directory: pass --out, set {OUTPUT_DIR_ENV}, or set `output_dir`"
            )));
        }
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.train.masking.seed = seed;
        self.train.mlm_split = SplitSpec { seed, ..self.train.mlm_split };
        self.train.classification_split = SplitSpec { seed, ..self.train.classification_split };
        self.train.validate()?;
        if let SplitMode::Holdout { test_ratio, val_fraction } = self.split_mode {
            if !(0.0..1.0).contains(&test_ratio) || !(0.0..1.0).contains(&val_fraction) {
                return Err(CliError::Usage("holdout fractions must lie in [0, 1)".into()));
            }
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("resolved config has an output directory")
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`, where value is parsed as JSON and otherwise taken as a
/// string. The key must already exist, which catches typos. A scalar
/// assigned to a list becomes a one-element list.
fn apply_override(root: &mut Value, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not of the form key=value")))?;
    let mut slot = &mut *root;
    for part in key.trim().split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if slot.is_array() && !value.is_array() {
        value = Value::Array(vec![value]);
    }
    if slot.is_object() && value.is_object() {
        merge(slot, value);
    } else {
        *slot = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_by_dotted_key() {
        let c = RunConfig::load(
            None,
            &[
                "train.mlm.epochs=3".into(),
                "paths.corpus=a.jsonl".into(),
                "paths.vocab=v.json".into(),
                "encoder.d_model=32".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.mlm.epochs, 3);
        assert_eq!(c.paths.corpus, vec![PathBuf::from("a.jsonl")]);
        assert_eq!(c.paths.vocab, Some(PathBuf::from("v.json")));
        assert_eq!(c.encoder.d_model, 32);
        assert!(RunConfig::load(None, &["train.mlm.epoch=3".into()]).is_err());
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
    }

    #[test]
    fn seed_is_required_and_propagates() {
        let c = RunConfig { output_dir: Some("o".into()), ..RunConfig::default() };
        assert!(matches!(c.clone().resolve(None, None), Err(CliError::Usage(_))));
        let r = c.resolve(Some(42), None).unwrap();
        assert_eq!(r.train.masking.seed, 42);
        assert_eq!(r.train.classification_split.seed, 42);
        assert_eq!(r.encoder.seed, 42);
    }

    #[test]
    fn manifest_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = RunConfig { seed: Some(9), vocab_size: 77, ..RunConfig::default() };
        let manifest = serde_json::json!({ "command": "vocab", "config": cfg });
        std::fs::write(&path, manifest.to_string()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }
}
