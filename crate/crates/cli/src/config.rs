//! Run configuration: defaults, JSON file, `--set` overrides, validation.

use std::path::{Path, PathBuf};

use sarcloud::cloudsim::SynthConfig;
use sarcloud::dataio::Split;
use sarcloud::evaluation::MetricConfig;
use sarcloud::training::{AblationConfig, ModelConfig, TrainConfig};
use sarcloud::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "SARCLOUD_OUTPUT";
pub const DEFAULT_OUTPUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset used for training and evaluation; `synth` writes here.
    /// Defaults to `<output.dir>/dataset`.
    pub root: Option<PathBuf>,
    /// Clean pairs read by `synth`. Defaults to `root`.
    pub source: Option<PathBuf>,
    pub split_seed: u64,
    pub train_split: Split,
    pub eval_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            source: None,
            split_seed: 0,
            train_split: Split::Train,
            eval_split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: MetricConfig,
    pub ablate: AblationConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Defaults, overlaid with `file`, then each `key=value` override, with
    /// output and data paths filled in.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let user: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !user.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut doc, user);
        }
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        let out = cfg.output.dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT), PathBuf::from)
        });
        cfg.data.root.get_or_insert_with(|| out.join("dataset"));
        cfg.output.dir = Some(out);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section; stage-specific training rules are checked by the
    /// `train` command once the stage is known.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        let mut t = self.train.clone();
        t.stage = sarcloud::training::Stage::Sar2opt;
        t.validate()?;
        if !(self.train.tau > 0.0 && self.train.tau < 1.0) {
            return Err(Error::Config(format!("train.tau {} outside (0, 1)", self.train.tau)));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output.dir.as_deref().expect("resolved")
    }

    pub fn data_root(&self) -> &Path {
        self.data.root.as_deref().expect("resolved")
    }
}

/// Recursive object merge; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// `a.b.c=value`; the value is parsed as JSON and taken as a string otherwise.
fn apply_set(doc: &mut Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {set}: expected key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("--set {set}: empty key")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::resolve(None, &["output.dir=\"/tmp/x\"".into()]).unwrap();
        assert_eq!(cfg.output_dir(), Path::new("/tmp/x"));
        assert_eq!(cfg.data_root(), Path::new("/tmp/x/dataset"));
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let sets = ["train.steps=12", "synth.coverages=[0.2,0.4]", "model.base=8", "data.root=/d"].map(String::from);
        let cfg = RunConfig::resolve(None, &sets).unwrap();
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.synth.coverages, [0.2, 0.4]);
        assert_eq!(cfg.model.base, 8);
        assert_eq!(cfg.data_root(), Path::new("/d"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.stepz=3", "nope.x=1", "synth.mask.octave=2"] {
            let err = RunConfig::resolve(None, &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in ["synth.coverages=[1.2]", "train.batch_size=0", "eval.max_i=0", "model.base=0"] {
            assert!(RunConfig::resolve(None, &[bad.to_string()]).is_err(), "{bad}");
        }
    }

    #[test]
    fn file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.001}, "eval": {"tau": 0.2}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.lr=0.002".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.eval.tau, 0.2);
        assert_eq!(cfg.train.beta1, 0.5);
        std::fs::write(&path, "[1]").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
    }
}
