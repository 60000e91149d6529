//! Run configuration: one JSON document holding every stage's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alphabet::Language;
use crate::augmentation::AugmentConfig;
use crate::contrastive::ContrastiveConfig;
use crate::corpus::CorpusConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ensure, invalid, Error, Result};
use crate::finetune::FinetuneConfig;
use crate::fusion::FusionConfig;
use crate::json::prune_unknown;
use crate::sequence::SequenceConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus".into(),
            checkpoints: "run/checkpoints".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XvalConfig {
    pub folds: usize,
    /// Also train and score the three-stream phoneme recognizer per fold.
    pub include_fusion: bool,
}

impl Default for XvalConfig {
    fn default() -> Self {
        Self { folds: 5, include_fusion: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Authoritative language; copied into `corpus.language` on resolution.
    pub language: Language,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub finetune: FinetuneConfig,
    /// Hand-shape sequence model; `d_in` and `vocab` are derived.
    pub sequence: SequenceConfig,
    pub fusion: FusionConfig,
    pub xval: XvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            language: Language::French,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            finetune: FinetuneConfig::default(),
            sequence: SequenceConfig::default(),
            fusion: FusionConfig::default(),
            xval: XvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fills derived fields so that the stored config is the one actually used.
    pub fn resolve(mut self) -> Self {
        self.corpus.language = self.language;
        self.augment.output_size = self.encoder.input_size;
        self.sequence.d_in = self.encoder.feature_dim;
        self.sequence.vocab = crate::alphabet::NUM_SHAPES + 1;
        self.finetune.num_classes = crate::alphabet::NUM_SHAPES;
        self.fusion.lip.roi_size = self.corpus.lip_roi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.finetune.validate()?;
        self.sequence.validate()?;
        self.fusion.validate()?;
        ensure!(self.xval.folds >= 2, "xval.folds must be at least 2");
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `path` (dot-separated) in `root` to `raw`, parsed as JSON when
/// possible and as a string otherwise. Intermediate objects are created.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    ensure!(!path.is_empty(), "empty override key");
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        ensure!(!key.is_empty(), "override key {path:?} has an empty component");
        let map = match node {
            Value::Object(m) => m,
            _ => return Err(invalid!("override {path:?}: {} is not an object", keys[..i].join("."))),
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Parses `KEY=VALUE`.
pub fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| invalid!("override {s:?} is not KEY=VALUE"))
}

/// Builds the run config from an optional file and `--set` overrides. Unknown
/// keys are an error naming the key unless `lenient`, which drops them.
pub fn load_run_config(file: Option<&Path>, overrides: &[String], lenient: bool) -> Result<RunConfig> {
    let mut value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(p, e.to_string()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (k, v) = split_override(o)?;
        apply_override(&mut value, k, v)?;
    }
    if lenient {
        let template = serde_json::to_value(RunConfig::default()).expect("config serializes");
        prune_unknown(&mut value, &template);
    }
    let source = file.map(|p| p.display().to_string()).unwrap_or_else(|| "<overrides>".into());
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| invalid!("invalid configuration ({source}): {e}"))?;
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}
