//! The full run configuration tree: one JSON document, unknown keys
//! rejected, every leaf overridable from the command line by dotted path.

use crate::adapters::AdapterConfig;
use crate::data::GeneratorConfig;
use crate::encoders::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub text: BackboneConfig,
    pub vision: BackboneConfig,
    pub audio: BackboneConfig,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            text: BackboneConfig::text_default(),
            vision: BackboneConfig::default(),
            audio: BackboneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub text: AdapterConfig,
    pub vision: AdapterConfig,
    pub audio: AdapterConfig,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            text: AdapterConfig::text_default(),
            vision: AdapterConfig::default(),
            audio: AdapterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive loss in the fine-tuning objective.
    pub lambda: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Learning rate for backbone encoder parameters.
    pub lr_encoders: f64,
    /// Learning rate for everything else (adapters, fusion, head).
    pub lr_other: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Linear warm-up epochs at the start of stage 1.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: String,
    /// Fine-tune the text backbone in stage 2 (stage 1 always freezes it).
    pub train_text_backbone_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            tau: crate::contrastive::DEFAULT_TAU,
            lr_encoders: 1e-4,
            lr_other: 1e-3,
            weight_decay: 0.001,
            batch_size: 16,
            epochs_stage1: 10,
            epochs_stage2: 50,
            warmup_epochs: 1,
            seed: 0,
            checkpoint_dir: "runs/default".into(),
            train_text_backbone_stage2: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau {} must be > 0", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr_encoders > 0.0) || !(self.lr_other > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Decimal places in the plain-text report table.
    pub decimals: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { decimals: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub backbone: BackboneSection,
    pub adapter: AdapterSection,
    pub fusion: FusionConfig,
    pub training: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        for (name, b) in [
            ("text", &self.backbone.text),
            ("vision", &self.backbone.vision),
            ("audio", &self.backbone.audio),
        ] {
            b.validate()
                .map_err(|e| Error::InvalidConfig(format!("backbone.{name}: {e}")))?;
        }
        for (name, a, layers) in [
            ("text", &self.adapter.text, self.backbone.text.num_layers),
            ("vision", &self.adapter.vision, self.backbone.vision.num_layers),
            ("audio", &self.adapter.audio, self.backbone.audio.num_layers),
        ] {
            a.validate(layers)
                .map_err(|e| Error::InvalidConfig(format!("adapter.{name}: {e}")))?;
        }
        self.fusion.validate()?;
        self.training.validate()?;

        // Cosine similarity across the six representations needs one space.
        let d = self.backbone.text.d_repr;
        let all_d = [
            self.backbone.vision.d_repr,
            self.backbone.audio.d_repr,
            self.adapter.text.d_repr,
            self.adapter.vision.d_repr,
            self.adapter.audio.d_repr,
        ];
        if all_d.iter().any(|&x| x != d) {
            return Err(Error::InvalidConfig(
                "all backbone and adapter d_repr values must match".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Apply a `dotted.path=value` override, re-validating unknown keys by
    /// round-tripping through the typed structure.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override {assignment:?} is not key=value"))
        })?;
        let mut doc = serde_json::to_value(&*self)?;
        let mut cursor = &mut doc;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                Error::InvalidConfig(format!("config path {path:?} descends into a leaf"))
            })?;
            let entry = obj.get_mut(*seg).ok_or_else(|| {
                Error::InvalidConfig(format!("unknown config key {:?}", segments[..=i].join(".")))
            })?;
            cursor = entry;
        }
        *cursor = parse_override_value(raw, cursor)?;
        let updated: RunConfig = serde_json::from_value(doc)?;
        *self = updated;
        Ok(())
    }

    /// FNV-1a over the canonical JSON rendering; recorded into checkpoints
    /// and logs so artifacts can be traced back to their configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn parse_override_value(raw: &str, current: &serde_json::Value) -> Result<serde_json::Value> {
    use serde_json::Value;
    let parsed = match current {
        Value::Bool(_) => Value::Bool(raw.parse::<bool>().map_err(|_| {
            Error::InvalidConfig(format!("expected bool, got {raw:?}"))
        })?),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            let v: i64 = raw
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("expected integer, got {raw:?}")))?;
            Value::Number(v.into())
        }
        Value::Number(_) => {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("expected number, got {raw:?}")))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| Error::InvalidConfig(format!("non-finite number {raw:?}")))?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => serde_json::from_str(&format!("[{raw}]"))
            .map_err(|_| Error::InvalidConfig(format!("expected list, got {raw:?}")))?,
        _ => {
            return Err(Error::InvalidConfig(format!(
                "cannot override structured key with {raw:?}"
            )))
        }
    };
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"training": {"lambda": 0.1, "bogus": 1}}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn overrides_update_leaves() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("training.lambda=0.5").unwrap();
        assert_eq!(cfg.training.lambda, 0.5);
        cfg.apply_override("generator.n_train=128").unwrap();
        assert_eq!(cfg.generator.n_train, 128);
        cfg.apply_override("adapter.text.insertion_points=1,2").unwrap();
        assert_eq!(cfg.adapter.text.insertion_points, vec![1, 2]);
        cfg.apply_override("backbone.text.pooling=mean").unwrap();
        assert_eq!(cfg.backbone.text.pooling, crate::encoders::Pooling::Mean);
        assert!(cfg.apply_override("training.nope=1").is_err());
        assert!(cfg.apply_override("training.lambda").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.training.lambda = 0.3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_d_repr_rejected() {
        let mut cfg = RunConfig::default();
        cfg.adapter.vision.d_repr = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, cfg.to_json_pretty().unwrap()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg, loaded);
    }
}
