//! Experiment configuration and its canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabelRegistry, SynthParams};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::textgen::{BeamConfig, DecoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub k: usize,
    pub shape: [usize; 3],
    pub prevalence: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// First case seed; the splits take consecutive blocks from here.
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { k: 6, shape: [24, 48, 48], prevalence: 0.35, n_train: 2000, n_val: 400, n_test: 400, base_seed: 0 }
    }
}

impl DataConfig {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams { shape: self.shape, prevalence: self.prevalence }
    }

    pub fn registry(&self) -> Result<LabelRegistry> {
        LabelRegistry::ct_rate(self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    /// Encoder learning rate in the heads stage is `heads.lr`; the heads use `head_lr`.
    pub heads: StageConfig,
    pub head_lr: f64,
    pub decoder: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: StageConfig { epochs: 8, batch: 4, lr: 3e-3, weight_decay: 0.0 },
            heads: StageConfig { epochs: 2, batch: 4, lr: 1e-5, weight_decay: 0.0 },
            head_lr: 1e-3,
            decoder: StageConfig { epochs: 8, batch: 64, lr: 2e-3, weight_decay: 0.01 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    /// Condition the decoder on the zero-padded K-slot embedding rather than
    /// on the bare feature vector.
    pub expand: bool,
    /// Seeds per variant in the ablation driver.
    pub ablation_seeds: usize,
    /// Where artifacts go; not part of the hash.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            heads: HeadsConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            expand: true,
            ablation_seeds: 3,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_stage(name: &str, s: &StageConfig) -> Result<()> {
    check(s.batch > 0, || format!("{name}: batch must be positive"))?;
    check(s.lr.is_finite() && s.lr >= 0.0, || format!("{name}: lr must be finite and non-negative"))?;
    check(s.weight_decay.is_finite() && s.weight_decay >= 0.0, || format!("{name}: weight decay must be non-negative"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check((1..=18).contains(&d.k), || format!("K must be in 1..=18, got {}", d.k))?;
        check(d.shape.iter().all(|&s| s > 0), || "volume shape must be positive".into())?;
        check((0.0..=1.0).contains(&d.prevalence), || format!("prevalence {} outside [0, 1]", d.prevalence))?;
        check(d.n_train > 0 && d.n_val > 0 && d.n_test > 0, || "split sizes must be positive".into())?;
        self.encoder.validate(d.shape)?;
        check(self.heads.d_i > 0 && self.heads.hidden > 0, || "heads need d_i and hidden > 0".into())?;
        self.decoder.validate()?;
        check_stage("pretrain", &self.train.pretrain)?;
        check_stage("heads", &self.train.heads)?;
        check_stage("decoder", &self.train.decoder)?;
        check(self.train.head_lr.is_finite() && self.train.head_lr >= 0.0, || "head_lr must be non-negative".into())?;
        check(self.beam.beam > 0, || "beam size must be positive".into())?;
        check(self.beam.max_len >= 2, || "max_len must be at least 2".into())?;
        check(self.beam.max_len <= self.decoder.max_positions, || {
            format!("max_len {} exceeds {} decoder positions", self.beam.max_len, self.decoder.max_positions)
        })?;
        check(self.ablation_seeds > 0, || "ablation needs at least one seed".into())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sorted-key compact JSON of everything except the output location.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(short_hash(self.canonical_json()?.as_bytes()))
    }

    /// Hash of the settings that shape the encoder and head parameters after
    /// the listed stages ("pretrain", "heads"), so their checkpoints can be
    /// shared by runs that differ only downstream.
    pub fn upstream_hash(&self, stages: &[&str]) -> Result<String> {
        let mut v = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "encoder": self.encoder,
            "heads": self.heads,
        });
        if stages.contains(&"pretrain") {
            v["pretrain"] = serde_json::to_value(self.train.pretrain)?;
        }
        if stages.contains(&"heads") {
            v["heads_stage"] = serde_json::to_value(self.train.heads)?;
            v["head_lr"] = serde_json::to_value(self.train.head_lr)?;
        }
        Ok(short_hash(serde_json::to_string(&v)?.as_bytes()))
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
