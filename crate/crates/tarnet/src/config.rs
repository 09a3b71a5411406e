//! The run configuration file.
//!
//! A TOML document with one master `seed` and the sections `frontend`,
//! `encoder`, `pooling`, `model`, `train` and `data`. Every key is optional;
//! unknown keys are rejected. The effective configuration of a run is
//! written next to its outputs and embedded in every checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tarnet_core::data::{SplitSpec, SynthConfig};
use tarnet_core::encoder::EncoderConfig;
use tarnet_core::frontend::FrontendConfig;
use tarnet_core::model::ModelConfig;
use tarnet_core::pooling::{PoolingKind, DEFAULT_ATTENTION_HIDDEN};
use tarnet_core::train::TrainConfig;

use crate::error::{self, Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; data, initialization, crops and tests draw named streams
    /// from it.
    pub seed: u64,
    pub frontend: FrontendSection,
    pub encoder: EncoderSection,
    pub pooling: PoolingSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendSection {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub num_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub channels: usize,
    pub hidden: usize,
    pub taps: usize,
    pub short: Vec<usize>,
    pub mid: Vec<usize>,
    pub long: Vec<usize>,
    pub repeats: usize,
    pub fusion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    /// `asp`, `sp`, `avg` or `max`.
    pub kind: String,
    pub attention_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embedding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_seconds: f64,
    /// Examples per gradient partial sum. Partial sums are reduced in a fixed
    /// order, so results do not depend on the number of worker threads.
    pub grad_chunk: usize,
    /// Stop once the running training Top-1 of an epoch reaches this value;
    /// 0 disables early stopping.
    pub stop_at_train_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for FrontendSection {
    fn default() -> Self {
        let f = FrontendConfig::default();
        FrontendSection {
            sample_rate: f.sample_rate,
            win_length: f.win_length,
            hop_length: f.hop_length,
            n_fft: f.n_fft,
            num_mels: f.num_mels,
            f_min: f.f_min,
            f_max: f.f_max,
            log_floor: f.log_floor,
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            channels: e.channels,
            hidden: e.hidden,
            taps: e.taps,
            short: e.short,
            mid: e.mid,
            long: e.long,
            repeats: e.repeats,
            fusion: e.fusion,
        }
    }
}

impl Default for PoolingSection {
    fn default() -> Self {
        PoolingSection {
            kind: PoolingKind::Attentive.as_str().to_string(),
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embedding: ModelConfig::default().embedding,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crop_seconds: t.crop_seconds,
            grad_chunk: 10,
            stop_at_train_top1: 0.0,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        let split = SplitSpec::default();
        DataSection {
            speakers: s.speakers,
            utterances_per_speaker: s.utterances_per_speaker,
            duration: s.duration,
            train_fraction: split.train,
            val_fraction: split.val,
            test_fraction: split.test,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| error::config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable in TOML")
    }

    /// Writes the effective configuration as `config.toml` in `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        let f = &self.frontend;
        FrontendConfig {
            sample_rate: f.sample_rate,
            win_length: f.win_length,
            hop_length: f.hop_length,
            n_fft: f.n_fft,
            num_mels: f.num_mels,
            f_min: f.f_min,
            f_max: f.f_max,
            log_floor: f.log_floor,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            channels: e.channels,
            hidden: e.hidden,
            taps: e.taps,
            short: e.short.clone(),
            mid: e.mid.clone(),
            long: e.long.clone(),
            repeats: e.repeats,
            fusion: e.fusion,
        }
    }

    pub fn pooling_kind(&self) -> Result<PoolingKind> {
        Ok(self.pooling.kind.parse()?)
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            num_mels: self.frontend.num_mels,
            encoder: self.encoder_config(),
            pooling: self.pooling_kind()?,
            attention_hidden: self.pooling.attention_hidden,
            embedding: self.model.embedding,
            num_classes,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            crop_seconds: t.crop_seconds,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            speakers: self.data.speakers,
            utterances_per_speaker: self.data.utterances_per_speaker,
            duration: self.data.duration,
            sample_rate: self.frontend.sample_rate,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.data.train_fraction,
            val: self.data.val_fraction,
            test: self.data.test_fraction,
            seed: self.seed,
        }
    }

    /// Keeps only the named encoder stages (`"S"`, `"ML"`, `"SML"`, ...).
    pub fn restrict_stages(&mut self, stages: &str) -> Result<()> {
        let mut enc = self.encoder_config();
        enc.restrict_stages(stages)?;
        self.encoder.short = enc.short;
        self.encoder.mid = enc.mid;
        self.encoder.long = enc.long;
        Ok(())
    }

    /// Checks everything that can be checked without data; the class count
    /// is validated once the corpus is known.
    pub fn validate(&self) -> Result<()> {
        self.frontend_config().validate()?;
        self.model_config(2)?.validate()?;
        self.train_config().validate()?;
        let d = &self.data;
        let sum = d.train_fraction + d.val_fraction + d.test_fraction;
        if (sum - 1.0).abs() > 1e-9 || [d.train_fraction, d.val_fraction, d.test_fraction].iter().any(|f| *f <= 0.0) {
            return Err(error::config(format!("split fractions must be positive and sum to 1, got {sum}")));
        }
        if self.train.grad_chunk == 0 {
            return Err(error::config("train.grad_chunk must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.train.stop_at_train_top1) {
            return Err(error::config("train.stop_at_train_top1 must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub(crate) fn usage_if(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Err(error::usage(msg))
    } else {
        Ok(())
    }
}
