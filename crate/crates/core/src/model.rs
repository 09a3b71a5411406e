//! The assembled classifier: bottleneck, encoder, fusion, pooling,
//! embedding and linear classifier.

use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::{Conv1x1, TcnBlock};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{bail, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pooling::{Pooling, PoolingKind, DEFAULT_ATTENTION_HIDDEN};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input mel bands `F`.
    pub num_mels: usize,
    pub encoder: EncoderConfig,
    pub pooling: PoolingKind,
    pub attention_hidden: usize,
    /// Speaker embedding width `E`.
    pub embedding: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_mels: 80,
            encoder: EncoderConfig::default(),
            pooling: PoolingKind::Attentive,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            embedding: 192,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_mels == 0 || self.embedding == 0 || self.attention_hidden == 0 {
            bail!(Config, "model widths must be positive");
        }
        if self.num_classes < 2 {
            bail!(Config, "closed-set identification needs at least 2 classes, got {}", self.num_classes);
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        self.encoder.receptive_field()
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let e = &self.encoder;
        let pooled = self.pooling.output_width(e.fusion);
        Conv1x1::param_count(self.num_mels, e.channels)
            + e.num_blocks() * TcnBlock::param_count(e.channels, e.hidden, e.taps)
            + Conv1x1::param_count(e.channels * e.active_stages().len(), e.fusion)
            + Pooling::param_count(self.pooling, e.fusion, self.attention_hidden)
            + Conv1x1::param_count(pooled, self.embedding)
            + Conv1x1::param_count(self.embedding, self.num_classes)
    }
}

/// One row of an architecture summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct TarnetModel {
    pub config: ModelConfig,
    store: ParamStore,
    pub bottleneck: Conv1x1,
    pub encoder: Encoder,
    pub fusion: Conv1x1,
    pub pooling: Pooling,
    pub embedding: Conv1x1,
    pub classifier: Conv1x1,
}

impl TarnetModel {
    /// Fresh model; initial weights come from the `"init"` stream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let bottleneck = Conv1x1::new(&mut store, "bottleneck", config.num_mels, e.channels, &mut rng);
        let encoder = Encoder::new(&mut store, "encoder", e, &mut rng)?;
        let fusion = Conv1x1::new(
            &mut store,
            "fusion",
            e.channels * e.active_stages().len(),
            e.fusion,
            &mut rng,
        );
        let pooling = Pooling::new(
            &mut store,
            "pooling.attention",
            config.pooling,
            e.fusion,
            config.attention_hidden,
            &mut rng,
        );
        let pooled = config.pooling.output_width(e.fusion);
        let embedding = Conv1x1::new(&mut store, "embedding", pooled, config.embedding, &mut rng);
        let classifier = Conv1x1::new(&mut store, "classifier", config.embedding, config.num_classes, &mut rng);
        Ok(TarnetModel {
            config: config.clone(),
            store,
            bottleneck,
            encoder,
            fusion,
            pooling,
            embedding,
            classifier,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total trainable scalars, counted over the stored arrays.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        self.store
            .iter()
            .map(|(_, p)| LayerInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.len(),
            })
            .collect()
    }

    /// Features `[F x T]` through the fused encoder output `[D x T]`.
    pub fn frame_features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.config.num_mels {
            return Err(Error::shape("forward", &[self.config.num_mels], &shape));
        }
        let x0 = encoder::bottleneck(p, &self.bottleneck, x)?;
        let stages = self.encoder.encode(p, x0)?;
        encoder::fuse(p, &self.fusion, &stages, &self.config.encoder.active_stages())
    }

    /// Pre-softmax class scores, shape `[N]`, for one utterance.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let z = self.frame_features(p, x)?;
        let pooled = self.pooling.forward(p, z)?;
        let width = pooled.shape()[0];
        let emb = self.embedding.forward(p, pooled.reshape(&[width, 1])?)?.relu();
        let logits = self.classifier.forward(p, emb)?;
        logits.reshape(&[self.config.num_classes])
    }

    /// Inference without gradient tracking.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let x = tape.constant(features.clone());
        let out = self.forward(&p, x)?;
        Ok((*out.value()).clone())
    }

    /// Make every global layer norm stop gradients through its statistics.
    /// The forward pass is unchanged; the backward pass becomes wrong. Used as
    /// a negative control for the gradient checker.
    pub fn inject_gln_fault(&mut self) {
        for block in self.encoder.blocks_mut() {
            block.set_detached_stats(true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_mels: 8,
            encoder: EncoderConfig {
                channels: 4,
                hidden: 8,
                taps: 3,
                short: alloc::vec![1, 2],
                mid: alloc::vec![4],
                long: alloc::vec![8],
                repeats: 1,
                fusion: 8,
            },
            pooling: PoolingKind::Attentive,
            attention_hidden: 8,
            embedding: 8,
            num_classes: 3,
        }
    }

    #[test]
    fn closed_form_matches_storage() {
        for kind in [PoolingKind::Max, PoolingKind::Avg, PoolingKind::Stats, PoolingKind::Attentive] {
            let mut cfg = tiny();
            cfg.pooling = kind;
            let m = TarnetModel::new(&cfg, 1).unwrap();
            assert_eq!(m.count_params(), cfg.param_count());
        }
    }

    #[test]
    fn rejects_wrong_mel_count() {
        let m = TarnetModel::new(&tiny(), 1).unwrap();
        let err = m.logits(&Tensor::zeros(&[7, 10])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn logits_for_any_length() {
        let m = TarnetModel::new(&tiny(), 1).unwrap();
        for t in [1, 5, 40] {
            let x = Tensor::from_fn(&[8, t], |i| libm::sin(i as f64));
            let y = m.logits(&x).unwrap();
            assert_eq!(y.shape(), &[3]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn one_class_rejected() {
        let mut cfg = tiny();
        cfg.num_classes = 1;
        assert!(TarnetModel::new(&cfg, 0).is_err());
    }
}
