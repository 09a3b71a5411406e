//! Loss, per-utterance gradients and the SGD update.
//!
//! The epoch loop itself, with checkpointing and logging, lives in the
//! `tarnet` crate; everything here is pure.

use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::model::TarnetModel;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum; zero gives plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Length of the random training crops in seconds.
    pub crop_seconds: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.0,
            epochs: 300,
            batch_size: 100,
            crop_seconds: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(Usage, "learning rate must be finite and non-negative, got {}", self.lr);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Usage, "weight decay must be non-negative, got {}", self.weight_decay);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Usage, "momentum must be in [0, 1), got {}", self.momentum);
        }
        if self.batch_size == 0 {
            bail!(Usage, "batch size must be >= 1");
        }
        if !(self.crop_seconds > 0.0) {
            bail!(Usage, "crop length must be positive");
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, via log-sum-exp.
/// `logits` is `[B x N]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [b, n] = shape[..] else {
        bail!(Usage, "cross_entropy expects [batch x classes] logits, got {shape:?}");
    };
    if b != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        bail!(Data, "label {bad} out of range for {n} classes");
    }
    let mut onehot = Tensor::zeros(&[b, n]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * n + l] = 1.0;
    }
    let mask = logits.tape().constant(onehot);
    Ok(logits.log_softmax(1)?.mul(&mask)?.sum_all().scale(-1.0 / b as f64))
}

/// Loss, gradients (store order) and logits for one utterance.
#[derive(Debug, Clone)]
pub struct ExampleGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub logits: Tensor,
}

pub fn example_gradient(model: &TarnetModel, features: &Tensor, label: usize) -> Result<ExampleGrad> {
    let tape = Tape::new();
    let p = model.store().bind(&tape, true);
    let x = tape.constant(features.clone());
    let logits = model.forward(&p, x)?;
    let n = logits.shape()[0];
    let loss = cross_entropy(logits.reshape(&[1, n])?, &[label])?;
    tape.backward(loss)?;
    Ok(ExampleGrad {
        loss: loss.value().data()[0],
        grads: p.grads(),
        logits: (*logits.value()).clone(),
    })
}

/// Running sum of per-example gradients. Summation happens in the order
/// examples are added, so a fixed order gives bit-identical results.
#[derive(Debug, Clone, Default)]
pub struct GradSum {
    pub grads: Vec<Tensor>,
    pub loss: f64,
    pub count: usize,
}

impl GradSum {
    pub fn add(&mut self, ex: &ExampleGrad) {
        self.add_parts(&ex.grads, ex.loss, 1);
    }

    pub fn merge(&mut self, other: &GradSum) {
        self.add_parts(&other.grads, other.loss, other.count);
    }

    fn add_parts(&mut self, grads: &[Tensor], loss: f64, count: usize) {
        if count == 0 {
            return;
        }
        if self.grads.is_empty() {
            self.grads = grads.to_vec();
        } else {
            for (acc, g) in self.grads.iter_mut().zip(grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        self.loss += loss;
        self.count += count;
    }

    /// Batch-mean gradients and loss.
    pub fn mean(mut self) -> (Vec<Tensor>, f64) {
        let scale = 1.0 / self.count.max(1) as f64;
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        (self.grads, self.loss * scale)
    }
}

/// `p <- p - lr * v`, `v <- momentum * v + g + wd * p` (decay only on
/// weights and PReLU slopes). With zero momentum this is
/// `p <- p - lr * (g + wd * p)`.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    cfg: &TrainConfig,
    step: u64,
    velocity: &mut Option<Vec<Tensor>>,
) -> Result<()> {
    if grads.len() != store.len() {
        bail!(Usage, "{} gradients for {} parameters", grads.len(), store.len());
    }
    for ((_, p), g) in store.iter().zip(grads) {
        if !g.all_finite() {
            bail!(Numeric, "non-finite gradient for {} at step {step}", p.name);
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.kind.decays())).collect();
    if cfg.momentum > 0.0 && velocity.is_none() {
        *velocity = Some(grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
    }
    for (i, (id, decays)) in ids.into_iter().enumerate() {
        let wd = if decays { cfg.weight_decay } else { 0.0 };
        let g = grads[i].data();
        let param = store.get_mut(id).data_mut();
        match velocity.as_mut().filter(|_| cfg.momentum > 0.0) {
            Some(vel) => {
                let v = vel[i].data_mut();
                for ((p, gi), vi) in param.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = cfg.momentum * *vi + gi + wd * *p;
                    *p -= cfg.lr * *vi;
                }
            }
            None => {
                for (p, gi) in param.iter_mut().zip(g) {
                    *p -= cfg.lr * (gi + wd * *p);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use alloc::vec;

    fn ce(logits: &[f64], n: usize, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let b = logits.len() / n;
        let l = tape.constant(Tensor::new(&[b, n], logits.to_vec()).unwrap());
        Ok(cross_entropy(l, labels)?.value().data()[0])
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 3, 10] {
            let loss = ce(&vec![0.7; 2 * k], k, &[0, k - 1]).unwrap();
            assert!((loss - libm::log(k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits() {
        let loss = ce(&[10.0, -10.0], 2, &[0]).unwrap();
        let expect = libm::log1p(libm::exp(-20.0));
        assert!((loss - expect).abs() < 1e-6 * expect);
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn bad_label_is_data_error() {
        assert!(matches!(ce(&[0.0, 0.0], 2, &[2]), Err(Error::Data(_))));
    }

    fn scalar_store(kind: ParamKind, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", kind, Tensor::scalar(v));
        s
    }

    #[test]
    fn decay_only_step() {
        let mut s = scalar_store(ParamKind::Weight, 1.0);
        let cfg = TrainConfig::default();
        sgd_step(&mut s, &[Tensor::scalar(0.0)], &cfg, 0, &mut None).unwrap();
        assert!((s.iter().next().unwrap().1.value.data()[0] - 0.9999995).abs() < 1e-15);

        let mut b = scalar_store(ParamKind::Bias, 1.0);
        sgd_step(&mut b, &[Tensor::scalar(0.0)], &cfg, 0, &mut None).unwrap();
        assert_eq!(b.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn quadratic_step() {
        let mut s = scalar_store(ParamKind::Weight, 1.0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        // d/dp (p^2 / 2) = p = 1
        sgd_step(&mut s, &[Tensor::scalar(1.0)], &cfg, 0, &mut None).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.0 - cfg.lr);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut s = scalar_store(ParamKind::Weight, 1.0);
        let err = sgd_step(&mut s, &[Tensor::scalar(f64::NAN)], &TrainConfig::default(), 17, &mut None).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("step 17")));
    }
}
