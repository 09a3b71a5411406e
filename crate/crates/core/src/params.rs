//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s into a single [`ParamStore`]. A forward pass
//! binds the whole store onto a tape once ([`ParamStore::bind`]); the
//! resulting [`Bound`] maps ids to tape variables and, after `backward`,
//! yields gradients in store order.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Slope,
}

impl ParamKind {
    /// Whether the L2 weight-decay term applies. Biases and normalization
    /// affine parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix drawn uniformly from `+-sqrt(1/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = libm::sqrt(1.0 / fan_in as f64);
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, ParamKind::Weight, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars, counted over the stored arrays.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace every value, keeping names and kinds. Shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            bail!(
                Data,
                "expected {} parameter arrays, got {}",
                self.params.len(),
                values.len()
            );
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                bail!(
                    Data,
                    "parameter {} has shape {:?}, loaded {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                );
            }
            p.value = Arc::new(v);
        }
        Ok(())
    }

    /// Place every parameter on `tape` as a leaf. With `trainable` false the
    /// leaves are constants and no gradient is tracked.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients after `backward`, in store order; parameters that did not
    /// influence the target get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}
