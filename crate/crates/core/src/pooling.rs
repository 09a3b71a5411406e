//! Utterance-level pooling over the time axis.
//!
//! Attentive statistics pooling predicts channel-wise softmax weights over
//! frames from `[z(t) || mean || std]` and returns the weighted mean and
//! weighted standard deviation. Max, average and plain statistics pooling
//! are kept for comparison runs.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::blocks::Conv1x1;
use crate::error::{bail, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Floor applied to every variance before its square root.
pub const VAR_FLOOR: f64 = 1e-9;

pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Max,
    Avg,
    Stats,
    Attentive,
}

impl PoolingKind {
    /// Length of the pooled vector for `channels` input rows.
    pub fn output_width(self, channels: usize) -> usize {
        match self {
            PoolingKind::Max | PoolingKind::Avg => channels,
            PoolingKind::Stats | PoolingKind::Attentive => 2 * channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Max => "max",
            PoolingKind::Avg => "avg",
            PoolingKind::Stats => "sp",
            PoolingKind::Attentive => "asp",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "max" => PoolingKind::Max,
            "avg" | "mean" => PoolingKind::Avg,
            "sp" | "stats" => PoolingKind::Stats,
            "asp" | "attentive" => PoolingKind::Attentive,
            _ => bail!(Usage, "unknown pooling kind {s:?}; expected max, avg, sp or asp"),
        })
    }
}

/// Two 1x1 layers with `tanh` between them: `3D -> A -> D`. The second
/// layer has no bias: a per-channel constant cancels in the softmax over
/// time, so such a bias would never receive a gradient.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    pub conv1: Conv1x1,
    pub conv2: Conv1x1,
}

impl AttentionNet {
    /// The second layer starts at zero, so initial attention is uniform.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        AttentionNet {
            conv1: Conv1x1::new(store, &format!("{name}.conv1"), 3 * channels, hidden, rng),
            conv2: Conv1x1::zeroed_no_bias(store, &format!("{name}.conv2"), hidden, channels),
        }
    }

    pub fn param_count(channels: usize, hidden: usize) -> usize {
        Conv1x1::param_count(3 * channels, hidden) + hidden * channels
    }

    pub fn channels(&self) -> usize {
        self.conv2.c_out
    }
}

fn frames_of(z: &Var<'_>) -> Result<(usize, usize)> {
    let shape = z.shape();
    match shape[..] {
        [d, t] => Ok((d, t)),
        _ => bail!(Data, "pooling expects a [D x T] matrix, got {shape:?}"),
    }
}

/// Broadcast a `[D]` vector over `frames` columns.
fn repeat_cols<'t>(v: Var<'t>, frames: usize) -> Result<Var<'t>> {
    let d = v.shape()[0];
    v.tape().constant(Tensor::zeros(&[d, frames])).add_bias(&v)
}

/// `c(t) = [z(t) || mu || sigma]` with global (biased) statistics, `[3D x T]`.
pub fn attention_context<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let (_, t) = frames_of(&z)?;
    let mu = z.mean_axis(1)?;
    let sigma = z.var_axis(1)?.clamp_min(VAR_FLOOR).sqrt();
    let tape = z.tape();
    tape.concat(&[z, repeat_cols(mu, t)?, repeat_cols(sigma, t)?], 0)
}

/// Channel-wise attention weights `alpha`, `[D x T]`, each row summing to 1.
pub fn attention_weights<'t>(p: &Bound<'t>, net: &AttentionNet, z: Var<'t>) -> Result<Var<'t>> {
    let (d, _) = frames_of(&z)?;
    if d != net.channels() {
        return Err(Error::shape("attention_weights", &[net.channels()], &z.shape()));
    }
    let ctx = attention_context(z)?;
    let h = net.conv1.forward(p, ctx)?.tanh();
    net.conv2.forward(p, h)?.softmax(1)
}

/// `sum_t alpha z^2 - mu_a^2` per channel, before the variance floor.
pub fn weighted_radicand<'t>(z: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let mu = alpha.mul(&z)?.sum_axis(1)?;
    let second = alpha.mul(&z.mul(&z)?)?.sum_axis(1)?;
    second.sub(&mu.mul(&mu)?)
}

/// `[mu_a || sigma_a]` for given weights, length `2D`.
pub fn weighted_stats<'t>(z: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    if z.shape() != alpha.shape() {
        return Err(Error::shape("weighted_stats", &z.shape(), &alpha.shape()));
    }
    let mu = alpha.mul(&z)?.sum_axis(1)?;
    let second = alpha.mul(&z.mul(&z)?)?.sum_axis(1)?;
    let sigma = second.sub(&mu.mul(&mu)?)?.clamp_min(VAR_FLOOR).sqrt();
    z.tape().concat(&[mu, sigma], 0)
}

/// Attentive statistics pooling.
pub fn attentive_stats_pool<'t>(p: &Bound<'t>, net: &AttentionNet, z: Var<'t>) -> Result<Var<'t>> {
    let alpha = attention_weights(p, net, z)?;
    weighted_stats(z, alpha)
}

/// Unweighted `[mean || std]`, length `2D`.
pub fn stats_pool<'t>(z: Var<'t>) -> Result<Var<'t>> {
    frames_of(&z)?;
    let mu = z.mean_axis(1)?;
    let sigma = z.var_axis(1)?.clamp_min(VAR_FLOOR).sqrt();
    z.tape().concat(&[mu, sigma], 0)
}

pub fn max_pool<'t>(z: Var<'t>) -> Result<Var<'t>> {
    frames_of(&z)?;
    z.max_axis(1)
}

pub fn avg_pool<'t>(z: Var<'t>) -> Result<Var<'t>> {
    frames_of(&z)?;
    z.mean_axis(1)
}

/// A pooling layer as used inside the model.
#[derive(Debug, Clone)]
pub struct Pooling {
    pub kind: PoolingKind,
    pub attention: Option<AttentionNet>,
}

impl Pooling {
    pub fn new(store: &mut ParamStore, name: &str, kind: PoolingKind, channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let attention = (kind == PoolingKind::Attentive).then(|| AttentionNet::new(store, name, channels, hidden, rng));
        Pooling { kind, attention }
    }

    pub fn param_count(kind: PoolingKind, channels: usize, hidden: usize) -> usize {
        match kind {
            PoolingKind::Attentive => AttentionNet::param_count(channels, hidden),
            _ => 0,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        match (self.kind, &self.attention) {
            (PoolingKind::Max, _) => max_pool(z),
            (PoolingKind::Avg, _) => avg_pool(z),
            (PoolingKind::Stats, _) => stats_pool(z),
            (PoolingKind::Attentive, Some(net)) => attentive_stats_pool(p, net, z),
            (PoolingKind::Attentive, None) => bail!(Config, "attentive pooling without an attention net"),
        }
    }
}
