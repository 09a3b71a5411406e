//! Residual TCN block and its layers.
//!
//! Every layer works on `[channels x frames]` matrices and never changes
//! the number of frames.

use alloc::format;

use crate::error::{bail, Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Pointwise (1x1) convolution: `W x + b` applied to every frame.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in], c_in, rng);
        let bias = Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out])));
        Conv1x1 { weight, bias, c_in, c_out }
    }

    /// All-zero weights and bias.
    pub fn zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let mut conv = Self::zeroed_no_bias(store, name, c_in, c_out);
        conv.bias = Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out])));
        conv
    }

    /// All-zero weights and no bias term.
    pub fn zeroed_no_bias(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::zeros(&[c_out, c_in]),
        );
        Conv1x1 {
            weight,
            bias: None,
            c_in,
            c_out,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + c_out
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.c_in {
            return Err(Error::shape("conv1x1", &[self.c_out, self.c_in], &shape));
        }
        let y = p.var(self.weight).matmul(&x)?;
        match self.bias {
            Some(b) => y.add_bias(&p.var(b)),
            None => Ok(y),
        }
    }
}

/// One `K`-tap dilated filter per channel.
#[derive(Debug, Clone)]
pub struct DepthwiseDilatedConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl DepthwiseDilatedConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        taps: usize,
        dilation: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if taps.is_multiple_of(2) || dilation == 0 {
            bail!(Config, "depthwise kernel must be odd and dilation >= 1 (K={taps}, d={dilation})");
        }
        let kernel = store.add_uniform(format!("{name}.kernel"), &[channels, taps], taps, rng);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[channels]));
        Ok(DepthwiseDilatedConv {
            kernel,
            bias,
            channels,
            taps,
            dilation,
        })
    }

    pub fn param_count(channels: usize, taps: usize) -> usize {
        channels * taps + channels
    }

    /// Frames on each side that can influence an output frame.
    pub fn reach(&self) -> usize {
        (self.taps - 1) * self.dilation / 2
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::shape("depthwise_conv", &[self.channels, self.taps], &shape));
        }
        x.depthwise_conv1d(&p.var(self.kernel), self.dilation)?
            .add_bias(&p.var(self.bias))
    }
}

/// Global layer normalization: statistics over all `C*T` entries, affine
/// parameters per channel.
#[derive(Debug, Clone)]
pub struct GlobalLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
    /// Stop the gradient through the mean and variance. Only used to
    /// exercise the gradient checker against a known-wrong backward pass.
    pub(crate) detach_stats: bool,
}

pub const GLN_EPS: f64 = 1e-8;

impl GlobalLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::NormScale,
            Tensor::full(&[channels], 1.0),
        );
        let beta = store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels]));
        GlobalLayerNorm {
            gamma,
            beta,
            channels,
            eps,
            detach_stats: false,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.channels {
            return Err(Error::shape("global_layer_norm", &[self.channels], &shape));
        }
        let mean = x.mean_all();
        let mean = if self.detach_stats { mean.detach() } else { mean };
        let centered = x.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_all();
        let std = var.add_scalar(self.eps).sqrt();
        let std = if self.detach_stats { std.detach() } else { std };
        centered
            .div(&std)?
            .mul_channel(&p.var(self.gamma))?
            .add_bias(&p.var(self.beta))
    }
}

/// Parametric ReLU with a learnable slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
    pub channels: usize,
}

pub const PRELU_INIT: f64 = 0.25;

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let slope = store.add(
            format!("{name}.slope"),
            ParamKind::Slope,
            Tensor::full(&[channels], PRELU_INIT),
        );
        PRelu { slope, channels }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.prelu(&p.var(self.slope))
    }
}

/// Hyperparameters of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub channels: usize,
    pub hidden: usize,
    pub taps: usize,
    pub dilation: usize,
}

/// `x + out_conv(gln(prelu(dd_conv(gln(prelu(in_conv(x)))))))`
///
/// `out_conv` starts at zero so a fresh block is the identity map.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub in_conv: Conv1x1,
    pub act1: PRelu,
    pub norm1: GlobalLayerNorm,
    pub dd_conv: DepthwiseDilatedConv,
    pub act2: PRelu,
    pub norm2: GlobalLayerNorm,
    pub out_conv: Conv1x1,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, name: &str, shape: BlockShape, rng: &mut Rng) -> Result<Self> {
        let BlockShape {
            channels,
            hidden,
            taps,
            dilation,
        } = shape;
        Ok(TcnBlock {
            in_conv: Conv1x1::new(store, &format!("{name}.in_conv"), channels, hidden, rng),
            act1: PRelu::new(store, &format!("{name}.act1"), hidden),
            norm1: GlobalLayerNorm::new(store, &format!("{name}.norm1"), hidden, GLN_EPS),
            dd_conv: DepthwiseDilatedConv::new(store, &format!("{name}.dd_conv"), hidden, taps, dilation, rng)?,
            act2: PRelu::new(store, &format!("{name}.act2"), hidden),
            norm2: GlobalLayerNorm::new(store, &format!("{name}.norm2"), hidden, GLN_EPS),
            out_conv: Conv1x1::zeroed(store, &format!("{name}.out_conv"), hidden, channels),
        })
    }

    pub fn param_count(channels: usize, hidden: usize, taps: usize) -> usize {
        Conv1x1::param_count(channels, hidden)
            + hidden
            + GlobalLayerNorm::param_count(hidden)
            + DepthwiseDilatedConv::param_count(hidden, taps)
            + hidden
            + GlobalLayerNorm::param_count(hidden)
            + Conv1x1::param_count(hidden, channels)
    }

    pub fn channels(&self) -> usize {
        self.in_conv.c_in
    }

    pub fn dilation(&self) -> usize {
        self.dd_conv.dilation
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] != self.channels() {
            return Err(Error::shape("tcn_block", &[self.channels()], &shape));
        }
        let h = self.in_conv.forward(p, x)?;
        let h = self.norm1.forward(p, self.act1.forward(p, h)?)?;
        let h = self.dd_conv.forward(p, h)?;
        let h = self.norm2.forward(p, self.act2.forward(p, h)?)?;
        let y = self.out_conv.forward(p, h)?;
        x.add(&y)
    }

    /// Stop gradients through both norms' mean and deviation.
    pub fn set_detached_stats(&mut self, on: bool) {
        self.norm1.detach_stats = on;
        self.norm2.detach_stats = on;
    }
}

/// Per-block expansion used when no hidden width is configured.
pub fn default_hidden(channels: usize) -> usize {
    2 * channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tape;
    use alloc::vec::Vec;
    use alloc::vec;

    fn run<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
    where
        F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let xv = tape.constant(x.clone());
        (*f(&p, xv).unwrap().value()).clone()
    }

    fn dd_layer(kernel: [f64; 3], dilation: usize) -> (ParamStore, DepthwiseDilatedConv) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "test");
        let layer = DepthwiseDilatedConv::new(&mut store, "dd", 1, 3, dilation, &mut r).unwrap();
        store.get_mut(layer.kernel).data_mut().copy_from_slice(&kernel);
        (store, layer)
    }

    #[test]
    fn dd_conv_identity_kernel() {
        for d in [1, 2, 5] {
            let (store, layer) = dd_layer([0.0, 1.0, 0.0], d);
            let x = Tensor::new(&[1, 7], (0..7).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
            assert_eq!(run(&store, &x, |p, v| layer.forward(p, v)), x);
        }
    }

    #[test]
    fn dd_conv_box_kernel() {
        let (store, layer) = dd_layer([1.0, 1.0, 1.0], 1);
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(run(&store, &x, |p, v| layer.forward(p, v)).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn dd_conv_impulse_response() {
        let (a, b, c) = (2.0, -3.0, 5.0);
        let (store, layer) = dd_layer([a, b, c], 2);
        let mut x = Tensor::zeros(&[1, 9]);
        x.data_mut()[4] = 1.0;
        let y = run(&store, &x, |p, v| layer.forward(p, v));
        let mut expect = [0.0; 9];
        expect[2] = c;
        expect[4] = b;
        expect[6] = a;
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn dd_conv_rejects_channel_mismatch() {
        let (store, layer) = dd_layer([0.0, 1.0, 0.0], 1);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(layer.forward(&p, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn gln_constant_input_gives_beta() {
        let mut store = ParamStore::new();
        let norm = GlobalLayerNorm::new(&mut store, "n", 2, GLN_EPS);
        store.get_mut(norm.beta).data_mut().copy_from_slice(&[0.5, -1.5]);
        store.get_mut(norm.gamma).data_mut().copy_from_slice(&[3.0, 7.0]);
        let x = Tensor::full(&[2, 4], 4.2);
        let y = run(&store, &x, |p, v| norm.forward(p, v));
        for t in 0..4 {
            assert_eq!(y.at(0, t), 0.5);
            assert_eq!(y.at(1, t), -1.5);
        }
    }

    #[test]
    fn gln_normalizes_globally() {
        let mut store = ParamStore::new();
        let norm = GlobalLayerNorm::new(&mut store, "n", 3, GLN_EPS);
        let x = Tensor::from_fn(&[3, 5], |i| libm::sin(i as f64 * 1.7) * 4.0 + 2.0);
        let y = run(&store, &x, |p, v| norm.forward(p, v));
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gln_two_point_example() {
        let mut store = ParamStore::new();
        let norm = GlobalLayerNorm::new(&mut store, "n", 1, 1e-8);
        let x = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
        let y = run(&store, &x, |p, v| norm.forward(p, v));
        assert!((y.data()[0] + 1.0).abs() < 1e-7);
        assert!((y.data()[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "init");
        let shape = BlockShape {
            channels: 4,
            hidden: 8,
            taps: 3,
            dilation: 2,
        };
        let block = TcnBlock::new(&mut store, "b", shape, &mut r).unwrap();
        let x = Tensor::from_fn(&[4, 11], |i| libm::cos(i as f64) * 3.0);
        assert_eq!(run(&store, &x, |p, v| block.forward(p, v)), x);
    }

    #[test]
    fn block_param_count_example() {
        assert_eq!(TcnBlock::param_count(2, 4, 3), 62);
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let shape = BlockShape {
            channels: 2,
            hidden: 4,
            taps: 3,
            dilation: 1,
        };
        TcnBlock::new(&mut store, "b", shape, &mut r).unwrap();
        assert_eq!(store.num_scalars(), 62);
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names[0], "b.in_conv.weight");
        assert_eq!(names[names.len() - 1], "b.out_conv.bias");
    }

    #[test]
    fn conv1x1_param_count() {
        assert_eq!(Conv1x1::param_count(2, 3), 9);
    }
}
