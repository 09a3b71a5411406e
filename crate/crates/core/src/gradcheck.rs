//! Central finite-difference checks of the analytic gradients.
//!
//! Every check reduces its output to a scalar through a fixed random
//! projection, perturbs each input and parameter scalar by `±h`, and compares
//! `(f(x+h) - f(x-h)) / 2h` against the tape gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::blocks::{BlockShape, GlobalLayerNorm, TcnBlock};
use crate::encoder::{self, EncoderConfig};
use crate::error::Result;
use crate::model::{ModelConfig, TarnetModel};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::pooling::{self, AttentionNet, PoolingKind};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::cross_entropy;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-8;

/// Frames fed to the model check.
pub const TINY_FRAMES: usize = 12;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(REL_FLOOR);
    libm::fabs(analytic - numeric) / denom
}

/// The small model used for gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_mels: 8,
        encoder: EncoderConfig {
            channels: 4,
            hidden: 8,
            taps: 3,
            short: vec![1, 2],
            mid: vec![4],
            long: vec![8],
            repeats: 1,
            fusion: 8,
        },
        pooling: PoolingKind::Attentive,
        attention_hidden: 8,
        embedding: 8,
        num_classes: 3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    /// Suite and tensor, e.g. `model/encoder.short.r0.d1.in_conv.weight`.
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar objective: the output itself when it has one element, otherwise
/// its inner product with `proj`.
fn project<'t>(out: Var<'t>, proj: &Tensor) -> Result<Var<'t>> {
    if out.value().len() == 1 {
        return Ok(out.sum_all());
    }
    let w = out.tape().constant(proj.reshape(&out.shape())?);
    Ok(out.mul(&w)?.sum_all())
}

/// Checks `f` with respect to each of `inputs`. Returns one maximum relative
/// error per input.
pub fn check_function<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let mut rng = rng::stream(seed, "gradcheck.projection");
    let proj = uniform(&out.shape(), -1.0, 1.0, &mut rng);
    tape.backward(project(out, &proj)?)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(project(out, &proj)?.value().data()[0])
    };

    let mut work = inputs.to_vec();
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
        errs.push(worst);
    }
    Ok(errs)
}

/// Checks a parameterized function with respect to its input and every
/// parameter in `store`. Results are named `{suite}/input` and
/// `{suite}/{param name}`.
pub fn check_store<F>(suite: &str, store: &ParamStore, x: &Tensor, seed: u64, f: F) -> Result<Vec<CheckResult>>
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let xv = tape.leaf(x.clone());
    let out = f(&bound, xv)?;
    let mut rng = rng::stream(seed, "gradcheck.projection");
    let proj = uniform(&out.shape(), -1.0, 1.0, &mut rng);
    tape.backward(project(out, &proj)?)?;
    let grads = bound.grads();
    let x_grad = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let out = f(&bound, tape.constant(x.clone()))?;
        Ok(project(out, &proj)?.value().data()[0])
    };

    let mut results = Vec::new();
    let mut store = store.clone();
    let mut x = x.clone();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + FD_STEP;
        let up = eval(&store, &x)?;
        x.data_mut()[j] = orig - FD_STEP;
        let down = eval(&store, &x)?;
        x.data_mut()[j] = orig;
        worst = worst.max(rel_error(x_grad.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    results.push(CheckResult {
        name: format!("{suite}/input"),
        max_rel_err: worst,
        checked: x.len(),
    });

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, grad) in ids.into_iter().zip(grads) {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&store, &x)?;
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&store, &x)?;
            store.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_error(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
        results.push(CheckResult {
            name: format!("{suite}/{}", store.param(id).name),
            max_rel_err: worst,
            checked: grad.len(),
        });
    }
    Ok(results)
}

/// Replaces every parameter with a generic random value so that no gradient
/// vanishes because of a structured initialization.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = rng::stream(seed, "gradcheck.params");
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.kind)).collect();
    for (id, kind) in ids {
        let value = store.get_mut(id);
        let fan_in = value.shape().get(1).copied().unwrap_or(1) as f64;
        let (lo, hi) = match kind {
            ParamKind::Weight => {
                let a = libm::sqrt(3.0 / fan_in);
                (-a, a)
            }
            ParamKind::NormScale => (0.7, 1.3),
            ParamKind::Slope => (0.05, 0.45),
            // Positive biases keep ReLU units and the pooled deviation away
            // from their kinks and floors.
            ParamKind::Bias => (0.1, 0.5),
            ParamKind::NormShift => (-0.5, 0.5),
        };
        for v in value.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    f: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &'static [&'static [usize]], f: OpFn) -> OpCase {
        OpCase {
            name,
            shapes,
            positive: false,
            f,
        }
    }
    let mut cases = vec![
        case("add", &[&[3, 4], &[3, 4]], |_, v| v[0].add(&v[1])),
        case("sub", &[&[5], &[5]], |_, v| v[0].sub(&v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |_, v| v[0].mul(&v[1])),
        case("mul_scalar", &[&[3, 4], &[1]], |_, v| v[0].mul(&v[1])),
        case("scale", &[&[5]], |_, v| Ok(v[0].scale(-1.7).add_scalar(0.3))),
        case("matmul", &[&[3, 4], &[4, 2]], |_, v| v[0].matmul(&v[1])),
        case("add_bias", &[&[3, 5], &[3]], |_, v| v[0].add_bias(&v[1])),
        case("mul_channel", &[&[3, 5], &[3]], |_, v| v[0].mul_channel(&v[1])),
        case("prelu", &[&[3, 5], &[3]], |_, v| v[0].prelu(&v[1])),
        case("concat", &[&[2, 3], &[3, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("concat_time", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[4, 5]], |_, v| v[0].slice(1, 1, 3)),
        case("reshape_transpose", &[&[2, 6]], |_, v| v[0].reshape(&[3, 4])?.transpose()),
        case("exp", &[&[5]], |_, v| Ok(v[0].exp())),
        case("tanh", &[&[5]], |_, v| Ok(v[0].tanh())),
        case("relu", &[&[5]], |_, v| Ok(v[0].relu())),
        case("clamp_min", &[&[5]], |_, v| Ok(v[0].clamp_min(0.05))),
        case("softmax", &[&[3, 4]], |_, v| v[0].softmax(1)),
        case("log_softmax", &[&[3, 4]], |_, v| v[0].log_softmax(0)),
        case("sum_axis", &[&[3, 4]], |_, v| v[0].sum_axis(0)),
        case("mean_axis", &[&[3, 4]], |_, v| v[0].mean_axis(1)),
        case("var_axis", &[&[3, 4]], |_, v| v[0].var_axis(1)),
        case("max_axis", &[&[3, 4]], |_, v| v[0].max_axis(1)),
        case("sum_all", &[&[3, 4]], |_, v| Ok(v[0].sum_all())),
        case("mean_all", &[&[3, 4]], |_, v| Ok(v[0].mean_all())),
        case("depthwise_d1", &[&[2, 7], &[2, 3]], |_, v| v[0].depthwise_conv1d(&v[1], 1)),
        case("depthwise_d3", &[&[2, 7], &[2, 3]], |_, v| v[0].depthwise_conv1d(&v[1], 3)),
        case("depthwise_wide", &[&[2, 4], &[2, 3]], |_, v| v[0].depthwise_conv1d(&v[1], 4)),
        case("composite", &[&[5]], |_, v| {
            let a = v[0].tanh().mul(&v[0])?;
            let b = v[0].exp().scale(0.5);
            Ok(a.add(&b)?.softmax(0)?.mul(&v[0])?.sum_all())
        }),
    ];
    for (name, f) in [
        ("div", (|_, v| v[0].div(&v[1])) as OpFn),
        ("log", |_, v| Ok(v[0].log())),
        ("sqrt", |_, v| Ok(v[0].sqrt())),
    ] {
        cases.push(OpCase {
            name,
            shapes: if name == "div" { &[&[5], &[5]] } else { &[&[5]] },
            positive: true,
            f,
        });
    }
    cases
}

/// Every primitive op in isolation.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, "gradcheck.ops");
    let mut out = Vec::new();
    for case in op_cases() {
        // Inputs are kept away from the kinks of relu, clamp and max.
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                Tensor::from_fn(s, |_| {
                    let mag = rng.gen_range(0.2..1.5);
                    if case.positive || rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
            })
            .collect();
        let errs = check_function(&inputs, seed, case.f)?;
        out.push(CheckResult {
            name: format!("op/{}", case.name),
            max_rel_err: errs.iter().copied().fold(0.0, f64::max),
            checked: inputs.iter().map(Tensor::len).sum(),
        });
    }
    Ok(out)
}

/// One residual block, a standalone gLN, attentive and plain statistics
/// pooling, and the cross-entropy loss.
pub fn check_components(seed: u64, break_gln: bool) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, "gradcheck.components");
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let shape = BlockShape {
        channels: 3,
        hidden: 6,
        taps: 3,
        dilation: 2,
    };
    let mut block = TcnBlock::new(&mut store, "block", shape, &mut rng)?;
    if break_gln {
        block.set_detached_stats(true);
    }
    randomize(&mut store, seed);
    let x = uniform(&[3, 9], -1.0, 1.0, &mut rng);
    out.extend(check_store("block", &store, &x, seed, |p, x| block.forward(p, x))?);

    let mut store = ParamStore::new();
    let mut gln = GlobalLayerNorm::new(&mut store, "gln", 3, crate::blocks::GLN_EPS);
    gln.detach_stats = break_gln;
    randomize(&mut store, seed);
    let x = uniform(&[3, 6], -1.0, 1.0, &mut rng);
    out.extend(check_store("gln", &store, &x, seed, |p, x| gln.forward(p, x))?);

    let mut store = ParamStore::new();
    let net = AttentionNet::new(&mut store, "attention", 4, 5, &mut rng);
    randomize(&mut store, seed);
    let z = uniform(&[4, 7], -1.0, 1.0, &mut rng);
    out.extend(check_store("asp", &store, &z, seed, |p, z| {
        pooling::attentive_stats_pool(p, &net, z)
    })?);

    let z = uniform(&[4, 7], -1.0, 1.0, &mut rng);
    let errs = check_function(&[z], seed, |_, v| pooling::stats_pool(v[0]))?;
    out.push(CheckResult {
        name: "sp/input".into(),
        max_rel_err: errs[0],
        checked: 28,
    });

    let logits = uniform(&[2, 3], -2.0, 2.0, &mut rng);
    let errs = check_function(&[logits], seed, |_, v| cross_entropy(v[0], &[2, 0]))?;
    out.push(CheckResult {
        name: "loss/logits".into(),
        max_rel_err: errs[0],
        checked: 6,
    });
    Ok(out)
}

/// The full model on one random utterance, per parameter tensor.
pub fn check_model(config: &ModelConfig, seed: u64, break_gln: bool) -> Result<Vec<CheckResult>> {
    let mut model = TarnetModel::new(config, seed)?;
    if break_gln {
        model.inject_gln_fault();
    }
    randomize(model.store_mut(), seed);
    let mut rng = rng::stream(seed, "gradcheck.input");
    let x = uniform(&[config.num_mels, TINY_FRAMES], -1.0, 1.0, &mut rng);
    let label = rng.gen_range(0..config.num_classes);
    center_fusion(&mut model, &x)?;
    let store = model.store().clone();
    check_store("model", &store, &x, seed, |p, x| {
        let logits = model.forward(p, x)?;
        let n = logits.shape()[0];
        cross_entropy(logits.reshape(&[1, n])?, &[label])
    })
}

/// Sets each fusion bias to minus the median pre-activation of its channel,
/// so every fused channel is active on about half of the frames of `x`.
/// A channel that is off everywhere has a floored deviation, and the
/// gradients that pass through it are too small to resolve by differences.
fn center_fusion(model: &mut TarnetModel, x: &Tensor) -> Result<()> {
    let Some(bias) = model.fusion.bias else {
        return Ok(());
    };
    let pre = {
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let x0 = encoder::bottleneck(&p, &model.bottleneck, tape.constant(x.clone()))?;
        let outputs = model.encoder.encode(&p, x0)?;
        let parts: Vec<Var<'_>> = model
            .config
            .encoder
            .active_stages()
            .iter()
            .map(|s| outputs.get(*s))
            .collect();
        let stacked = tape.concat(&parts, 0)?;
        let pre = p.var(model.fusion.weight).matmul(&stacked)?;
        (*pre.value()).clone()
    };
    let (rows, _) = pre.dims2()?;
    let medians: Vec<f64> = (0..rows)
        .map(|r| {
            let mut row = pre.row(r).to_vec();
            row.sort_by(f64::total_cmp);
            let n = row.len();
            0.5 * (row[(n - 1) / 2] + row[n / 2])
        })
        .collect();
    for (b, m) in model.store_mut().get_mut(bias).data_mut().iter_mut().zip(medians) {
        *b = -m;
    }
    Ok(())
}

/// All suites on the tiny configuration.
pub fn run_all(seed: u64, break_gln: bool) -> Result<GradcheckReport> {
    let mut results = check_ops(seed)?;
    results.extend(check_components(seed, break_gln)?);
    results.extend(check_model(&tiny_config(), seed, break_gln)?);
    Ok(GradcheckReport { results })
}

