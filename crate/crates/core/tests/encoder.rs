use rand::Rng as _;
use tarnet_core::blocks::{BlockShape, Conv1x1, TcnBlock};
use tarnet_core::encoder::{self, EncoderConfig, Stage};
use tarnet_core::gradcheck::randomize;
use tarnet_core::model::{ModelConfig, TarnetModel};
use tarnet_core::params::ParamStore;
use tarnet_core::{rng, Tape, Tensor};

fn set(store: &mut ParamStore, name: &str, values: &[f64]) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test.input");
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

fn gln(v: &[f64], gamma: f64, beta: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    v.iter().map(|x| gamma * (x - m) / (var + 1e-8).sqrt() + beta).collect()
}

#[test]
fn single_channel_block_matches_scalar_oracle() {
    let mut store = ParamStore::new();
    let shape = BlockShape {
        channels: 1,
        hidden: 1,
        taps: 3,
        dilation: 1,
    };
    let block = TcnBlock::new(&mut store, "b", shape, &mut rng::stream(0, "x")).unwrap();
    set(&mut store, "b.in_conv.weight", &[1.5]);
    set(&mut store, "b.in_conv.bias", &[-0.2]);
    set(&mut store, "b.act1.slope", &[0.1]);
    set(&mut store, "b.norm1.gamma", &[0.8]);
    set(&mut store, "b.norm1.beta", &[0.3]);
    set(&mut store, "b.dd_conv.kernel", &[0.5, -1.0, 2.0]);
    set(&mut store, "b.dd_conv.bias", &[0.05]);
    set(&mut store, "b.act2.slope", &[0.2]);
    set(&mut store, "b.norm2.gamma", &[1.2]);
    set(&mut store, "b.norm2.beta", &[-0.4]);
    set(&mut store, "b.out_conv.weight", &[0.7]);
    set(&mut store, "b.out_conv.bias", &[0.1]);

    let x = [0.4, -1.0, 0.25, 2.0];
    let h: Vec<f64> = x.iter().map(|v| prelu(1.5 * v - 0.2, 0.1)).collect();
    let h = gln(&h, 0.8, 0.3);
    let k = [0.5, -1.0, 2.0];
    let at = |i: isize| if !(0..4).contains(&i) { 0.0 } else { h[i as usize] };
    let d: Vec<f64> = (0..4isize)
        .map(|t| 0.05 + k[0] * at(t - 1) + k[1] * at(t) + k[2] * at(t + 1))
        .map(|v| prelu(v, 0.2))
        .collect();
    let d = gln(&d, 1.2, -0.4);
    let expect: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + 0.7 * d + 0.1).collect();

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let y = block
        .forward(&p, tape.constant(Tensor::new(&[1, 4], x.to_vec()).unwrap()))
        .unwrap()
        .value();
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn block_preserves_shape() {
    let mut store = ParamStore::new();
    let shape = BlockShape {
        channels: 3,
        hidden: 5,
        taps: 5,
        dilation: 3,
    };
    let block = TcnBlock::new(&mut store, "b", shape, &mut rng::stream(1, "x")).unwrap();
    randomize(&mut store, 1);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    for t in [1, 2, 17] {
        let y = block.forward(&p, tape.constant(random(&[3, t], t as u64))).unwrap();
        assert_eq!(y.shape(), vec![3, t]);
        assert!(y.value().all_finite());
    }
    assert!(block.forward(&p, tape.constant(Tensor::zeros(&[2, 4]))).is_err());
}

fn small_default_model(seed: u64) -> TarnetModel {
    let cfg = ModelConfig {
        num_mels: 4,
        encoder: EncoderConfig {
            channels: 3,
            hidden: 4,
            ..EncoderConfig::default()
        },
        attention_hidden: 4,
        embedding: 4,
        num_classes: 2,
        ..ModelConfig::default()
    };
    TarnetModel::new(&cfg, seed).unwrap()
}

#[test]
fn identity_initialization_is_exact() {
    let model = small_default_model(4);
    let x0 = random(&[3, 50], 4);
    let tape = Tape::new();
    let p = model.store().bind(&tape, false);
    let out = model.encoder.encode(&p, tape.constant(x0.clone())).unwrap();
    for stage in Stage::ALL {
        assert_eq!(*out.get(stage).value(), x0);
    }
}

#[test]
fn cascade_recomputation_is_bit_exact() {
    let mut model = small_default_model(5);
    randomize(model.store_mut(), 5);
    let x0 = random(&[3, 40], 5);
    let tape = Tape::new();
    let p = model.store().bind(&tape, false);
    let out = model.encoder.encode(&p, tape.constant(x0)).unwrap();
    let x_s = tape.constant((*out.get(Stage::Short).value()).clone());
    let x_m = model.encoder.run_stage(&p, Stage::Mid, x_s).unwrap();
    assert_eq!(*x_m.value(), *out.get(Stage::Mid).value());
}

/// Column sensitivity of one output frame of `X_L` to every input frame,
/// with the normalization statistics held fixed.
fn local_sensitivity(model: &TarnetModel, t_len: usize, center: usize, seed: u64) -> Vec<f64> {
    let tape = Tape::new();
    let p = model.store().bind(&tape, false);
    let x0 = tape.leaf(random(&[3, t_len], seed));
    let out = model.encoder.encode(&p, x0).unwrap();
    let frame = out.get(Stage::Long).slice(1, center, 1).unwrap();
    tape.backward(frame.sum_all()).unwrap();
    let g = x0.grad().unwrap();
    (0..t_len).map(|t| (0..3).map(|c| g.at(c, t).abs()).sum()).collect()
}

#[test]
fn receptive_field_of_default_dilations() {
    assert_eq!(EncoderConfig::default().receptive_field(), 379);
    let half = 189;
    let (t_len, center) = (461, 230);
    for seed in 0..3 {
        let mut model = small_default_model(seed);
        randomize(model.store_mut(), seed);
        for block in model.encoder.blocks_mut() {
            block.set_detached_stats(true);
        }
        let s = local_sensitivity(&model, t_len, center, seed);
        for (t, v) in s.iter().enumerate() {
            if t.abs_diff(center) <= half {
                assert!(*v > 0.0, "seed {seed}: frame {t} has no influence");
            } else {
                assert_eq!(*v, 0.0, "seed {seed}: frame {t} leaks");
            }
        }
    }
}

#[test]
fn receptive_field_matches_perturbation_for_random_configs() {
    let mut r = rng::stream(9, "configs");
    for seed in 0..3 {
        let pick = |r: &mut rng::Rng| -> Vec<usize> {
            (0..r.gen_range(0..3)).map(|_| r.gen_range(1..6)).collect()
        };
        let mut enc = EncoderConfig {
            channels: 2,
            hidden: 3,
            taps: [3, 5][r.gen_range(0..2)],
            short: pick(&mut r),
            mid: pick(&mut r),
            long: pick(&mut r),
            repeats: r.gen_range(1..3),
            fusion: 2,
        };
        if enc.num_blocks() == 0 {
            enc.short = vec![1];
        }
        let cfg = ModelConfig {
            num_mels: 2,
            encoder: enc.clone(),
            attention_hidden: 2,
            embedding: 2,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let rf = cfg.receptive_field();
        let half = (rf - 1) / 2;
        let mut model = TarnetModel::new(&cfg, seed).unwrap();
        randomize(model.store_mut(), seed);
        for block in model.encoder.blocks_mut() {
            block.set_detached_stats(true);
        }
        let t_len = rf + 20;
        let center = t_len / 2;
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let x0 = tape.leaf(random(&[2, t_len], seed));
        let out = model.encoder.encode(&p, x0).unwrap();
        let last = *enc.active_stages().last().unwrap();
        tape.backward(out.get(last).slice(1, center, 1).unwrap().sum_all()).unwrap();
        let g = x0.grad().unwrap();
        let reach: Vec<usize> = (0..t_len)
            .filter(|&t| g.at(0, t) != 0.0 || g.at(1, t) != 0.0)
            .map(|t| t.abs_diff(center))
            .collect();
        assert_eq!(reach.iter().max(), Some(&half), "config {enc:?}");
    }
}

#[test]
fn global_norm_statistics_reach_every_frame() {
    // Through the norm statistics every frame touches every output; the
    // effect is small relative to the local path.
    let mut model = small_default_model(2);
    randomize(model.store_mut(), 2);
    let s = local_sensitivity(&model, 461, 230, 2);
    assert!(s.iter().all(|v| *v > 0.0));
    let far = s[0];
    let near = s[230];
    assert!(far < near);
}

#[test]
fn bottleneck_and_fusion_examples() {
    let mut store = ParamStore::new();
    let proj = Conv1x1::zeroed(&mut store, "proj", 2, 1);
    set(&mut store, "proj.weight", &[1.0, 1.0]);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    assert_eq!(encoder::bottleneck(&p, &proj, x).unwrap().value().data(), &[7.0]);

    let mut store = ParamStore::new();
    let fusion = Conv1x1::zeroed(&mut store, "fusion", 3, 1);
    set(&mut store, "fusion.weight", &[1.0, 1.0, 1.0]);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let frames = |v: f64| tape.constant(Tensor::new(&[1, 1], vec![v]).unwrap());
    let outs = encoder::StageOutputs {
        x_s: frames(2.0),
        x_m: frames(-5.0),
        x_l: frames(1.0),
    };
    let z = encoder::fuse(&p, &fusion, &outs, &Stage::ALL).unwrap();
    assert_eq!(z.value().data(), &[0.0]);
}
