use rand::Rng as _;
use tarnet_core::encoder::EncoderConfig;
use tarnet_core::model::{ModelConfig, TarnetModel};
use tarnet_core::pooling::PoolingKind;
use tarnet_core::{rng, Tensor};

fn set(model: &mut TarnetModel, name: &str, values: &[f64]) {
    let store = model.store_mut();
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get_mut(id).data_mut().copy_from_slice(values);
}

fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

fn gln2(v: [f64; 2], gamma: f64, beta: f64) -> [f64; 2] {
    let m = (v[0] + v[1]) / 2.0;
    let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
    let s = (var + 1e-8).sqrt();
    [gamma * (v[0] - m) / s + beta, gamma * (v[1] - m) / s + beta]
}

#[test]
fn tiny_hand_model_matches_scalar_oracle() {
    let cfg = ModelConfig {
        num_mels: 2,
        encoder: EncoderConfig {
            channels: 1,
            hidden: 1,
            taps: 3,
            short: vec![1],
            mid: vec![],
            long: vec![],
            repeats: 1,
            fusion: 1,
        },
        pooling: PoolingKind::Attentive,
        attention_hidden: 1,
        embedding: 1,
        num_classes: 2,
    };
    let mut m = TarnetModel::new(&cfg, 0).unwrap();
    let b = "encoder.short.r0.d1";
    set(&mut m, "bottleneck.weight", &[0.5, -0.25]);
    set(&mut m, "bottleneck.bias", &[0.1]);
    set(&mut m, &format!("{b}.in_conv.weight"), &[2.0]);
    set(&mut m, &format!("{b}.in_conv.bias"), &[-0.1]);
    set(&mut m, &format!("{b}.act1.slope"), &[0.25]);
    set(&mut m, &format!("{b}.norm1.gamma"), &[1.5]);
    set(&mut m, &format!("{b}.norm1.beta"), &[0.2]);
    set(&mut m, &format!("{b}.dd_conv.kernel"), &[0.3, 1.0, -0.6]);
    set(&mut m, &format!("{b}.dd_conv.bias"), &[0.05]);
    set(&mut m, &format!("{b}.act2.slope"), &[0.25]);
    set(&mut m, &format!("{b}.norm2.gamma"), &[0.9]);
    set(&mut m, &format!("{b}.norm2.beta"), &[-0.1]);
    set(&mut m, &format!("{b}.out_conv.weight"), &[0.4]);
    set(&mut m, &format!("{b}.out_conv.bias"), &[0.2]);
    set(&mut m, "fusion.weight", &[1.1]);
    set(&mut m, "fusion.bias", &[0.9]);
    set(&mut m, "pooling.attention.conv1.weight", &[0.7, -0.2, 0.5]);
    set(&mut m, "pooling.attention.conv1.bias", &[0.1]);
    set(&mut m, "pooling.attention.conv2.weight", &[1.3]);
    set(&mut m, "embedding.weight", &[0.8, 0.6]);
    set(&mut m, "embedding.bias", &[0.05]);
    set(&mut m, "classifier.weight", &[1.0, -2.0]);
    set(&mut m, "classifier.bias", &[0.5, 0.25]);

    // frames (1, 2) and (-1, 0.5)
    let x = Tensor::new(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap();
    let x0 = [0.5 * 1.0 - 0.25 * 2.0 + 0.1, -0.5 - 0.25 * 0.5 + 0.1];
    let a1 = gln2([prelu(2.0 * x0[0] - 0.1, 0.25), prelu(2.0 * x0[1] - 0.1, 0.25)], 1.5, 0.2);
    let conv = [0.05 + 1.0 * a1[0] - 0.6 * a1[1], 0.05 + 0.3 * a1[0] + 1.0 * a1[1]];
    let a2 = gln2([prelu(conv[0], 0.25), prelu(conv[1], 0.25)], 0.9, -0.1);
    let xs = [x0[0] + 0.4 * a2[0] + 0.2, x0[1] + 0.4 * a2[1] + 0.2];
    let z = [(1.1 * xs[0] + 0.9).max(0.0), (1.1 * xs[1] + 0.9).max(0.0)];
    let mu = (z[0] + z[1]) / 2.0;
    let sigma = (((z[0] - mu).powi(2) + (z[1] - mu).powi(2)) / 2.0).max(1e-9).sqrt();
    let e = z.map(|zt| 1.3 * (0.7 * zt - 0.2 * mu + 0.5 * sigma + 0.1).tanh());
    let w = [e[0].exp(), e[1].exp()];
    let alpha = [w[0] / (w[0] + w[1]), w[1] / (w[0] + w[1])];
    let mu_a = alpha[0] * z[0] + alpha[1] * z[1];
    let sigma_a = (alpha[0] * z[0] * z[0] + alpha[1] * z[1] * z[1] - mu_a * mu_a).max(1e-9).sqrt();
    let emb = (0.8 * mu_a + 0.6 * sigma_a + 0.05).max(0.0);
    let expect = [1.0 * emb + 0.5, -2.0 * emb + 0.25];

    assert!(z[0] > 0.0 && z[1] > 0.0 && emb > 0.0, "oracle must exercise the active branches");
    let logits = m.logits(&x).unwrap();
    for (a, b) in logits.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn random_config(r: &mut rng::Rng) -> ModelConfig {
    let mut dil = || -> Vec<usize> { (0..r.gen_range(0..3)).map(|_| 1usize << r.gen_range(0..5)).collect() };
    let (short, mid, mut long) = (dil(), dil(), dil());
    if short.is_empty() && mid.is_empty() && long.is_empty() {
        long.push(1);
    }
    let kinds = [PoolingKind::Max, PoolingKind::Avg, PoolingKind::Stats, PoolingKind::Attentive];
    ModelConfig {
        num_mels: r.gen_range(1..12),
        encoder: EncoderConfig {
            channels: r.gen_range(1..9),
            hidden: r.gen_range(1..9),
            taps: [1, 3, 5][r.gen_range(0..3)],
            short,
            mid,
            long,
            repeats: r.gen_range(1..4),
            fusion: r.gen_range(1..9),
        },
        pooling: kinds[r.gen_range(0..4)],
        attention_hidden: r.gen_range(1..9),
        embedding: r.gen_range(1..9),
        num_classes: r.gen_range(2..7),
    }
}

#[test]
fn parameter_count_agrees_with_stored_arrays() {
    let mut r = rng::stream(4, "configs");
    for _ in 0..10 {
        let cfg = random_config(&mut r);
        let m = TarnetModel::new(&cfg, 1).unwrap();
        let enumerated: usize = m.layers().iter().map(|l| l.shape.iter().product::<usize>()).sum();
        let direct: usize = m.store().iter().map(|(_, p)| p.value.data().len()).sum();
        assert_eq!(m.count_params(), enumerated);
        assert_eq!(m.count_params(), direct);
        assert_eq!(m.count_params(), cfg.param_count(), "{cfg:?}");
    }
}

#[test]
fn forward_is_deterministic_and_length_agnostic() {
    let cfg = tarnet_core::gradcheck::tiny_config();
    let a = TarnetModel::new(&cfg, 3).unwrap();
    let b = TarnetModel::new(&cfg, 3).unwrap();
    let mut r = rng::stream(3, "x");
    for t in [1, 7, 33] {
        let x = Tensor::from_fn(&[8, t], |_| r.gen_range(-1.0..1.0));
        let la = a.logits(&x).unwrap();
        assert_eq!(la, b.logits(&x).unwrap());
        assert_eq!(la.shape(), &[3]);
    }
}
