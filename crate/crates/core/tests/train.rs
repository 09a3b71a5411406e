use rand::Rng as _;
use tarnet_core::gradcheck::{check_function, tiny_config, REL_TOL};
use tarnet_core::model::TarnetModel;
use tarnet_core::train::{cross_entropy, example_gradient, sgd_step, GradSum, TrainConfig};
use tarnet_core::{rng, Tensor};

#[test]
fn loss_gradient_on_three_class_toy() {
    let logits = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap();
    let errs = check_function(&[logits], 0, |_, v| cross_entropy(v[0], &[1, 2])).unwrap();
    assert!(errs[0] < REL_TOL);
}

fn toy_batch(seed: u64) -> Vec<(Tensor, usize)> {
    let mut r = rng::stream(seed, "toy");
    (0..6)
        .map(|i| {
            let label = i % 3;
            let x = Tensor::from_fn(&[8, 10], |j| {
                let band = j / 10;
                let tone = if band % 3 == label { 1.0 } else { 0.0 };
                tone + 0.1 * r.gen_range(-1.0..1.0)
            });
            (x, label)
        })
        .collect()
}

fn batch_step(model: &mut TarnetModel, batch: &[(Tensor, usize)], cfg: &TrainConfig, step: u64) -> f64 {
    let mut sum = GradSum::default();
    for (x, y) in batch {
        sum.add(&example_gradient(model, x, *y).unwrap());
    }
    let (grads, loss) = sum.mean();
    sgd_step(model.store_mut(), &grads, cfg, step, &mut None).unwrap();
    loss
}

#[test]
fn tiny_model_fits_a_separable_toy() {
    let mut model = TarnetModel::new(&tiny_config(), 0).unwrap();
    let batch = toy_batch(0);
    let cfg = TrainConfig {
        lr: 0.05,
        ..TrainConfig::default()
    };
    let first = batch_step(&mut model, &batch, &cfg, 0);
    let mut last = first;
    for step in 1..150 {
        last = batch_step(&mut model, &batch, &cfg, step);
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let mut model = TarnetModel::new(&tiny_config(), 1).unwrap();
    let before = model.store().clone();
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    for step in 0..3 {
        batch_step(&mut model, &toy_batch(1), &cfg, step);
    }
    for ((_, a), (_, b)) in before.iter().zip(model.store().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn gradient_sums_merge_in_any_grouping_to_the_same_mean() {
    let model = TarnetModel::new(&tiny_config(), 2).unwrap();
    let exs: Vec<_> = toy_batch(2)
        .iter()
        .map(|(x, y)| example_gradient(&model, x, *y).unwrap())
        .collect();
    let mut flat = GradSum::default();
    exs.iter().for_each(|e| flat.add(e));
    let (mut left, mut right) = (GradSum::default(), GradSum::default());
    exs[..3].iter().for_each(|e| left.add(e));
    exs[3..].iter().for_each(|e| right.add(e));
    left.merge(&right);
    let (a, la) = flat.mean();
    let (b, lb) = left.mean();
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}
