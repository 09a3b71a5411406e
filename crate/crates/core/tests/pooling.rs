use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use tarnet_core::gradcheck::randomize;
use tarnet_core::params::ParamStore;
use tarnet_core::pooling::{self, AttentionNet, VAR_FLOOR};
use tarnet_core::{rng, Tape, Tensor};

fn net(channels: usize, hidden: usize, seed: u64, random_conv2: bool) -> (ParamStore, AttentionNet) {
    let mut store = ParamStore::new();
    let net = AttentionNet::new(&mut store, "att", channels, hidden, &mut rng::stream(seed, "att"));
    if random_conv2 {
        randomize(&mut store, seed);
    }
    (store, net)
}

fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
}

fn asp(store: &ParamStore, net: &AttentionNet, z: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    (*pooling::attentive_stats_pool(&p, net, tape.constant(z.clone())).unwrap().value()).clone()
}

fn permute_frames(z: &Tensor, order: &[usize]) -> Tensor {
    let (d, t) = z.dims2().unwrap();
    Tensor::from_fn(&[d, t], |i| z.at(i / t, order[i % t]))
}

#[test]
fn zeroed_second_layer_reduces_to_statistics_pooling() {
    let mut r = rng::stream(1, "inputs");
    let (store, net) = net(6, 8, 1, false);
    for _ in 0..100 {
        let t = r.gen_range(1..30);
        let z = random(&[6, t], &mut r);
        let tape = Tape::new();
        let sp = pooling::stats_pool(tape.constant(z.clone())).unwrap().value();
        assert!(asp(&store, &net, &z).max_abs_diff(&sp) < 1e-9);
    }
}

#[test]
fn attention_is_invariant_to_frame_order() {
    let mut r = rng::stream(2, "inputs");
    let (store, net) = net(5, 7, 2, true);
    for _ in 0..50 {
        let t = r.gen_range(2..25);
        let z = random(&[5, t], &mut r);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut r);
        let a = asp(&store, &net, &z);
        let b = asp(&store, &net, &permute_frames(&z, &order));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn constant_input_gives_floored_deviation() {
    let (store, net) = net(3, 4, 3, true);
    let z = Tensor::from_fn(&[3, 9], |i| [0.5, -1.0, 2.0][i / 9]);
    let p = asp(&store, &net, &z);
    for c in 0..3 {
        assert!((p.data()[c] - z.at(c, 0)).abs() < 1e-12);
        assert!((p.data()[3 + c] - VAR_FLOOR.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn hand_examples_of_simple_variants() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::new(&[1, 3], vec![1.0, -3.0, 2.0]).unwrap());
    assert_eq!(pooling::max_pool(z).unwrap().value().data(), &[2.0]);
    assert_eq!(pooling::avg_pool(z).unwrap().value().data(), &[0.0]);
    let sp = pooling::stats_pool(z).unwrap().value();
    assert_eq!(sp.data()[0], 0.0);
    assert!((sp.data()[1] - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn weights_sum_to_one_and_radicand_is_nonnegative(
        seed in 0u64..1000,
        t in 1usize..20,
        scale in 0.01f64..100.0,
    ) {
        let mut r = rng::stream(seed, "inputs");
        let (store, net) = net(4, 5, seed, true);
        let z = Tensor::from_fn(&[4, t], |_| scale * r.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let zv = tape.constant(z);
        let alpha = pooling::attention_weights(&p, &net, zv).unwrap();
        let a = alpha.value();
        for c in 0..4 {
            let sum: f64 = a.row(c).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
        let rad = pooling::weighted_radicand(zv, alpha).unwrap().value();
        prop_assert!(rad.data().iter().all(|&v| v >= -1e-9));
        let out = pooling::weighted_stats(zv, alpha).unwrap().value();
        prop_assert!(out.all_finite());
        prop_assert!(out.data()[4..].iter().all(|&v| v >= 0.0));
    }
}
