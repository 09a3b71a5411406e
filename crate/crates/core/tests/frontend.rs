use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng as _;
use tarnet_core::frontend::{self, FrontendConfig, MelExtractor, Waveform};
use tarnet_core::rng;

fn dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut out = (vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        for t in 0..n {
            let a = -2.0 * PI * (k * t) as f64 / n as f64;
            out.0[k] += re[t] * a.cos() - im[t] * a.sin();
            out.1[k] += re[t] * a.sin() + im[t] * a.cos();
        }
    }
    out
}

#[test]
fn fft_matches_direct_dft() {
    let mut r = rng::stream(0, "fft");
    for n in [1, 2, 4, 8, 16, 64, 512] {
        let re: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (er, ei) = dft(&re, &im);
        let (mut fr, mut fi) = (re.clone(), im.clone());
        frontend::fft_in_place(&mut fr, &mut fi).unwrap();
        for k in 0..n {
            assert!((fr[k] - er[k]).abs() < 1e-9 && (fi[k] - ei[k]).abs() < 1e-9, "n={n} k={k}");
        }
    }
    assert!(frontend::fft_in_place(&mut [0.0; 6], &mut [0.0; 6]).is_err());
}

fn sine(freq: f64, seconds: f64, amp: f64) -> Waveform {
    let n = (seconds * 16_000.0) as usize;
    let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect();
    Waveform::new(s, 16_000).unwrap()
}

#[test]
fn sine_at_filter_center_peaks_there() {
    let cfg = FrontendConfig::default();
    let ex = MelExtractor::new(&cfg).unwrap();
    let centers = frontend::mel_centers(&cfg).unwrap();
    for m in [12, 25, 40, 55, 70, 78] {
        let feats = ex.extract(&sine(centers[m], 0.5, 0.5)).unwrap();
        let v = &feats.values;
        let (f, t) = v.dims2().unwrap();
        let avg: Vec<f64> = (0..f).map(|i| v.row(i).iter().sum::<f64>() / t as f64).collect();
        let best = (0..f).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        assert_eq!(best, m, "center {} Hz", centers[m]);
    }
}

#[test]
fn frame_count_and_shape() {
    let cfg = FrontendConfig::default();
    let feats = frontend::log_mel(&sine(440.0, 2.0, 0.3), &cfg).unwrap();
    assert_eq!(feats.num_frames(), 198);
    assert_eq!(feats.num_mels(), 80);
    assert!(feats.values.all_finite());
    assert!(frontend::log_mel(&sine(440.0, 0.02, 0.3), &cfg).is_err());
}

#[test]
fn extraction_is_deterministic() {
    let cfg = FrontendConfig::default();
    let w = sine(1234.5, 1.0, 0.2);
    assert_eq!(frontend::log_mel(&w, &cfg).unwrap(), frontend::log_mel(&w, &cfg).unwrap());
}

#[test]
fn filterbank_overlap_is_bounded() {
    let fb = frontend::mel_filterbank(&FrontendConfig::default()).unwrap();
    let (f, bins) = fb.dims2().unwrap();
    let peak = fb.data().iter().cloned().fold(0.0, f64::max);
    for k in 0..bins {
        let total: f64 = (0..f).map(|m| fb.at(m, k)).sum();
        assert!(total <= 2.0 * peak);
    }
    for m in 0..f {
        assert!(fb.row(m).iter().all(|&w| w >= 0.0));
        assert!(fb.row(m).iter().sum::<f64>() > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn louder_input_never_decreases_any_entry(seed in 0u64..10_000, gain in 1.0f64..20.0) {
        let mut r = rng::stream(seed, "noise");
        let s: Vec<f64> = (0..2_000).map(|_| r.gen_range(-0.5..0.5)).collect();
        let cfg = FrontendConfig::default();
        let quiet = frontend::log_mel(&Waveform::new(s.clone(), 16_000).unwrap(), &cfg).unwrap();
        let loud = frontend::log_mel(
            &Waveform::new(s.iter().map(|v| v * gain).collect(), 16_000).unwrap(),
            &cfg,
        )
        .unwrap();
        for (a, b) in quiet.values.data().iter().zip(loud.values.data()) {
            prop_assert!(b >= a);
        }
    }
}
