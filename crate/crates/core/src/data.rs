//! Synthetic speakers, random crops and stratified splits.
//!
//! Each synthetic speaker is a source-filter voice: a jittered pulse train
//! at the speaker's fundamental (with slow per-utterance drift) excites a
//! cascade of three formant resonators. A syllable-rate envelope and white
//! noise at 30 dB SNR complete the signal.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::frontend::Waveform;
use crate::rng::{self, Rng};

pub const SYNTH_SNR_DB: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    /// Fundamental frequency in Hz, within `[60, 400]`.
    pub f0: f64,
    /// Ascending formant frequencies in Hz.
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// Relative standard deviation of each pitch period.
    pub jitter: f64,
}

impl SpeakerProfile {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(60.0..=400.0).contains(&self.f0) {
            bail!(Data, "f0 {} Hz outside [60, 400]", self.f0);
        }
        let [a, b, c] = self.formants;
        if !(0.0 < a && a < b && b < c && c < nyquist) {
            bail!(Data, "formants {:?} must ascend below {} Hz", self.formants, nyquist);
        }
        if self.bandwidths.iter().any(|&bw| bw <= 0.0) || !(0.0..0.5).contains(&self.jitter) {
            bail!(Data, "bandwidths must be positive and jitter in [0, 0.5)");
        }
        Ok(())
    }

    /// A random but plausible adult voice.
    pub fn random(rng: &mut Rng) -> Self {
        let f1 = rng.gen_range(300.0..850.0);
        let f2 = rng.gen_range(f1 + 400.0..2300.0);
        let f3 = rng.gen_range((f2 + 300.0f64).max(2300.0)..3500.0);
        SpeakerProfile {
            f0: rng.gen_range(85.0..260.0),
            formants: [f1, f2, f3],
            bandwidths: [
                rng.gen_range(60.0..120.0),
                rng.gen_range(80.0..160.0),
                rng.gen_range(120.0..250.0),
            ],
            jitter: rng.gen_range(0.005..0.03),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub waveform: Waveform,
}

impl Utterance {
    pub fn duration(&self) -> f64 {
        self.waveform.duration()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Seconds per utterance.
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 10,
            utterances_per_speaker: 50,
            duration: 2.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Two-pole resonator with unity gain at DC.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sample_rate: f64) {
    let r = libm::exp(-PI * bandwidth / sample_rate);
    let a1 = 2.0 * r * libm::cos(2.0 * PI * freq / sample_rate);
    let a2 = -r * r;
    let gain = 1.0 - a1 - a2;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// One utterance of `profile`; all variation is drawn from `rng`.
pub fn synth_utterance(profile: &SpeakerProfile, duration: f64, sample_rate: u32, rng: &mut Rng) -> Result<Waveform> {
    profile.validate(sample_rate)?;
    if !(duration > 0.0) {
        bail!(Usage, "duration must be positive");
    }
    let sr = sample_rate as f64;
    let n = libm::round(duration * sr) as usize;
    let nyquist = sr / 2.0;

    // per-utterance variation of the voice
    let f0 = profile.f0 * (1.0 + 0.04 * normal(rng));
    let formants = profile
        .formants
        .map(|f| (f * (1.0 + 0.02 * normal(rng))).min(nyquist * 0.95));
    let drift_rate = rng.gen_range(0.3..0.8);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let syllable_rate = rng.gen_range(3.0..5.0);
    let syllable_phase = rng.gen_range(0.0..PI);

    let mut x = vec![0.0; n];
    let mut t = rng.gen_range(0.0..1.0 / f0);
    while t < duration {
        let i = (t * sr) as usize;
        if i < n {
            x[i] += 1.0;
        }
        let local = f0 * (1.0 + 0.06 * libm::sin(2.0 * PI * drift_rate * t + drift_phase));
        let period = (1.0 + profile.jitter * normal(rng)).max(0.5) / local;
        t += period;
    }
    // glottal roll-off
    let mut prev = 0.0;
    for v in x.iter_mut() {
        prev = *v + 0.9 * prev;
        *v = prev;
    }
    for (f, bw) in formants.iter().zip(profile.bandwidths) {
        resonate(&mut x, *f, bw, sr);
    }
    for (i, v) in x.iter_mut().enumerate() {
        let s = libm::sin(PI * syllable_rate * i as f64 / sr + syllable_phase);
        *v *= 0.3 + 0.7 * s * s;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let rms = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64);
    let noise = rms / libm::pow(10.0, SYNTH_SNR_DB / 20.0);
    for v in x.iter_mut() {
        *v += noise * normal(rng);
    }
    Waveform::new(x, sample_rate)
}

/// Random speaker profiles for a given seed.
pub fn synth_profiles(speakers: usize, seed: u64) -> Vec<SpeakerProfile> {
    (0..speakers)
        .map(|i| SpeakerProfile::random(&mut rng::substream(seed, "speaker", i as u64)))
        .collect()
}

/// Utterances for the given voices, speaker-major order.
pub fn synth_corpus_from_profiles(profiles: &[SpeakerProfile], cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(profiles.len() * cfg.utterances_per_speaker);
    for (s, profile) in profiles.iter().enumerate() {
        for u in 0..cfg.utterances_per_speaker {
            let index = (s * cfg.utterances_per_speaker + u) as u64;
            let mut r = rng::substream(cfg.seed, "utterance", index);
            out.push(Utterance {
                speaker: s,
                waveform: synth_utterance(profile, cfg.duration, cfg.sample_rate, &mut r)?,
            });
        }
    }
    Ok(out)
}

/// Deterministic synthetic closed-set corpus.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    if cfg.speakers < 2 {
        bail!(Usage, "closed-set identification needs at least 2 speakers, got {}", cfg.speakers);
    }
    if cfg.utterances_per_speaker == 0 {
        bail!(Usage, "need at least one utterance per speaker");
    }
    synth_corpus_from_profiles(&synth_profiles(cfg.speakers, cfg.seed), cfg)
}

/// Number of samples a crop of `seconds` produces.
pub fn crop_len(seconds: f64, sample_rate: u32) -> usize {
    libm::round(seconds * sample_rate as f64) as usize
}

/// Uniform random window of `seconds`. A window longer than the input is
/// filled by wrapping around from the start.
pub fn crop(w: &Waveform, seconds: f64, rng: &mut Rng) -> Result<Waveform> {
    let n = crop_len(seconds, w.sample_rate());
    let len = w.len();
    if n == 0 || len == 0 {
        bail!(Usage, "crop of {seconds} s from a {len}-sample waveform");
    }
    let samples = if n <= len {
        let start = rng.gen_range(0..=len - n);
        w.samples()[start..start + n].to_vec()
    } else {
        w.samples().iter().cycle().take(n).copied().collect()
    };
    Waveform::new(samples, w.sample_rate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

/// Indices into a corpus for each partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Partition::Train,
            "val" => Partition::Val,
            "test" => Partition::Test,
            _ => bail!(Data, "unknown split {s:?}"),
        })
    }
}

impl Split {
    pub fn get(&self, part: Partition) -> &[usize] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Partition of each corpus index.
    pub fn assignment(&self, n: usize) -> Vec<Option<Partition>> {
        let mut out = vec![None; n];
        for part in [Partition::Train, Partition::Val, Partition::Test] {
            for &i in self.get(part) {
                out[i] = Some(part);
            }
        }
        out
    }
}

/// Per-speaker stratified split. Every speaker lands in all three parts.
pub fn split(labels: &[usize], spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(*f > 0.0)) || libm::fabs(fr.iter().sum::<f64>() - 1.0) > 1e-9 {
        bail!(Usage, "split fractions {:?} must be positive and sum to 1", fr);
    }
    let speakers = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); speakers];
    for (i, &s) in labels.iter().enumerate() {
        by_speaker[s].push(i);
    }
    let mut rng = rng::stream(spec.seed, "split");
    let mut out = Split::default();
    for (s, idx) in by_speaker.iter_mut().enumerate() {
        let n = idx.len();
        if n < 3 {
            bail!(Data, "speaker {s} has {n} utterances; each speaker needs at least 3");
        }
        idx.shuffle(&mut rng);
        let mut n_val = (libm::round(n as f64 * spec.val) as usize).max(1);
        let mut n_train = (libm::round(n as f64 * spec.train) as usize).max(1);
        while n_train + n_val > n - 1 {
            if n_train > n_val {
                n_train -= 1;
            } else {
                n_val -= 1;
            }
        }
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        for p in synth_profiles(50, 9) {
            p.validate(16_000).unwrap();
        }
    }

    #[test]
    fn crop_whole_and_wrap() {
        let w = Waveform::new((0..100).map(|i| i as f64).collect(), 100).unwrap();
        let mut r = rng::stream(0, "crops");
        assert_eq!(crop(&w, 1.0, &mut r).unwrap(), w);
        let long = crop(&w, 2.5, &mut r).unwrap();
        assert_eq!(long.len(), 250);
        assert_eq!(long.samples()[100], 0.0);
        assert_eq!(long.samples()[249], 49.0);
    }

    #[test]
    fn split_counts() {
        let labels: Vec<usize> = (0..10).flat_map(|s| core::iter::repeat_n(s, 50)).collect();
        let sp = split(&labels, &SplitSpec::default()).unwrap();
        for s in 0..10 {
            let count = |v: &[usize]| v.iter().filter(|&&i| labels[i] == s).count();
            assert_eq!((count(&sp.train), count(&sp.val), count(&sp.test)), (35, 5, 10));
        }
    }

    #[test]
    fn split_small_speakers() {
        let labels = [0, 0, 0, 1, 1, 1];
        let sp = split(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (2, 2, 2));
        assert!(split(&[0, 0, 1, 1, 1], &SplitSpec::default()).is_err());
        let bad = SplitSpec {
            train: 0.5,
            ..SplitSpec::default()
        };
        assert!(split(&labels, &bad).is_err());
    }

    #[test]
    fn one_speaker_rejected() {
        let cfg = SynthConfig {
            speakers: 1,
            ..SynthConfig::default()
        };
        assert!(synth_corpus(&cfg).is_err());
    }
}
