//! Waveform to log-Mel spectrogram.
//!
//! Hann-windowed frames are zero-padded to the FFT size, turned into a power
//! spectrum, projected onto an area-normalized triangular mel filterbank and
//! compressed with `ln(x + floor)`. No pre-emphasis and no mean
//! normalization are applied.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (25 ms at 16 kHz).
    pub win_length: usize,
    /// Frame shift in samples (10 ms at 16 kHz).
    pub hop_length: usize,
    /// FFT size; a power of two no smaller than the window.
    pub n_fft: usize,
    pub num_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added to mel energies before the logarithm.
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            num_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < self.win_length {
            bail!(Config, "n_fft must be a power of two >= win_length (n_fft={}, win={})", self.n_fft, self.win_length);
        }
        if self.win_length == 0 || self.hop_length == 0 || self.num_mels == 0 {
            bail!(Config, "window, hop and mel count must be positive");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            bail!(Config, "mel range [{}, {}] must lie within [0, {}]", self.f_min, self.f_max, nyquist);
        }
        if self.log_floor <= 0.0 {
            bail!(Config, "log floor must be positive");
        }
        Ok(())
    }

    /// Frame shift in seconds.
    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    /// `1 + floor((len - win) / hop)`, or `None` when shorter than a window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.win_length).then(|| 1 + (len - self.win_length) / self.hop_length)
    }
}

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            bail!(Data, "sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            bail!(Data, "non-finite sample at index {i}");
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `F x T` log-Mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramFeatures {
    pub values: Tensor,
}

impl SpectrogramFeatures {
    pub fn num_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `2595 log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) {
        bail!(Usage, "frequency must be non-negative, got {hz}");
    }
    Ok(2595.0 * libm::log10(1.0 + hz / 700.0))
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

/// Twiddle factors `exp(-2 pi i k / n)` for `k < n/2`.
pub fn twiddles(n: usize) -> Vec<(f64, f64)> {
    (0..n / 2)
        .map(|k| {
            let a = -2.0 * PI * k as f64 / n as f64;
            (libm::cos(a), libm::sin(a))
        })
        .collect()
}

/// In-place iterative radix-2 FFT (decimation in time).
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    fft_with_table(re, im, &twiddles(re.len()))
}

fn fft_with_table(re: &mut [f64], im: &mut [f64], table: &[(f64, f64)]) -> Result<()> {
    let n = re.len();
    if n != im.len() || !n.is_power_of_two() || table.len() != n / 2 {
        bail!(Usage, "fft length must be a power of two, got {n}");
    }
    let bits = n.trailing_zeros();
    if bits == 0 {
        return Ok(());
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (c, s) = table[k * stride];
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Triangular filters between `F + 2` mel-spaced edges, each scaled by
/// `2 / (upper - lower)` in Hz so all filters have the same area.
/// Shape `[F x (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min)?;
    let hi = hz_to_mel(cfg.f_max)?;
    let edges: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Tensor::zeros(&[cfg.num_mels, bins]);
    for m in 0..cfg.num_mels {
        let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (u - l);
        for k in 0..bins {
            let f = bin_hz(k);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < u {
                (u - f) / (u - c)
            } else {
                0.0
            };
            fb.data_mut()[m * bins + k] = w * norm;
        }
    }
    Ok(fb)
}

/// Center frequency of each mel filter in Hz.
pub fn mel_centers(cfg: &FrontendConfig) -> Result<Vec<f64>> {
    let lo = hz_to_mel(cfg.f_min)?;
    let hi = hz_to_mel(cfg.f_max)?;
    Ok((1..=cfg.num_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect())
}

/// Reusable extractor holding the window and filterbank.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filterbank: Tensor,
    table: Vec<(f64, f64)>,
}

impl MelExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        Ok(MelExtractor {
            window: hann_window(cfg.win_length),
            filterbank: mel_filterbank(cfg)?,
            table: twiddles(cfg.n_fft),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn extract(&self, w: &Waveform) -> Result<SpectrogramFeatures> {
        let cfg = &self.cfg;
        if w.sample_rate() != cfg.sample_rate {
            bail!(Data, "waveform is {} Hz, front-end expects {} Hz", w.sample_rate(), cfg.sample_rate);
        }
        if let Some(i) = w.samples().iter().position(|s| !s.is_finite()) {
            bail!(Data, "non-finite sample at index {i}");
        }
        let Some(frames) = cfg.num_frames(w.len()) else {
            bail!(Data, "waveform of {} samples is shorter than one {}-sample window", w.len(), cfg.win_length);
        };
        let bins = cfg.n_fft / 2 + 1;
        let mels = cfg.num_mels;
        let mut out = vec![0.0; mels * frames];
        let mut re = vec![0.0; cfg.n_fft];
        let mut im = vec![0.0; cfg.n_fft];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let frame = &w.samples()[t * cfg.hop_length..t * cfg.hop_length + cfg.win_length];
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            for (i, (s, h)) in frame.iter().zip(&self.window).enumerate() {
                re[i] = s * h;
            }
            fft_with_table(&mut re, &mut im, &self.table)?;
            for k in 0..bins {
                power[k] = re[k] * re[k] + im[k] * im[k];
            }
            for m in 0..mels {
                let row = self.filterbank.row(m);
                let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                out[m * frames + t] = libm::log(e + cfg.log_floor);
            }
        }
        Ok(SpectrogramFeatures {
            values: Tensor::new(&[mels, frames], out)?,
        })
    }
}

/// One-shot log-Mel extraction.
pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<SpectrogramFeatures> {
    MelExtractor::new(cfg)?.extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_points() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 2595.0 * core::f64::consts::LOG10_2).abs() < 1e-9);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 1e-2);
        assert!((hz_to_mel(8000.0).unwrap() - 2840.03).abs() < 1e-2);
        assert!(hz_to_mel(-1.0).is_err());
        for hz in [10.0, 440.0, 3000.0] {
            assert!((mel_to_hz(hz_to_mel(hz).unwrap()) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_count() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.num_frames(32_000), Some(198));
        assert_eq!(cfg.num_frames(400), Some(1));
        assert_eq!(cfg.num_frames(399), None);
    }

    #[test]
    fn too_short_and_nan_rejected() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(log_mel(&w, &cfg), Err(crate::Error::Data(_))));
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        let w8k = Waveform::new(vec![0.0; 8000], 8_000).unwrap();
        assert!(log_mel(&w8k, &cfg).is_err());
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let f = log_mel(&w, &cfg).unwrap();
        let floor = libm::log(cfg.log_floor);
        assert!(f.values.data().iter().all(|&v| v == floor));
        assert_eq!(f.num_mels(), 80);
    }

    #[test]
    fn filterbank_shape_properties() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let (f, bins) = fb.dims2().unwrap();
        assert_eq!((f, bins), (80, 257));
        assert!(fb.data().iter().all(|&v| v >= 0.0));
        let max = fb.data().iter().cloned().fold(0.0, f64::max);
        for m in 0..f {
            assert!(fb.row(m).iter().sum::<f64>() > 0.0, "filter {m} is empty");
        }
        for k in 0..bins {
            let total: f64 = (0..f).map(|m| fb.at(m, k)).sum();
            assert!(total <= 2.0 * max + 1e-12);
        }
    }
}
