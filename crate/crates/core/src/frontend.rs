//! Log-Mel filterbank features and feature-level augmentation.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{KwsError, Result};

/// Samples in one second of audio, the model's fixed input length.
pub const CLIP_SAMPLES: usize = SAMPLE_RATE as usize;
pub const N_FRAMES: usize = 98;
pub const N_MELS: usize = 64;
/// Largest time shift in samples (100 ms).
pub const MAX_SHIFT: i64 = 1600;
/// Largest SpecAugment mask width, in frames or bins.
pub const MAX_MASK: usize = 25;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub window_ms: usize,
    pub hop_ms: usize,
    pub n_mels: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { window_ms: 25, hop_ms: 10, n_mels: N_MELS, n_fft: 512, fmin: 0.0, fmax: 8000.0, log_floor: 1e-10 }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        self.window_ms * SAMPLE_RATE as usize / 1000
    }

    pub fn hop_samples(&self) -> usize {
        self.hop_ms * SAMPLE_RATE as usize / 1000
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames for a clip of `len` samples: `floor((len - window) / hop) + 1`.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_samples() {
            0
        } else {
            (len - self.window_samples()) / self.hop_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(KwsError::Frontend(m));
        if self.window_ms == 0 || self.hop_ms == 0 || self.n_mels == 0 {
            return err("window, hop and n_mels must be positive".into());
        }
        if self.window_samples() > self.n_fft {
            return err(format!("n_fft {} is shorter than the {}-sample window", self.n_fft, self.window_samples()));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return err(format!("need 0 <= fmin < fmax <= 8000, got {}..{}", self.fmin, self.fmax));
        }
        if !(self.log_floor > 0.0) {
            return err("log floor must be positive".into());
        }
        Ok(())
    }
}

/// Time x frequency grid of log energies, row-major with one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), frames * bins, "feature matrix size");
        Self { frames, bins, values }
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.values[t * self.bins + f]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64) as f32
    }

    /// One line per frame, comma separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.frames {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Right-pads with zeros or truncates to `target` samples.
pub fn pad_or_trim(w: &Waveform, target: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(target, 0.0);
    Waveform { samples, sample_rate: w.sample_rate }
}

/// Delays (`s > 0`, zeros in front) or advances (`s < 0`, zeros at the end)
/// by `s` samples, keeping the length.
pub fn shift(w: &Waveform, s: i64) -> Waveform {
    let n = w.len();
    let mut out = vec![0.0; n];
    if s >= 0 {
        let s = (s as usize).min(n);
        out[s..].copy_from_slice(&w.samples[..n - s]);
    } else {
        let s = (s.unsigned_abs() as usize).min(n);
        out[..n - s].copy_from_slice(&w.samples[s..]);
    }
    Waveform { samples: out, sample_rate: w.sample_rate }
}

/// Random shift drawn uniformly from `[-1600, 1600]` samples.
pub fn time_shift<R: Rng + ?Sized>(w: &Waveform, rng: &mut R) -> Waveform {
    shift(w, rng.random_range(-MAX_SHIFT..=MAX_SHIFT))
}

/// Center frequencies (Hz) of the triangular filters: `n_mels` points
/// equally spaced in mel between `fmin` and `fmax`, endpoints excluded.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// `n_mels x (n_fft / 2 + 1)` triangular filter weights, row-major.
pub fn mel_filter_matrix(cfg: &FrontendConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let edges = mel_edges(cfg);
    let bin_hz = SAMPLE_RATE as f64 / cfg.n_fft as f64;
    let mut rows = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row: Vec<f32> = (0..cfg.n_bins())
            .map(|k| {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                w as f32
            })
            .collect();
        if !row.iter().any(|&w| w > 0.0) {
            return Err(KwsError::Frontend(format!(
                "mel filter {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; too many mel bands for n_fft {}",
                cfg.n_fft
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Precomputed window, FFT plan and sparse filterbank.
#[derive(Clone)]
pub struct LogMelFrontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    filters: Vec<(usize, Vec<f32>)>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for LogMelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelFrontend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32).collect()
}

impl LogMelFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        let dense = mel_filter_matrix(&cfg)?;
        let filters = dense
            .into_iter()
            .map(|row| {
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, row[start..end].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { window: hann(cfg.window_samples()), filters, fft, cfg })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Power spectrum `|X_k|^2`, `k = 0..=n_fft/2`, of one windowed frame.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f32> {
        let mut buf: Vec<Complex<f32>> = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i].re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_bins()].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Frame `t` covers samples `[hop * t, hop * t + window)`; each entry is
    /// `ln(mel energy + floor)`.
    pub fn compute(&self, w: &Waveform) -> FeatureMatrix {
        let frames = self.cfg.n_frames(w.len());
        let (hop, win) = (self.cfg.hop_samples(), self.cfg.window_samples());
        let floor = self.cfg.log_floor as f32;
        let mut values = Vec::with_capacity(frames * self.cfg.n_mels);
        for t in 0..frames {
            let spec = self.power_spectrum(&w.samples[t * hop..t * hop + win]);
            for (start, weights) in &self.filters {
                let e: f32 = weights.iter().zip(&spec[*start..]).map(|(&a, &b)| a * b).sum();
                values.push((e + floor).ln());
            }
        }
        FeatureMatrix::new(frames, self.cfg.n_mels, values)
    }
}

/// One-shot feature extraction; prefer a reused [`LogMelFrontend`].
pub fn log_mel_fbank(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Ok(LogMelFrontend::new(cfg.clone())?.compute(w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub start: usize,
    pub width: usize,
}

/// Fills one time band and one frequency band with the pre-masking mean.
pub fn apply_masks(f: &FeatureMatrix, time: Mask, freq: Mask) -> FeatureMatrix {
    let fill = f.mean();
    let mut out = f.clone();
    for t in time.start..(time.start + time.width).min(f.frames) {
        out.values[t * f.bins..(t + 1) * f.bins].fill(fill);
    }
    for t in 0..f.frames {
        for b in freq.start..(freq.start + freq.width).min(f.bins) {
            out.values[t * f.bins + b] = fill;
        }
    }
    out
}

/// SpecAugment with one time and one frequency mask, widths uniform in
/// `0..=25` at uniform valid offsets.
pub fn spec_augment<R: Rng + ?Sized>(f: &FeatureMatrix, rng: &mut R) -> FeatureMatrix {
    let mut draw = |extent: usize| {
        let width = rng.random_range(0..=MAX_MASK.min(extent));
        let start = rng.random_range(0..=extent - width);
        Mask { start, width }
    };
    let time = draw(f.frames);
    let freq = draw(f.bins);
    apply_masks(f, time, freq)
}

/// `lambda * a + (1 - lambda) * b` for features and targets alike.
pub fn mix_pair(a: &FeatureMatrix, b: &FeatureMatrix, ya: &[f32], yb: &[f32], lambda: f32) -> (FeatureMatrix, Vec<f32>) {
    assert_eq!((a.frames, a.bins), (b.frames, b.bins), "mixup shapes");
    assert_eq!(ya.len(), yb.len(), "mixup targets");
    let mu = 1.0 - lambda;
    let values = a.values.iter().zip(&b.values).map(|(&x, &y)| lambda * x + mu * y).collect();
    let target = ya.iter().zip(yb).map(|(&x, &y)| lambda * x + mu * y).collect();
    (FeatureMatrix::new(a.frames, a.bins, values), target)
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`.
pub fn mixup<R: Rng + ?Sized>(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    ya: &[f32],
    yb: &[f32],
    alpha: f64,
    rng: &mut R,
) -> Result<(FeatureMatrix, Vec<f32>)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| KwsError::Config(format!("mixup.alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng) as f32;
    Ok(mix_pair(a, b, ya, yb, lambda))
}
