//! Additive noise at a target SNR, impulse-response reverberation and the
//! per-stage condition sets of the curriculum.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{mean_power, sample_segment, tile_to, NoiseBank, RirBank, Waveform};
use crate::error::{KwsError, Result};

/// SNR levels used for training conditions.
pub const TRAIN_SNRS: [i32; 3] = [0, -5, -10];
/// SNR levels of the test matrix; 20 dB is never seen in training.
pub const TEST_SNRS: [i32; 4] = [20, 0, -5, -10];
/// Number of curriculum stages.
pub const N_STAGES: usize = 5;

/// Augmentation applied to one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Condition {
    snr_db: Option<i32>,
    reverberant: bool,
}

impl Condition {
    pub const fn clean() -> Self {
        Self { snr_db: None, reverberant: false }
    }

    /// Noisy condition; the level must be one of [`TEST_SNRS`].
    pub fn noisy(snr_db: i32) -> Result<Self> {
        if !TEST_SNRS.contains(&snr_db) {
            return Err(KwsError::Augment(format!("unsupported SNR level {snr_db} dB")));
        }
        Ok(Self { snr_db: Some(snr_db), reverberant: false })
    }

    pub fn with_reverb(self, reverberant: bool) -> Self {
        Self { reverberant, ..self }
    }

    pub fn snr_db(&self) -> Option<i32> {
        self.snr_db
    }

    pub fn reverberant(&self) -> bool {
        self.reverberant
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.snr_db {
            None => write!(f, "clean")?,
            Some(s) => write!(f, "{s}dB")?,
        }
        if self.reverberant {
            write!(f, "+rir")?;
        }
        Ok(())
    }
}

/// Uniform mixture of SNR conditions, with reverberation drawn independently
/// at `rir_fraction`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    conditions: Vec<Condition>,
    rir_fraction: f64,
}

impl ConditionSet {
    pub fn new(conditions: Vec<Condition>, rir_fraction: f64) -> Result<Self> {
        if conditions.is_empty() {
            return Err(KwsError::Augment("empty condition set".into()));
        }
        if rir_fraction != 0.0 && rir_fraction != 0.5 {
            return Err(KwsError::Augment(format!("rir fraction must be 0 or 0.5, got {rir_fraction}")));
        }
        if let Some(c) = conditions.iter().find(|c| c.snr_db.is_some_and(|s| !TRAIN_SNRS.contains(&s)) || c.reverberant) {
            return Err(KwsError::Augment(format!("condition {c} is not a training condition")));
        }
        Ok(Self { conditions, rir_fraction })
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn rir_fraction(&self) -> f64 {
        self.rir_fraction
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Condition {
        let c = self.conditions[rng.random_range(0..self.conditions.len())];
        let reverberant = self.rir_fraction > 0.0 && rng.random_bool(self.rir_fraction);
        c.with_reverb(reverberant)
    }
}

/// Condition mix of curriculum stage `0..=4`: clean, then one more SNR level
/// per stage down to -10 dB, then the same levels with half the samples
/// reverberated.
pub fn stage_conditions(stage: usize) -> Result<ConditionSet> {
    if stage >= N_STAGES {
        return Err(KwsError::Augment(format!("stage {stage} out of range 0..=4")));
    }
    let levels = stage.min(3);
    let mut conditions = vec![Condition::clean()];
    conditions.extend(TRAIN_SNRS[..levels].iter().map(|&s| Condition { snr_db: Some(s), reverberant: false }));
    ConditionSet::new(conditions, if stage == 4 { 0.5 } else { 0.0 })
}

/// Full multi-condition mix used when the curriculum is disabled.
pub fn multi_condition_set() -> ConditionSet {
    stage_conditions(N_STAGES - 1).expect("last stage is valid")
}

/// `clean + g * noise` with its components kept for inspection.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixed: Waveform,
    pub clean: Vec<f32>,
    pub scaled_noise: Vec<f32>,
    pub gain: f64,
}

/// Realized SNR in dB of a clean component over the first `active` samples
/// against a noise component over its full length.
pub fn component_snr_db(clean: &[f32], active: usize, noise: &[f32]) -> f64 {
    10.0 * (mean_power(&clean[..active.min(clean.len())]) / mean_power(noise)).log10()
}

/// Mixes at `snr_db` with the clean power measured over the first `active`
/// samples only (the region before any zero padding).
pub fn mix_components(clean: &Waveform, noise: &Waveform, snr_db: f64, active: usize) -> Result<Mixture> {
    if clean.len() != noise.len() {
        return Err(KwsError::Augment(format!("length mismatch: clean {} vs noise {}", clean.len(), noise.len())));
    }
    let p_clean = mean_power(&clean.samples[..active.min(clean.len())]);
    let p_noise = noise.power();
    if p_clean == 0.0 {
        return Err(KwsError::Augment("clean signal has zero power".into()));
    }
    if p_noise == 0.0 {
        return Err(KwsError::Augment("noise has zero power".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f32> = noise.samples.iter().map(|&n| (gain * n as f64) as f32).collect();
    let samples = clean.samples.iter().zip(&scaled_noise).map(|(&c, &n)| c + n).collect();
    Ok(Mixture {
        mixed: Waveform { samples, sample_rate: clean.sample_rate },
        clean: clean.samples.clone(),
        scaled_noise,
        gain,
    })
}

/// `clean + g * noise` with `g = sqrt(P_clean / (P_noise * 10^(snr/10)))`.
/// No renormalization; the result may leave `[-1, 1]`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(mix_components(clean, noise, snr_db, clean.len())?.mixed)
}

const DIRECT_CONV_LIMIT: usize = 1 << 16;

/// Full linear convolution, `len(a) + len(b) - 1` samples, accumulated in f64.
pub fn convolve_full(a: &[f32], b: &[f32]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 || a.len() * b.len() <= DIRECT_CONV_LIMIT {
        let mut out = vec![0.0f64; n];
        for (i, &x) in a.iter().enumerate() {
            let x = x as f64;
            for (o, &h) in out[i..].iter_mut().zip(b) {
                *o += x * h as f64;
            }
        }
        return out;
    }
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn rustfft::Fft<f64>> = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let load = |s: &[f32]| {
        let mut v = vec![Complex::new(0.0, 0.0); size];
        for (d, &x) in v.iter_mut().zip(s) {
            d.re = x as f64;
        }
        v
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Reverberates `w` with the peak-normalized `rir`, keeping `len(w)` samples
/// starting at the impulse response's direct-path (global peak) index.
pub fn apply_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    let (peak_idx, peak) = rir
        .samples
        .iter()
        .enumerate()
        .fold((0, 0.0f32), |best, (i, &v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
    if peak == 0.0 {
        return Err(KwsError::Augment("impulse response is empty or all zeros".into()));
    }
    let norm: Vec<f32> = rir.samples.iter().map(|&v| v / peak).collect();
    let full = convolve_full(&w.samples, &norm);
    let samples = (0..w.len()).map(|i| full.get(peak_idx + i).copied().unwrap_or(0.0) as f32).collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Result of [`apply_condition_detailed`].
#[derive(Clone, Debug)]
pub struct Augmented {
    pub waveform: Waveform,
    /// Clean signal after any reverberation.
    pub clean: Vec<f32>,
    /// Scaled noise component, if noise was added.
    pub noise: Option<Vec<f32>>,
}

/// Reverberation first (uniformly chosen impulse response), then noise at
/// the condition's SNR from a uniformly chosen recording, tiled if shorter
/// than `w` and randomly cropped. Clean power is measured over the first
/// `active` samples.
pub fn apply_condition_detailed<R: Rng + ?Sized>(
    w: &Waveform,
    active: usize,
    cond: Condition,
    noises: &NoiseBank,
    rirs: &RirBank,
    rng: &mut R,
) -> Result<Augmented> {
    let mut out = w.clone();
    if cond.reverberant {
        let rir = rirs.choose(rng).ok_or_else(|| KwsError::Augment(format!("condition {cond} needs a non-empty RIR bank")))?;
        out = apply_rir(&out, rir)?;
    }
    let Some(snr) = cond.snr_db else {
        let clean = out.samples.clone();
        return Ok(Augmented { waveform: out, clean, noise: None });
    };
    let clip = noises.choose(rng).ok_or_else(|| KwsError::Augment(format!("condition {cond} needs a non-empty noise bank")))?;
    let noise = sample_segment(&tile_to(clip, out.len())?, out.len(), rng)?;
    let m = mix_components(&out, &noise, snr as f64, active)?;
    Ok(Augmented { waveform: m.mixed, clean: m.clean, noise: Some(m.scaled_noise) })
}

pub fn apply_condition<R: Rng + ?Sized>(
    w: &Waveform,
    cond: Condition,
    noises: &NoiseBank,
    rirs: &RirBank,
    rng: &mut R,
) -> Result<Waveform> {
    Ok(apply_condition_detailed(w, w.len(), cond, noises, rirs, rng)?.waveform)
}
