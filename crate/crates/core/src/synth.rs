//! Synthetic keyword corpus in the Speech Commands layout.
//!
//! ```text
//! <out>/speech/<word>/NNNN.wav        keyword and unknown-word clips
//! <out>/speech/_background_noise_/   recordings for the silence class
//! <out>/speech/{validation,testing}_list.txt
//! <out>/noise/                       augmentation noise bank
//! <out>/rir/                         impulse-response bank
//! ```
//!
//! Keyword `k` is an amplitude-modulated harmonic tone whose fundamental is
//! `BASE_F0 * F0_RATIO^k`. Unknown words glide between the keyword
//! fundamentals.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::audio::{write_wav, WavEncoding, Waveform, BACKGROUND_DIR, LABELS, SAMPLE_RATE, TESTING_LIST, VALIDATION_LIST};
use crate::error::{KwsError, Result};
use crate::rng::{purpose, stream};

pub const BASE_F0: f64 = 300.0;
pub const F0_RATIO: f64 = 1.3;
pub const MAX_CLASSES: usize = 6;
/// Relative spread of a keyword's fundamental around its class value.
pub const F0_JITTER: f64 = 0.06;
const UNKNOWN_WORDS: [&str; 3] = ["bed", "bird", "cat"];
const FS: f64 = SAMPLE_RATE as f64;
const CLIP: usize = SAMPLE_RATE as usize;
/// Harmonics stop below this frequency.
const HARMONIC_CEILING: f64 = 4000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_classes: 4, per_class: 200, seed: 0 }
    }
}

/// Where [`synth_dataset`] put things.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayout {
    pub speech: PathBuf,
    pub noise: PathBuf,
    pub rir: PathBuf,
}

impl SynthLayout {
    pub fn new(out: &Path) -> Self {
        Self { speech: out.join("speech"), noise: out.join("noise"), rir: out.join("rir") }
    }
}

pub fn class_fundamental(k: usize) -> f64 {
    BASE_F0 * F0_RATIO.powi(k as i32)
}

fn raised_cosine_env(n: usize, len: usize, ramp: usize) -> f64 {
    if n < ramp {
        0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
    } else if n + ramp > len {
        0.5 - 0.5 * (PI * (len - n) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// One utterance: a harmonic tone (1/h amplitudes up to 4 kHz) with fundamental gliding from `f_start`
/// to `f_end`, amplitude-modulated, placed at a random onset.
fn tone<R: Rng + ?Sized>(f_start: f64, f_end: f64, rng: &mut R) -> Vec<f32> {
    let dur = rng.random_range(0.45..0.75);
    let len = (dur * FS) as usize;
    let onset = rng.random_range((0.05 * FS) as usize..CLIP - len - (0.05 * FS) as usize);
    let amp = rng.random_range(0.05..0.4);
    let am_rate = rng.random_range(3.0..8.0);
    let am_depth = rng.random_range(0.3..0.8);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let n_harm = ((HARMONIC_CEILING / f_start.max(f_end)) as usize).max(1);
    let harmonics: Vec<(f64, f64)> = (1..=n_harm).map(|h| (1.0 / h as f64, rng.random_range(0.0..2.0 * PI))).collect();
    let norm = harmonics.iter().map(|(a, _)| a * a).sum::<f64>().sqrt();
    let ramp = (0.03 * FS) as usize;
    let mut out: Vec<f32> = (0..CLIP).map(|_| 1e-3 * rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let mut phase = 0.0;
    for n in 0..len {
        let f = f_start + (f_end - f_start) * n as f64 / len as f64;
        phase += 2.0 * PI * f / FS;
        let t = n as f64 / FS;
        let am = 1.0 - am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).cos());
        let s: f64 = harmonics.iter().enumerate().map(|(h, &(a, p))| a * ((h + 1) as f64 * phase + p).sin()).sum();
        out[onset + n] += (amp * am * raised_cosine_env(n, len, ramp) * s / norm) as f32;
    }
    out
}

fn keyword<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f32> {
    let f0 = class_fundamental(k) * (1.0 + rng.random_range(-F0_JITTER..F0_JITTER));
    tone(f0, f0, rng)
}

fn unknown<R: Rng + ?Sized>(n_classes: usize, rng: &mut R) -> Vec<f32> {
    let k = rng.random_range(0..n_classes);
    let mid = class_fundamental(k) * F0_RATIO.sqrt();
    let glide = rng.random_range(0.08..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    tone(mid * (1.0 - glide), mid * (1.0 + glide), rng)
}

fn white<R: Rng + ?Sized>(len: usize, amp: f64, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| (amp * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
}

/// Pink noise from white noise through Paul Kellet's refined filter.
fn pink<R: Rng + ?Sized>(len: usize, amp: f64, rng: &mut R) -> Vec<f32> {
    let mut b = [0.0f64; 7];
    let raw: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt().max(1e-12);
    raw.iter().map(|v| (amp * v / rms) as f32).collect()
}

/// Unit direct path followed by an exponentially decaying noise tail whose
/// energy sets a direct-to-reverberant ratio between -3 and 6 dB.
fn rir<R: Rng + ?Sized>(rng: &mut R) -> Vec<f32> {
    let rt60 = rng.random_range(0.2..0.7);
    let len = (rt60 * FS) as usize;
    let delay = rng.random_range(20..80);
    let drr_db: f64 = rng.random_range(-3.0..6.0);
    let tail: Vec<f64> = (0..len)
        .map(|n| if n < delay { 0.0 } else { (-6.9 * n as f64 / (rt60 * FS)).exp() * rng.sample::<f64, _>(StandardNormal) })
        .collect();
    let energy = tail.iter().map(|v| v * v).sum::<f64>().max(1e-12);
    let gain = (10f64.powf(-drr_db / 10.0) / energy).sqrt();
    let mut h: Vec<f32> = tail.iter().map(|v| (gain * v) as f32).collect();
    h[0] = 1.0;
    h
}

fn write(dir: &Path, name: &str, samples: Vec<f32>) -> Result<()> {
    write_wav(dir.join(name), &Waveform::new(samples), WavEncoding::Pcm16)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| KwsError::io(p, e))
}

/// Generates the corpus under `out`. Equal configs give byte-identical files.
pub fn synth_dataset(out: &Path, cfg: &SynthConfig) -> Result<SynthLayout> {
    if cfg.n_classes == 0 || cfg.n_classes > MAX_CLASSES || cfg.per_class < 10 {
        return Err(KwsError::Config(format!(
            "synthetic corpus needs 1..={MAX_CLASSES} classes and at least 10 clips per class, got {} x {}",
            cfg.n_classes, cfg.per_class
        )));
    }
    let layout = SynthLayout::new(out);
    let seed = cfg.seed;
    let mut validation = Vec::new();
    let mut testing = Vec::new();

    let unknown_per_word = cfg.per_class / 2;
    let mut jobs: Vec<(String, usize, usize)> = (0..cfg.n_classes).map(|k| (LABELS[k].to_string(), k, cfg.per_class)).collect();
    jobs.extend(UNKNOWN_WORDS.iter().enumerate().map(|(u, w)| (w.to_string(), 100 + u, unknown_per_word)));
    for (word, code, count) in &jobs {
        let dir = layout.speech.join(word);
        mkdir(&dir)?;
        (0..*count).into_par_iter().try_for_each(|i| {
            let mut rng = stream(seed, &[purpose::SYNTH, *code as u64, i as u64]);
            let clip = if *code < 100 { keyword(*code, &mut rng) } else { unknown(cfg.n_classes, &mut rng) };
            write(&dir, &format!("{i:04}.wav"), clip)
        })?;
        for i in 0..*count {
            match i % 10 {
                8 => validation.push(format!("{word}/{i:04}.wav")),
                9 => testing.push(format!("{word}/{i:04}.wav")),
                _ => {}
            }
        }
    }
    let lists = [(VALIDATION_LIST, &validation), (TESTING_LIST, &testing)];
    for (name, list) in lists {
        let path = layout.speech.join(name);
        fs::write(&path, list.iter().map(|l| format!("{l}\n")).collect::<String>()).map_err(|e| KwsError::io(&path, e))?;
    }

    let bg = layout.speech.join(BACKGROUND_DIR);
    mkdir(&bg)?;
    let mut rng = stream(seed, &[purpose::SYNTH, 200]);
    write(&bg, "white_noise.wav", white(10 * CLIP, 0.02, &mut rng))?;
    write(&bg, "pink_noise.wav", pink(10 * CLIP, 0.02, &mut rng))?;

    mkdir(&layout.noise)?;
    let mut rng = stream(seed, &[purpose::SYNTH, 300]);
    for i in 0..3 {
        write(&layout.noise, &format!("white_{i}.wav"), white(5 * CLIP, 0.1, &mut rng))?;
        write(&layout.noise, &format!("pink_{i}.wav"), pink(5 * CLIP, 0.1, &mut rng))?;
    }

    mkdir(&layout.rir)?;
    let mut rng = stream(seed, &[purpose::SYNTH, 400]);
    for i in 0..8 {
        write(&layout.rir, &format!("rir_{i}.wav"), rir(&mut rng))?;
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{build_manifest_in, read_wav, Split, SILENCE, UNKNOWN};

    #[test]
    fn fundamentals_are_separated() {
        for k in 1..MAX_CLASSES {
            assert!(class_fundamental(k) * (1.0 - F0_JITTER) > class_fundamental(k - 1) * (1.0 + F0_JITTER));
        }
        assert!(class_fundamental(MAX_CLASSES - 1) * (1.0 + F0_JITTER) < HARMONIC_CEILING);
    }

    #[test]
    fn small_corpus_builds_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_classes: 2, per_class: 20, seed: 5 };
        let layout = synth_dataset(dir.path(), &cfg).unwrap();
        let m = build_manifest_in(&layout.speech).unwrap();
        let train = m.histogram(Split::Train);
        assert_eq!(&train[..2], &[16, 16]);
        assert_eq!(train[UNKNOWN], 24);
        assert_eq!(train[SILENCE], 16);
        assert_eq!(m.count(Split::Test), 2 + 2 + 3 + 2);
        let w = read_wav(layout.speech.join("up/0000.wav")).unwrap();
        assert_eq!(w.len(), CLIP);
        assert!(read_wav(layout.rir.join("rir_0.wav")).unwrap().samples[0] > 0.99);

        let again = tempfile::tempdir().unwrap();
        synth_dataset(again.path(), &cfg).unwrap();
        for rel in ["speech/down/0007.wav", "speech/cat/0003.wav", "noise/pink_1.wav", "rir/rir_5.wav", "speech/testing_list.txt"] {
            assert_eq!(fs::read(dir.path().join(rel)).unwrap(), fs::read(again.path().join(rel)).unwrap(), "{rel}");
        }
    }
}
