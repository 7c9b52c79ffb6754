//! WAV input/output, Speech Commands style dataset manifests and clip banks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{KwsError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Class names in output order. The first ten are the command words.
pub const LABELS: [&str; 12] = [
    "up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop", "silence", "unknown",
];
pub const N_COMMANDS: usize = 10;
pub const SILENCE: usize = 10;
pub const UNKNOWN: usize = 11;

pub const BACKGROUND_DIR: &str = "_background_noise_";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn mean_power(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / samples.len() as f64
}

/// Reads a PCM16 or float32 WAV, keeping the first channel.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| KwsError::Wav { path: path.into(), source })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(KwsError::UnsupportedSampleRate { path: path.into(), rate: spec.sample_rate });
    }
    let channels = spec.channels.max(1) as usize;
    let wav_err = |source| KwsError::Wav { path: path.into(), source };
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(KwsError::UnsupportedEncoding {
                path: path.into(),
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        return Err(KwsError::UnsupportedEncoding { path: path.into(), detail: format!("non-finite sample {bad}") });
    }
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Writes a mono WAV. PCM16 output saturates outside `[-1, 1)`.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: w.sample_rate, bits_per_sample: bits, sample_format: fmt };
    let wav_err = |source| KwsError::Wav { path: path.into(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in &w.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(v).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Contiguous crop of exactly `length` samples at a uniformly random offset.
pub fn sample_segment<R: Rng + ?Sized>(w: &Waveform, length: usize, rng: &mut R) -> Result<Waveform> {
    if w.len() < length {
        return Err(KwsError::ClipTooShort { len: w.len(), want: length });
    }
    let offset = rng.random_range(0..=w.len() - length);
    Ok(Waveform { samples: w.samples[offset..offset + length].to_vec(), sample_rate: w.sample_rate })
}

/// Repeats `w` end to end until it holds at least `length` samples.
pub fn tile_to(w: &Waveform, length: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(KwsError::ClipTooShort { len: 0, want: length });
    }
    if w.len() >= length {
        return Ok(w.clone());
    }
    let samples = w.samples.iter().copied().cycle().take(length).collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClipSource {
    /// An utterance file.
    File(PathBuf),
    /// A 1 s crop, drawn at load time, of a background-noise recording.
    Silence(PathBuf),
}

impl ClipSource {
    pub fn path(&self) -> &Path {
        match self {
            ClipSource::File(p) | ClipSource::Silence(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: ClipSource,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub label_names: Vec<String>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Entries per label in one split.
    pub fn histogram(&self, split: Split) -> [usize; 12] {
        let mut h = [0; 12];
        for e in self.split(split) {
            h[e.label] += 1;
        }
        h
    }

    /// Loads the audio behind an entry. Silence references are cropped to
    /// one second with `rng`; shorter recordings are tiled first.
    pub fn load<R: Rng + ?Sized>(&self, entry: &ManifestEntry, rng: &mut R) -> Result<Waveform> {
        match &entry.source {
            ClipSource::File(p) => read_wav(p),
            ClipSource::Silence(p) => {
                let w = tile_to(&read_wav(p)?, SAMPLE_RATE as usize)?;
                sample_segment(&w, SAMPLE_RATE as usize, rng)
            }
        }
    }
}

pub fn label_index(word: &str) -> usize {
    LABELS[..N_COMMANDS].iter().position(|&l| l == word).unwrap_or(UNKNOWN)
}

fn read_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().replace('\\', "/")).filter(|l| !l.is_empty()).collect())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| KwsError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Builds the 12-class manifest from `<root>/<word>/<clip>.wav`.
///
/// Files named in the testing list go to `Test`, those in the validation
/// list to `Validation`, everything else to `Train`. Non-command words map to
/// `unknown`. If `<root>/_background_noise_` holds recordings, every split
/// receives `silence` references to them, as many as the split's average
/// per-command-word count, assigned round-robin over the recordings.
pub fn build_manifest(root: &Path, validation_list: &Path, testing_list: &Path) -> Result<DatasetManifest> {
    let validation = read_list(validation_list)?;
    let testing = read_list(testing_list)?;
    if let Some(dup) = validation.intersection(&testing).min() {
        return Err(KwsError::Manifest(format!("overlapping splits: {dup} is in both lists")));
    }

    let mut words: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| KwsError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    words.sort();

    let mut entries = Vec::new();
    for dir in words {
        let word = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if word.starts_with('_') {
            continue;
        }
        let files = wav_files(&dir)?;
        if files.is_empty() {
            return Err(KwsError::Manifest(format!("word directory {} is empty", dir.display())));
        }
        let label = label_index(&word);
        for f in files {
            let rel = format!("{word}/{}", f.file_name().and_then(|n| n.to_str()).unwrap_or_default());
            let split = if testing.contains(&rel) {
                Split::Test
            } else if validation.contains(&rel) {
                Split::Validation
            } else {
                Split::Train
            };
            entries.push(ManifestEntry { source: ClipSource::File(f), label, split });
        }
    }

    let background = root.join(BACKGROUND_DIR);
    if background.is_dir() {
        let noise = wav_files(&background)?;
        if !noise.is_empty() {
            let mut silence = Vec::new();
            for split in Split::ALL {
                let mut per_word: BTreeMap<usize, usize> = BTreeMap::new();
                for e in entries.iter().filter(|e| e.split == split && e.label < N_COMMANDS) {
                    *per_word.entry(e.label).or_default() += 1;
                }
                if per_word.is_empty() {
                    continue;
                }
                let avg = per_word.values().sum::<usize>() as f64 / per_word.len() as f64;
                for i in 0..avg.round() as usize {
                    silence.push(ManifestEntry {
                        source: ClipSource::Silence(noise[i % noise.len()].clone()),
                        label: SILENCE,
                        split,
                    });
                }
            }
            entries.extend(silence);
        }
    }

    Ok(DatasetManifest { entries, label_names: LABELS.iter().map(|s| s.to_string()).collect() })
}

/// [`build_manifest`] with the split lists at their conventional locations.
pub fn build_manifest_in(root: &Path) -> Result<DatasetManifest> {
    build_manifest(root, &root.join(VALIDATION_LIST), &root.join(TESTING_LIST))
}

/// In-memory clips from a flat directory of WAVs (noise or impulse responses).
#[derive(Clone, Debug, Default)]
pub struct ClipBank {
    pub clips: Vec<Waveform>,
}

pub type NoiseBank = ClipBank;
pub type RirBank = ClipBank;

impl ClipBank {
    pub fn new(clips: Vec<Waveform>) -> Self {
        Self { clips }
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let clips = wav_files(dir)?.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Waveform> {
        (!self.clips.is_empty()).then(|| &self.clips[rng.random_range(0..self.clips.len())])
    }
}
