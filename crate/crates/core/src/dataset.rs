//! In-memory clips of one manifest split.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::audio::{read_wav, sample_segment, tile_to, ClipSource, DatasetManifest, Split, Waveform};
use crate::error::Result;
use crate::frontend::{pad_or_trim, CLIP_SAMPLES};

#[derive(Clone, Debug)]
enum Audio {
    /// Utterance padded or trimmed to one second, with its pre-padding length.
    Clip(Arc<Waveform>, usize),
    /// Background recording (tiled to at least one second) to crop from.
    Silence(Arc<Waveform>),
}

/// Decoded audio and labels of one split, in manifest order.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    audio: Vec<Audio>,
    labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let entries: Vec<_> = manifest.split(split).collect();
        let mut backgrounds: HashMap<PathBuf, Arc<Waveform>> = HashMap::new();
        for e in &entries {
            if let ClipSource::Silence(p) = &e.source {
                if !backgrounds.contains_key(p) {
                    backgrounds.insert(p.clone(), Arc::new(tile_to(&read_wav(p)?, CLIP_SAMPLES)?));
                }
            }
        }
        let audio = entries
            .par_iter()
            .map(|e| match &e.source {
                ClipSource::File(p) => {
                    let w = read_wav(p)?;
                    let active = w.len().min(CLIP_SAMPLES);
                    Ok(Audio::Clip(Arc::new(pad_or_trim(&w, CLIP_SAMPLES)), active))
                }
                ClipSource::Silence(p) => Ok(Audio::Silence(backgrounds[p].clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { audio, labels: entries.iter().map(|e| e.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One-second waveform of clip `i` and the number of leading samples
    /// that hold signal. Silence clips take a fresh crop from `rng`.
    pub fn clip<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<(Waveform, usize)> {
        match &self.audio[i] {
            Audio::Clip(w, active) => Ok(((**w).clone(), *active)),
            Audio::Silence(bg) => Ok((sample_segment(bg, CLIP_SAMPLES, rng)?, CLIP_SAMPLES)),
        }
    }
}
