use crate::error::{KwsError, Result};
use crate::frontend::{N_FRAMES, N_MELS};
use crate::kv::KeyValues;

/// Shape of a ConvMixer network.
///
/// The input is a `n_frames x n_mels` feature grid; mel bins are the channel
/// axis of the 1-D convolutions and `channels` is the width after the
/// pre-convolution block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub n_blocks: usize,
    pub channels: usize,
    /// Width of the depth axis created by the lifting 2-D convolution.
    pub depth: usize,
    pub kernel_pre: usize,
    pub kernel_block_1d: usize,
    /// (frequency, time) extents of the 2-D kernels inside a block.
    pub kernel_block_2d: (usize, usize),
    pub kernel_post: usize,
    pub mixer_hidden_t: usize,
    pub mixer_hidden_f: usize,
    pub mixer_enabled: bool,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    /// Roughly 111K parameters and 22.6M multiply-accumulates per clip.
    fn default() -> Self {
        Self {
            n_mels: N_MELS,
            n_frames: N_FRAMES,
            n_blocks: 3,
            channels: 64,
            depth: 12,
            kernel_pre: 5,
            kernel_block_1d: 9,
            kernel_block_2d: (5, 5),
            kernel_post: 9,
            mixer_hidden_t: N_FRAMES,
            mixer_hidden_f: 64,
            mixer_enabled: true,
            n_classes: 12,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "model.n_mels",
    "model.n_frames",
    "model.n_blocks",
    "model.channels",
    "model.depth",
    "model.kernel_pre",
    "model.kernel_block_1d",
    "model.kernel_block_2d",
    "model.kernel_post",
    "model.n_classes",
    "mixer.hidden_t",
    "mixer.hidden_f",
    "mixer.enabled",
];

fn parse_kernel2d(v: &str) -> Result<(usize, usize)> {
    let bad = || KwsError::Config(format!("model.kernel_block_2d = {v}: expected `K` or `KxK`"));
    match v.split_once('x') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => {
            let k = v.trim().parse().map_err(|_| bad())?;
            Ok((k, k))
        }
    }
}

impl ModelConfig {
    /// A small network for fast runs on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            n_blocks: 2,
            channels: 24,
            depth: 4,
            kernel_block_2d: (3, 3),
            mixer_hidden_t: 32,
            mixer_hidden_f: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_mels", self.n_mels),
            ("n_frames", self.n_frames),
            ("channels", self.channels),
            ("depth", self.depth),
            ("kernel_pre", self.kernel_pre),
            ("kernel_block_1d", self.kernel_block_1d),
            ("kernel_block_2d", self.kernel_block_2d.0),
            ("kernel_block_2d", self.kernel_block_2d.1),
            ("kernel_post", self.kernel_post),
            ("mixer_hidden_t", self.mixer_hidden_t),
            ("mixer_hidden_f", self.mixer_hidden_f),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(KwsError::Config(format!("model extent `{name}` must be at least 1")));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read("model.n_mels", &mut self.n_mels)?;
        kv.read("model.n_frames", &mut self.n_frames)?;
        kv.read("model.n_blocks", &mut self.n_blocks)?;
        kv.read("model.channels", &mut self.channels)?;
        kv.read("model.depth", &mut self.depth)?;
        kv.read("model.kernel_pre", &mut self.kernel_pre)?;
        kv.read("model.kernel_block_1d", &mut self.kernel_block_1d)?;
        if let Some(v) = kv.get("model.kernel_block_2d") {
            self.kernel_block_2d = parse_kernel2d(v)?;
        }
        kv.read("model.kernel_post", &mut self.kernel_post)?;
        kv.read("model.n_classes", &mut self.n_classes)?;
        kv.read("mixer.hidden_t", &mut self.mixer_hidden_t)?;
        kv.read("mixer.hidden_f", &mut self.mixer_hidden_f)?;
        kv.read("mixer.enabled", &mut self.mixer_enabled)?;
        self.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("model.n_mels", self.n_mels);
        kv.set("model.n_frames", self.n_frames);
        kv.set("model.n_blocks", self.n_blocks);
        kv.set("model.channels", self.channels);
        kv.set("model.depth", self.depth);
        kv.set("model.kernel_pre", self.kernel_pre);
        kv.set("model.kernel_block_1d", self.kernel_block_1d);
        kv.set("model.kernel_block_2d", format!("{}x{}", self.kernel_block_2d.0, self.kernel_block_2d.1));
        kv.set("model.kernel_post", self.kernel_post);
        kv.set("model.n_classes", self.n_classes);
        kv.set("mixer.hidden_t", self.mixer_hidden_t);
        kv.set("mixer.hidden_f", self.mixer_hidden_f);
        kv.set("mixer.enabled", self.mixer_enabled);
        kv
    }
}
