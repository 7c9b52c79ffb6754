//! The ConvMixer keyword-spotting network.
//!
//! ```text
//! features [B, T, F] --transpose--> [B, F, T]
//!   pre:    depthwise conv1d(k_pre) -> pointwise F->C -> BN -> swish
//!   blocks: x -> y1 (2-D frequency path) -> y2 (1-D temporal path)
//!           out = x + y1 + mixer(y2)
//!   post:   depthwise conv1d(k_post) -> pointwise C->C -> BN -> swish
//!   head:   mean over time -> linear C->classes
//! ```
//!
//! Inside a block the `[C, T]` map is treated as a one-channel image. A 2-D
//! convolution lifts it to `depth` channels, a 2-D depthwise-separable pair
//! processes it, and a pointwise convolution compresses it back to one
//! channel before batch norm. Convolutions that feed a batch norm carry no
//! bias, since normalization would cancel it.

mod checkpoint;
mod config;
mod count;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CONFIG_ENTRY};
pub use config::ModelConfig;
pub use count::{conv_macs, conv_params, count_macs, count_params, layer_ledger, linear_macs, linear_params, LayerCost};

pub(crate) use config::MODEL_KEYS;

use kws_tensor::{BatchStats, ConvDims, ConvSpec, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{KwsError, Result};
use crate::frontend::FeatureMatrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named non-trainable state (batch-norm running statistics).
pub type Buffer<T> = Parameter<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    /// Index of `running_mean` in the buffer list; `running_var` follows it.
    running: usize,
}

#[derive(Clone, Copy, Debug)]
struct LnRef {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinRef {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct MixerRef {
    ln_t: LnRef,
    w1: LinRef,
    w2: LinRef,
    ln_f: LnRef,
    w3: LinRef,
    w4: LinRef,
}

#[derive(Clone, Copy, Debug)]
struct BlockRef {
    expand: ConvRef,
    f1_dw: ConvRef,
    f1_pw: ConvRef,
    compress: ConvRef,
    bn_freq: BnRef,
    f2_dw: ConvRef,
    f2_pw: ConvRef,
    bn_temp: BnRef,
    mixer: Option<MixerRef>,
}

#[derive(Clone, Debug)]
struct Layout {
    pre_dw: ConvRef,
    pre_pw: ConvRef,
    pre_bn: BnRef,
    blocks: Vec<BlockRef>,
    post_dw: ConvRef,
    post_pw: ConvRef,
    post_bn: BnRef,
    head: LinRef,
}

struct Builder<'r, T, R: ?Sized> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    rng: &'r mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    /// Uniform He initialization, bound `sqrt(6 / fan_in)`.
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn conv(&mut self, name: &str, dims: ConvDims, cin: usize, cout: usize, groups: usize, k: (usize, usize), bias: bool) -> ConvRef {
        let cin_g = cin / groups;
        let shape = match dims {
            ConvDims::One => vec![cout, cin_g, k.1],
            ConvDims::Two => vec![cout, cin_g, k.0, k.1],
        };
        let kvol: usize = shape[2..].iter().product();
        let w = self.he(format!("{name}.weight"), shape, cin_g * kvol);
        let b = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        ConvRef { w, b, spec: ConvSpec { dims, groups } }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(vec![c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(vec![c]));
        self.buffers.push(Parameter { name: format!("{name}.running_mean"), value: Tensor::zeros(vec![c]) });
        self.buffers.push(Parameter { name: format!("{name}.running_var"), value: Tensor::full(vec![c], T::one()) });
        BnRef { gamma, beta, running: self.buffers.len() - 2 }
    }

    fn ln(&mut self, name: &str, n: usize) -> LnRef {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(vec![n], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(vec![n]));
        LnRef { gamma, beta }
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> LinRef {
        let w = self.he(format!("{name}.weight"), vec![n_out, n_in], n_in);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![n_out]));
        LinRef { w, b }
    }
}

/// One forward pass: the tape, the parameter leaves bound on it and the
/// batch statistics gathered in training mode.
pub struct Graph<T> {
    pub tape: Tape<T>,
    vars: Vec<Var>,
    mode: Mode,
    stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> Graph<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape handle of parameter `i` (in [`ConvMixerModel::params`] order).
    pub fn param_var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Parameters, running statistics and wiring of a ConvMixer network.
#[derive(Clone, Debug)]
pub struct ConvMixerModel<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    layout: Layout,
}

impl<T: Real> ConvMixerModel<T> {
    /// Builds and initializes a model; parameters are drawn from `rng` in a
    /// fixed order so equal seeds give bit-identical models.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let f = config.n_mels;
        let one = ConvDims::One;
        let two = ConvDims::Two;
        let mut b = Builder { params: Vec::new(), buffers: Vec::new(), rng };

        let pre_dw = b.conv("pre.dw", one, f, f, f, (1, config.kernel_pre), false);
        let pre_pw = b.conv("pre.pw", one, f, c, 1, (1, 1), false);
        let pre_bn = b.bn("pre.bn", c);

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = format!("blocks.{i}");
            let d = config.depth;
            let k2 = config.kernel_block_2d;
            let expand = b.conv(&format!("{p}.expand"), two, 1, d, 1, k2, true);
            let f1_dw = b.conv(&format!("{p}.f1_dw"), two, d, d, d, k2, true);
            let f1_pw = b.conv(&format!("{p}.f1_pw"), two, d, d, 1, (1, 1), true);
            let compress = b.conv(&format!("{p}.compress"), two, d, 1, 1, (1, 1), false);
            let bn_freq = b.bn(&format!("{p}.bn_freq"), c);
            let f2_dw = b.conv(&format!("{p}.f2_dw"), one, c, c, c, (1, config.kernel_block_1d), false);
            let f2_pw = b.conv(&format!("{p}.f2_pw"), one, c, c, 1, (1, 1), false);
            let bn_temp = b.bn(&format!("{p}.bn_temp"), c);
            let mixer = config.mixer_enabled.then(|| {
                let t = config.n_frames;
                MixerRef {
                    ln_t: b.ln(&format!("{p}.mixer.ln_t"), t),
                    w1: b.linear(&format!("{p}.mixer.w1"), t, config.mixer_hidden_t),
                    w2: b.linear(&format!("{p}.mixer.w2"), config.mixer_hidden_t, t),
                    ln_f: b.ln(&format!("{p}.mixer.ln_f"), c),
                    w3: b.linear(&format!("{p}.mixer.w3"), c, config.mixer_hidden_f),
                    w4: b.linear(&format!("{p}.mixer.w4"), config.mixer_hidden_f, c),
                }
            });
            blocks.push(BlockRef { expand, f1_dw, f1_pw, compress, bn_freq, f2_dw, f2_pw, bn_temp, mixer });
        }

        let post_dw = b.conv("post.dw", one, c, c, c, (1, config.kernel_post), false);
        let post_pw = b.conv("post.pw", one, c, c, 1, (1, 1), false);
        let post_bn = b.bn("post.bn", c);
        let head = b.linear("head", c, config.n_classes);

        let layout = Layout { pre_dw, pre_pw, pre_bn, blocks, post_dw, post_pw, post_bn, head };
        Ok(Self { config: config.clone(), params: b.params, buffers: b.buffers, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> ConvMixerModel<U> {
        let conv = |v: &[Parameter<T>]| v.iter().map(|p| Parameter { name: p.name.clone(), value: p.value.cast() }).collect();
        ConvMixerModel { config: self.config.clone(), params: conv(&self.params), buffers: conv(&self.buffers), layout: self.layout.clone() }
    }

    /// Starts a pass with every parameter bound as a leaf.
    pub fn graph(&self, mode: Mode, requires_grad: bool) -> Graph<T> {
        let mut tape = Tape::new();
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect();
        Graph { tape, vars, mode, stats: Vec::new() }
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: ConvRef) -> Result<Var> {
        let b = c.b.map(|b| g.vars[b]);
        Ok(g.tape.conv(x, g.vars[c.w], b, c.spec)?)
    }

    fn bn(&self, g: &mut Graph<T>, x: Var, r: BnRef) -> Result<Var> {
        let (gamma, beta) = (g.vars[r.gamma], g.vars[r.beta]);
        match g.mode {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                g.stats.push((r.running, stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers[r.running].value.data();
                let var = self.buffers[r.running + 1].value.data();
                Ok(g.tape.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?)
            }
        }
    }

    fn ln(&self, g: &mut Graph<T>, x: Var, r: LnRef) -> Result<Var> {
        Ok(g.tape.layer_norm(x, g.vars[r.gamma], g.vars[r.beta], LN_EPS)?)
    }

    fn lin(&self, g: &mut Graph<T>, x: Var, r: LinRef) -> Result<Var> {
        Ok(g.tape.linear(x, g.vars[r.w], Some(g.vars[r.b]))?)
    }

    /// `x + W2 gelu(W1 LN(x))` along the last axis.
    fn token_mlp(&self, g: &mut Graph<T>, x: Var, ln: LnRef, up: LinRef, down: LinRef) -> Result<Var> {
        let h = self.ln(g, x, ln)?;
        let h = self.lin(g, h, up)?;
        let h = g.tape.gelu(h);
        let h = self.lin(g, h, down)?;
        Ok(g.tape.add(x, h)?)
    }

    /// Mixer layer of block `block` on `x: [B, C, T]`.
    ///
    /// The first stage mixes along time with weights shared across every
    /// frequency channel; the map is then transposed so the second stage
    /// mixes along frequency with weights shared across every frame, and
    /// transposed back. Without a mixer this is the identity.
    pub fn mixer_forward(&self, g: &mut Graph<T>, block: usize, x: Var) -> Result<Var> {
        let Some(m) = self.layout.blocks.get(block).ok_or_else(|| KwsError::Config(format!("no block {block}")))?.mixer else {
            return Ok(x);
        };
        self.expect_shape(g, x, "mixer")?;
        let u = self.token_mlp(g, x, m.ln_t, m.w1, m.w2)?;
        let ut = g.tape.transpose_last2(u)?;
        let y = self.token_mlp(g, ut, m.ln_f, m.w3, m.w4)?;
        Ok(g.tape.transpose_last2(y)?)
    }

    fn expect_shape(&self, g: &Graph<T>, x: Var, what: &str) -> Result<()> {
        let s = g.tape.shape(x);
        if s.len() != 3 || s[1] != self.config.channels || s[2] != self.config.n_frames {
            return Err(KwsError::Config(format!(
                "{what}: expected [B, {}, {}], got {s:?}",
                self.config.channels, self.config.n_frames
            )));
        }
        Ok(())
    }

    /// Frequency path `y1` and temporal path `y2` of a block.
    pub fn block_paths(&self, g: &mut Graph<T>, block: usize, x: Var) -> Result<(Var, Var)> {
        let r = *self.layout.blocks.get(block).ok_or_else(|| KwsError::Config(format!("no block {block}")))?;
        self.expect_shape(g, x, "block")?;
        let (nb, c, t) = (g.tape.shape(x)[0], self.config.channels, self.config.n_frames);

        let img = g.tape.reshape(x, vec![nb, 1, c, t])?;
        let e = self.conv(g, img, r.expand)?;
        let e = g.tape.swish(e);
        let z = self.conv(g, e, r.f1_dw)?;
        let z = self.conv(g, z, r.f1_pw)?;
        let z = g.tape.swish(z);
        let y1 = self.conv(g, z, r.compress)?;
        let y1 = g.tape.reshape(y1, vec![nb, c, t])?;
        let y1 = self.bn(g, y1, r.bn_freq)?;
        let y1 = g.tape.swish(y1);

        let y2 = self.conv(g, y1, r.f2_dw)?;
        let y2 = self.conv(g, y2, r.f2_pw)?;
        let y2 = self.bn(g, y2, r.bn_temp)?;
        let y2 = g.tape.swish(y2);
        Ok((y1, y2))
    }

    /// `x + y1 + mixer(y2)` on `x: [B, C, T]`.
    pub fn block_forward(&self, g: &mut Graph<T>, block: usize, x: Var) -> Result<Var> {
        let (y1, y2) = self.block_paths(g, block, x)?;
        let m = self.mixer_forward(g, block, y2)?;
        let s = g.tape.add(x, y1)?;
        Ok(g.tape.add(s, m)?)
    }

    /// Logits `[B, classes]` for features `[B, n_frames, n_mels]`.
    pub fn forward(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let s = g.tape.shape(features).to_vec();
        if s.len() != 3 || s[1] != self.config.n_frames || s[2] != self.config.n_mels || s[0] == 0 {
            return Err(KwsError::Config(format!(
                "features must be [B, {}, {}], got {s:?}",
                self.config.n_frames, self.config.n_mels
            )));
        }
        let l = self.layout.clone();
        let x = g.tape.transpose_last2(features)?;
        let x = self.conv(g, x, l.pre_dw)?;
        let x = self.conv(g, x, l.pre_pw)?;
        let x = self.bn(g, x, l.pre_bn)?;
        let mut x = g.tape.swish(x);
        for i in 0..l.blocks.len() {
            x = self.block_forward(g, i, x)?;
        }
        let x = self.conv(g, x, l.post_dw)?;
        let x = self.conv(g, x, l.post_pw)?;
        let x = self.bn(g, x, l.post_bn)?;
        let x = g.tape.swish(x);
        let pooled = g.tape.mean_last(x)?;
        self.lin(g, pooled, l.head)
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates: `running = (1 - m) running + m batch`, unbiased variance.
    pub fn commit_stats(&mut self, g: &Graph<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (idx, s) in &g.stats {
            let unbias = if s.count > 1 { T::lit(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            for (r, &v) in self.buffers[*idx].value.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in self.buffers[*idx + 1].value.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }

    /// Parameter gradients after `g.tape.backward`, in parameter order.
    pub fn gradients(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        g.vars.iter().map(|&v| g.tape.grad_tensor(v)).collect()
    }

    /// Eval-mode logits for a batch of feature matrices.
    pub fn predict(&self, batch: &[FeatureMatrix]) -> Result<Tensor<T>> {
        let mut g = self.graph(Mode::Eval, false);
        let x = g.tape.constant(features_tensor(batch)?);
        let y = self.forward(&mut g, x)?;
        Ok(g.tape.value(y).clone())
    }
}

/// Stacks feature matrices into a `[B, frames, bins]` tensor.
pub fn features_tensor<T: Real>(batch: &[FeatureMatrix]) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| KwsError::Config("empty feature batch".into()))?;
    let (t, f) = (first.frames, first.bins);
    let mut data = Vec::with_capacity(batch.len() * t * f);
    for m in batch {
        if (m.frames, m.bins) != (t, f) {
            return Err(KwsError::Config(format!("mixed feature shapes {t}x{f} and {}x{}", m.frames, m.bins)));
        }
        data.extend(m.values.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(vec![batch.len(), t, f], data)?)
}
