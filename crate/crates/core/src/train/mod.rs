//! Curriculum-based multi-condition training.
//!
//! Each epoch draws one condition per sample from the current stage's mix,
//! augments and featurizes the clip, applies SpecAugment and mixup, and
//! takes Adam steps on a binary cross-entropy loss. After the epoch the
//! model is scored on the validation split under the same condition mix;
//! the [`Curriculum`] turns that score into a save, a stage advance or
//! nothing.

mod curriculum;
mod optim;
mod schedule;

pub use curriculum::{minmax_norm, progress_criterion, Curriculum, Decision};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::lr_at_epoch;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use kws_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::audio::{NoiseBank, RirBank, Split, N_COMMANDS, UNKNOWN};
use crate::augment::{apply_condition_detailed, multi_condition_set, stage_conditions, Condition, ConditionSet, N_STAGES};
use crate::dataset::LoadedSplit;
use crate::error::{KwsError, Result};
use crate::frontend::{mixup, spec_augment, time_shift, FeatureMatrix, FrontendConfig, LogMelFrontend};
use crate::kv::KeyValues;
use crate::model::{features_tensor, read_checkpoint, write_checkpoint, ConvMixerModel, Mode, ModelConfig};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub decay_start_epoch: usize,
    pub max_epochs: usize,
    /// Forces a stage advance after this many epochs in one stage; 0 disables.
    pub epochs_per_stage: usize,
    pub patience: usize,
    pub mixup_alpha: f64,
    pub mixup: bool,
    pub spec_augment: bool,
    pub time_shift: bool,
    pub curriculum: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            base_lr: 6e-3,
            lr_decay: 0.85,
            decay_interval: 4,
            decay_start_epoch: 5,
            max_epochs: 200,
            epochs_per_stage: 0,
            patience: 10,
            mixup_alpha: 0.5,
            mixup: true,
            spec_augment: true,
            time_shift: true,
            curriculum: true,
            seed: 0,
        }
    }
}

pub(crate) const TRAIN_KEYS: &[&str] = &[
    "train.batch_size",
    "lr.base",
    "lr.decay",
    "lr.decay_interval",
    "lr.decay_start",
    "epochs.max",
    "epochs.per_stage",
    "train.patience",
    "mixup.alpha",
    "mixup.enabled",
    "augment.spec_augment",
    "augment.time_shift",
    "train.curriculum",
    "train.seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(KwsError::Config(format!("{what} must be positive")));
        if self.batch_size == 0 {
            return bad("train.batch_size");
        }
        if self.decay_interval == 0 {
            return bad("lr.decay_interval");
        }
        if self.max_epochs == 0 {
            return bad("epochs.max");
        }
        if self.patience == 0 {
            return bad("train.patience");
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0) || !(self.mixup_alpha > 0.0) {
            return bad("lr.base, lr.decay and mixup.alpha");
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read("train.batch_size", &mut self.batch_size)?;
        kv.read("lr.base", &mut self.base_lr)?;
        kv.read("lr.decay", &mut self.lr_decay)?;
        kv.read("lr.decay_interval", &mut self.decay_interval)?;
        kv.read("lr.decay_start", &mut self.decay_start_epoch)?;
        kv.read("epochs.max", &mut self.max_epochs)?;
        kv.read("epochs.per_stage", &mut self.epochs_per_stage)?;
        kv.read("train.patience", &mut self.patience)?;
        kv.read("mixup.alpha", &mut self.mixup_alpha)?;
        kv.read("mixup.enabled", &mut self.mixup)?;
        kv.read("augment.spec_augment", &mut self.spec_augment)?;
        kv.read("augment.time_shift", &mut self.time_shift)?;
        kv.read("train.curriculum", &mut self.curriculum)?;
        kv.read("train.seed", &mut self.seed)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("train.batch_size", self.batch_size);
        kv.set("lr.base", self.base_lr);
        kv.set("lr.decay", self.lr_decay);
        kv.set("lr.decay_interval", self.decay_interval);
        kv.set("lr.decay_start", self.decay_start_epoch);
        kv.set("epochs.max", self.max_epochs);
        kv.set("epochs.per_stage", self.epochs_per_stage);
        kv.set("train.patience", self.patience);
        kv.set("mixup.alpha", self.mixup_alpha);
        kv.set("mixup.enabled", self.mixup);
        kv.set("augment.spec_augment", self.spec_augment);
        kv.set("augment.time_shift", self.time_shift);
        kv.set("train.curriculum", self.curriculum);
        kv.set("train.seed", self.seed);
        kv
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at_epoch(epoch, self.base_lr, self.lr_decay, self.decay_start_epoch, self.decay_interval)
    }
}

/// Splits a combined config into model and training parts, rejecting
/// unknown keys.
pub fn configs_from_kv(kv: &KeyValues, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    if let Some(k) = kv.keys().find(|k| !TRAIN_KEYS.contains(k) && !crate::model::MODEL_KEYS.contains(k)) {
        return Err(KwsError::Config(format!("unknown key `{k}`")));
    }
    model.apply(kv)?;
    train.apply(kv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    None,
    Save,
    Advance,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Event::None => "none",
            Event::Save => "save",
            Event::Advance => "advance",
        })
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Stage whose condition mix was trained on.
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub c: f64,
    pub bst_crit: f64,
    pub event: Event,
}

pub const METRICS_HEADER: &str = "epoch,stage,lr,train_loss,val_loss,val_acc,c,bst_crit,event";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch, self.stage, self.lr, self.train_loss, self.val_loss, self.val_acc, self.c, self.bst_crit, self.event
        )
    }
}

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Audio inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub manifest: &'a crate::audio::DatasetManifest,
    pub noises: &'a NoiseBank,
    pub rirs: &'a RirBank,
}

pub struct TrainOutcome {
    /// The last saved best model.
    pub model: ConvMixerModel<f32>,
    pub log: Vec<EpochRecord>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";

fn one_hot(label: usize, n: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    v
}

/// Clip order of one epoch: every labelled clip, with the unknown class
/// subsampled to the average command-class size, shuffled.
pub fn epoch_plan(labels: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[purpose::EPOCH_PLAN, epoch as u64]);
    let mut counts = [0usize; N_COMMANDS];
    for &l in labels {
        if l < N_COMMANDS {
            counts[l] += 1;
        }
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let mut unknown: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == UNKNOWN).collect();
    if !present.is_empty() {
        let target = (present.iter().sum::<usize>() as f64 / present.len() as f64).round() as usize;
        unknown.shuffle(&mut rng);
        unknown.truncate(target);
    }
    let mut plan: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != UNKNOWN).chain(unknown).collect();
    plan.sort_unstable();
    plan.shuffle(&mut rng);
    plan
}

/// Shared pieces for turning a clip into model input.
pub(crate) struct Featurizer<'a> {
    pub frontend: LogMelFrontend,
    pub noises: &'a NoiseBank,
    pub rirs: &'a RirBank,
}

impl Featurizer<'_> {
    pub fn features<R: Rng + ?Sized>(
        &self,
        split: &LoadedSplit,
        i: usize,
        cond: Condition,
        shift: bool,
        rng: &mut R,
    ) -> Result<FeatureMatrix> {
        let (w, active) = split.clip(i, rng)?;
        let w = apply_condition_detailed(&w, active, cond, self.noises, self.rirs, rng)?.waveform;
        let w = if shift { time_shift(&w, rng) } else { w };
        Ok(self.frontend.compute(&w))
    }
}

/// Validation accuracy and mean BCE under `set`, with per-clip draws fixed
/// by `(seed, stage, clip)`.
pub fn validate(
    model: &ConvMixerModel<f32>,
    split: &LoadedSplit,
    set: &ConditionSet,
    data: TrainData<'_>,
    seed: u64,
    stage: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let fz = Featurizer { frontend: LogMelFrontend::new(FrontendConfig::default())?, noises: data.noises, rirs: data.rirs };
    let n = split.len();
    let n_classes = model.config().n_classes;
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let feats = chunk
            .par_iter()
            .map(|&i| {
                let mut rng = stream(seed, &[purpose::VALIDATION, stage as u64, i as u64]);
                let cond = set.sample(&mut rng);
                fz.features(split, i, cond, false, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = model.predict(&feats)?;
        for (row, &i) in logits.data().chunks(n_classes).zip(chunk) {
            let label = split.labels()[i];
            correct += usize::from(argmax(row) == label);
            loss += row
                .iter()
                .enumerate()
                .map(|(k, &z)| {
                    let (z, y) = (z as f64, if k == label { 1.0 } else { 0.0 });
                    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
                })
                .sum::<f64>()
                / n_classes as f64;
        }
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    train: LoadedSplit,
    fz: Featurizer<'a>,
    out_dir: Option<PathBuf>,
}

impl Run<'_> {
    fn batch(&self, epoch: usize, b: usize, items: &[usize], set: &ConditionSet) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n_classes = crate::audio::LABELS.len();
        let samples = items
            .par_iter()
            .map(|&i| {
                let mut rng = stream(self.cfg.seed, &[purpose::TRAIN_SAMPLE, epoch as u64, i as u64]);
                let cond = set.sample(&mut rng);
                let f = self.fz.features(&self.train, i, cond, self.cfg.time_shift, &mut rng)?;
                let f = if self.cfg.spec_augment { spec_augment(&f, &mut rng) } else { f };
                Ok((f, one_hot(self.train.labels()[i], n_classes)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut feats, mut targets): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        if self.cfg.mixup && feats.len() > 1 {
            let mut rng = stream(self.cfg.seed, &[purpose::MIXUP, epoch as u64, b as u64]);
            let mut partner: Vec<usize> = (0..feats.len()).collect();
            partner.shuffle(&mut rng);
            let mut mixed = Vec::with_capacity(feats.len());
            for (i, &j) in partner.iter().enumerate() {
                mixed.push(mixup(&feats[i], &feats[j], &targets[i], &targets[j], self.cfg.mixup_alpha, &mut rng)?);
            }
            (feats, targets) = mixed.into_iter().unzip();
        }
        let x = features_tensor(&feats)?;
        let y = Tensor::new(vec![targets.len(), n_classes], targets.concat())?;
        Ok((x, y))
    }

    fn dump(&self, model: &ConvMixerModel<f32>, why: String) -> KwsError {
        let Some(dir) = &self.out_dir else {
            return KwsError::Training(why);
        };
        let path = dir.join(ABORT_CHECKPOINT);
        match fs::File::create(&path).map_err(|e| KwsError::io(&path, e)).and_then(|f| write_checkpoint(model, f)) {
            Ok(()) => KwsError::Training(format!("{why}; state dumped to {}", path.display())),
            Err(e) => KwsError::Training(format!("{why}; state dump failed: {e}")),
        }
    }

    fn epoch(&self, model: &mut ConvMixerModel<f32>, opt: &mut Adam<f32>, epoch: usize, set: &ConditionSet) -> Result<f64> {
        let plan = epoch_plan(self.train.labels(), self.cfg.seed, epoch);
        let lr = self.cfg.lr(epoch);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (b, items) in plan.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = self.batch(epoch, b, items, set)?;
            let mut g = model.graph(Mode::Train, true);
            let xv = g.tape.constant(x);
            let logits = model.forward(&mut g, xv)?;
            let loss = g.tape.bce_with_logits(logits, &y)?;
            let value = g.tape.value(loss).item().unwrap_or(f32::NAN);
            if !value.is_finite() {
                return Err(self.dump(model, format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            g.tape.backward(loss)?;
            let grads = model.gradients(&g);
            if let Err(e) = opt.step(model.params_mut(), &grads, lr) {
                return Err(self.dump(model, format!("epoch {epoch}, batch {b}: {e}")));
            }
            model.commit_stats(&g);
            total += value as f64 * items.len() as f64;
            count += items.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

fn checkpoint_bytes(model: &ConvMixerModel<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    Ok(buf)
}

/// Runs training to completion. With `out_dir`, the best checkpoint and the
/// metrics log are kept up to date there. `on_epoch` sees every record.
pub fn train(
    data: TrainData<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = LoadedSplit::load(data.manifest, Split::Train)?;
    let val = LoadedSplit::load(data.manifest, Split::Validation)?;
    if train.is_empty() || val.is_empty() {
        return Err(KwsError::Training("training and validation splits must be non-empty".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
    }
    let run = Run {
        cfg,
        train,
        fz: Featurizer { frontend: LogMelFrontend::new(FrontendConfig::default())?, noises: data.noises, rirs: data.rirs },
        out_dir: out_dir.map(Path::to_path_buf),
    };

    let mut model = ConvMixerModel::<f32>::build(model_cfg, &mut stream(cfg.seed, &[purpose::INIT]))?;
    let mut opt = Adam::new(model.params());
    let patience = if cfg.curriculum { cfg.patience } else { usize::MAX };
    let mut cur = Curriculum::new(patience);
    let mut best = checkpoint_bytes(&model)?;
    let mut log = Vec::new();
    let mut in_stage = 0;
    let mut metrics = match out_dir {
        Some(dir) => {
            let path = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&path).map_err(|e| KwsError::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| KwsError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    for epoch in 1..=cfg.max_epochs {
        let stage = if cfg.curriculum { cur.stage } else { N_STAGES - 1 };
        let set = if cfg.curriculum { stage_conditions(stage)? } else { multi_condition_set() };
        let train_loss = run.epoch(&mut model, &mut opt, epoch, &set)?;
        let (val_acc, val_loss) = validate(&model, &val, &set, data, cfg.seed, stage, cfg.batch_size)?;
        let (c, mut decision) = cur.observe(val_acc, val_loss)?;
        let bst_crit = cur.bst_crit;
        in_stage += 1;
        let mut event = Event::None;
        if decision == Decision::SaveBest {
            best = checkpoint_bytes(&model)?;
            if let Some(dir) = out_dir {
                let path = dir.join(BEST_CHECKPOINT);
                fs::write(&path, &best).map_err(|e| KwsError::io(&path, e))?;
            }
            event = Event::Save;
            if cfg.curriculum && cfg.epochs_per_stage > 0 && in_stage >= cfg.epochs_per_stage {
                decision = cur.advance();
            }
        } else if decision == Decision::Continue && cfg.curriculum && cfg.epochs_per_stage > 0 && in_stage >= cfg.epochs_per_stage {
            decision = cur.advance();
        }
        if matches!(decision, Decision::AdvanceStage | Decision::Finish) {
            model = read_checkpoint(best.as_slice())?;
            in_stage = 0;
            if decision == Decision::AdvanceStage {
                event = Event::Advance;
            }
        }
        let rec = EpochRecord { epoch, stage, lr: cfg.lr(epoch), train_loss, val_loss, val_acc, c, bst_crit, event };
        if let Some((f, path)) = &mut metrics {
            writeln!(f, "{}", rec.csv_row()).map_err(|e| KwsError::io(&*path, e))?;
        }
        on_epoch(&rec);
        log.push(rec);
        if cur.finished() {
            break;
        }
    }
    Ok(TrainOutcome { model: read_checkpoint(best.as_slice())?, log })
}
