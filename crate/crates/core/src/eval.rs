//! Accuracy over the test split under clean and far-field noisy conditions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::audio::{DatasetManifest, NoiseBank, RirBank, Split};
use crate::augment::Condition;
use crate::dataset::LoadedSplit;
use crate::error::{KwsError, Result};
use crate::frontend::{FeatureMatrix, FrontendConfig, LogMelFrontend};
use crate::model::{count_macs, count_params, ConvMixerModel};
use crate::rng::{purpose, stream};
use crate::train::{argmax, Featurizer};

const EVAL_BATCH: usize = 64;

/// Report columns: the clean column has neither noise nor reverberation,
/// every other column reverberates all clips and adds noise at its SNR.
pub fn eval_conditions() -> Vec<(&'static str, Condition)> {
    let far = |snr| Condition::noisy(snr).expect("test SNR").with_reverb(true);
    vec![("clean", Condition::clean()), ("20dB", far(20)), ("0dB", far(0)), ("-5dB", far(-5)), ("-10dB", far(-10))]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub model: String,
    pub params: usize,
    pub macs: usize,
    /// `(condition, accuracy in [0, 1], clips)` in report column order.
    pub accuracy: Vec<(String, f64, usize)>,
}

impl EvalResult {
    pub fn get(&self, condition: &str) -> Option<f64> {
        self.accuracy.iter().find(|(c, _, _)| c == condition).map(|(_, a, _)| *a)
    }
}

/// Top-1 accuracy of `classify` on `split` under `cond`. Each clip's noise,
/// impulse response and crop come from a stream keyed by `(seed, clip)`.
pub fn evaluate_with<F>(split: &LoadedSplit, cond: Condition, noises: &NoiseBank, rirs: &RirBank, seed: u64, classify: F) -> Result<f64>
where
    F: Fn(&[FeatureMatrix]) -> Result<Vec<Vec<f32>>>,
{
    if split.is_empty() {
        return Err(KwsError::Eval("empty test split".into()));
    }
    let fz = Featurizer { frontend: LogMelFrontend::new(FrontendConfig::default())?, noises, rirs };
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let feats = chunk
            .par_iter()
            .map(|&i| fz.features(split, i, cond, false, &mut stream(seed, &[purpose::EVAL, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let rows = classify(&feats)?;
        correct += rows.iter().zip(chunk).filter(|(row, &i)| argmax(row) == split.labels()[i]).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

fn model_rows(model: &ConvMixerModel<f32>, feats: &[FeatureMatrix]) -> Result<Vec<Vec<f32>>> {
    let logits = model.predict(feats)?;
    Ok(logits.data().chunks(model.config().n_classes).map(<[f32]>::to_vec).collect())
}

pub fn evaluate(model: &ConvMixerModel<f32>, split: &LoadedSplit, cond: Condition, noises: &NoiseBank, rirs: &RirBank, seed: u64) -> Result<f64> {
    evaluate_with(split, cond, noises, rirs, seed, |f| model_rows(model, f))
}

/// Every report column for one model on the manifest's test split.
pub fn evaluate_all(
    name: &str,
    model: &ConvMixerModel<f32>,
    manifest: &DatasetManifest,
    noises: &NoiseBank,
    rirs: &RirBank,
    seed: u64,
) -> Result<EvalResult> {
    let split = LoadedSplit::load(manifest, Split::Test)?;
    let accuracy = eval_conditions()
        .into_iter()
        .map(|(label, cond)| Ok((label.to_string(), evaluate(model, &split, cond, noises, rirs, seed)?, split.len())))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { model: name.to_string(), params: count_params(model.config()), macs: count_macs(model.config()), accuracy })
}

pub const REPORT_HEADER: &str = "model,params_k,macs_m,clean,20dB,0dB,-5dB,-10dB";

fn cells(r: &EvalResult) -> Vec<String> {
    let mut v = vec![r.model.clone(), format!("{:.1}", r.params as f64 / 1e3), format!("{:.2}", r.macs as f64 / 1e6)];
    for (name, _) in eval_conditions() {
        v.push(r.get(name).map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a)));
    }
    v
}

pub fn report_csv(results: &[EvalResult]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in results {
        s.push_str(&cells(r).join(","));
        s.push('\n');
    }
    s
}

/// Right-aligned plain-text table with the CSV's columns.
pub fn report_table(results: &[EvalResult]) -> String {
    let header: Vec<String> = ["model", "params (K)", "MACs (M)", "clean", "20dB", "0dB", "-5dB", "-10dB"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = std::iter::once(header).chain(results.iter().map(cells)).collect();
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r.iter().zip(&widths).enumerate().map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") }).collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    s
}

/// Writes `<stem>.csv` and `<stem>.txt` next to each other.
pub fn report(results: &[EvalResult], stem: &Path) -> Result<()> {
    let csv = stem.with_extension("csv");
    fs::write(&csv, report_csv(results)).map_err(|e| KwsError::io(&csv, e))?;
    let txt = stem.with_extension("txt");
    fs::write(&txt, report_table(results)).map_err(|e| KwsError::io(&txt, e))
}
