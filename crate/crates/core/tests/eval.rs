use std::path::Path;

use kws_core::audio::{build_manifest_in, ClipBank, Split};
use kws_core::dataset::LoadedSplit;
use kws_core::eval::{eval_conditions, evaluate, evaluate_all, evaluate_with, report, REPORT_HEADER};
use kws_core::model::{ConvMixerModel, ModelConfig};
use kws_core::synth::{synth_dataset, SynthConfig, SynthLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(dir: &Path) -> SynthLayout {
    synth_dataset(dir, &SynthConfig { n_classes: 2, per_class: 20, seed: 9 }).unwrap()
}

#[test]
fn oracle_and_constant_classifiers() {
    let dir = tempfile::tempdir().unwrap();
    let layout = corpus(dir.path());
    let manifest = build_manifest_in(&layout.speech).unwrap();
    let noises = ClipBank::load_dir(&layout.noise).unwrap();
    let rirs = ClipBank::load_dir(&layout.rir).unwrap();
    let split = LoadedSplit::load(&manifest, Split::Test).unwrap();
    let labels = split.labels().to_vec();
    let (_, cond) = eval_conditions()[4];

    // Feature batches arrive in split order, so a counter recovers the labels.
    let seen = std::cell::Cell::new(0usize);
    let oracle = evaluate_with(&split, cond, &noises, &rirs, 1, |f| {
        let start = seen.get();
        seen.set(start + f.len());
        Ok((start..start + f.len()).map(|i| (0..12).map(|k| if k == labels[i] { 1.0 } else { 0.0 }).collect()).collect())
    })
    .unwrap();
    assert_eq!(oracle, 1.0);

    let first = labels[0];
    let expected = labels.iter().filter(|&&l| l == first).count() as f64 / labels.len() as f64;
    let constant = evaluate_with(&split, cond, &noises, &rirs, 1, |f| Ok(f.iter().map(|_| (0..12).map(|k| if k == first { 1.0 } else { 0.0 }).collect()).collect())).unwrap();
    assert_eq!(constant, expected);
}

#[test]
fn untrained_model_report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let layout = corpus(dir.path());
    let manifest = build_manifest_in(&layout.speech).unwrap();
    let noises = ClipBank::load_dir(&layout.noise).unwrap();
    let rirs = ClipBank::load_dir(&layout.rir).unwrap();
    let model = ConvMixerModel::<f32>::build(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = evaluate_all("untrained", &model, &manifest, &noises, &rirs, 3).unwrap();
    let b = evaluate_all("untrained", &model, &manifest, &noises, &rirs, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accuracy.len(), 5);
    assert!(a.accuracy.iter().all(|(_, acc, n)| (0.0..=1.0).contains(acc) && *n > 0));

    let split = LoadedSplit::load(&manifest, Split::Test).unwrap();
    let clean = evaluate(&model, &split, eval_conditions()[0].1, &noises, &rirs, 3).unwrap();
    assert_eq!(Some(clean), a.get("clean"));

    let stem = dir.path().join("report");
    report(&[a], &stem).unwrap();
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(REPORT_HEADER));
    assert!(csv.lines().nth(1).unwrap().starts_with("untrained,20.7,1.37,"));
    assert!(stem.with_extension("txt").exists());
}
