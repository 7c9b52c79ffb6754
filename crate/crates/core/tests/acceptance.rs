//! Acceptance gate: one PASS/FAIL line per criterion. Every tolerance used
//! below is a named constant. Set `KWS_ACCEPTANCE_STRICT` to turn a failed
//! criterion into a nonzero exit.

use std::io::Write;
use std::time::{Duration, Instant};

use kws_core::audio::{build_manifest_in, ClipBank, Waveform, SAMPLE_RATE};
use kws_core::augment::{component_snr_db, mix_components};
use kws_core::eval::{evaluate_all, EvalResult};
use kws_core::frontend::{log_mel_fbank, pad_or_trim, FeatureMatrix, FrontendConfig, CLIP_SAMPLES, N_FRAMES, N_MELS};
use kws_core::model::{
    count_macs, count_params, features_tensor, read_checkpoint, write_checkpoint, ConvMixerModel, Mode, ModelConfig,
};
use kws_core::synth::{synth_dataset, SynthConfig};
use kws_core::tensor::{grad_check, relative_error, Tape, Tensor, Var};
use kws_core::train::{metrics_csv, progress_criterion, train, Curriculum, Decision, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const CURRICULUM_SEQUENCES: usize = 1000;
const SNR_TRIPLES: usize = 100;
const SNR_TOL_DB: f64 = 1e-6;
const PARAM_RANGE: (usize, usize) = (100_000, 140_000);
const MAC_RANGE: (usize, usize) = (18_000_000, 27_000_000);
const MIXER_ORACLE_TOL: f64 = 1e-6;
const E2E_CLEAN_VAL_MIN: f64 = 0.95;
const E2E_FAR_TEST_MIN: f64 = 0.70;
const E2E_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);
const E2E_GAP_MIN_POINTS: f64 = 2.0;
const E2E_TRAIN_SEEDS: [u64; 3] = [1, 2, 3];
const E2E_EVAL_SEEDS: [u64; 3] = [7, 8, 9];
const E2E_DATA_SEED: u64 = 1234;

fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> kws_core::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(random(t.shape(y), &mut rng));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn tiny_config(mixer: bool) -> ModelConfig {
    ModelConfig {
        n_mels: 6,
        n_frames: 7,
        n_blocks: 1,
        channels: 4,
        depth: 2,
        kernel_pre: 3,
        kernel_block_1d: 3,
        kernel_block_2d: (3, 3),
        kernel_post: 3,
        mixer_hidden_t: 5,
        mixer_hidden_f: 3,
        mixer_enabled: mixer,
        n_classes: 12,
    }
}

fn randomize(model: &mut ConvMixerModel<f64>, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

// ---------------------------------------------------------------- 1

fn primitive_checks() -> Result<f64, String> {
    type Check = Box<dyn Fn(&mut Tape<f64>, Var) -> kws_core::tensor::Result<Var>>;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut run = |name: &str, f: Check, x: &Tensor<f64>| -> Result<(), String> {
        let r = grad_check(f, x, GRAD_STEP, GRAD_TOL).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(r.max_rel_error);
        if r.passed {
            Ok(())
        } else {
            Err(format!("{name}: rel err {:.2e}", r.max_rel_error))
        }
    };
    let x3 = random(&[2, 3, 6], &mut rng);
    let x4 = random(&[2, 2, 4, 5], &mut rng);
    let other = random(&[2, 3, 6], &mut rng);
    run("add", Box::new(move |t, x| { let o = t.constant(other.clone()); let y = t.add(x, o)?; weighted_sum(t, y, 1) }), &x3)?;
    let other = random(&[2, 3, 6], &mut rng);
    run("mul", Box::new(move |t, x| { let o = t.constant(other.clone()); let y = t.mul(x, o)?; weighted_sum(t, y, 2) }), &x3)?;
    run("scale", Box::new(|t, x| { let y = t.scale(x, -1.3); weighted_sum(t, y, 3) }), &x3)?;
    run("sum", Box::new(|t, x| { let s = t.sum(x); Ok(t.scale(s, 0.7)) }), &x3)?;
    run("mean_last", Box::new(|t, x| { let y = t.mean_last(x)?; weighted_sum(t, y, 4) }), &x3)?;
    run("reshape", Box::new(|t, x| { let y = t.reshape(x, vec![6, 6])?; weighted_sum(t, y, 5) }), &x3)?;
    run("transpose", Box::new(|t, x| { let y = t.transpose_last2(x)?; weighted_sum(t, y, 6) }), &x3)?;
    run("swish", Box::new(|t, x| { let y = t.swish(x); weighted_sum(t, y, 7) }), &x3)?;
    run("gelu", Box::new(|t, x| { let y = t.gelu(x); weighted_sum(t, y, 8) }), &x3)?;

    // (input, weight shape, groups) for dense, depthwise and pointwise, 1-D and 2-D.
    let convs: Vec<(&str, Tensor<f64>, Vec<usize>, usize)> = vec![
        ("conv1d dense", x3.clone(), vec![4, 3, 3], 1),
        ("conv1d depthwise", x3.clone(), vec![3, 1, 5], 3),
        ("conv1d pointwise", x3.clone(), vec![2, 3, 1], 1),
        ("conv2d dense", x4.clone(), vec![3, 2, 3, 3], 1),
        ("conv2d depthwise", x4.clone(), vec![2, 1, 3, 2], 2),
        ("conv2d pointwise", x4.clone(), vec![3, 2, 1, 1], 1),
    ];
    for (i, (name, x, ws, groups)) in convs.into_iter().enumerate() {
        let w = random(&ws, &mut rng);
        let b = random(&[ws[0]], &mut rng);
        let seed = 20 + i as u64;
        let apply = move |t: &mut Tape<f64>, x: Var, w: Var, b: Var| {
            let y = if ws.len() == 3 { t.conv1d(x, w, Some(b), groups)? } else { t.conv2d(x, w, Some(b), groups)? };
            weighted_sum(t, y, seed)
        };
        let (w1, b1, a1) = (w.clone(), b.clone(), apply.clone());
        run(&format!("{name} input"), Box::new(move |t, x| { let w = t.constant(w1.clone()); let b = t.constant(b1.clone()); a1(t, x, w, b) }), &x)?;
        let (x2, b2, a2) = (x.clone(), b.clone(), apply.clone());
        run(&format!("{name} weight"), Box::new(move |t, w| { let x = t.constant(x2.clone()); let b = t.constant(b2.clone()); a2(t, x, w, b) }), &w)?;
        let (x3c, w3) = (x.clone(), w.clone());
        run(&format!("{name} bias"), Box::new(move |t, b| { let x = t.constant(x3c.clone()); let w = t.constant(w3.clone()); apply(t, x, w, b) }), &b)?;
    }

    let gamma = Tensor::new(vec![3], vec![0.7, 1.2, -0.4]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.1, -0.3, 0.2]).unwrap();
    let (g1, b1) = (gamma.clone(), beta.clone());
    run("batch_norm train input", Box::new(move |t, x| { let g = t.constant(g1.clone()); let b = t.constant(b1.clone()); let (y, _) = t.batch_norm_train(x, g, b, 1e-5)?; weighted_sum(t, y, 40) }), &x3)?;
    let (xc, b1) = (x3.clone(), beta.clone());
    run("batch_norm train gamma", Box::new(move |t, g| { let x = t.constant(xc.clone()); let b = t.constant(b1.clone()); let (y, _) = t.batch_norm_train(x, g, b, 1e-5)?; weighted_sum(t, y, 41) }), &gamma)?;
    let (xc, g1) = (x3.clone(), gamma.clone());
    run("batch_norm train beta", Box::new(move |t, b| { let x = t.constant(xc.clone()); let g = t.constant(g1.clone()); let (y, _) = t.batch_norm_train(x, g, b, 1e-5)?; weighted_sum(t, y, 42) }), &beta)?;
    let (g1, b1) = (gamma.clone(), beta.clone());
    run(
        "batch_norm eval input",
        Box::new(move |t, x| {
            let g = t.constant(g1.clone());
            let b = t.constant(b1.clone());
            let y = t.batch_norm_eval(x, g, b, &[0.1, -0.2, 0.0], &[0.5, 1.5, 0.9], 1e-5)?;
            weighted_sum(t, y, 43)
        }),
        &x3,
    )?;

    let lg = random(&[6], &mut rng);
    let lb = random(&[6], &mut rng);
    let (g1, b1) = (lg.clone(), lb.clone());
    run("layer_norm input", Box::new(move |t, x| { let g = t.constant(g1.clone()); let b = t.constant(b1.clone()); let y = t.layer_norm(x, g, b, 1e-5)?; weighted_sum(t, y, 50) }), &x3)?;
    let (xc, b1) = (x3.clone(), lb.clone());
    run("layer_norm gamma", Box::new(move |t, g| { let x = t.constant(xc.clone()); let b = t.constant(b1.clone()); let y = t.layer_norm(x, g, b, 1e-5)?; weighted_sum(t, y, 51) }), &lg)?;
    let (xc, g1) = (x3.clone(), lg.clone());
    run("layer_norm beta", Box::new(move |t, b| { let x = t.constant(xc.clone()); let g = t.constant(g1.clone()); let y = t.layer_norm(x, g, b, 1e-5)?; weighted_sum(t, y, 52) }), &lb)?;

    let lw = random(&[4, 6], &mut rng);
    let lbias = random(&[4], &mut rng);
    let (w1, b1) = (lw.clone(), lbias.clone());
    run("linear input", Box::new(move |t, x| { let w = t.constant(w1.clone()); let b = t.constant(b1.clone()); let y = t.linear(x, w, Some(b))?; weighted_sum(t, y, 60) }), &x3)?;
    let (xc, b1) = (x3.clone(), lbias.clone());
    run("linear weight", Box::new(move |t, w| { let x = t.constant(xc.clone()); let b = t.constant(b1.clone()); let y = t.linear(x, w, Some(b))?; weighted_sum(t, y, 61) }), &lw)?;
    let (xc, w1) = (x3.clone(), lw.clone());
    run("linear bias", Box::new(move |t, b| { let x = t.constant(xc.clone()); let w = t.constant(w1.clone()); let y = t.linear(x, w, Some(b))?; weighted_sum(t, y, 62) }), &lbias)?;

    let z = Tensor::from_fn(vec![3, 12], |_| rng.random_range(-4.0..4.0));
    let targets = Tensor::from_fn(vec![3, 12], |_| rng.random_range(0.0..1.0));
    run("bce_with_logits", Box::new(move |t, z| t.bce_with_logits(z, &targets)), &z)?;
    Ok(worst)
}

fn block_loss(model: &ConvMixerModel<f64>, x: &Tensor<f64>) -> f64 {
    let mut g = model.graph(Mode::Train, false);
    let xv = g.tape.constant(x.clone());
    let y = model.block_forward(&mut g, 0, xv).unwrap();
    let l = weighted_sum(&mut g.tape, y, 77).unwrap();
    g.tape.value(l).data()[0]
}

/// Central differences over the block input and every block parameter.
fn block_check() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut model = ConvMixerModel::<f64>::build(&tiny_config(true), &mut rng).map_err(|e| e.to_string())?;
    randomize(&mut model, &mut rng);
    let x = random(&[3, 4, 7], &mut rng);

    let mut g = model.graph(Mode::Train, true);
    let xv = g.tape.param(x.clone());
    let y = model.block_forward(&mut g, 0, xv).map_err(|e| e.to_string())?;
    let l = weighted_sum(&mut g.tape, y, 77).map_err(|e| e.to_string())?;
    g.tape.backward(l).map_err(|e| e.to_string())?;
    let dx = g.tape.grad_tensor(xv);
    let grads = model.gradients(&g);

    let mut worst = 0.0f64;
    let mut checked = 0;
    for j in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[j] += GRAD_STEP;
        m.data_mut()[j] -= GRAD_STEP;
        let num = (block_loss(&model, &p) - block_loss(&model, &m)) / (2.0 * GRAD_STEP);
        worst = worst.max(relative_error(dx.data()[j], num));
        checked += 1;
    }
    let block_params: Vec<usize> = (0..model.params().len()).filter(|&i| model.params()[i].name.starts_with("blocks.0.")).collect();
    for &i in &block_params {
        for j in 0..model.params()[i].value.numel() {
            let orig = model.params()[i].value.data()[j];
            model.params_mut()[i].value.data_mut()[j] = orig + GRAD_STEP;
            let lp = block_loss(&model, &x);
            model.params_mut()[i].value.data_mut()[j] = orig - GRAD_STEP;
            let lm = block_loss(&model, &x);
            model.params_mut()[i].value.data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * GRAD_STEP);
            let e = relative_error(grads[i].data()[j], num);
            if e >= GRAD_TOL {
                return Err(format!("{}[{j}]: analytic {} numeric {num} rel err {e:.2e}", model.params()[i].name, grads[i].data()[j]));
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    if worst >= GRAD_TOL {
        return Err(format!("block input rel err {worst:.2e}"));
    }
    let _ = checked;
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let prim = primitive_checks();
    let block = block_check();
    let elapsed = start.elapsed();
    match (prim, block) {
        (Ok(p), Ok(b)) => outcome(
            elapsed < GRAD_TIME_LIMIT,
            format!("primitives max rel err {p:.2e}, full block {b:.2e} (tol {GRAD_TOL:e}), {:.1}s", elapsed.as_secs_f64()),
        ),
        (p, b) => outcome(false, format!("{:?} / {:?}", p.err(), b.err())),
    }
}

// ---------------------------------------------------------------- 2

/// Independent reference controller: returns (c, decision, stage) per epoch.
fn reference(seq: &[(f64, f64)], patience: usize) -> Vec<(f64, Decision, usize)> {
    let norm = |h: &[f64]| {
        let (lo, hi) = h.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        if h.len() == 1 || hi == lo { 0.0 } else { (h[h.len() - 1] - lo) / (hi - lo) }
    };
    let (mut stage, mut acc, mut loss, mut bst, mut k, mut out) = (0, vec![], vec![], 0.0, 0, vec![]);
    for &(a, l) in seq {
        acc.push(a);
        loss.push(l);
        let c = norm(&acc) - norm(&loss);
        let d = if c >= bst {
            bst = c;
            k = 0;
            Decision::SaveBest
        } else {
            k += 1;
            if k < patience {
                Decision::Continue
            } else {
                stage += 1;
                (acc.clear(), loss.clear(), bst = 0.0, k = 0);
                if stage == 5 { Decision::Finish } else { Decision::AdvanceStage }
            }
        };
        out.push((c, d, stage));
        if stage == 5 {
            break;
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut first_epoch_zero = true;
    let mut advances_seen = 0;
    for n in 0..CURRICULUM_SEQUENCES {
        let len = rng.random_range(1..250);
        let levels = rng.random_range(2..30) as f64;
        let seq: Vec<(f64, f64)> = (0..len)
            .map(|_| ((rng.random_range(0.0..1.0) * levels).round() / levels, (rng.random_range(0.0..3.0) * levels).round() / levels))
            .collect();
        let want = reference(&seq, 10);
        let mut cur = Curriculum::new(10);
        for (e, (&(a, l), &(c_ref, d_ref, stage_ref))) in seq.iter().zip(&want).enumerate() {
            let starts_stage = cur.acc_history.is_empty();
            let (c, d) = match cur.observe(a, l) {
                Ok(v) => v,
                Err(err) => return outcome(false, format!("sequence {n} epoch {e}: {err}")),
            };
            if starts_stage && c != 0.0 {
                first_epoch_zero = false;
            }
            advances_seen += usize::from(d == Decision::AdvanceStage);
            if c != c_ref || d != d_ref || cur.stage != stage_ref {
                return outcome(false, format!("sequence {n} epoch {e}: got ({c}, {d:?}, {}), reference ({c_ref}, {d_ref:?}, {stage_ref})", cur.stage));
            }
        }
        if cur.finished() != (want.last().map(|w| w.2) == Some(5)) {
            return outcome(false, format!("sequence {n}: termination differs"));
        }
    }
    let mut scripted = Curriculum::new(10);
    let script: Vec<f64> = [0.0, 0.5].into_iter().chain([0.4; 10]).collect();
    let decisions: Vec<Decision> = script.iter().map(|&c| scripted.update(c)).collect();
    let scripted_ok = decisions[1] == Decision::SaveBest && decisions[11] == Decision::AdvanceStage && decisions[2..11].iter().all(|&d| d == Decision::Continue);
    let first = progress_criterion(&[0.8], &[0.3]).map(|c| c == 0.0).unwrap_or(false);
    outcome(
        first_epoch_zero && scripted_ok && first && advances_seen > 0,
        format!("{CURRICULUM_SEQUENCES} sequences identical to reference ({advances_seen} stage advances exercised); scripted [0, 0.5, 0.4x10] advances at epoch 12"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let snrs = [0.0, -5.0, -10.0, 20.0];
    let mut worst = 0.0f64;
    for i in 0..SNR_TRIPLES {
        let len = rng.random_range(400..CLIP_SAMPLES + 1);
        let amp = rng.random_range(0.01..0.9);
        let clean = Waveform::new((0..len).map(|_| amp * rng.random_range(-1.0f32..1.0)).collect());
        let namp = rng.random_range(0.001..2.0);
        let noise = Waveform::new((0..len).map(|_| namp * rng.random_range(-1.0f32..1.0)).collect());
        let active = if i % 2 == 0 { len } else { rng.random_range(len / 2..=len) };
        let snr = snrs[i % snrs.len()];
        let m = match mix_components(&clean, &noise, snr, active) {
            Ok(m) => m,
            Err(e) => return outcome(false, e.to_string()),
        };
        worst = worst.max((component_snr_db(&m.clean, active, &m.scaled_noise) - snr).abs());
    }
    outcome(worst < SNR_TOL_DB, format!("{SNR_TRIPLES} triples, max |realized - target| = {worst:.2e} dB (tol {SNR_TOL_DB:e})"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = FrontendConfig::default();
    let lengths = [1, 400, 8000, 15_999, CLIP_SAMPLES, CLIP_SAMPLES + 3000];
    for &len in &lengths {
        let w = Waveform::new((0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect());
        let padded = pad_or_trim(&w, CLIP_SAMPLES);
        let zeros_ok = padded.samples[len.min(CLIP_SAMPLES)..].iter().all(|&v| v == 0.0) && padded.samples[..len.min(CLIP_SAMPLES)] == w.samples[..len.min(CLIP_SAMPLES)];
        let f = match log_mel_fbank(&padded, &cfg) {
            Ok(f) => f,
            Err(e) => return outcome(false, e.to_string()),
        };
        if (f.frames, f.bins) != (N_FRAMES, N_MELS) || !zeros_ok || f.values.iter().any(|v| !v.is_finite()) {
            return outcome(false, format!("length {len}: {}x{}, right zero padding {zeros_ok}", f.frames, f.bins));
        }
    }
    outcome(true, format!("lengths {lengths:?} at {SAMPLE_RATE} Hz all give {N_FRAMES}x{N_MELS}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let default = ModelConfig::default();
    let (p, m) = (count_params(&default), count_macs(&default));
    let in_budget = (PARAM_RANGE.0..=PARAM_RANGE.1).contains(&p) && (MAC_RANGE.0..=MAC_RANGE.1).contains(&m);
    // Spreadsheet ledgers computed outside this code base.
    let t1 = tiny_config(true);
    let t2 = ModelConfig { n_blocks: 2, kernel_block_2d: (5, 3), ..tiny_config(false) };
    let t3 = ModelConfig {
        n_mels: 8,
        n_frames: 10,
        n_blocks: 2,
        channels: 3,
        depth: 1,
        kernel_pre: 1,
        kernel_block_1d: 5,
        kernel_block_2d: (1, 1),
        kernel_post: 1,
        mixer_hidden_t: 4,
        mixer_hidden_f: 2,
        mixer_enabled: true,
        n_classes: 5,
    };
    let ledgers = [(&t1, 373, 2358), (&t2, 378, 4626), (&t3, 436, 1895)];
    let toys_ok = ledgers.iter().all(|(c, p, m)| count_params(c) == *p && count_macs(c) == *m);
    let built: usize = ConvMixerModel::<f32>::build(&default, &mut ChaCha8Rng::seed_from_u64(0))
        .map(|m| m.params().iter().map(|p| p.value.numel()).sum())
        .unwrap_or(0);
    outcome(
        in_budget && toys_ok && built == p && default == ModelConfig::default() && (p, m) == (111_428, 22_586_240),
        format!("default: {p} params, {m} MACs; built tensors hold {built}; toy ledgers match: {toys_ok}"),
    )
}

// ---------------------------------------------------------------- 6

fn desk_train_config(seed: u64, curriculum: bool) -> TrainConfig {
    TrainConfig { batch_size: 32, max_epochs: 20, epochs_per_stage: 4, patience: 3, seed, curriculum, ..TrainConfig::default() }
}

fn mean_eval(model: &ConvMixerModel<f32>, data: TrainData<'_>, name: &str) -> kws_core::Result<EvalResult> {
    let runs = E2E_EVAL_SEEDS
        .iter()
        .map(|&s| evaluate_all(name, model, data.manifest, data.noises, data.rirs, s))
        .collect::<kws_core::Result<Vec<_>>>()?;
    let mut out = runs[0].clone();
    for (i, col) in out.accuracy.iter_mut().enumerate() {
        col.1 = runs.iter().map(|r| r.accuracy[i].1).sum::<f64>() / runs.len() as f64;
        col.2 = runs.iter().map(|r| r.accuracy[i].2).sum();
    }
    Ok(out)
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let layout = match synth_dataset(dir.path(), &SynthConfig { n_classes: 4, per_class: 200, seed: E2E_DATA_SEED }) {
        Ok(l) => l,
        Err(e) => return outcome(false, e.to_string()),
    };
    let manifest = build_manifest_in(&layout.speech).expect("manifest");
    let noises = ClipBank::load_dir(&layout.noise).expect("noise bank");
    let rirs = ClipBank::load_dir(&layout.rir).expect("rir bank");
    let data = TrainData { manifest: &manifest, noises: &noises, rirs: &rirs };

    let variants: [(&str, bool, bool); 3] = [("curriculum", true, true), ("no-curriculum", false, true), ("no-mixer", true, false)];
    let mut far = [[0.0f64; 3]; 3];
    let mut clean_val = [0.0f64; 3];
    let mut primary_time = Duration::ZERO;
    for (s, &seed) in E2E_TRAIN_SEEDS.iter().enumerate() {
        for (v, &(name, curriculum, mixer)) in variants.iter().enumerate() {
            let model_cfg = ModelConfig { mixer_enabled: mixer, ..ModelConfig::desk() };
            let start = Instant::now();
            let run = match train(data, &model_cfg, &desk_train_config(seed, curriculum), None, &mut |_| {}) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("{name} seed {seed}: {e}")),
            };
            let took = start.elapsed();
            let res = match mean_eval(&run.model, data, name) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("{name} seed {seed} eval: {e}")),
            };
            far[v][s] = res.get("-10dB").unwrap_or(0.0);
            if v == 0 {
                primary_time = primary_time.max(took);
                clean_val[s] = run.log.iter().filter(|r| r.stage == 0).map(|r| r.val_acc).fold(0.0, f64::max);
            }
            line(&format!(
                "    [6] {name:<13} seed {seed}: {} epochs in {:.0}s, test clean {:.2}% / -10dB+rir {:.2}%",
                run.log.len(),
                took.as_secs_f64(),
                100.0 * res.get("clean").unwrap_or(0.0),
                100.0 * far[v][s]
            ));
        }
    }
    let mean = |v: usize| 100.0 * far[v].iter().sum::<f64>() / far[v].len() as f64;
    let (cur, nocur, nomix) = (mean(0), mean(1), mean(2));
    let min_clean_val = clean_val.iter().copied().fold(1.0, f64::min);
    let min_far = far[0].iter().copied().fold(1.0, f64::min);
    let checks = [
        ("clean val", min_clean_val >= E2E_CLEAN_VAL_MIN),
        ("-10dB test", min_far >= E2E_FAR_TEST_MIN),
        ("time", primary_time < E2E_TIME_LIMIT),
        ("(a) mixer gap", cur - nomix >= E2E_GAP_MIN_POINTS),
        ("(b) curriculum gap", cur - nocur >= E2E_GAP_MIN_POINTS),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "min stage-0 val {:.2}%, min -10dB test {:.2}%, slowest curriculum run {:.0}s; -10dB means: curriculum {cur:.2}, no-curriculum {nocur:.2} (gap {:+.2}), no-mixer {nomix:.2} (gap {:+.2}){}",
            100.0 * min_clean_val,
            100.0 * min_far,
            primary_time.as_secs_f64(),
            cur - nocur,
            cur - nomix,
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let layout = synth_dataset(dir.path(), &SynthConfig { n_classes: 2, per_class: 20, seed: 77 }).expect("synth");
    let manifest = build_manifest_in(&layout.speech).expect("manifest");
    let noises = ClipBank::load_dir(&layout.noise).expect("noise bank");
    let rirs = ClipBank::load_dir(&layout.rir).expect("rir bank");
    let data = TrainData { manifest: &manifest, noises: &noises, rirs: &rirs };
    let cfg = TrainConfig { batch_size: 16, max_epochs: 3, epochs_per_stage: 1, patience: 1, seed: 5, ..TrainConfig::default() };
    let model_cfg = ModelConfig::desk();
    let runs: Vec<_> = (0..2).map(|_| train(data, &model_cfg, &cfg, None, &mut |_| {})).collect();
    let (a, b) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "training failed"),
    };
    let same_log = metrics_csv(&a.log) == metrics_csv(&b.log);

    let mut first = Vec::new();
    write_checkpoint(&a.model, &mut first).expect("write");
    let reloaded: ConvMixerModel<f32> = read_checkpoint(first.as_slice()).expect("read");
    let mut second = Vec::new();
    write_checkpoint(&reloaded, &mut second).expect("write");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feats: Vec<FeatureMatrix> = (0..3).map(|_| FeatureMatrix::new(N_FRAMES, N_MELS, (0..N_FRAMES * N_MELS).map(|_| rng.random_range(-8.0..2.0)).collect())).collect();
    let same_logits = a.model.predict(&feats).ok() == reloaded.predict(&feats).ok();
    outcome(
        same_log && first == second && same_logits,
        format!("metrics CSV identical: {same_log}; checkpoint re-save byte-identical: {}; eval logits identical: {same_logits}", first == second),
    )
}

// ---------------------------------------------------------------- 8

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

fn naive_mlp(x: &[f64], model: &ConvMixerModel<f64>, prefix: &str, ln: &str, up: &str, down: &str) -> Vec<f64> {
    let p = |n: &str| model.param(&format!("{prefix}.{n}")).unwrap().value.clone();
    let (g, b) = (p(&format!("{ln}.gamma")), p(&format!("{ln}.beta")));
    let (w1, b1) = (p(&format!("{up}.weight")), p(&format!("{up}.bias")));
    let (w2, b2) = (p(&format!("{down}.weight")), p(&format!("{down}.bias")));
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let z: Vec<f64> = (0..n).map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i]).collect();
    let h = w1.shape()[0];
    let hid: Vec<f64> = (0..h).map(|j| gelu(b1.data()[j] + (0..n).map(|i| w1.data()[j * n + i] * z[i]).sum::<f64>())).collect();
    (0..n).map(|i| x[i] + b2.data()[i] + (0..h).map(|j| w2.data()[i * h + j] * hid[j]).sum::<f64>()).collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cfg = tiny_config(true);
    let mut model = ConvMixerModel::<f64>::build(&cfg, &mut rng).expect("build");
    randomize(&mut model, &mut rng);
    let (bsz, c, t) = (3, cfg.channels, cfg.n_frames);
    let x = random(&[bsz, c, t], &mut rng);

    let mut g = model.graph(Mode::Eval, false);
    let xv = g.tape.constant(x.clone());
    let y = model.mixer_forward(&mut g, 0, xv).expect("mixer");
    let got = g.tape.value(y).data().to_vec();
    let mut u = vec![0.0; bsz * c * t];
    for b in 0..bsz {
        for ch in 0..c {
            let row: Vec<f64> = x.data()[(b * c + ch) * t..][..t].to_vec();
            u[(b * c + ch) * t..][..t].copy_from_slice(&naive_mlp(&row, &model, "blocks.0.mixer", "ln_t", "w1", "w2"));
        }
    }
    let mut worst = 0.0f64;
    for b in 0..bsz {
        for tt in 0..t {
            let col: Vec<f64> = (0..c).map(|ch| u[(b * c + ch) * t + tt]).collect();
            let out = naive_mlp(&col, &model, "blocks.0.mixer", "ln_f", "w3", "w4");
            for ch in 0..c {
                worst = worst.max((out[ch] - got[(b * c + ch) * t + tt]).abs());
            }
        }
    }

    let mut zeroed = model.clone();
    for p in zeroed.params_mut().iter_mut().filter(|p| p.name.contains(".mixer.w")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = zeroed.graph(Mode::Eval, false);
    let xv = g.tape.constant(x.clone());
    let y = zeroed.mixer_forward(&mut g, 0, xv).expect("mixer");
    let identity = g.tape.value(y).data() == x.data();

    let off_cfg = ModelConfig { mixer_enabled: false, ..cfg.clone() };
    let mut off = ConvMixerModel::<f64>::build(&off_cfg, &mut rng).expect("build");
    for p in off.params_mut() {
        p.value = model.param(&p.name).expect("shared name").value.clone();
    }
    let on_names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let removed: Vec<&str> = on_names.iter().copied().filter(|n| off.param(n).is_none()).collect();
    let removed_ok = removed.iter().all(|n| n.contains(".mixer.")) && removed.len() == 12 && off.params().len() + 12 == model.params().len();
    let removed_count: usize = removed.iter().map(|n| model.param(n).unwrap().value.numel()).sum();
    let count_ok = count_params(&cfg) - count_params(&off_cfg) == removed_count;

    let paths = |m: &ConvMixerModel<f64>| {
        let mut g = m.graph(Mode::Train, false);
        let xv = g.tape.constant(x.clone());
        let (y1, y2) = m.block_paths(&mut g, 0, xv).expect("paths");
        (g.tape.value(y1).clone(), g.tape.value(y2).clone())
    };
    let paths_same = paths(&model) == paths(&off);
    let feats = features_tensor::<f64>(&[FeatureMatrix::new(t, cfg.n_mels, vec![0.25; t * cfg.n_mels])]).is_ok();
    outcome(
        worst < MIXER_ORACLE_TOL && identity && removed_ok && count_ok && paths_same && feats,
        format!(
            "naive oracle max abs diff {worst:.2e} (tol {MIXER_ORACLE_TOL:e}); zero-weight identity {identity}; mixer-off removes {} tensors / {removed_count} scalars, all mixer: {removed_ok}; y1,y2 unchanged: {paths_same}",
            removed.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", criterion_1),
        ("curriculum oracle equivalence", criterion_2),
        ("SNR fidelity", criterion_3),
        ("feature contract", criterion_4),
        ("efficiency budget", criterion_5),
        ("desk-scale end-to-end", criterion_6),
        ("determinism and checkpointing", criterion_7),
        ("mixer structure", criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        failed += usize::from(!o.pass);
        line(&format!("{} {id}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
    }
    if failed > 0 {
        line(&format!("{failed} acceptance criteria failed"));
        if std::env::var_os("KWS_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    } else {
        line("all acceptance criteria passed");
    }
}
