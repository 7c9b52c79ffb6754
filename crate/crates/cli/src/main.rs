use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kws_core::audio::{build_manifest_in, read_wav, write_wav, ClipBank, WavEncoding};
use kws_core::augment::{apply_rir, mix_components};
use kws_core::eval::{evaluate_all, report, report_table};
use kws_core::frontend::{log_mel_fbank, pad_or_trim, FrontendConfig, CLIP_SAMPLES};
use kws_core::kv::KeyValues;
use kws_core::model::{count_macs, count_params, layer_ledger, load_checkpoint, ModelConfig};
use kws_core::rng::stream;
use kws_core::synth::{synth_dataset, SynthConfig};
use kws_core::train::{configs_from_kv, train, TrainConfig, TrainData};

#[derive(Parser, Debug)]
#[command(name = "convmixer", version, about = "ConvMixer keyword spotting: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic keyword corpus with noise and RIR banks
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
    },
    /// Train a model with the noise curriculum
    Train {
        /// Dataset root in the Speech Commands layout
        #[arg(long)]
        data: PathBuf,
        /// Directory of noise recordings
        #[arg(long)]
        noise: PathBuf,
        /// Directory of room impulse responses
        #[arg(long)]
        rir: PathBuf,
        /// `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from the small desk-scale architecture
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        no_mixer: bool,
        /// Train on the full multi-condition mix from the first epoch
        #[arg(long)]
        no_curriculum: bool,
        /// Config overrides, applied after the file
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy on the test split for every report condition
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        rir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes `<STEM>.csv` and `<STEM>.txt`
        #[arg(long, value_name = "STEM")]
        report: Option<PathBuf>,
        /// Row label in the report
        #[arg(long, default_value = "convmixer")]
        name: String,
    },
    /// Print parameter and multiply-accumulate counts
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also print the per-layer ledger
        #[arg(long)]
        layers: bool,
    },
    /// Write the log-mel features of a WAV as CSV
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reverberate and add noise to one WAV
    Augment {
        #[arg(long)]
        wav: PathBuf,
        /// Target SNR in dB
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, value_enum, default_value_t = OnOff::Off)]
        rir: OnOff,
        #[arg(long)]
        out: PathBuf,
        /// Directory of noise recordings
        #[arg(long)]
        noise: PathBuf,
        /// Directory of impulse responses, required with `--rir on`
        #[arg(long)]
        rir_bank: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

fn load_kv(config: Option<&Path>, overrides: &[String]) -> Result<KeyValues> {
    let mut kv = match config {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KeyValues::default(),
    };
    kv.merge(&KeyValues::from_overrides(overrides)?);
    Ok(kv)
}

fn base_model(desk: bool) -> ModelConfig {
    if desk {
        ModelConfig::desk()
    } else {
        ModelConfig::default()
    }
}

fn bank(dir: &Path, what: &str) -> Result<ClipBank> {
    let b = ClipBank::load_dir(dir).with_context(|| format!("loading {what} bank {}", dir.display()))?;
    if b.is_empty() {
        bail!("{what} bank {} holds no WAV files", dir.display());
    }
    Ok(b)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, seed, classes, per_class } => {
            let layout = synth_dataset(&out, &SynthConfig { n_classes: classes, per_class, seed })?;
            println!("speech: {}", layout.speech.display());
            println!("noise:  {}", layout.noise.display());
            println!("rir:    {}", layout.rir.display());
        }
        Command::Train { data, noise, rir, config, out, desk, no_mixer, no_curriculum, overrides } => {
            let kv = load_kv(config.as_deref(), &overrides)?;
            let mut model_cfg = base_model(desk);
            let mut train_cfg = TrainConfig::default();
            configs_from_kv(&kv, &mut model_cfg, &mut train_cfg)?;
            if no_mixer {
                model_cfg.mixer_enabled = false;
            }
            if no_curriculum {
                train_cfg.curriculum = false;
            }
            let manifest = build_manifest_in(&data)?;
            let (noises, rirs) = (bank(&noise, "noise")?, bank(&rir, "RIR")?);
            println!("{} params, {} MACs", count_params(&model_cfg), count_macs(&model_cfg));
            let start = Instant::now();
            let outcome = train(
                TrainData { manifest: &manifest, noises: &noises, rirs: &rirs },
                &model_cfg,
                &train_cfg,
                Some(&out),
                &mut |r| {
                    println!(
                        "epoch {:>3}  stage {}  lr {:.2e}  train {:.4}  val_loss {:.4}  val_acc {:.4}  c {:+.3}  {}  [{:.0}s]",
                        r.epoch,
                        r.stage,
                        r.lr,
                        r.train_loss,
                        r.val_loss,
                        r.val_acc,
                        r.c,
                        r.event,
                        start.elapsed().as_secs_f64()
                    )
                },
            )?;
            let mut cfg_text = model_cfg.to_kv();
            cfg_text.merge(&train_cfg.to_kv());
            fs::write(out.join("config.txt"), cfg_text.to_text()).context("writing config.txt")?;
            println!("{} epochs; best checkpoint in {}", outcome.log.len(), out.join(kws_core::train::BEST_CHECKPOINT).display());
        }
        Command::Eval { checkpoint, data, noise, rir, seed, report: stem, name } => {
            let model = load_checkpoint::<f32>(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let manifest = build_manifest_in(&data)?;
            let (noises, rirs) = (bank(&noise, "noise")?, bank(&rir, "RIR")?);
            let result = evaluate_all(&name, &model, &manifest, &noises, &rirs, seed)?;
            print!("{}", report_table(std::slice::from_ref(&result)));
            if let Some(stem) = stem {
                report(&[result], &stem)?;
            }
        }
        Command::Count { config, desk, overrides, layers } => {
            let kv = load_kv(config.as_deref(), &overrides)?;
            let mut cfg = base_model(desk);
            configs_from_kv(&kv, &mut cfg, &mut TrainConfig::default())?;
            if layers {
                for l in layer_ledger(&cfg) {
                    println!("{:<28} {:>8} {:>12}", l.name, l.params, l.macs);
                }
            }
            println!("params {}", count_params(&cfg));
            println!("macs {}", count_macs(&cfg));
        }
        Command::Features { wav, out } => {
            let w = pad_or_trim(&read_wav(&wav)?, CLIP_SAMPLES);
            let f = log_mel_fbank(&w, &FrontendConfig::default())?;
            fs::write(&out, f.to_csv()).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Augment { wav, snr, rir, out, noise, rir_bank, seed } => {
            if !snr.is_finite() {
                bail!("--snr must be finite");
            }
            let clean = read_wav(&wav)?;
            let mut rng = stream(seed, &[]);
            let mut w = clean.clone();
            if rir == OnOff::On {
                let dir = rir_bank.context("--rir on needs --rir-bank DIR")?;
                let rirs = bank(&dir, "RIR")?;
                w = apply_rir(&w, rirs.choose(&mut rng).expect("non-empty bank"))?;
            }
            let noises = bank(&noise, "noise")?;
            let clip = noises.choose(&mut rng).expect("non-empty bank");
            let noise = kws_core::audio::sample_segment(&kws_core::audio::tile_to(clip, w.len())?, w.len(), &mut rng)?;
            let mixed = mix_components(&w, &noise, snr, w.len())?;
            write_wav(&out, &mixed.mixed, WavEncoding::Float32)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
