//! The `eend` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use eend_core::features::FeatureSequence;
use eend_core::infer::{attention_maps, diarize, to_csv, to_pgm};
use eend_core::model::checks::gradient_suite;
use eend_core::model::Model;
use eend_core::numerics::GradCheckReport;
use eend_core::score::{der, emit_rttm, DiarizationHypothesis, RttmRecord};
use eend_core::simulate::{gen_corpus, mixture_seed, simulate_mixture, MixtureSpec};
use eend_core::train::{adapt, describe, fit, Sample, TrainConfig};
use log::{error, info};
use rayon::prelude::*;

use crate::audio::read_wav;
use crate::config::{scoped, RunConfig};
use crate::data::{
    create_dir, dataset_samples, history_csv, mixture_id, read_metadata, read_rttm, wav_path, write_dataset, write_text,
    MixtureMeta, CONFIG,
};
use crate::error::{Error, Result};
use crate::params::{load_params, save_optimizer, save_params};
use crate::report::{to_json, to_table};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "eend", version, about = "End-to-end neural speaker diarization")]
pub struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-recording work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of mixtures.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of mixtures.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        beta: Option<f64>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrain a model on a new domain with a fixed learning rate.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Diarize recordings into an RTTM file.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory whose recordings are diarized.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Individual WAV files; the file stem is the recording id.
        wavs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        /// Median filter length in frames.
        #[arg(long)]
        median: Option<usize>,
    },
    /// Score a hypothesis RTTM against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        collar: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Score reference recordings absent from the hypothesis as silent
        /// instead of failing.
        #[arg(long)]
        allow_empty: bool,
    },
    /// Export self-attention maps of one encoder block.
    Viz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// 1-based encoder block.
        #[arg(long, default_value_t = 2)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("EEND_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}

/// Defaults, then the config file, then `--set`, then command flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        cfg.merge_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let flags: Vec<(&str, Option<String>)> = match &cli.command {
        Command::Simulate { n, beta, .. } => vec![
            ("simulate.n", n.map(|v| v.to_string())),
            ("simulate.beta", beta.map(|v| v.to_string())),
        ],
        Command::Train { epochs, .. } => vec![("train.epochs", epochs.map(|v| v.to_string()))],
        Command::Adapt { lr, epochs, .. } => vec![
            ("train.adapt_lr", lr.map(|v| v.to_string())),
            ("train.epochs", epochs.map(|v| v.to_string())),
        ],
        Command::Infer { threshold, median, .. } => vec![
            ("infer.threshold", threshold.map(|v| v.to_string())),
            ("infer.median_window", median.map(|v| v.to_string())),
        ],
        Command::Score { collar, .. } => vec![("score.collar", collar.map(|v| v.to_string()))],
        Command::Viz { .. } | Command::Gradcheck => vec![],
    };
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Simulate { out, .. } => cmd_simulate(&cfg, out),
        Command::Train { data, valid, out, .. } => cmd_train(&cfg, data, valid.as_deref(), out),
        Command::Adapt {
            model, data, valid, out, ..
        } => cmd_adapt(&cfg, model, data, valid.as_deref(), out),
        Command::Infer { model, data, wavs, out, .. } => cmd_infer(&cfg, model, data.as_deref(), wavs, out),
        Command::Score {
            reference,
            hyp,
            json,
            allow_empty,
            ..
        } => cmd_score(&cfg, reference, hyp, json.as_deref(), *allow_empty),
        Command::Viz { model, wav, block, out } => cmd_viz(&cfg, model, wav, *block, out),
        Command::Gradcheck => cmd_gradcheck(&cfg),
    })
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(CONFIG), &cfg.resolved_text())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.mixture_spec()?;
    if cfg.simulate.n == 0 {
        return Err(Error::Config("simulate.n: must be at least 1".into()));
    }
    let corpus = gen_corpus(&cfg.corpus_config()).map_err(|e| scoped("corpus", e))?;
    let items = (0..cfg.simulate.n)
        .into_par_iter()
        .map(|i| {
            let s = MixtureSpec {
                seed: mixture_seed(spec.seed, i),
                ..spec.clone()
            };
            let m = simulate_mixture(&s, &corpus).map_err(|e| scoped("simulate", e))?;
            let names = m.speakers.iter().map(|&k| corpus.speakers[k].profile.name()).collect();
            Ok((MixtureMeta::new(mixture_id(i), &m, names), m))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    write_dataset(out, &items)?;
    write_config(out, cfg)?;
    let mean = items.iter().map(|(m, _)| m.overlap_ratio).sum::<f64>() / items.len() as f64;
    info!("wrote {} mixtures to {}, mean overlap ratio {:.3}", items.len(), out.display(), mean);
    Ok(())
}

fn load_samples(cfg: &RunConfig, dir: &Path) -> Result<Vec<Sample>> {
    let samples = dataset_samples(dir, &cfg.feature_pipeline()?)?;
    info!("{}: {} recordings", dir.display(), samples.len());
    Ok(samples)
}

fn check_input(cfg: &RunConfig, model: &Model) -> Result<()> {
    let dim = cfg.feature_pipeline()?.output_dim();
    if model.in_dim() != dim {
        return Err(Error::Config(format!(
            "model expects {}-dimensional input but the features section yields {dim}",
            model.in_dim()
        )));
    }
    Ok(())
}

enum Recipe {
    Fit,
    Adapt(f64),
}

/// Checkpoints, optimizer sidecars and history go under `out` as training
/// proceeds; a failed run keeps everything written so far.
fn training_run(cfg: &RunConfig, model: Model, data: &Path, valid: Option<&Path>, out: &Path, recipe: Recipe) -> Result<()> {
    let tc: TrainConfig = cfg.train_config()?;
    check_input(cfg, &model)?;
    let train = load_samples(cfg, data)?;
    let valid = match valid {
        Some(v) => load_samples(cfg, v)?,
        None => Vec::new(),
    };
    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    write_config(out, cfg)?;
    let mut history = Vec::new();
    let mut io_error: Option<Error> = None;
    let on_epoch = |r: &eend_core::train::EpochRecord, m: &Model, s: &eend_core::train::AdamState| {
        info!("{}", describe(r));
        history.push(r.clone());
        let stem = ckpt.join(format!("epoch{:03}", r.epoch));
        let written = save_params(m, &stem.with_extension("params"))
            .and_then(|_| save_optimizer(s, &stem.with_extension("opt")))
            .and_then(|_| write_text(&out.join("history.csv"), &history_csv(&history)));
        written.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            eend_core::Error::Contract(format!("checkpoint write failed: {msg}"))
        })
    };
    let result = match recipe {
        Recipe::Fit => fit(model, &train, &valid, &tc, on_epoch),
        Recipe::Adapt(lr) => adapt(model, &train, &valid, lr, &tc, on_epoch),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if let Some(io) = io_error {
                return Err(io);
            }
            if let eend_core::Error::Diverged { epoch, .. } = e {
                error!("keeping checkpoints up to epoch {}", epoch - 1);
            }
            return Err(e.into());
        }
    };
    save_params(&outcome.model, &out.join("final.params"))?;
    save_optimizer(&outcome.optimizer, &out.join("final.opt"))?;
    save_params(&outcome.averaged, &out.join("averaged.params"))?;
    info!("wrote {}", out.join("averaged.params").display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, valid: Option<&Path>, out: &Path) -> Result<()> {
    let model = cfg.init_model()?;
    info!("{} model with {} parameters", model.kind(), model.parameter_count());
    training_run(cfg, model, data, valid, out, Recipe::Fit)
}

pub fn cmd_adapt(cfg: &RunConfig, model: &Path, data: &Path, valid: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_params(model)?;
    cfg.train_config()?;
    training_run(cfg, model, data, valid, out, Recipe::Adapt(cfg.train.adapt_lr))
}

fn features(cfg: &RunConfig, wav: &Path) -> Result<FeatureSequence> {
    let wave = read_wav(wav)?;
    cfg.feature_pipeline()?.extract(&wave).map_err(|e| match e {
        eend_core::Error::EmptyInput(r) => Error::format(wav, r),
        other => other.into(),
    })
}

pub fn cmd_infer(cfg: &RunConfig, model: &Path, data: Option<&Path>, wavs: &[PathBuf], out: &Path) -> Result<()> {
    let decision = cfg.decision_config()?;
    let model = load_params(model)?;
    check_input(cfg, &model)?;
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = data {
        for meta in read_metadata(dir)? {
            let p = wav_path(dir, &meta.id);
            inputs.push((meta.id, p));
        }
    }
    for w in wavs {
        let id = w
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("cannot derive a recording id from {}", w.display())))?;
        inputs.push((id.to_string(), w.clone()));
    }
    if inputs.is_empty() {
        return Err(Error::Config("infer needs --data or at least one WAV file".into()));
    }
    inputs.sort();
    if let Some(w) = inputs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Config(format!("recording id `{}` appears twice", w[0].0)));
    }
    let records: Vec<Vec<RttmRecord>> = inputs
        .par_iter()
        .map(|(id, path)| {
            let f = features(cfg, path)?;
            Ok(diarize(&model, &f.frames, f.frame_period, &decision, id)?.to_records())
        })
        .collect::<Result<_>>()?;
    let records: Vec<RttmRecord> = records.into_iter().flatten().collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &emit_rttm(&records))?;
    write_text(&out.with_extension("config.txt"), &cfg.resolved_text())?;
    info!("{} segments from {} recordings", records.len(), inputs.len());
    Ok(())
}

pub fn cmd_score(cfg: &RunConfig, reference: &Path, hyp: &Path, json: Option<&Path>, allow_empty: bool) -> Result<()> {
    let sc = cfg.score_config()?;
    let refs = read_rttm(reference)?;
    let mut hyps = read_rttm(hyp)?;
    if allow_empty {
        for r in &refs {
            if !hyps.iter().any(|h| h.recording == r.recording) {
                hyps.push(DiarizationHypothesis {
                    recording: r.recording.clone(),
                    segments: Vec::new(),
                });
            }
        }
    }
    let report = der(&refs, &hyps, &sc)?;
    print!("{}", to_table(&report));
    if let Some(path) = json {
        write_text(path, &to_json(&report))?;
    }
    Ok(())
}

pub fn cmd_viz(cfg: &RunConfig, model: &Path, wav: &Path, block: usize, out: &Path) -> Result<()> {
    let model = load_params(model)?;
    check_input(cfg, &model)?;
    let f = features(cfg, wav)?;
    let maps = attention_maps(&model, &f.frames, block).map_err(|e| scoped("viz", e))?;
    create_dir(out)?;
    for (h, a) in maps.iter().enumerate() {
        let stem = out.join(format!("block{block}_head{}", h + 1));
        std::fs::write(stem.with_extension("pgm"), to_pgm(a)).map_err(Error::io(&stem))?;
        write_text(&stem.with_extension("csv"), &to_csv(a))?;
    }
    write_config(out, cfg)?;
    info!("wrote {} attention maps of block {block}", maps.len());
    Ok(())
}

pub fn gradcheck_lines(results: &[(&str, GradCheckReport)]) -> Vec<String> {
    results
        .iter()
        .map(|(name, r)| {
            let verdict = if r.max_relative_error < GRAD_TOLERANCE { "ok" } else { "FAIL" };
            format!(
                "{verdict:<4} {name}: max relative error {:.3e} over {} coordinates",
                r.max_relative_error, r.checked
            )
        })
        .collect()
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let results = gradient_suite(cfg.seed)?;
    for line in gradcheck_lines(&results) {
        println!("{line}");
    }
    if let Some((name, r)) = results.iter().find(|(_, r)| !(r.max_relative_error < GRAD_TOLERANCE)) {
        return Err(eend_core::Error::Contract(format!(
            "{name}: relative gradient error {:.3e} exceeds {GRAD_TOLERANCE:e}",
            r.max_relative_error
        ))
        .into());
    }
    Ok(())
}
