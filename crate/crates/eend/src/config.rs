//! Line-oriented `key = value` run configuration with `[section]` headers.
//!
//! Every key has a default; a file or override naming an unknown key is an
//! error. Randomness comes from the top-level `seed`: mixture seeds are
//! `derive_seed(seed, 1)`, model initialization `derive_seed(seed, 2)` and
//! batch shuffling `derive_seed(seed, 3)`. The corpus has its own
//! `corpus.seed` so training and held-out sets can share speakers.

use std::fmt::Write as _;

use eend_core::features::{FeaturePipeline, LogMelConfig};
use eend_core::infer::DecisionConfig;
use eend_core::loss::LossConfig;
use eend_core::model::{BlstmConfig, BlstmParams, Model, SaEendConfig, SaEendParams};
use eend_core::rng::derive_seed;
use eend_core::score::ScoreConfig;
use eend_core::simulate::{CorpusConfig, MixtureSpec};
use eend_core::train::{LrSchedule, TrainConfig};

use crate::audio::SAMPLE_RATE;
use crate::error::{Error, Result};

/// One `(key, value, line)` per assignment; keys of sectioned lines are
/// `section.key`.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(String, String, usize)>, String> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {}: unterminated section header", i + 1))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        out.push((key, v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sa,
    Blstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Noam,
    Fixed,
}

trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse `{s}` as {}", stringify!($t)))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl Value for Vec<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| <f64 as Value>::parse(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }
}

impl Value for Option<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "nyquist" {
            Ok(None)
        } else {
            <f64 as Value>::parse(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or("nyquist".into(), |v| v.to_string())
    }
}

impl Value for ModelKind {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sa" => Ok(ModelKind::Sa),
            "blstm" => Ok(ModelKind::Blstm),
            _ => Err(format!("expected `sa` or `blstm`, found `{s}`")),
        }
    }
    fn show(&self) -> String {
        match self {
            ModelKind::Sa => "sa".into(),
            ModelKind::Blstm => "blstm".into(),
        }
    }
}

impl Value for ScheduleKind {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "noam" => Ok(ScheduleKind::Noam),
            "fixed" => Ok(ScheduleKind::Fixed),
            _ => Err(format!("expected `noam` or `fixed`, found `{s}`")),
        }
    }
    fn show(&self) -> String {
        match self {
            ScheduleKind::Noam => "noam".into(),
            ScheduleKind::Fixed => "fixed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub speakers: usize,
    pub utterances: usize,
    pub utt_min: f64,
    pub utt_max: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub noises: usize,
    pub noise_dur: f64,
    pub rirs: usize,
    pub rir_len: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSection {
    pub n: usize,
    pub n_spk: usize,
    pub n_umin: usize,
    pub n_umax: usize,
    pub beta: f64,
    pub snr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub speakers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub residual: bool,
    pub layers: usize,
    pub hidden: usize,
    pub dc_layer: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub chunk_len: usize,
    pub schedule: ScheduleKind,
    pub warmup: u64,
    pub lr_scale: f64,
    pub lr: f64,
    pub adapt_lr: f64,
    pub average_last: usize,
    pub alpha: f64,
    pub bce_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub simulate: SimulateSection,
    pub features: FeaturePipeline,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: DecisionConfig,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CorpusConfig::default();
        let sa = SaEendConfig::default();
        let bl = BlstmConfig::default();
        let t = TrainConfig::default();
        let (warmup, lr_scale) = match t.schedule {
            LrSchedule::Noam { warmup, scale } => (warmup, scale),
            LrSchedule::Fixed(_) => (25000, 1.0),
        };
        RunConfig {
            seed: 0,
            corpus: CorpusSection {
                speakers: c.n_speakers,
                utterances: c.utt_per_speaker,
                utt_min: c.utt_dur.0,
                utt_max: c.utt_dur.1,
                f0_min: c.f0_range.0,
                f0_max: c.f0_range.1,
                noises: c.n_noises,
                noise_dur: c.noise_dur,
                rirs: c.n_rirs,
                rir_len: c.rir_len,
                seed: c.seed,
            },
            simulate: SimulateSection {
                n: 100,
                n_spk: 2,
                n_umin: 10,
                n_umax: 20,
                beta: 2.0,
                snr: vec![5.0, 10.0, 15.0, 20.0],
            },
            features: FeaturePipeline::default(),
            model: ModelSection {
                kind: ModelKind::Sa,
                speakers: sa.speakers,
                model_dim: sa.model_dim,
                heads: sa.heads,
                ffn_dim: sa.ffn_dim,
                blocks: sa.blocks,
                residual: sa.residual,
                layers: bl.layers,
                hidden: bl.hidden,
                dc_layer: bl.dc_layer,
                embed_dim: bl.embed_dim,
            },
            train: TrainSection {
                batch_size: t.batch_size,
                epochs: t.epochs,
                chunk_len: t.chunk_len,
                schedule: ScheduleKind::Noam,
                warmup,
                lr_scale,
                lr: 1e-5,
                adapt_lr: 1e-5,
                average_last: t.average_last,
                alpha: t.loss.alpha,
                bce_clip: t.loss.bce_clip,
            },
            infer: DecisionConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        /// Every accepted key, in the order they are written out.
        pub const KEYS: &[&str] = &[$($key),*];

        fn get_key(c: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(<$ty as Value>::show(&c.$($field).+)),)*
                _ => None,
            }
        }

        fn put_key(c: &mut RunConfig, key: &str, v: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(<$ty as Value>::parse(v).map(|x| c.$($field).+ = x)),)*
                _ => None,
            }
        }
    };
}

keys! {
    "seed" => seed: u64,
    "corpus.speakers" => corpus.speakers: usize,
    "corpus.utterances" => corpus.utterances: usize,
    "corpus.utt_min" => corpus.utt_min: f64,
    "corpus.utt_max" => corpus.utt_max: f64,
    "corpus.f0_min" => corpus.f0_min: f64,
    "corpus.f0_max" => corpus.f0_max: f64,
    "corpus.noises" => corpus.noises: usize,
    "corpus.noise_dur" => corpus.noise_dur: f64,
    "corpus.rirs" => corpus.rirs: usize,
    "corpus.rir_len" => corpus.rir_len: f64,
    "corpus.seed" => corpus.seed: u64,
    "simulate.n" => simulate.n: usize,
    "simulate.n_spk" => simulate.n_spk: usize,
    "simulate.n_umin" => simulate.n_umin: usize,
    "simulate.n_umax" => simulate.n_umax: usize,
    "simulate.beta" => simulate.beta: f64,
    "simulate.snr" => simulate.snr: Vec<f64>,
    "features.n_mels" => features.logmel.n_mels: usize,
    "features.frame_len" => features.logmel.frame_len: f64,
    "features.frame_shift" => features.logmel.frame_shift: f64,
    "features.fft_size" => features.logmel.fft_size: usize,
    "features.low_freq" => features.logmel.low_freq: f64,
    "features.high_freq" => features.logmel.high_freq: Option<f64>,
    "features.context" => features.context: usize,
    "features.subsample" => features.subsample: usize,
    "model.kind" => model.kind: ModelKind,
    "model.speakers" => model.speakers: usize,
    "model.model_dim" => model.model_dim: usize,
    "model.heads" => model.heads: usize,
    "model.ffn_dim" => model.ffn_dim: usize,
    "model.blocks" => model.blocks: usize,
    "model.residual" => model.residual: bool,
    "model.layers" => model.layers: usize,
    "model.hidden" => model.hidden: usize,
    "model.dc_layer" => model.dc_layer: usize,
    "model.embed_dim" => model.embed_dim: usize,
    "train.batch_size" => train.batch_size: usize,
    "train.epochs" => train.epochs: usize,
    "train.chunk_len" => train.chunk_len: usize,
    "train.schedule" => train.schedule: ScheduleKind,
    "train.warmup" => train.warmup: u64,
    "train.lr_scale" => train.lr_scale: f64,
    "train.lr" => train.lr: f64,
    "train.adapt_lr" => train.adapt_lr: f64,
    "train.average_last" => train.average_last: usize,
    "train.alpha" => train.alpha: f64,
    "train.bce_clip" => train.bce_clip: f64,
    "infer.threshold" => infer.threshold: f64,
    "infer.median_window" => infer.median_window: usize,
    "score.collar" => score.collar: f64,
    "score.frame_step" => score.frame_step: f64,
}

/// Core parameter names that differ from their config key.
const RENAMES: &[(&str, &str)] = &[
    ("snr_choices", "snr"),
    ("warmup_steps", "warmup"),
    ("n_speakers", "speakers"),
    ("utt_dur", "utt_min"),
    ("n_spk", "n_spk"),
];

/// Turns a core parameter error into a configuration error naming the key.
pub fn scoped(section: &str, e: eend_core::Error) -> Error {
    match e {
        eend_core::Error::Parameter { name, reason } => {
            let key = RENAMES.iter().find(|(n, _)| *n == name).map_or(name, |(_, k)| k);
            Error::Config(format!("{section}.{key}: {reason}"))
        }
        other => Error::Core(other),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        get_key(self, key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match put_key(self, key, value) {
            Some(r) => r.map_err(|e| Error::Config(format!("{key}: {e}"))),
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a config file's assignments on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let entries = parse_kv(text).map_err(Error::Config)?;
        for (k, v, line) in entries {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_text(text)?;
        Ok(c)
    }

    /// Full config text, one section per block; re-parses to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, k) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = write!(s, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(s, "{k} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    /// Resolved config prefixed by the toolkit version.
    pub fn resolved_text(&self) -> String {
        format!("# eend {}\n{}", eend_core::VERSION, self.to_text())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            n_speakers: c.speakers,
            utt_per_speaker: c.utterances,
            utt_dur: (c.utt_min, c.utt_max),
            f0_range: (c.f0_min, c.f0_max),
            n_noises: c.noises,
            noise_dur: c.noise_dur,
            n_rirs: c.rirs,
            rir_len: c.rir_len,
            sample_rate: SAMPLE_RATE,
            seed: c.seed,
        }
    }

    pub fn mixture_spec(&self) -> Result<MixtureSpec> {
        let s = &self.simulate;
        let spec = MixtureSpec {
            n_spk: s.n_spk,
            n_umin: s.n_umin,
            n_umax: s.n_umax,
            beta: s.beta,
            snr_choices: s.snr.clone(),
            seed: derive_seed(self.seed, 1),
        };
        spec.validate().map_err(|e| scoped("simulate", e))?;
        Ok(spec)
    }

    pub fn feature_pipeline(&self) -> Result<FeaturePipeline> {
        let f = &self.features;
        let l: &LogMelConfig = &f.logmel;
        if l.n_mels == 0 || f.subsample == 0 || !(l.frame_shift > 0.0) || !(l.frame_len >= l.frame_shift) {
            return Err(Error::Config(
                "features: need n_mels >= 1, subsample >= 1 and frame_len >= frame_shift > 0".into(),
            ));
        }
        Ok(f.clone())
    }

    /// Model of the configured kind, freshly initialized from the run seed.
    pub fn init_model(&self) -> Result<Model> {
        let in_dim = self.feature_pipeline()?.output_dim();
        let m = &self.model;
        let seed = derive_seed(self.seed, 2);
        let model = match m.kind {
            ModelKind::Sa => {
                let config = SaEendConfig {
                    in_dim,
                    model_dim: m.model_dim,
                    heads: m.heads,
                    ffn_dim: m.ffn_dim,
                    blocks: m.blocks,
                    speakers: m.speakers,
                    residual: m.residual,
                };
                let params = SaEendParams::init(&config, seed).map_err(|e| scoped("model", e))?;
                Model::SaEend { config, params }
            }
            ModelKind::Blstm => {
                let config = BlstmConfig {
                    in_dim,
                    layers: m.layers,
                    hidden: m.hidden,
                    dc_layer: m.dc_layer,
                    embed_dim: m.embed_dim,
                    speakers: m.speakers,
                };
                let params = BlstmParams::init(&config, seed).map_err(|e| scoped("model", e))?;
                Model::Blstm { config, params }
            }
        };
        Ok(model)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            chunk_len: t.chunk_len,
            schedule: match t.schedule {
                ScheduleKind::Noam => LrSchedule::Noam {
                    warmup: t.warmup,
                    scale: t.lr_scale,
                },
                ScheduleKind::Fixed => LrSchedule::Fixed(t.lr),
            },
            average_last: t.average_last,
            loss: LossConfig {
                alpha: t.alpha,
                bce_clip: t.bce_clip,
            },
            seed: derive_seed(self.seed, 3),
        };
        cfg.validate().map_err(|e| scoped("train", e))?;
        if !(t.adapt_lr >= 0.0) || !t.adapt_lr.is_finite() {
            return Err(Error::Config("train.adapt_lr: must be non-negative".into()));
        }
        Ok(cfg)
    }

    pub fn decision_config(&self) -> Result<DecisionConfig> {
        self.infer.validate().map_err(|e| scoped("infer", e))?;
        Ok(self.infer)
    }

    pub fn score_config(&self) -> Result<ScoreConfig> {
        let s = self.score;
        if !(s.frame_step > 0.0) || !(s.collar >= 0.0) {
            return Err(Error::Config(
                "score: need frame_step > 0 and collar >= 0".into(),
            ));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("simulate.snr", "5, inf").unwrap();
        c.set("features.high_freq", "3800").unwrap();
        c.set("model.kind", "blstm").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.simulate.snr[1], f64::INFINITY);
        assert!(c.resolved_text().starts_with("# eend "));
    }

    #[test]
    fn every_key_reads_back() {
        let c = RunConfig::default();
        for k in KEYS {
            let v = c.get(k).unwrap();
            let mut d = c.clone();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::parse("[simulate]\nbeta = 2\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 3") && e.to_string().contains("simulate.bogus"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::parse("[train\n").is_err());
        assert!(RunConfig::parse("seed 3\n").is_err());
        assert!(RunConfig::parse("seed = x\n").unwrap_err().to_string().contains("seed"));
        assert!(RunConfig::parse("[model]\nkind = cnn\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# top\nseed = 4 # trailing\n\n[infer]\nthreshold = 0.6\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.infer.threshold, 0.6);
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.set("simulate.beta", "-1").unwrap();
        let e = c.mixture_spec().unwrap_err();
        assert!(e.to_string().starts_with("simulate.beta"), "{e}");
        assert_eq!(e.exit_code(), 2);
        let mut c = RunConfig::default();
        c.set("train.warmup", "0").unwrap();
        assert!(c.train_config().unwrap_err().to_string().starts_with("train.warmup"));
        let mut c = RunConfig::default();
        c.set("model.heads", "3").unwrap();
        assert_eq!(c.init_model().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn seeds_follow_the_run_seed() {
        let mut a = RunConfig::default();
        a.set("model.model_dim", "8").unwrap();
        a.set("model.ffn_dim", "8").unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.mixture_spec().unwrap().seed, b.mixture_spec().unwrap().seed);
        assert_ne!(a.init_model().unwrap().tensors(), b.init_model().unwrap().tensors());
        assert_eq!(a.init_model().unwrap().tensors(), a.init_model().unwrap().tensors());
        assert_eq!(a.corpus_config(), b.corpus_config());
    }
}
