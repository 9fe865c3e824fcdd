//! Optimization: Adam with a warm-up schedule, chunked training data, the
//! epoch loop, checkpoint averaging and adaptation.
//!
//! Sequences in a batch share one graph but are run separately, so no
//! padding is involved; each sequence's loss is weighted by its share of the
//! batch frames, which equals the masked mean over a padded batch.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{pow, sqrt};

use crate::error::{Error, Result};
use crate::features::{FeaturePipeline, FeatureSequence};
use crate::labels::LabelSequence;
use crate::loss::{dc_loss_node, multi_objective_node, permutation_free_loss_node, permutation_free_loss_with, LossConfig};
use crate::model::{blstm_eend_graph, sa_eend_graph, Model};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::simulate::{subsample_labels, Mixture};

/// Remainders shorter than this are dropped by [`chunk`].
pub const MIN_CHUNK_FRAMES: usize = 10;

/// A feature sequence with its frame-aligned reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub labels: LabelSequence,
}

impl Sample {
    pub fn new(features: Tensor, labels: LabelSequence) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.frames() {
            return Err(Error::dim("sample", features.shape(), &[labels.frames()]));
        }
        Ok(Sample { features, labels })
    }

    /// Features through `pipeline`, labels subsampled to match.
    pub fn from_mixture(m: &Mixture, pipeline: &FeaturePipeline) -> Result<Self> {
        let FeatureSequence { frames, .. } = pipeline.extract(&m.wave)?;
        let labels = subsample_labels(&m.labels, pipeline.subsample)?;
        Sample::new(frames, labels)
    }

    pub fn frames(&self) -> usize {
        self.labels.frames()
    }
}

/// Splits every sample into consecutive non-overlapping chunks of
/// `chunk_len` frames; a shorter tail is kept when it has at least
/// [`MIN_CHUNK_FRAMES`] frames.
pub fn chunk(samples: &[Sample], chunk_len: usize) -> Result<Vec<Sample>> {
    if chunk_len < 1 {
        return Err(Error::param("chunk_len", "must be at least 1"));
    }
    let mut out = Vec::new();
    for s in samples {
        let t = s.frames();
        let mut start = 0;
        while start < t {
            let end = (start + chunk_len).min(t);
            if end - start == chunk_len || end - start >= MIN_CHUNK_FRAMES {
                let rows: Vec<usize> = (start..end).collect();
                out.push(Sample {
                    features: s.features.select_rows(&rows),
                    labels: s.labels.slice(start, end),
                });
            }
            start = end;
        }
    }
    Ok(out)
}

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("noam_lr is defined from step 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::param("warmup", "warmup and d_model must be positive"));
    }
    let s = step as f64;
    Ok(pow(d_model as f64, -0.5) * (pow(s, -0.5)).min(s * pow(warmup as f64, -1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Warm-up schedule on the model width, multiplied by `scale`.
    Noam { warmup: u64, scale: f64 },
    Fixed(f64),
}

impl LrSchedule {
    pub fn lr(&self, step: u64, d_model: usize) -> Result<f64> {
        match *self {
            LrSchedule::Noam { warmup, scale } => Ok(scale * noam_lr(step, d_model, warmup)?),
            LrSchedule::Fixed(lr) => Ok(lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub chunk_len: usize,
    pub schedule: LrSchedule,
    pub average_last: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 40,
            chunk_len: 500,
            schedule: LrSchedule::Noam {
                warmup: 2000,
                scale: 1.0,
            },
            average_last: 10,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if self.chunk_len < 1 {
            return Err(Error::param("chunk_len", "must be at least 1"));
        }
        if self.average_last < 1 {
            return Err(Error::param("average_last", "must be at least 1"));
        }
        match self.schedule {
            LrSchedule::Noam { warmup, scale } => {
                if warmup < 1 {
                    return Err(Error::param("warmup_steps", "must be at least 1"));
                }
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(Error::param("lr_scale", "must be positive"));
                }
            }
            LrSchedule::Fixed(lr) => {
                if !(lr >= 0.0) || !lr.is_finite() {
                    return Err(Error::param("lr", "must be non-negative"));
                }
            }
        }
        self.loss.validate()
    }
}

/// Adam moments for every parameter tensor in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &Model, schedule: &LrSchedule) -> Self {
        let (beta2, eps) = match schedule {
            LrSchedule::Noam { .. } => (0.98, 1e-9),
            LrSchedule::Fixed(_) => (0.999, 1e-8),
        };
        let zeros: Vec<Tensor> = model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every model tensor.
pub fn adam_step(model: &mut Model, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let named = model.named_tensors();
    if grads.len() != named.len() || state.m.len() != named.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            named.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in named.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - pow(b1, state.step as f64);
    let c2 = 1.0 - pow(b2, state.step as f64);
    let mut k = 0;
    let (ms, vs) = (&mut state.m, &mut state.v);
    model.visit_mut(&mut |p| {
        let (m, v, g) = (&mut ms[k], &mut vs[k], &grads[k]);
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= lr * (*mi / c1) / (sqrt(*vi / c2) + eps);
        }
        k += 1;
    });
    Ok(())
}

fn bind(g: &mut Graph, model: &Model) -> Vec<Var> {
    model.tensors().into_iter().map(|t| g.param(t.clone())).collect()
}

/// Training objective of a batch and its gradients in visit order.
pub fn batch_gradients(model: &Model, batch: &[&Sample], loss: &LossConfig) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = batch.iter().map(|s| s.frames()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("batch has no frames".into()));
    }
    let mut g = Graph::new();
    let vars = bind(&mut g, model);
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(s.features.clone());
        let share = s.frames() as f64 / total as f64;
        let term = match model {
            Model::SaEend { config, params } => {
                let mut it = vars.iter().copied();
                let bound = params.map(&mut |_| it.next().expect("bound in visit order"));
                let out = sa_eend_graph(&mut g, x, &bound, config, None)?;
                permutation_free_loss_node(&mut g, out.posteriors, &s.labels, loss.bce_clip, None)?.0
            }
            Model::Blstm { config, params } => {
                let mut it = vars.iter().copied();
                let bound = params.map(&mut |_| it.next().expect("bound in visit order"));
                let out = blstm_eend_graph(&mut g, x, &bound, config)?;
                let (pf, _) = permutation_free_loss_node(&mut g, out.posteriors, &s.labels, loss.bce_clip, None)?;
                let t = s.frames() as f64;
                let dc = dc_loss_node(&mut g, out.embeddings, &s.labels, None, 1.0 / (t * t))?;
                multi_objective_node(&mut g, pf, dc, loss.alpha)?
            }
        };
        terms.push(g.scale(term, share));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let value = g.value(acc).item();
    let grads = g.backward(acc)?;
    Ok((value, vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()))
}

/// Frame-weighted permutation-free BCE over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], loss: &LossConfig) -> Result<f64> {
    let (mut sum, mut frames) = (0.0, 0usize);
    for s in samples {
        let z = model.predict(&s.features)?.posteriors;
        let pf = permutation_free_loss_with(&z, &s.labels, loss.bce_clip, None)?;
        sum += pf.loss * s.frames() as f64;
        frames += s.frames();
    }
    if frames == 0 {
        return Err(Error::EmptyInput("evaluation set has no frames".into()));
    }
    Ok(sum / frames as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    /// Mean of the last `average_last` epoch checkpoints.
    pub averaged: Model,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState,
}

/// Width the warm-up schedule is scaled by.
pub fn schedule_width(model: &Model) -> usize {
    match model {
        Model::SaEend { config, .. } => config.model_dim,
        Model::Blstm { config, .. } => 2 * config.hidden,
    }
}

/// Trains `model` for `cfg.epochs` epochs. `on_epoch` sees every epoch's
/// record and checkpoint; an error from it stops training.
pub fn fit(
    model: Model,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model, &AdamState) -> Result<()>,
) -> Result<FitOutcome> {
    let state = AdamState::new(&model, &cfg.schedule);
    fit_from(model, state, train, valid, cfg, on_epoch)
}

/// [`fit`] continuing from an existing optimizer state.
pub fn fit_from(
    mut model: Model,
    mut state: AdamState,
    train: &[Sample],
    valid: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model, &AdamState) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let chunks = chunk(train, cfg.chunk_len)?;
    if chunks.is_empty() {
        return Err(Error::EmptyInput("training set has no chunks".into()));
    }
    for s in chunks.iter().chain(valid) {
        if s.features.cols() != model.in_dim() || s.labels.speakers() != model.speakers() {
            return Err(Error::dim(
                "training sample",
                &[s.features.cols(), s.labels.speakers()],
                &[model.in_dim(), model.speakers()],
            ));
        }
    }
    let width = schedule_width(&model);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut recent: VecDeque<Model> = VecDeque::with_capacity(cfg.average_last);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut frames) = (0.0, 0usize);
        let mut lr = 0.0;
        for (step_in_epoch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &chunks[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step_in_epoch + 1,
                });
            }
            lr = cfg.schedule.lr(state.step + 1, width)?;
            adam_step(&mut model, &grads, &mut state, lr)?;
            let n: usize = batch.iter().map(|s| s.frames()).sum();
            loss_sum += loss * n as f64;
            frames += n;
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(evaluate(&model, valid, &cfg.loss)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / frames as f64,
            valid_loss,
            lr,
            steps: state.step,
        };
        on_epoch(&record, &model, &state)?;
        history.push(record);
        if recent.len() == cfg.average_last {
            recent.pop_front();
        }
        recent.push_back(model.clone());
    }
    let averaged = if recent.is_empty() {
        model.clone()
    } else {
        average_models(recent.make_contiguous())?
    };
    Ok(FitOutcome {
        model,
        averaged,
        history,
        optimizer: state,
    })
}

/// Tensor-wise arithmetic mean: every tensor is summed in checkpoint order
/// and divided by the count.
pub fn average_models(models: &[Model]) -> Result<Model> {
    let first = models.first().ok_or_else(|| Error::EmptyInput("no checkpoints to average".into()))?;
    if let Some(i) = models.iter().position(|m| !m.same_config(first)) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint {i} has a different configuration from checkpoint 0"
        )));
    }
    let n = models.len() as f64;
    let mut sums: Vec<Tensor> = first.tensors().into_iter().cloned().collect();
    for m in &models[1..] {
        for (s, t) in sums.iter_mut().zip(m.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
    for s in &mut sums {
        s.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    let mut out = first.clone();
    out.set_tensors(sums)?;
    Ok(out)
}

/// Retrains `model` on an adaptation set with a fixed learning rate and
/// returns the average of the last epochs.
pub fn adapt(
    model: Model,
    adaptation: &[Sample],
    valid: &[Sample],
    lr: f64,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model, &AdamState) -> Result<()>,
) -> Result<FitOutcome> {
    if adaptation.is_empty() {
        return Err(Error::EmptyInput("adaptation set is empty".into()));
    }
    let cfg = TrainConfig {
        schedule: LrSchedule::Fixed(lr),
        ..cfg.clone()
    };
    fit(model, adaptation, valid, &cfg, on_epoch)
}

/// Human-readable one-line summary of an epoch.
pub fn describe(r: &EpochRecord) -> String {
    match r.valid_loss {
        Some(v) => format!("epoch {} train {:.4} valid {:.4} lr {:.3e}", r.epoch, r.train_loss, v, r.lr),
        None => format!("epoch {} train {:.4} lr {:.3e}", r.epoch, r.train_loss, r.lr),
    }
}
