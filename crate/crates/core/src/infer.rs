//! From posteriors to diarization decisions, plus attention-map export data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labels::LabelSequence;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::score::{DiarizationHypothesis, Segment};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionConfig {
    pub threshold: f64,
    /// Odd median-filter length in frames; 1 disables filtering.
    pub median_window: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            threshold: 0.5,
            median_window: 11,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::param("threshold", format!("must be in (0, 1), got {}", self.threshold)));
        }
        check_window(self.median_window)
    }
}

fn check_window(w: usize) -> Result<()> {
    if w == 0 || w % 2 == 0 {
        return Err(Error::param("median_window", format!("must be odd and positive, got {w}")));
    }
    Ok(())
}

/// 1 where `z >= threshold`.
pub fn threshold_decisions(z: &Tensor, threshold: f64, frame_period: f64) -> Result<LabelSequence> {
    let (t, c) = (z.rows(), z.cols());
    if z.shape().len() != 2 {
        return Err(Error::dim("threshold_decisions", z.shape(), &[0, 0]));
    }
    let mut out = LabelSequence::zeros(t, c, frame_period)?;
    for i in 0..t {
        for (j, &v) in z.row(i).iter().enumerate() {
            out.set(i, j, v >= threshold);
        }
    }
    Ok(out)
}

/// Per-column majority over a centered window; near the edges the window
/// shrinks symmetrically to the frames available.
pub fn median_filter(labels: &LabelSequence, window: usize) -> Result<LabelSequence> {
    check_window(window)?;
    let t = labels.frames();
    let half = window / 2;
    let mut out = labels.clone();
    let mut prefix = vec![0usize; t + 1];
    for c in 0..labels.speakers() {
        for i in 0..t {
            prefix[i + 1] = prefix[i] + labels.get(i, c) as usize;
        }
        for i in 0..t {
            let k = half.min(i).min(t - 1 - i);
            let ones = prefix[i + k + 1] - prefix[i - k];
            out.set(i, c, 2 * ones > 2 * k + 1);
        }
    }
    Ok(out)
}

/// Thresholding followed by median filtering.
pub fn decide(z: &Tensor, cfg: &DecisionConfig, frame_period: f64) -> Result<LabelSequence> {
    cfg.validate()?;
    median_filter(&threshold_decisions(z, cfg.threshold, frame_period)?, cfg.median_window)
}

/// Hypothesis speaker name for output column `c`.
pub fn speaker_name(c: usize) -> String {
    format!("spk{c}")
}

/// Maximal runs of active frames per column, as `[i * fp, (j + 1) * fp)`.
pub fn frames_to_segments(labels: &LabelSequence, recording: &str) -> DiarizationHypothesis {
    let fp = labels.frame_period();
    let mut segments = Vec::new();
    for c in 0..labels.speakers() {
        let mut start = None;
        for i in 0..=labels.frames() {
            let on = i < labels.frames() && labels.get(i, c);
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    segments.push(Segment {
                        speaker: speaker_name(c),
                        start: s as f64 * fp,
                        end: i as f64 * fp,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    DiarizationHypothesis {
        recording: String::from(recording),
        segments,
    }
}

/// Full decoding of one recording's features.
pub fn diarize(model: &Model, features: &Tensor, frame_period: f64, cfg: &DecisionConfig, recording: &str) -> Result<DiarizationHypothesis> {
    let z = model.predict(features)?.posteriors;
    Ok(frames_to_segments(&decide(&z, cfg, frame_period)?, recording))
}

/// Attention matrices of encoder block `block` (1-based), one per head.
pub fn attention_maps(model: &Model, features: &Tensor, block: usize) -> Result<Vec<Tensor>> {
    let Model::SaEend { config, .. } = model else {
        return Err(Error::param("model", "attention maps need a self-attention model"));
    };
    if block < 1 || block > config.blocks {
        return Err(Error::param(
            "block",
            format!("must be within 1..={}, got {block}", config.blocks),
        ));
    }
    let mut att = model.predict(features)?.attention;
    Ok(att.swap_remove(block - 1))
}

/// Binary graymap (P5) with values mapped linearly from `[0, max]` to `[0, 255]`.
pub fn to_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.rows(), m.cols());
    let max = m.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if max > 0.0 {
            libm::round((v.max(0.0) / max) * 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Comma-separated rows with full precision.
pub fn to_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Column sums of an attention matrix: how much weight each frame receives.
pub fn column_mass(m: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += *v;
        }
    }
    out
}

#[cfg(test)]
mod tests;
