use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary `T x C` speaker-activity matrix on a fixed frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    frames: usize,
    speakers: usize,
    frame_period: f64,
    active: Vec<u8>,
}

impl LabelSequence {
    pub fn zeros(frames: usize, speakers: usize, frame_period: f64) -> Result<Self> {
        if speakers == 0 {
            return Err(Error::param("speakers", "need at least one speaker column"));
        }
        if !(frame_period > 0.0) {
            return Err(Error::param("frame_period", "must be positive"));
        }
        Ok(LabelSequence {
            frames,
            speakers,
            frame_period,
            active: vec![0; frames * speakers],
        })
    }

    /// Builds from per-frame rows of 0/1 entries.
    pub fn from_rows(rows: &[&[u8]], frame_period: f64) -> Result<Self> {
        let speakers = rows.first().map_or(0, |r| r.len());
        let mut out = Self::zeros(rows.len(), speakers.max(1), frame_period)?;
        for (t, r) in rows.iter().enumerate() {
            if r.len() != speakers {
                return Err(Error::dim("label rows", &[speakers], &[r.len()]));
            }
            for (c, &v) in r.iter().enumerate() {
                if v > 1 {
                    return Err(Error::param("labels", "entries must be 0 or 1"));
                }
                out.set(t, c, v == 1);
            }
        }
        Ok(out)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn get(&self, t: usize, c: usize) -> bool {
        self.active[t * self.speakers + c] == 1
    }

    pub fn set(&mut self, t: usize, c: usize, on: bool) {
        self.active[t * self.speakers + c] = on as u8;
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.active[t * self.speakers..(t + 1) * self.speakers]
    }

    /// Number of active speakers in frame `t`.
    pub fn active_count(&self, t: usize) -> usize {
        self.row(t).iter().map(|&v| v as usize).sum()
    }

    pub fn column(&self, c: usize) -> Vec<bool> {
        (0..self.frames).map(|t| self.get(t, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[bool]) {
        for (t, &v) in values.iter().enumerate().take(self.frames) {
            self.set(t, c, v);
        }
    }

    /// Labels with column `c` taken from column `perm[c]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> LabelSequence {
        let mut out = self.clone();
        for t in 0..self.frames {
            for (c, &src) in perm.iter().enumerate() {
                out.set(t, c, self.get(t, src));
            }
        }
        out
    }

    /// Frames `start..end` (clamped) as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> LabelSequence {
        let end = end.min(self.frames);
        let start = start.min(end);
        LabelSequence {
            frames: end - start,
            speakers: self.speakers,
            frame_period: self.frame_period,
            active: self.active[start * self.speakers..end * self.speakers].to_vec(),
        }
    }

    /// Keeps the listed frames in order; the new period is `frame_period * factor`.
    pub(crate) fn select_frames(&self, frames: &[usize], factor: usize) -> LabelSequence {
        let mut active = Vec::with_capacity(frames.len() * self.speakers);
        for &t in frames {
            active.extend_from_slice(self.row(t));
        }
        LabelSequence {
            frames: frames.len(),
            speakers: self.speakers,
            frame_period: self.frame_period * factor as f64,
            active,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.active.iter().map(|&v| v as f64).collect();
        Tensor::new(alloc::vec![self.frames.max(1), self.speakers], data)
            .unwrap_or_else(|_| Tensor::zeros(&[1, self.speakers]))
    }

    pub fn total_active(&self) -> usize {
        self.active.iter().map(|&v| v as usize).sum()
    }
}
