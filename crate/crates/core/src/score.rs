//! RTTM text format and frame-rasterized DER with collar and SAD breakdown.
//!
//! Both sides are rasterized on a `frame_step` grid; frame `i` is active for
//! a segment `[s, e)` when its midpoint `(i + 0.5) * step` lies inside it.
//! With a collar, frames whose midpoint is closer than `collar` to any
//! reference segment boundary are not scored.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::ceil;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

/// Speaker segments of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct DiarizationHypothesis {
    pub recording: String,
    pub segments: Vec<Segment>,
}

impl DiarizationHypothesis {
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.segments.iter().map(|g| g.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn to_records(&self) -> Vec<RttmRecord> {
        self.segments
            .iter()
            .map(|s| RttmRecord {
                file: self.recording.clone(),
                channel: 1,
                onset: s.start,
                duration: s.end - s.start,
                speaker: s.speaker.clone(),
            })
            .collect()
    }
}

/// One `SPEAKER` line.
#[derive(Debug, Clone, PartialEq)]
pub struct RttmRecord {
    pub file: String,
    pub channel: u32,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

/// Parse error with its 1-based line number.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("RTTM line {line}: {reason}")]
pub struct RttmError {
    pub line: usize,
    pub reason: String,
}

pub fn parse_rttm(text: &str) -> core::result::Result<Vec<RttmRecord>, RttmError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| RttmError { line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", f.len())));
        }
        if f[0] != "SPEAKER" {
            return Err(err(format!("unsupported record type `{}`", f[0])));
        }
        let channel = f[2].parse().map_err(|_| err(format!("bad channel `{}`", f[2])))?;
        let onset: f64 = f[3].parse().map_err(|_| err(format!("bad onset `{}`", f[3])))?;
        let duration: f64 = f[4].parse().map_err(|_| err(format!("bad duration `{}`", f[4])))?;
        if !(onset >= 0.0) || !onset.is_finite() {
            return Err(err(format!("onset must be >= 0, got {onset}")));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(err(format!("duration must be > 0, got {duration}")));
        }
        out.push(RttmRecord {
            file: f[1].to_string(),
            channel,
            onset,
            duration,
            speaker: f[7].to_string(),
        });
    }
    Ok(out)
}

/// Seconds rounded to nanoseconds, trailing zeros trimmed down to two places.
fn fmt_time(v: f64) -> String {
    let mut s = format!("{v:.9}");
    while s.ends_with('0') && s.len() - s.find('.').map_or(s.len(), |i| i + 1) > 2 {
        s.pop();
    }
    s
}

pub fn emit_rttm(records: &[RttmRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "SPEAKER {} {} {} {} <NA> <NA> {} <NA> <NA>\n",
            r.file,
            r.channel,
            fmt_time(r.onset),
            fmt_time(r.duration),
            r.speaker
        ));
    }
    s
}

/// Groups records by recording id (sorted), preserving line order within each.
pub fn group_records(records: &[RttmRecord]) -> Vec<DiarizationHypothesis> {
    let mut map: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for r in records {
        map.entry(r.file.clone()).or_default().push(Segment {
            speaker: r.speaker.clone(),
            start: r.onset,
            end: r.onset + r.duration,
        });
    }
    map.into_iter()
        .map(|(recording, segments)| DiarizationHypothesis { recording, segments })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub collar: f64,
    pub frame_step: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            collar: 0.25,
            frame_step: 0.01,
        }
    }
}

/// Frame counts behind a [`DerReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    pub scored_frames: usize,
    /// Sum over scored frames of the number of reference speakers.
    pub ref_speech: usize,
    pub miss: usize,
    pub false_alarm: usize,
    pub confusion: usize,
    /// Scored frames with at least one reference speaker.
    pub ref_speech_frames: usize,
    pub sad_miss: usize,
    pub sad_fa: usize,
}

impl ErrorCounts {
    fn add(&mut self, o: &ErrorCounts) {
        self.scored_frames += o.scored_frames;
        self.ref_speech += o.ref_speech;
        self.miss += o.miss;
        self.false_alarm += o.false_alarm;
        self.confusion += o.confusion;
        self.ref_speech_frames += o.ref_speech_frames;
        self.sad_miss += o.sad_miss;
        self.sad_fa += o.sad_fa;
    }
}

/// Percentages of reference speech time. SAD errors are relative to the
/// frames with any reference speech.
#[derive(Debug, Clone, PartialEq)]
pub struct DerReport {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub sad_miss: f64,
    pub sad_fa: f64,
    pub scored_time: f64,
    pub counts: ErrorCounts,
}

impl DerReport {
    fn from_counts(c: ErrorCounts, step: f64) -> Result<Self> {
        if c.ref_speech == 0 {
            return Err(Error::NoReferenceSpeech);
        }
        let pct = |n: usize, d: usize| 100.0 * n as f64 / d as f64;
        Ok(DerReport {
            der: pct(c.miss + c.false_alarm + c.confusion, c.ref_speech),
            miss: pct(c.miss, c.ref_speech),
            false_alarm: pct(c.false_alarm, c.ref_speech),
            confusion: pct(c.confusion, c.ref_speech),
            sad_miss: pct(c.sad_miss, c.ref_speech_frames),
            sad_fa: pct(c.sad_fa, c.ref_speech_frames),
            scored_time: c.scored_frames as f64 * step,
            counts: c,
        })
    }
}

/// `speakers x frames` activity on the grid, speakers in sorted-name order.
pub fn rasterize(h: &DiarizationHypothesis, frames: usize, step: f64) -> (Vec<String>, Vec<Vec<bool>>) {
    let names = h.speakers();
    let mut grid = vec![vec![false; frames]; names.len()];
    for s in &h.segments {
        let k = names.binary_search(&s.speaker).expect("speaker listed");
        for (i, cell) in grid[k].iter_mut().enumerate() {
            let mid = (i as f64 + 0.5) * step;
            if s.start <= mid && mid < s.end {
                *cell = true;
            }
        }
    }
    (names, grid)
}

fn scored_mask(reference: &DiarizationHypothesis, frames: usize, cfg: &ScoreConfig) -> Vec<bool> {
    let mut mask = vec![true; frames];
    if cfg.collar > 0.0 {
        for s in &reference.segments {
            for b in [s.start, s.end] {
                for (i, m) in mask.iter_mut().enumerate() {
                    let mid = (i as f64 + 0.5) * cfg.frame_step;
                    if (mid - b).abs() < cfg.collar {
                        *m = false;
                    }
                }
            }
        }
    }
    mask
}

/// Injective assignments of `0..small` into `0..large`, lexicographic.
fn injections(small: usize, large: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, large: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(k, large, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(small, large, &mut Vec::new(), &mut vec![false; large], &mut out);
    out
}

/// Maximum speaker count on either side.
pub const MAX_SCORED_SPEAKERS: usize = 8;

/// Reference-to-hypothesis speaker pairs maximizing matched speech, ties to
/// the lexicographically first assignment.
pub fn best_mapping(overlap: &[Vec<usize>], n_ref: usize, n_hyp: usize) -> Vec<(usize, usize)> {
    let ref_side = n_ref <= n_hyp;
    let (small, large) = if ref_side { (n_ref, n_hyp) } else { (n_hyp, n_ref) };
    let mut best: Option<(usize, Vec<(usize, usize)>)> = None;
    for inj in injections(small, large) {
        let pairs: Vec<(usize, usize)> = inj
            .iter()
            .enumerate()
            .map(|(a, &b)| if ref_side { (a, b) } else { (b, a) })
            .collect();
        let score: usize = pairs.iter().map(|&(r, h)| overlap[r][h]).sum();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, pairs));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

fn score_recording(reference: &DiarizationHypothesis, hypothesis: &DiarizationHypothesis, cfg: &ScoreConfig) -> Result<ErrorCounts> {
    let end = reference
        .segments
        .iter()
        .chain(&hypothesis.segments)
        .fold(0.0f64, |m, s| m.max(s.end));
    let frames = ceil(end / cfg.frame_step) as usize;
    let (rn, rg) = rasterize(reference, frames, cfg.frame_step);
    let (hn, hg) = rasterize(hypothesis, frames, cfg.frame_step);
    if rn.len() > MAX_SCORED_SPEAKERS || hn.len() > MAX_SCORED_SPEAKERS {
        return Err(Error::Capacity(format!(
            "recording {} has {} reference and {} hypothesis speakers",
            reference.recording,
            rn.len(),
            hn.len()
        )));
    }
    let mask = scored_mask(reference, frames, cfg);
    let mut overlap = vec![vec![0usize; hn.len()]; rn.len()];
    for (r, rrow) in rg.iter().enumerate() {
        for (h, hrow) in hg.iter().enumerate() {
            overlap[r][h] = (0..frames).filter(|&i| mask[i] && rrow[i] && hrow[i]).count();
        }
    }
    let pairs = best_mapping(&overlap, rn.len(), hn.len());
    let mut c = ErrorCounts::default();
    for i in (0..frames).filter(|&i| mask[i]) {
        let r = rg.iter().filter(|row| row[i]).count();
        let h = hg.iter().filter(|row| row[i]).count();
        let correct = pairs.iter().filter(|&&(a, b)| rg[a][i] && hg[b][i]).count();
        c.scored_frames += 1;
        c.ref_speech += r;
        c.miss += r.saturating_sub(h);
        c.false_alarm += h.saturating_sub(r);
        c.confusion += r.min(h) - correct;
        if r > 0 {
            c.ref_speech_frames += 1;
            if h == 0 {
                c.sad_miss += 1;
            }
        } else if h > 0 {
            c.sad_fa += 1;
        }
    }
    Ok(c)
}

/// DER over a set of recordings; both sides must list the same ids.
pub fn der(reference: &[DiarizationHypothesis], hypothesis: &[DiarizationHypothesis], cfg: &ScoreConfig) -> Result<DerReport> {
    if !(cfg.frame_step > 0.0) || !(cfg.collar >= 0.0) {
        return Err(Error::param("frame_step", "frame step must be positive and collar non-negative"));
    }
    let refs: BTreeMap<&str, &DiarizationHypothesis> = reference.iter().map(|h| (h.recording.as_str(), h)).collect();
    let hyps: BTreeMap<&str, &DiarizationHypothesis> = hypothesis.iter().map(|h| (h.recording.as_str(), h)).collect();
    let only_ref: Vec<String> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(|k| k.to_string()).collect();
    let only_hyp: Vec<String> = hyps.keys().filter(|k| !refs.contains_key(*k)).map(|k| k.to_string()).collect();
    if !only_ref.is_empty() || !only_hyp.is_empty() {
        return Err(Error::RecordingMismatch { only_ref, only_hyp });
    }
    let mut total = ErrorCounts::default();
    for (id, r) in &refs {
        total.add(&score_recording(r, hyps[id], cfg)?);
    }
    DerReport::from_counts(total, cfg.frame_step)
}

/// Convenience for a single recording.
pub fn der_single(reference: &DiarizationHypothesis, hypothesis: &DiarizationHypothesis, cfg: &ScoreConfig) -> Result<DerReport> {
    let h = DiarizationHypothesis {
        recording: reference.recording.clone(),
        segments: hypothesis.segments.clone(),
    };
    der(core::slice::from_ref(reference), core::slice::from_ref(&h), cfg)
}
