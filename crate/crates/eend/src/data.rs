//! Simulated dataset directories and training history.
//!
//! A dataset directory holds `wav/<id>.wav`, the reference `ref.rttm`, one
//! JSON object per mixture in `meta.jsonl`, and the resolved `config.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use eend_core::features::{FeaturePipeline, FeatureSequence, Waveform};
use eend_core::score::{emit_rttm, group_records, parse_rttm, DiarizationHypothesis, RttmRecord};
use eend_core::simulate::{overlap_ratio, spans_to_labels, subsample_labels, Mixture, UtteranceSpan};
use eend_core::train::{EpochRecord, Sample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav};
use crate::error::{Error, Result};

pub const REFERENCE: &str = "ref.rttm";
pub const METADATA: &str = "meta.jsonl";
pub const CONFIG: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub id: String,
    pub seed: u64,
    pub beta: f64,
    /// `None` for a noiseless mixture.
    pub snr: Option<f64>,
    /// Speaker name per label column.
    pub speakers: Vec<String>,
    pub overlap_ratio: f64,
    pub duration: f64,
}

pub fn mixture_id(index: usize) -> String {
    format!("mix{index:05}")
}

impl MixtureMeta {
    pub fn new(id: String, m: &Mixture, speaker_names: Vec<String>) -> Self {
        MixtureMeta {
            id,
            seed: m.seed,
            beta: m.beta,
            snr: m.snr.is_finite().then_some(m.snr),
            speakers: speaker_names,
            overlap_ratio: overlap_ratio(&m.labels),
            duration: m.wave.duration(),
        }
    }
}

/// Reference records of one mixture, in utterance order.
pub fn reference_records(meta: &MixtureMeta, m: &Mixture) -> Vec<RttmRecord> {
    m.segments()
        .into_iter()
        .map(|(c, s, e)| RttmRecord {
            file: meta.id.clone(),
            channel: 1,
            onset: s,
            duration: e - s,
            speaker: meta.speakers[c].clone(),
        })
        .collect()
}

pub fn wav_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("wav").join(format!("{id}.wav"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

/// Writes audio (in parallel), the reference RTTM and the metadata.
pub fn write_dataset(dir: &Path, items: &[(MixtureMeta, Mixture)]) -> Result<()> {
    create_dir(&dir.join("wav"))?;
    items
        .par_iter()
        .try_for_each(|(meta, m)| write_wav(&wav_path(dir, &meta.id), &m.wave))?;
    let records: Vec<RttmRecord> = items.iter().flat_map(|(meta, m)| reference_records(meta, m)).collect();
    write_text(&dir.join(REFERENCE), &emit_rttm(&records))?;
    let mut jsonl = String::new();
    for (meta, _) in items {
        jsonl.push_str(&serde_json::to_string(meta).expect("metadata serializes"));
        jsonl.push('\n');
    }
    write_text(&dir.join(METADATA), &jsonl)
}

pub fn read_metadata(dir: &Path) -> Result<Vec<MixtureMeta>> {
    let path = dir.join(METADATA);
    read_text(&path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_rttm(path: &Path) -> Result<Vec<DiarizationHypothesis>> {
    let records = parse_rttm(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(group_records(&records))
}

/// One recording of a dataset with its reference.
#[derive(Debug, Clone)]
pub struct Recording {
    pub meta: MixtureMeta,
    pub wave: Waveform,
    pub reference: DiarizationHypothesis,
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Recording>> {
    let metas = read_metadata(dir)?;
    let rttm = dir.join(REFERENCE);
    let refs = read_rttm(&rttm)?;
    metas
        .into_par_iter()
        .map(|meta| {
            let wave = read_wav(&wav_path(dir, &meta.id))?;
            let reference = match refs.iter().position(|h| h.recording == meta.id) {
                Some(i) => refs[i].clone(),
                None => DiarizationHypothesis {
                    recording: meta.id.clone(),
                    segments: Vec::new(),
                },
            };
            Ok(Recording { meta, wave, reference })
        })
        .collect()
}

/// Reference labels on the 10 ms grid, columns in metadata speaker order.
pub fn reference_labels(r: &Recording, path: &Path) -> Result<eend_core::LabelSequence> {
    let sr = r.wave.sample_rate as f64;
    let spans = r
        .reference
        .segments
        .iter()
        .map(|s| {
            let column = r
                .meta
                .speakers
                .iter()
                .position(|n| *n == s.speaker)
                .ok_or_else(|| Error::format(path, format!("{}: speaker `{}` is not in the metadata", r.meta.id, s.speaker)))?;
            Ok(UtteranceSpan {
                column,
                start_sample: (s.start * sr).round() as usize,
                end_sample: ((s.end * sr).round() as usize).min(r.wave.len()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(spans_to_labels(&spans, r.wave.len(), r.meta.speakers.len(), r.wave.sample_rate)?)
}

/// Features and subsampled labels of every recording, in metadata order.
pub fn dataset_samples(dir: &Path, pipeline: &FeaturePipeline) -> Result<Vec<Sample>> {
    let rttm = dir.join(REFERENCE);
    read_dataset(dir)?
        .par_iter()
        .map(|r| {
            let labels = subsample_labels(&reference_labels(r, &rttm)?, pipeline.subsample)?;
            let FeatureSequence { frames, .. } = pipeline.extract(&r.wave)?;
            Ok(Sample::new(frames, labels)?)
        })
        .collect()
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,valid_loss,lr\n");
    for r in history {
        let valid = r.valid_loss.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, valid, r.lr));
    }
    s
}
