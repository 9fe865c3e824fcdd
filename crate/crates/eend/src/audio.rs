//! 16-bit mono PCM WAV at 8 kHz.

use std::path::Path;

use eend_core::features::Waveform;
use hound::{SampleFormat, WavSpec};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn check(path: &Path, s: WavSpec) -> Result<()> {
    let bad = |field: &str, want: &str, got: String| Err(Error::format(path, format!("{field}: expected {want}, found {got}")));
    if s.sample_format != SampleFormat::Int {
        return bad("sample_format", "PCM integer", "IEEE float".into());
    }
    if s.bits_per_sample != 16 {
        return bad("bits_per_sample", "16", s.bits_per_sample.to_string());
    }
    if s.channels != 1 {
        return bad("channels", "1", s.channels.to_string());
    }
    if s.sample_rate != SAMPLE_RATE {
        return bad("sample_rate", "8000", s.sample_rate.to_string());
    }
    Ok(())
}

/// Samples scaled to `[-1, 1)` by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path)(io),
        other => Error::format(path, other.to_string()),
    })?;
    check(path, reader.spec())?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| Error::format(path, format!("data: {e}")))?;
    Ok(Waveform::new(samples, SAMPLE_RATE)?)
}

/// Rounds to the nearest 16-bit level, saturating outside `[-1, 1)`.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::format(path, format!("sample_rate: expected 8000, found {}", wave.sample_rate)));
    }
    let fail = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path)(io),
        other => Error::format(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec()).map_err(fail)?;
    for &s in &wave.samples {
        w.write_sample(quantize(s)).map_err(fail)?;
    }
    w.finalize().map_err(fail)
}
