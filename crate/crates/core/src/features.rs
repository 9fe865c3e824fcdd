//! Log-mel filterbank features, context splicing and frame subsampling.
//!
//! Frames are Hann-windowed, zero-padded to the FFT size, turned into a power
//! spectrum and weighted by triangular filters equally spaced on the HTK mel
//! scale `2595 log10(1 + f / 700)`. Each filter energy is floored at `1e-10`
//! before the natural log. No mean or variance normalization is applied.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, log, log10, pow};

use crate::dsp::{Complex, Fft};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T x F`.
    pub frames: Tensor,
    /// Seconds between consecutive frames.
    pub frame_period: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelConfig {
    pub n_mels: usize,
    /// Seconds.
    pub frame_len: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub fft_size: usize,
    pub low_freq: f64,
    /// Upper filterbank edge in Hz; `None` means Nyquist.
    pub high_freq: Option<f64>,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            n_mels: 23,
            frame_len: 0.025,
            frame_shift: 0.010,
            fft_size: 256,
            low_freq: 20.0,
            high_freq: None,
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (pow(10.0, m / 2595.0) - 1.0)
}

/// Number of frames `floor((n - len) / shift) + 1`, or 0 when `n < len`.
pub fn frame_count(n_samples: usize, frame_len: usize, frame_shift: usize) -> usize {
    if n_samples < frame_len {
        0
    } else {
        (n_samples - frame_len) / frame_shift + 1
    }
}

/// Triangular mel filters over FFT bins `0..=fft_size/2`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels` rows of `fft_size / 2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, low: f64, high: f64) -> Result<Self> {
        if n_mels == 0 || !(high > low) || low < 0.0 {
            return Err(Error::param("n_mels", "need n_mels >= 1 and 0 <= low < high"));
        }
        let bins = fft_size / 2 + 1;
        let (ml, mh) = (hz_to_mel(low), hz_to_mel(high));
        let step = (mh - ml) / (n_mels + 1) as f64;
        let mut weights = Vec::with_capacity(n_mels);
        let mut centers_hz = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let left = ml + step * m as f64;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let row = (0..bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * sample_rate as f64 / fft_size as f64);
                    if mel > left && mel <= center {
                        (mel - left) / (center - left)
                    } else if mel > center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    }
                })
                .collect();
            weights.push(row);
        }
        Ok(MelFilterbank { weights, centers_hz })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

/// Log-mel filterbank energies at the configured frame rate.
pub fn logmel(wave: &Waveform, cfg: &LogMelConfig) -> Result<FeatureSequence> {
    let sr = wave.sample_rate as f64;
    let len = libm::round(cfg.frame_len * sr) as usize;
    let shift = libm::round(cfg.frame_shift * sr) as usize;
    if len == 0 || shift == 0 || cfg.fft_size < len || !cfg.fft_size.is_power_of_two() {
        return Err(Error::param("frame_len", "frame must fit a power-of-two FFT"));
    }
    let t = frame_count(wave.samples.len(), len, shift);
    if t == 0 {
        return Err(Error::EmptyInput(
            "waveform shorter than one analysis frame".to_string(),
        ));
    }
    let high = cfg.high_freq.unwrap_or(sr / 2.0);
    let bank = MelFilterbank::new(cfg.n_mels, cfg.fft_size, wave.sample_rate, cfg.low_freq, high)?;
    let window: Vec<f64> = (0..len)
        .map(|n| 0.5 - 0.5 * cos(2.0 * PI * n as f64 / (len - 1).max(1) as f64))
        .collect();
    let fft = Fft::new(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;
    let mut buf = vec![Complex::default(); cfg.fft_size];
    let mut power = vec![0.0; bins];
    let mut energies = vec![0.0; cfg.n_mels];
    let mut out = Vec::with_capacity(t * cfg.n_mels);
    for i in 0..t {
        let frame = &wave.samples[i * shift..i * shift + len];
        buf.iter_mut().for_each(|c| *c = Complex::default());
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            b.re = s * w;
        }
        fft.forward(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut energies);
        out.extend(energies.iter().map(|&e| log(e.max(LOG_FLOOR))));
    }
    Ok(FeatureSequence {
        frames: Tensor::matrix(t, cfg.n_mels, out)?,
        frame_period: shift as f64 / sr,
    })
}

/// Concatenates each frame with `left` previous and `right` following frames,
/// replicating the first and last frames at the edges.
pub fn splice(f: &FeatureSequence, left: usize, right: usize) -> FeatureSequence {
    let (t, d) = (f.frames.rows(), f.frames.cols());
    let width = (left + right + 1) * d;
    let mut out = Vec::with_capacity(t * width);
    for i in 0..t {
        for k in 0..left + right + 1 {
            let src = (i + k).saturating_sub(left).min(t - 1);
            out.extend_from_slice(f.frames.row(src));
        }
    }
    FeatureSequence {
        frames: Tensor::matrix(t, width, out).expect("splice shape"),
        frame_period: f.frame_period,
    }
}

/// Indices kept by subsampling: `0, factor, 2 factor, ...`.
pub fn subsample_indices(t: usize, factor: usize) -> Vec<usize> {
    (0..t).step_by(factor.max(1)).collect()
}

/// Keeps every `factor`-th frame starting at 0; `T_out = ceil(T / factor)`.
pub fn subsample(f: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor < 1 {
        return Err(Error::param("factor", "must be at least 1"));
    }
    let idx = subsample_indices(f.frames.rows(), factor);
    Ok(FeatureSequence {
        frames: f.frames.select_rows(&idx),
        frame_period: f.frame_period * factor as f64,
    })
}

/// Log-mel, splice and subsample settings for network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePipeline {
    pub logmel: LogMelConfig,
    pub context: usize,
    pub subsample: usize,
}

impl Default for FeaturePipeline {
    fn default() -> Self {
        FeaturePipeline {
            logmel: LogMelConfig::default(),
            context: 7,
            subsample: 10,
        }
    }
}

impl FeaturePipeline {
    pub fn output_dim(&self) -> usize {
        self.logmel.n_mels * (2 * self.context + 1)
    }

    pub fn extract(&self, wave: &Waveform) -> Result<FeatureSequence> {
        let base = logmel(wave, &self.logmel)?;
        let spliced = splice(&base, self.context, self.context);
        subsample(&spliced, self.subsample)
    }
}
