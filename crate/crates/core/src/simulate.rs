//! Diarization-style mixture simulation over a synthetic corpus.
//!
//! Speakers are source-filter voices: a sawtooth glottal source at the
//! speaker's fundamental, passed through a cascade of formant resonators and
//! amplitude-modulated at a syllabic rate. Each mixture draws its speakers,
//! one RIR per speaker, a number of utterances and exponential silences
//! between them, sums the speaker tracks and adds looped background noise at
//! a sampled SNR.
//!
//! Labels live on a 10 ms grid whose frame count matches the 25 ms / 10 ms
//! analysis frames of [`crate::features::logmel`]; frame `i` covers samples
//! `[i * shift, (i + 1) * shift)` and is active for a speaker when at least
//! half of it lies inside one of that speaker's utterances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, exp, pow, round, sin, sqrt};

use crate::dsp::convolve;
use crate::error::{Error, Result};
use crate::features::{frame_count, subsample_indices, Waveform};
use crate::labels::LabelSequence;
use crate::rng::{derive_seed, SplitMix64};

/// Minimum spacing between the fundamentals of any two corpus speakers.
pub const MIN_F0_SEPARATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Formant {
    pub freq: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: usize,
    /// Fundamental frequency in Hz.
    pub f0: f64,
    pub formants: [Formant; 3],
    /// Syllables per second of the amplitude envelope.
    pub syllable_rate: f64,
}

impl SpeakerProfile {
    pub fn name(&self) -> String {
        format!("spk{:03}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub profile: SpeakerProfile,
    pub utterances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utt_per_speaker: usize,
    /// Utterance duration range in seconds.
    pub utt_dur: (f64, f64),
    pub f0_range: (f64, f64),
    pub n_noises: usize,
    /// Seconds per noise signal.
    pub noise_dur: f64,
    pub n_rirs: usize,
    /// RIR length in seconds; anything under two samples yields a unit impulse.
    pub rir_len: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 40,
            utt_per_speaker: 20,
            utt_dur: (1.0, 4.0),
            f0_range: (80.0, 480.0),
            n_noises: 8,
            noise_dur: 3.0,
            n_rirs: 16,
            rir_len: 0.05,
            sample_rate: 8000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<Speaker>,
    pub noises: Vec<Vec<f64>>,
    pub rirs: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub n_spk: usize,
    pub n_umin: usize,
    pub n_umax: usize,
    /// Mean silence between utterances, seconds.
    pub beta: f64,
    /// SNR choices in dB; `f64::INFINITY` disables noise.
    pub snr_choices: Vec<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_spk < 1 {
            return Err(Error::param("n_spk", "must be at least 1"));
        }
        if self.n_umin < 1 || self.n_umin > self.n_umax {
            return Err(Error::param("n_umin", "need 1 <= n_umin <= n_umax"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be positive, got {}", self.beta)));
        }
        if self.snr_choices.is_empty() || self.snr_choices.iter().any(|s| s.is_nan()) {
            return Err(Error::param("snr_choices", "need at least one SNR value"));
        }
        Ok(())
    }
}

/// One speaker's utterance placed in the mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceSpan {
    /// Label column.
    pub column: usize,
    pub start_sample: usize,
    pub end_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub wave: Waveform,
    /// 10 ms grid.
    pub labels: LabelSequence,
    /// Corpus speaker id per label column.
    pub speakers: Vec<usize>,
    pub utterances: Vec<UtteranceSpan>,
    /// Length of each speaker track before zero padding.
    pub track_lengths: Vec<usize>,
    pub beta: f64,
    pub snr: f64,
    pub seed: u64,
}

impl Mixture {
    /// Reference segments `(column, start seconds, end seconds)`.
    pub fn segments(&self) -> Vec<(usize, f64, f64)> {
        let sr = self.wave.sample_rate as f64;
        self.utterances
            .iter()
            .map(|u| (u.column, u.start_sample as f64 / sr, u.end_sample as f64 / sr))
            .collect()
    }
}

fn resonate(x: &mut [f64], f: Formant, sr: f64) {
    let r = exp(-PI * f.bandwidth / sr);
    let c = -r * r;
    let b = 2.0 * r * cos(2.0 * PI * f.freq / sr);
    let a = 1.0 - b - c;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = a * *v + b * y1 + c * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64);
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn synthesize_utterance(p: &SpeakerProfile, n: usize, sr: f64, rng: &mut SplitMix64) -> Vec<f64> {
    let f0 = p.f0 * (1.0 + 0.04 * rng.normal().clamp(-2.5, 2.5));
    let into_rate = rng.uniform_range(0.3, 1.0);
    let into_phase = rng.uniform_range(0.0, 2.0 * PI);
    let syl_phase = rng.uniform_range(0.0, 2.0 * PI);
    let syl_rate = p.syllable_rate * rng.uniform_range(0.9, 1.1);
    let mut phase = rng.uniform();
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + 0.06 * sin(2.0 * PI * into_rate * t + into_phase));
        phase += f / sr;
        phase -= libm::floor(phase);
        let src = 2.0 * phase - 1.0 + 0.05 * rng.normal();
        let env = 0.6 + 0.4 * sin(2.0 * PI * syl_rate * t + syl_phase);
        x.push(src * env);
    }
    for fm in p.formants {
        let jitter = 1.0 + 0.03 * rng.normal().clamp(-2.5, 2.5);
        resonate(
            &mut x,
            Formant {
                freq: fm.freq * jitter,
                bandwidth: fm.bandwidth,
            },
            sr,
        );
    }
    let ramp = ((0.01 * sr) as usize).min(n / 2);
    for i in 0..ramp {
        let g = i as f64 / ramp as f64;
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    normalize_rms(&mut x, 0.1 * rng.uniform_range(0.8, 1.25));
    x
}

fn colored_noise(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let a = rng.uniform_range(0.3, 0.95);
    let mut y = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            y = a * y + (1.0 - a) * rng.normal();
            y
        })
        .collect();
    normalize_rms(&mut out, 1.0);
    out
}

fn room_impulse(len: usize, sr: f64, rng: &mut SplitMix64) -> Vec<f64> {
    if len < 2 {
        return vec![1.0];
    }
    let tau = rng.uniform_range(0.005, 0.02) * sr;
    let gain = rng.uniform_range(0.1, 0.4);
    let mut h: Vec<f64> = (0..len)
        .map(|n| if n == 0 { 1.0 } else { gain * rng.normal() * exp(-(n as f64) / tau) })
        .collect();
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    h.iter_mut().for_each(|v| *v /= peak);
    h
}

/// Generates speakers with utterances, background noises and RIRs.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let (dmin, dmax) = cfg.utt_dur;
    if !(dmin > 0.0) || !(dmax >= dmin) || !dmax.is_finite() {
        return Err(Error::param("utt_dur", format!("degenerate duration range {dmin}..{dmax}")));
    }
    if cfg.n_speakers == 0 || cfg.utt_per_speaker == 0 || cfg.n_noises == 0 || cfg.n_rirs == 0 {
        return Err(Error::param("n_speakers", "corpus sizes must be positive"));
    }
    if cfg.sample_rate == 0 || !(cfg.noise_dur > 0.0) {
        return Err(Error::param("sample_rate", "must be positive"));
    }
    let (flo, fhi) = cfg.f0_range;
    let spacing = (fhi - flo) / cfg.n_speakers as f64;
    if !(spacing >= MIN_F0_SEPARATION) {
        return Err(Error::param(
            "f0_range",
            format!("{} speakers need at least {} Hz of pitch range", cfg.n_speakers, cfg.n_speakers as f64 * MIN_F0_SEPARATION),
        ));
    }
    let sr = cfg.sample_rate as f64;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 0));

    // Stratified fundamentals: slot k holds one value in
    // [flo + k*spacing, flo + (k+1)*spacing - 10], so neighbours differ by >= 10 Hz.
    let mut f0s: Vec<f64> = (0..cfg.n_speakers)
        .map(|k| flo + k as f64 * spacing + rng.uniform() * (spacing - MIN_F0_SEPARATION))
        .collect();
    rng.shuffle(&mut f0s);

    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    for (id, &f0) in f0s.iter().enumerate() {
        let profile = SpeakerProfile {
            id,
            f0,
            formants: [
                Formant {
                    freq: rng.uniform_range(300.0, 900.0),
                    bandwidth: rng.uniform_range(60.0, 120.0),
                },
                Formant {
                    freq: rng.uniform_range(1000.0, 2200.0),
                    bandwidth: rng.uniform_range(80.0, 160.0),
                },
                Formant {
                    freq: rng.uniform_range(2400.0, 3500.0),
                    bandwidth: rng.uniform_range(120.0, 250.0),
                },
            ],
            syllable_rate: rng.uniform_range(3.0, 5.5),
        };
        let mut urng = SplitMix64::new(derive_seed(cfg.seed, 1000 + id as u64));
        let utterances = (0..cfg.utt_per_speaker)
            .map(|_| {
                let n = round(urng.uniform_range(dmin, dmax) * sr).max(1.0) as usize;
                synthesize_utterance(&profile, n, sr, &mut urng)
            })
            .collect();
        speakers.push(Speaker { profile, utterances });
    }

    let mut nrng = SplitMix64::new(derive_seed(cfg.seed, 1));
    let noise_len = round(cfg.noise_dur * sr).max(1.0) as usize;
    let noises = (0..cfg.n_noises).map(|_| colored_noise(noise_len, &mut nrng)).collect();
    let rir_len = round(cfg.rir_len * sr).max(0.0) as usize;
    let rirs = (0..cfg.n_rirs).map(|_| room_impulse(rir_len, sr, &mut nrng)).collect();

    Ok(Corpus {
        speakers,
        noises,
        rirs,
        sample_rate: cfg.sample_rate,
    })
}

/// Analysis grid shared with the features: (frame length, shift) in samples.
pub fn label_grid(sample_rate: u32) -> (usize, usize) {
    let sr = sample_rate as f64;
    (round(0.025 * sr) as usize, round(0.010 * sr) as usize)
}

/// Rasterizes utterance spans onto the 10 ms grid.
pub fn spans_to_labels(spans: &[UtteranceSpan], n_samples: usize, speakers: usize, sample_rate: u32) -> Result<LabelSequence> {
    let (len, shift) = label_grid(sample_rate);
    let t = frame_count(n_samples, len, shift);
    let mut labels = LabelSequence::zeros(t, speakers, shift as f64 / sample_rate as f64)?;
    for s in spans {
        let first = s.start_sample / shift;
        let last = (s.end_sample / shift + 1).min(t);
        for i in first..last {
            let (a, b) = (i * shift, (i + 1) * shift);
            let overlap = b.min(s.end_sample).saturating_sub(a.max(s.start_sample));
            if 2 * overlap >= shift {
                labels.set(i, s.column, true);
            }
        }
    }
    Ok(labels)
}

/// Random choices of one mixture, before any audio is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePlan {
    /// Corpus speaker id per label column.
    pub speakers: Vec<usize>,
    /// RIR index per label column.
    pub rirs: Vec<usize>,
    /// `(column, utterance index, start sample)` in scheduling order.
    pub placements: Vec<(usize, usize, usize)>,
    pub utterances: Vec<UtteranceSpan>,
    pub track_lengths: Vec<usize>,
    pub noise: usize,
    pub snr: f64,
}

impl MixturePlan {
    pub fn n_samples(&self) -> usize {
        self.track_lengths.iter().copied().max().unwrap_or(0)
    }
}

fn check_capacity(spec: &MixtureSpec, corpus: &Corpus) -> Result<()> {
    spec.validate()?;
    if corpus.speakers.len() < spec.n_spk {
        return Err(Error::Capacity(format!(
            "mixture needs {} speakers, corpus has {}",
            spec.n_spk,
            corpus.speakers.len()
        )));
    }
    if let Some(s) = corpus.speakers.iter().find(|s| s.utterances.len() < spec.n_umax) {
        return Err(Error::Capacity(format!(
            "speaker {} has {} utterances, mixtures may need {}",
            s.profile.name(),
            s.utterances.len(),
            spec.n_umax
        )));
    }
    Ok(())
}

/// Samples speakers, RIRs, utterances, silences, noise and SNR from `spec.seed`.
pub fn plan_mixture(spec: &MixtureSpec, corpus: &Corpus) -> Result<MixturePlan> {
    check_capacity(spec, corpus)?;
    let sr = corpus.sample_rate as f64;
    let mut rng = SplitMix64::new(spec.seed);

    let mut pool: Vec<usize> = (0..corpus.speakers.len()).collect();
    for i in 0..spec.n_spk {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let speakers: Vec<usize> = pool[..spec.n_spk].to_vec();

    let mut rirs = Vec::with_capacity(spec.n_spk);
    let mut placements = Vec::new();
    let mut utterances = Vec::new();
    let mut track_lengths = Vec::with_capacity(spec.n_spk);
    for (column, &sid) in speakers.iter().enumerate() {
        let speaker = &corpus.speakers[sid];
        let rir = rng.below(corpus.rirs.len());
        let tail = corpus.rirs[rir].len().saturating_sub(1);
        rirs.push(rir);
        let n_u = spec.n_umin + rng.below(spec.n_umax - spec.n_umin + 1);
        let offset = rng.below(speaker.utterances.len());
        let mut len = 0usize;
        for u in 0..n_u {
            len += round(rng.exponential(spec.beta) * sr) as usize;
            let idx = (offset + u) % speaker.utterances.len();
            let n = speaker.utterances[idx].len();
            placements.push((column, idx, len));
            utterances.push(UtteranceSpan {
                column,
                start_sample: len,
                end_sample: len + n,
            });
            len += n + tail;
        }
        track_lengths.push(len);
    }
    let noise = rng.below(corpus.noises.len());
    let snr = spec.snr_choices[rng.below(spec.snr_choices.len())];
    Ok(MixturePlan {
        speakers,
        rirs,
        placements,
        utterances,
        track_lengths,
        noise,
        snr,
    })
}

/// Renders a plan into audio and labels.
pub fn render_mixture(plan: &MixturePlan, corpus: &Corpus, spec: &MixtureSpec) -> Result<Mixture> {
    let l_max = plan.n_samples();
    let mut y = vec![0.0; l_max];
    for &(column, idx, start) in &plan.placements {
        let utt = &corpus.speakers[plan.speakers[column]].utterances[idx];
        let conv = convolve(utt, &corpus.rirs[plan.rirs[column]]);
        for (a, b) in y[start..].iter_mut().zip(&conv) {
            *a += *b;
        }
    }

    let noise = &corpus.noises[plan.noise];
    if plan.snr.is_finite() && !noise.is_empty() {
        let mut active = vec![false; l_max];
        for s in &plan.utterances {
            active[s.start_sample..s.end_sample.min(l_max)].iter_mut().for_each(|a| *a = true);
        }
        let (mut ps, mut pn, mut count) = (0.0, 0.0, 0usize);
        for (i, &on) in active.iter().enumerate() {
            if on {
                let nv = noise[i % noise.len()];
                ps += y[i] * y[i];
                pn += nv * nv;
                count += 1;
            }
        }
        if count > 0 && pn > 0.0 {
            let scale = sqrt(ps / (pn * pow(10.0, plan.snr / 10.0)));
            for (i, v) in y.iter_mut().enumerate() {
                *v += scale * noise[i % noise.len()];
            }
        }
    }

    let labels = spans_to_labels(&plan.utterances, l_max, plan.speakers.len(), corpus.sample_rate)?;
    Ok(Mixture {
        wave: Waveform::new(y, corpus.sample_rate)?,
        labels,
        speakers: plan.speakers.clone(),
        utterances: plan.utterances.clone(),
        track_lengths: plan.track_lengths.clone(),
        beta: spec.beta,
        snr: plan.snr,
        seed: spec.seed,
    })
}

/// Draws one mixture; all randomness comes from `spec.seed`.
pub fn simulate_mixture(spec: &MixtureSpec, corpus: &Corpus) -> Result<Mixture> {
    let plan = plan_mixture(spec, corpus)?;
    render_mixture(&plan, corpus, spec)
}

/// Seed of the `index`-th mixture of a batch generated under `seed`.
pub fn mixture_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// `count` mixtures sharing `template` except for derived per-mixture seeds.
pub fn simulate_batch(template: &MixtureSpec, corpus: &Corpus, count: usize) -> Result<Vec<Mixture>> {
    (0..count)
        .map(|i| {
            let spec = MixtureSpec {
                seed: mixture_seed(template.seed, i),
                ..template.clone()
            };
            simulate_mixture(&spec, corpus)
        })
        .collect()
}

/// Frames with two or more active speakers over frames with at least one.
pub fn overlap_ratio(labels: &LabelSequence) -> f64 {
    let (mut speech, mut overlap) = (0usize, 0usize);
    for t in 0..labels.frames() {
        match labels.active_count(t) {
            0 => {}
            1 => speech += 1,
            _ => {
                speech += 1;
                overlap += 1;
            }
        }
    }
    if speech == 0 {
        0.0
    } else {
        overlap as f64 / speech as f64
    }
}

/// Same index rule as [`crate::features::subsample`], so labels stay aligned.
pub fn subsample_labels(labels: &LabelSequence, factor: usize) -> Result<LabelSequence> {
    if factor < 1 {
        return Err(Error::param("factor", "must be at least 1"));
    }
    Ok(labels.select_frames(&subsample_indices(labels.frames(), factor), factor))
}

#[cfg(test)]
mod tests;
