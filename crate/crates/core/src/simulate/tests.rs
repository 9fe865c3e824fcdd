use super::*;
use crate::features::{logmel, subsample, LogMelConfig};

fn small_corpus(rir_len: f64) -> Corpus {
    gen_corpus(&CorpusConfig {
        n_speakers: 6,
        utt_per_speaker: 4,
        utt_dur: (0.3, 0.8),
        n_noises: 2,
        noise_dur: 0.5,
        n_rirs: 3,
        rir_len,
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn spec(n_spk: usize, beta: f64, snr: f64, seed: u64) -> MixtureSpec {
    MixtureSpec {
        n_spk,
        n_umin: 2,
        n_umax: 4,
        beta,
        snr_choices: vec![snr],
        seed,
    }
}

#[test]
fn corpus_is_deterministic() {
    assert_eq!(small_corpus(0.02), small_corpus(0.02));
}

#[test]
fn fundamentals_are_separated() {
    let c = gen_corpus(&CorpusConfig {
        n_speakers: 30,
        utt_per_speaker: 1,
        utt_dur: (0.05, 0.05),
        ..CorpusConfig::default()
    })
    .unwrap();
    for a in &c.speakers {
        for b in &c.speakers {
            if a.profile.id != b.profile.id {
                assert!((a.profile.f0 - b.profile.f0).abs() >= MIN_F0_SEPARATION);
            }
        }
    }
}

#[test]
fn corpus_rejects_bad_parameters() {
    let bad = |cfg: CorpusConfig| assert!(matches!(gen_corpus(&cfg), Err(Error::Parameter { .. })));
    bad(CorpusConfig {
        utt_dur: (2.0, 1.0),
        ..CorpusConfig::default()
    });
    bad(CorpusConfig {
        utt_dur: (0.0, 1.0),
        ..CorpusConfig::default()
    });
    bad(CorpusConfig {
        n_speakers: 100,
        ..CorpusConfig::default()
    });
}

#[test]
fn rir_shape() {
    let c = small_corpus(0.02);
    for h in &c.rirs {
        assert_eq!(h.len(), 160);
        assert_eq!(h[0], 1.0);
        assert!(h.iter().all(|v| v.abs() <= 1.0));
        let mut x = vec![0.0; 5];
        x[0] = 1.0;
        let y = convolve(&x, h);
        for (a, b) in y.iter().zip(h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(small_corpus(0.0).rirs[0], vec![1.0]);
}

#[test]
fn utterances_are_voiced_at_speaker_pitch() {
    let c = small_corpus(0.0);
    let s = &c.speakers[0];
    let x = &s.utterances[0];
    // Autocorrelation peak within the speaker's pitch period (+-15%).
    let lag0 = 8000.0 / s.profile.f0;
    let ac = |lag: usize| x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>();
    let lo = (lag0 * 0.85) as usize;
    let hi = (lag0 * 1.15) as usize + 1;
    let best = (lo..=hi).map(ac).fold(f64::MIN, f64::max);
    let off = ((lag0 * 0.5) as usize..=(lag0 * 0.6) as usize).map(ac).fold(f64::MIN, f64::max);
    assert!(best > off, "no pitch peak at lag {lag0}");
}

#[test]
fn mixture_is_deterministic() {
    let c = small_corpus(0.02);
    let a = simulate_mixture(&spec(2, 1.0, 10.0, 5), &c).unwrap();
    let b = simulate_mixture(&spec(2, 1.0, 10.0, 5), &c).unwrap();
    assert_eq!(a, b);
    let d = simulate_mixture(&spec(2, 1.0, 10.0, 6), &c).unwrap();
    assert_ne!(a.wave, d.wave);
}

#[test]
fn single_speaker_labels_match_occupancy() {
    let c = small_corpus(0.0);
    for seed in 0..10 {
        let m = simulate_mixture(&spec(1, 0.5, f64::INFINITY, seed), &c).unwrap();
        assert_eq!(overlap_ratio(&m.labels), 0.0);
        let (len, shift) = label_grid(8000);
        assert_eq!(m.labels.frames(), frame_count(m.wave.len(), len, shift));
        for t in 0..m.labels.frames() {
            let (a, b) = (t * shift, (t + 1) * shift);
            let occ: usize = m
                .utterances
                .iter()
                .map(|u| b.min(u.end_sample).saturating_sub(a.max(u.start_sample)))
                .sum();
            assert_eq!(m.labels.get(t, 0), 2 * occ >= shift, "frame {t}");
        }
    }
}

#[test]
fn length_is_longest_track() {
    let c = small_corpus(0.02);
    for seed in 0..10 {
        let m = simulate_mixture(&spec(3, 0.7, 5.0, seed), &c).unwrap();
        assert_eq!(m.wave.len(), *m.track_lengths.iter().max().unwrap());
        assert_eq!(m.speakers.len(), 3);
        let mut ids = m.speakers.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }
}

#[test]
fn clean_mixture_is_sum_of_tracks() {
    let c = small_corpus(0.0);
    let s = spec(2, 0.4, f64::INFINITY, 9);
    let plan = plan_mixture(&s, &c).unwrap();
    let m = render_mixture(&plan, &c, &s).unwrap();
    let mut tracks = vec![vec![0.0; m.wave.len()]; 2];
    for &(col, idx, start) in &plan.placements {
        let u = &c.speakers[plan.speakers[col]].utterances[idx];
        tracks[col][start..start + u.len()].copy_from_slice(u);
    }
    for i in 0..m.wave.len() {
        assert_eq!(m.wave.samples[i], tracks[0][i] + tracks[1][i]);
    }
}

#[test]
fn snr_is_met_on_speech_samples() {
    let c = small_corpus(0.02);
    let s = spec(2, 0.5, 5.0, 3);
    let clean = render_mixture(
        &MixturePlan {
            snr: f64::INFINITY,
            ..plan_mixture(&s, &c).unwrap()
        },
        &c,
        &s,
    )
    .unwrap();
    let noisy = simulate_mixture(&s, &c).unwrap();
    let (mut ps, mut pn) = (0.0, 0.0);
    for i in 0..clean.wave.len() {
        if clean.utterances.iter().any(|u| (u.start_sample..u.end_sample).contains(&i)) {
            let n = noisy.wave.samples[i] - clean.wave.samples[i];
            ps += clean.wave.samples[i].powi(2);
            pn += n * n;
        }
    }
    assert!((10.0 * (ps / pn).log10() - 5.0).abs() < 1e-9);
}

#[test]
fn labels_follow_schedule() {
    let c = small_corpus(0.02);
    for seed in 0..20 {
        let m = simulate_mixture(&spec(2, 0.3, 10.0, seed), &c).unwrap();
        let (_, shift) = label_grid(8000);
        for t in 0..m.labels.frames() {
            for col in 0..2 {
                if m.labels.get(t, col) {
                    assert!(m
                        .utterances
                        .iter()
                        .any(|u| u.column == col && u.start_sample < (t + 1) * shift && u.end_sample > t * shift));
                }
            }
        }
        for u in &m.utterances {
            let first = u.start_sample / shift;
            let last = (u.end_sample - 1) / shift;
            assert!((first..=last.min(m.labels.frames() - 1)).any(|t| m.labels.get(t, u.column)));
        }
    }
}

#[test]
fn capacity_errors() {
    let c = small_corpus(0.0);
    assert!(matches!(simulate_mixture(&spec(7, 1.0, 5.0, 0), &c), Err(Error::Capacity(_))));
    let mut s = spec(2, 1.0, 5.0, 0);
    s.n_umax = 5;
    assert!(matches!(simulate_mixture(&s, &c), Err(Error::Capacity(_))));
    s.n_umax = 1;
    assert!(matches!(simulate_mixture(&s, &c), Err(Error::Parameter { .. })));
    assert!(simulate_mixture(&spec(2, 0.0, 5.0, 0), &c).is_err());
}

#[test]
fn overlap_ratio_examples() {
    let one: Vec<&[u8]> = vec![&[1, 0], &[0, 1], &[0, 0]];
    assert_eq!(overlap_ratio(&LabelSequence::from_rows(&one, 0.01).unwrap()), 0.0);
    let both: Vec<&[u8]> = vec![&[1, 1]; 5];
    assert_eq!(overlap_ratio(&LabelSequence::from_rows(&both, 0.01).unwrap()), 1.0);
    let mut rows: Vec<&[u8]> = vec![&[1, 1]; 4];
    rows.extend([&[1u8, 0][..], &[0, 1], &[1, 0], &[0, 1], &[0, 0], &[0, 0]]);
    assert_eq!(overlap_ratio(&LabelSequence::from_rows(&rows, 0.01).unwrap()), 0.5);
    assert_eq!(overlap_ratio(&LabelSequence::zeros(4, 2, 0.01).unwrap()), 0.0);
}

#[test]
fn subsampled_labels_align_with_features() {
    let mut l = LabelSequence::zeros(98, 2, 0.01).unwrap();
    for t in (0..98).step_by(3) {
        l.set(t, t % 2, true);
    }
    assert_eq!(subsample_labels(&l, 1).unwrap(), l);
    let s = subsample_labels(&l, 10).unwrap();
    assert_eq!(s.frames(), 10);
    assert!((s.frame_period() - 0.1).abs() < 1e-15);
    for (k, &t) in subsample_indices(98, 10).iter().enumerate() {
        assert_eq!(s.row(k), l.row(t));
    }

    let c = small_corpus(0.02);
    let m = simulate_mixture(&spec(2, 0.5, 10.0, 1), &c).unwrap();
    let f = logmel(&m.wave, &LogMelConfig::default()).unwrap();
    assert_eq!(f.len(), m.labels.frames());
    assert_eq!(subsample(&f, 10).unwrap().len(), subsample_labels(&m.labels, 10).unwrap().frames());
}

#[test]
fn overlap_decreases_with_interval() {
    let c = gen_corpus(&CorpusConfig {
        n_speakers: 10,
        utt_per_speaker: 20,
        utt_dur: (1.0, 4.0),
        ..CorpusConfig::default()
    })
    .unwrap();
    let mean = |beta: f64| {
        let s = MixtureSpec {
            n_spk: 2,
            n_umin: 10,
            n_umax: 20,
            beta,
            snr_choices: vec![10.0],
            seed: 77,
        };
        let n = 300;
        let sum: f64 = (0..n)
            .map(|i| {
                let p = plan_mixture(&MixtureSpec { seed: mixture_seed(77, i), ..s.clone() }, &c).unwrap();
                let l = spans_to_labels(&p.utterances, p.n_samples(), 2, 8000).unwrap();
                overlap_ratio(&l)
            })
            .sum();
        sum / n as f64
    };
    let m2 = mean(2.0);
    assert!(m2 > 0.25 && m2 < 0.45, "beta=2 overlap {m2}");
    assert!(mean(5.0) < m2);
}
