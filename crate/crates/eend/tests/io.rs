use std::path::Path;

use eend::audio::{quantize, read_wav, write_wav};
use eend::data::{dataset_samples, history_csv, read_dataset, read_metadata, reference_labels, write_dataset, MixtureMeta};
use eend::params::{
    decode_optimizer, decode_params, encode_optimizer, encode_params, load_params, load_params_like, model_config_text,
    save_params,
};
use eend::report::{to_json, to_table};
use eend::Error;
use eend_core::features::{FeaturePipeline, Waveform};
use eend_core::model::{BlstmConfig, BlstmParams, Model, SaEendConfig, SaEendParams};
use eend_core::score::{der_single, DiarizationHypothesis, ScoreConfig, Segment};
use eend_core::simulate::{gen_corpus, simulate_batch, subsample_labels, CorpusConfig, MixtureSpec};
use eend_core::train::{AdamState, EpochRecord, LrSchedule, Sample};
use hound::{SampleFormat, WavSpec};
use tempfile::tempdir;

fn sa() -> Model {
    let config = SaEendConfig {
        in_dim: 5,
        model_dim: 8,
        heads: 2,
        ffn_dim: 6,
        blocks: 2,
        speakers: 2,
        residual: true,
    };
    Model::SaEend {
        params: SaEendParams::init(&config, 3).unwrap(),
        config,
    }
}

fn blstm() -> Model {
    let config = BlstmConfig {
        in_dim: 5,
        layers: 2,
        hidden: 3,
        dc_layer: 1,
        embed_dim: 4,
        speakers: 2,
    };
    Model::Blstm {
        params: BlstmParams::init(&config, 3).unwrap(),
        config,
    }
}

fn bits(m: &Model) -> Vec<u64> {
    m.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn wav_round_trip_is_exact_on_the_16_bit_grid() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let samples: Vec<f64> = (-40..40).map(|k| (k * 800) as f64 / 32768.0).chain([-1.0, 32767.0 / 32768.0]).collect();
    let w = Waveform::new(samples.clone(), 8000).unwrap();
    write_wav(&p, &w).unwrap();
    assert_eq!(read_wav(&p).unwrap(), w);
    assert_eq!(quantize(1.5), i16::MAX);
    assert_eq!(quantize(-3.0), i16::MIN);
    assert!(write_wav(&p, &Waveform::new(vec![0.0], 16000).unwrap()).is_err());
}

fn write_raw(path: &Path, spec: WavSpec) {
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for _ in 0..10 * spec.channels {
        match (spec.sample_format, spec.bits_per_sample) {
            (SampleFormat::Float, _) => w.write_sample(0.0f32).unwrap(),
            (_, 8) => w.write_sample(0i8).unwrap(),
            _ => w.write_sample(0i16).unwrap(),
        }
    }
    w.finalize().unwrap();
}

#[test]
fn wav_layout_errors_name_the_field() {
    let dir = tempdir().unwrap();
    let good = WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let cases = [
        (WavSpec { channels: 2, ..good }, "channels"),
        (WavSpec { sample_rate: 16000, ..good }, "sample_rate"),
        (WavSpec { bits_per_sample: 8, ..good }, "bits_per_sample"),
        (
            WavSpec {
                bits_per_sample: 32,
                sample_format: SampleFormat::Float,
                ..good
            },
            "sample_format",
        ),
    ];
    for (i, (spec, field)) in cases.into_iter().enumerate() {
        let p = dir.path().join(format!("{i}.wav"));
        write_raw(&p, spec);
        let e = read_wav(&p).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(e.to_string().contains(field), "{e}");
    }
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wave file at all").unwrap();
    assert!(matches!(read_wav(&junk), Err(Error::Format { .. })));
    assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
}

#[test]
fn params_round_trip_bit_exactly() {
    let dir = tempdir().unwrap();
    for (k, mut m) in [sa(), blstm()].into_iter().enumerate() {
        m.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = *v * 1.000001 + 1e-300));
        let p = dir.path().join(format!("{k}.params"));
        save_params(&m, &p).unwrap();
        let back = load_params(&p).unwrap();
        assert!(back.same_config(&m));
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(load_params_like(&p, &m).unwrap(), back);
    }
    let bytes = encode_params(&sa());
    assert_eq!(&bytes[..4], b"EEND");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert!(model_config_text(&sa()).contains("residual = true"));
}

#[test]
fn config_mismatch_is_explicit() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("m.params");
    save_params(&sa(), &p).unwrap();
    match load_params_like(&p, &blstm()) {
        Err(Error::Core(eend_core::Error::ConfigMismatch(msg))) => assert!(msg.contains("kind = sa")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_and_corruption_are_format_errors() {
    let bytes = encode_params(&sa());
    for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
        let e = decode_params(&bytes[..cut]).unwrap_err();
        assert!(e.contains("truncated") || e.contains("magic") || e.contains("config"), "cut {cut}: {e}");
    }
    // Midway through the last tensor the message names that record.
    let e = decode_params(&bytes[..bytes.len() - 12]).unwrap_err();
    assert!(e.contains("`output.b`"), "{e}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_params(&bad).unwrap_err().contains("magic"));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_params(&extra).unwrap_err().contains("trailing"));
    let name_at = bytes.windows(7).position(|w| w == b"input.w").unwrap();
    let mut renamed = bytes;
    renamed[name_at] = b'X';
    assert!(decode_params(&renamed).unwrap_err().contains("record 0"));
}

#[test]
fn optimizer_sidecar_round_trip() {
    let m = sa();
    let mut s = AdamState::new(&m, &LrSchedule::Noam { warmup: 10, scale: 1.0 });
    s.step = 17;
    for (k, t) in s.m.iter_mut().chain(s.v.iter_mut()).enumerate() {
        t.data_mut().iter_mut().for_each(|v| *v = k as f64 / 7.0);
    }
    let bytes = encode_optimizer(&s);
    assert_eq!(decode_optimizer(&bytes, &m).unwrap(), s);
    assert!(decode_optimizer(&bytes, &blstm()).is_err());
    assert!(decode_optimizer(&bytes[..bytes.len() - 3], &m).unwrap_err().contains("truncated"));
}

fn tiny_dataset(dir: &Path, n: usize, beta: f64) -> Vec<(MixtureMeta, eend_core::simulate::Mixture)> {
    let corpus = gen_corpus(&CorpusConfig {
        n_speakers: 6,
        utt_per_speaker: 4,
        ..CorpusConfig::default()
    })
    .unwrap();
    let spec = MixtureSpec {
        n_spk: 2,
        n_umin: 1,
        n_umax: 3,
        beta,
        snr_choices: vec![10.0, f64::INFINITY],
        seed: 5,
    };
    let items: Vec<_> = simulate_batch(&spec, &corpus, n)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let names = m.speakers.iter().map(|&k| corpus.speakers[k].profile.name()).collect();
            (MixtureMeta::new(eend::data::mixture_id(i), &m, names), m)
        })
        .collect();
    write_dataset(dir, &items).unwrap();
    items
}

#[test]
fn dataset_reference_reproduces_labels() {
    let dir = tempdir().unwrap();
    let items = tiny_dataset(dir.path(), 6, 2.0);
    assert_eq!(read_metadata(dir.path()).unwrap(), items.iter().map(|(m, _)| m.clone()).collect::<Vec<_>>());
    assert!(items.iter().any(|(m, _)| m.snr.is_none()));
    let recs = read_dataset(dir.path()).unwrap();
    let rttm = dir.path().join("ref.rttm");
    let pipe = FeaturePipeline::default();
    let samples = dataset_samples(dir.path(), &pipe).unwrap();
    for ((r, (_, m)), s) in recs.iter().zip(&items).zip(&samples) {
        assert_eq!(reference_labels(r, &rttm).unwrap(), m.labels, "{}", r.meta.id);
        assert_eq!(s.labels, subsample_labels(&m.labels, 10).unwrap());
        let quantized: Vec<f64> = m.wave.samples.iter().map(|&x| quantize(x) as f64 / 32768.0).collect();
        let direct = Sample::from_mixture(
            &eend_core::simulate::Mixture {
                wave: Waveform::new(quantized, 8000).unwrap(),
                ..m.clone()
            },
            &pipe,
        )
        .unwrap();
        assert_eq!(s, &direct);
    }
}

#[test]
fn history_has_one_row_per_epoch() {
    let h: Vec<EpochRecord> = (1..=3)
        .map(|e| EpochRecord {
            epoch: e,
            train_loss: 0.5,
            valid_loss: (e > 1).then_some(0.25),
            lr: 1e-3,
            steps: 10 * e as u64,
        })
        .collect();
    let csv = history_csv(&h);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,valid_loss,lr");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "1,0.5,,0.001");
    assert_eq!(lines[3], "3,0.5,0.25,0.001");
}

#[test]
fn der_json_components_sum() {
    let r = DiarizationHypothesis {
        recording: "r".into(),
        segments: vec![
            Segment {
                speaker: "a".into(),
                start: 0.0,
                end: 3.0,
            },
            Segment {
                speaker: "b".into(),
                start: 2.0,
                end: 5.0,
            },
        ],
    };
    let h = DiarizationHypothesis {
        recording: "r".into(),
        segments: vec![Segment {
            speaker: "x".into(),
            start: 0.5,
            end: 4.0,
        }],
    };
    let rep = der_single(&r, &h, &ScoreConfig::default()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&to_json(&rep)).unwrap();
    let keys = ["der", "mi", "fa", "cf", "sad_mi", "sad_fa", "scored_time"];
    assert_eq!(v.as_object().unwrap().len(), keys.len());
    let get = |k: &str| v[k].as_f64().unwrap();
    assert!((get("mi") + get("fa") + get("cf") - get("der")).abs() < 1e-9);
    assert!(get("der") > 0.0);
    assert!(to_table(&rep).starts_with("DER "));
}
