use super::*;
use crate::model::{SaEendConfig, SaEendParams};
use crate::rng::SplitMix64;
use proptest::prelude::*;

fn col(bits: &[u8]) -> LabelSequence {
    let rows: Vec<&[u8]> = bits.iter().map(core::slice::from_ref).collect();
    LabelSequence::from_rows(&rows, 0.1).unwrap()
}

fn bits(l: &LabelSequence) -> Vec<u8> {
    (0..l.frames()).map(|t| l.get(t, 0) as u8).collect()
}

#[test]
fn threshold_examples() {
    let z = Tensor::full(&[3, 2], 0.5);
    assert_eq!(threshold_decisions(&z, 0.5, 0.1).unwrap().total_active(), 6);
    let z = Tensor::from_rows(&[&[0.9, 0.4]]).unwrap();
    assert_eq!(threshold_decisions(&z, 0.5, 0.1).unwrap().row(0), &[1, 0]);
    assert!(DecisionConfig { threshold: 1.0, median_window: 11 }.validate().is_err());
    assert!(DecisionConfig { threshold: 0.5, median_window: 4 }.validate().is_err());
}

#[test]
fn median_examples() {
    for c in [col(&[1; 9]), col(&[0; 9])] {
        assert_eq!(median_filter(&c, 11).unwrap(), c);
    }
    let mut spike = [0u8; 21];
    spike[10] = 1;
    assert_eq!(bits(&median_filter(&col(&spike), 11).unwrap()), vec![0; 21]);
    let c = col(&[0, 0, 1, 1, 1, 0, 0]);
    assert_eq!(median_filter(&c, 3).unwrap(), c);
    // Edge frames see a shrunken window: frame 0 is alone, frame 1 sees 0..=2, frame 2 sees all five.
    assert_eq!(bits(&median_filter(&col(&[1, 0, 0, 1, 1]), 5).unwrap()), vec![1, 0, 1, 1, 1]);
    assert_eq!(bits(&median_filter(&col(&[0, 1, 1, 0, 0]), 3).unwrap()), vec![0, 1, 1, 0, 0]);
    assert!(median_filter(&c, 2).is_err());
    assert_eq!(median_filter(&c, 1).unwrap(), c);
}

#[test]
fn window_three_is_not_idempotent_in_general() {
    // Alternating input keeps shrinking under repeated filtering.
    let once = median_filter(&col(&[0, 1, 0, 1, 0, 1, 0]), 3).unwrap();
    let twice = median_filter(&once, 3).unwrap();
    assert_eq!(bits(&once), vec![0, 0, 1, 0, 1, 0, 0]);
    assert_eq!(bits(&twice), vec![0, 0, 0, 1, 0, 0, 0]);
}

fn reference_median(x: &[u8], w: usize) -> Vec<u8> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let k = (w / 2).min(i).min(n - 1 - i);
            let mut win: Vec<u8> = x[i - k..=i + k].to_vec();
            win.sort();
            win[k]
        })
        .collect()
}

#[test]
fn segments_examples() {
    assert!(frames_to_segments(&LabelSequence::zeros(5, 2, 0.1).unwrap(), "r").segments.is_empty());
    let mut l = LabelSequence::zeros(8, 2, 0.1).unwrap();
    for t in 3..6 {
        l.set(t, 1, true);
    }
    let h = frames_to_segments(&l, "r");
    assert_eq!(h.segments.len(), 1);
    let s = &h.segments[0];
    assert_eq!(s.speaker, "spk1");
    assert!((s.start - 0.3).abs() < 1e-12 && (s.end - 0.6).abs() < 1e-12);
}

#[test]
fn attention_export() {
    let cfg = SaEendConfig {
        in_dim: 3,
        model_dim: 8,
        heads: 2,
        ffn_dim: 4,
        blocks: 2,
        speakers: 2,
        residual: false,
    };
    let m = Model::SaEend {
        params: SaEendParams::init(&cfg, 1).unwrap(),
        config: cfg,
    };
    let mut rng = SplitMix64::new(3);
    let x = Tensor::matrix(10, 3, (0..30).map(|_| rng.normal()).collect()).unwrap();
    let maps = attention_maps(&m, &x, 2).unwrap();
    assert_eq!(maps.len(), 2);
    for a in &maps {
        assert_eq!(a.shape(), &[10, 10]);
        let parsed: Vec<Vec<f64>> = to_csv(a)
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        for row in parsed {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let pgm = to_pgm(a);
        assert!(pgm.starts_with(b"P5\n10 10\n255\n"));
        assert_eq!(pgm.len(), b"P5\n10 10\n255\n".len() + 100);
        assert!(pgm.contains(&255));
    }
    assert!(matches!(attention_maps(&m, &x, 3), Err(Error::Parameter { name: "block", .. })));
    assert!(attention_maps(&m, &x, 0).is_err());
    assert!((column_mass(&maps[0]).iter().sum::<f64>() - 10.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn median_matches_sorting_oracle(x in proptest::collection::vec(0u8..2, 1..40), w in 0usize..7) {
        let w = 2 * w + 1;
        prop_assert_eq!(bits(&median_filter(&col(&x), w).unwrap()), reference_median(&x, w));
    }

    #[test]
    fn median_is_monotone(x in proptest::collection::vec(0u8..2, 1..40), flip in 0usize..40) {
        let mut y = x.clone();
        let i = flip % y.len();
        y[i] = 1;
        let (fx, fy) = (bits(&median_filter(&col(&x), 5).unwrap()), bits(&median_filter(&col(&y), 5).unwrap()));
        prop_assert!(fx.iter().zip(&fy).all(|(a, b)| a <= b));
    }

    /// Repeated window-3 filtering settles on a fixed point.
    #[test]
    fn median_three_converges(x in proptest::collection::vec(0u8..2, 1..40)) {
        let mut cur = col(&x);
        for _ in 0..x.len() {
            let next = median_filter(&cur, 3).unwrap();
            if next == cur {
                break;
            }
            cur = next;
        }
        prop_assert_eq!(median_filter(&cur, 3).unwrap(), cur);
    }

    #[test]
    fn threshold_is_monotone(z in proptest::collection::vec(0.0f64..1.0, 1..30), a in 0.01f64..0.99, d in 0.0f64..0.5) {
        let t = Tensor::matrix(z.len(), 1, z.clone()).unwrap();
        let lo = threshold_decisions(&t, a, 0.1).unwrap();
        let hi = threshold_decisions(&t, (a + d).min(0.999), 0.1).unwrap();
        for i in 0..z.len() {
            prop_assert!(hi.get(i, 0) <= lo.get(i, 0));
        }
        let raised = t.map(|v| (v + d).min(1.0));
        let up = threshold_decisions(&raised, a, 0.1).unwrap();
        for i in 0..z.len() {
            prop_assert!(up.get(i, 0) >= lo.get(i, 0));
        }
    }

    #[test]
    fn segments_round_trip(x in proptest::collection::vec(0u8..2, 1..60), y in proptest::collection::vec(0u8..2, 60)) {
        let mut l = LabelSequence::zeros(x.len(), 2, 0.1).unwrap();
        for (t, &v) in x.iter().enumerate() {
            l.set(t, 0, v == 1);
            l.set(t, 1, y[t] == 1);
        }
        let h = frames_to_segments(&l, "r");
        let mut back = LabelSequence::zeros(x.len(), 2, 0.1).unwrap();
        for s in &h.segments {
            let c: usize = s.speaker[3..].parse().unwrap();
            for t in 0..x.len() {
                let mid = (t as f64 + 0.5) * 0.1;
                if s.start <= mid && mid < s.end {
                    back.set(t, c, true);
                }
            }
        }
        prop_assert_eq!(back, l);
        for s in &h.segments {
            prop_assert!(s.end > s.start);
        }
    }
}
