use super::*;
use crate::labels::LabelSequence;
use crate::loss::{dc_loss_node, permutation_free_loss_node, DEFAULT_BCE_CLIP};
use crate::numerics::{grad_check, matmul};
use alloc::vec;
use libm::exp;

fn tiny_sa(residual: bool) -> SaEendConfig {
    SaEendConfig {
        in_dim: 6,
        model_dim: 16,
        heads: 4,
        ffn_dim: 12,
        blocks: 2,
        speakers: 2,
        residual,
    }
}

fn tiny_blstm() -> BlstmConfig {
    BlstmConfig {
        in_dim: 5,
        layers: 2,
        hidden: 3,
        dc_layer: 1,
        embed_dim: 4,
        speakers: 2,
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = tiny_sa(false);
    let a = SaEendParams::init(&cfg, 1).unwrap();
    assert_eq!(a, SaEendParams::init(&cfg, 1).unwrap());
    assert_ne!(a, SaEendParams::init(&cfg, 2).unwrap());
    for b in &a.blocks {
        assert!(b.ln_in.gain.data().iter().all(|&v| v == 1.0));
        assert!(b.ln_sa.gain.data().iter().all(|&v| v == 1.0));
        assert!(b.ff1.b.data().iter().all(|&v| v == 0.0));
        let lim = xavier_limit(16, 12);
        assert!(b.ff1.w.data().iter().all(|v| v.abs() <= lim));
    }
    let p = BlstmParams::init(&tiny_blstm(), 3).unwrap();
    let b = p.layers[0].0.b.data();
    assert_eq!(&b[0..3], &[0.0; 3]);
    assert_eq!(&b[3..6], &[1.0; 3]);
    assert_eq!(&b[6..12], &[0.0; 6]);
    assert_eq!(p.layers[1].0.w_ih.shape(), &[6, 12]);
}

#[test]
fn config_validation() {
    let mut c = tiny_sa(false);
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Parameter { name: "heads", .. })));
    let mut b = tiny_blstm();
    b.dc_layer = 3;
    assert!(b.validate().is_err());
    b.dc_layer = 0;
    assert!(b.validate().is_err());
}

fn bind_block(g: &mut Graph, p: &BlockParams<Tensor>) -> BlockParams<Var> {
    p.map(&mut |t| g.constant(t.clone()))
}

#[test]
fn attention_single_frame() {
    let p = SaEendParams::init(&tiny_sa(false), 4).unwrap();
    let mut g = Graph::new();
    let b = bind_block(&mut g, &p.blocks[0]);
    let e = random(1, 16, 9);
    let ev = g.constant(e.clone());
    let (out, att) = multi_head_self_attention(&mut g, ev, &b, None).unwrap();
    for a in &att {
        assert_eq!(g.value(*a).data(), &[1.0]);
    }
    let blk = &p.blocks[0];
    let mut ctx = Vec::new();
    for h in &blk.heads {
        let v = matmul(&e, &h.v.w).unwrap();
        ctx.extend(v.data().iter().zip(h.v.b.data()).map(|(a, b)| a + b));
    }
    let c = Tensor::matrix(1, 16, ctx).unwrap();
    let expect = matmul(&c, &blk.out.w).unwrap();
    for (j, v) in g.value(out).data().iter().enumerate() {
        assert!((v - expect.data()[j] - blk.out.b.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn zero_queries_give_uniform_attention() {
    let mut p = SaEendParams::init(&tiny_sa(false), 5).unwrap();
    for h in &mut p.blocks[0].heads {
        h.q.w = Tensor::zeros(h.q.w.shape());
        h.q.b = Tensor::zeros(h.q.b.shape());
    }
    let mut g = Graph::new();
    let b = bind_block(&mut g, &p.blocks[0]);
    let e = random(5, 16, 10);
    let ev = g.constant(e.clone());
    let (_, att) = multi_head_self_attention(&mut g, ev, &b, None).unwrap();
    for (h, a) in att.iter().enumerate() {
        assert!(g.value(*a).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let hp = &p.blocks[0].heads[h];
        let v = matmul(&e, &hp.v.w).unwrap();
        let ctx = matmul(g.value(*a), &v).unwrap();
        for j in 0..4 {
            let mean = (0..5).map(|t| v.get(t, j)).sum::<f64>() / 5.0;
            assert!((ctx.get(0, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_scalar_oracle() {
    // One head, d = 1, identity projections.
    let one = |v: f64| Tensor::matrix(1, 1, vec![v]).unwrap();
    let block = BlockParams {
        ln_in: LayerNormParams::unit(1),
        heads: vec![HeadParams {
            q: Linear { w: one(1.0), b: Tensor::zeros(&[1]) },
            k: Linear { w: one(2.0), b: Tensor::zeros(&[1]) },
            v: Linear { w: one(1.0), b: Tensor::vector(vec![0.5]) },
        }],
        out: Linear { w: one(1.0), b: Tensor::zeros(&[1]) },
        ln_sa: LayerNormParams::unit(1),
        ff1: Linear { w: one(1.0), b: Tensor::zeros(&[1]) },
        ff2: Linear { w: one(1.0), b: Tensor::zeros(&[1]) },
    };
    let e = [0.3, -1.2];
    let mut g = Graph::new();
    let b = bind_block(&mut g, &block);
    let ev = g.constant(Tensor::matrix(2, 1, e.to_vec()).unwrap());
    let (out, _) = multi_head_self_attention(&mut g, ev, &b, None).unwrap();
    for i in 0..2 {
        let q = e[i];
        let w: Vec<f64> = e.iter().map(|&k| exp(q * 2.0 * k)).collect();
        let z: f64 = w.iter().sum();
        let expect: f64 = w.iter().zip(&e).map(|(wi, &v)| wi / z * (v + 0.5)).sum();
        assert!((g.value(out).data()[i] - expect).abs() < 1e-12);
    }
}

fn ln_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = x.row(i);
        let n = r.len() as f64;
        let mu = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        for (o, v) in out.row_mut(i).iter_mut().zip(r) {
            *o = (v - mu) / libm::sqrt(var + crate::numerics::LAYER_NORM_EPS);
        }
    }
    out
}

#[test]
fn residual_block_with_zeroed_outputs() {
    let mut p = SaEendParams::init(&tiny_sa(true), 6).unwrap();
    let mut rng = SplitMix64::new(1);
    let blk = &mut p.blocks[0];
    blk.out.w = Tensor::zeros(blk.out.w.shape());
    blk.ff2.w = Tensor::zeros(blk.ff2.w.shape());
    blk.out.b.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    blk.ff2.b.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    let x = random(4, 16, 11);
    let mut g = Graph::new();
    let b = bind_block(&mut g, &p.blocks[0]);
    let xv = g.constant(x.clone());
    let (out, _) = encoder_block(&mut g, xv, &b, true, None).unwrap();
    let mut pre = ln_rows(&x);
    for i in 0..4 {
        for (o, bo) in pre.row_mut(i).iter_mut().zip(p.blocks[0].out.b.data()) {
            *o += bo;
        }
    }
    let mut expect = ln_rows(&pre);
    for i in 0..4 {
        for (o, bf) in expect.row_mut(i).iter_mut().zip(p.blocks[0].ff2.b.data()) {
            *o += bf;
        }
    }
    for (a, b) in g.value(out).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_shapes_and_invariants() {
    for residual in [false, true] {
        let cfg = tiny_sa(residual);
        let p = SaEendParams::init(&cfg, 7).unwrap();
        let x = random(3, 6, 12);
        let (z, att) = sa_eend_forward(&x, &p, &cfg).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(att.len(), 2);
        for blk in &att {
            assert_eq!(blk.len(), 4);
            for a in blk {
                for i in 0..3 {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(sa_eend_forward(&x, &p, &cfg).unwrap().0, z);
    }
    let cfg = tiny_sa(false);
    let p = SaEendParams::init(&cfg, 7).unwrap();
    assert!(matches!(
        sa_eend_forward(&random(3, 5, 1), &p, &cfg),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn zero_parameters_give_half() {
    let cfg = tiny_sa(false);
    let mut p = SaEendParams::init(&cfg, 7).unwrap();
    p.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()));
    let (z, _) = sa_eend_forward(&random(4, 6, 2), &p, &cfg).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.5));
}

#[test]
fn time_permutation_equivariance() {
    let cfg = tiny_sa(true);
    let p = SaEendParams::init(&cfg, 8).unwrap();
    let x = random(7, 6, 13);
    let perm = [3, 0, 6, 2, 5, 1, 4];
    let (z, _) = sa_eend_forward(&x, &p, &cfg).unwrap();
    let (zp, _) = sa_eend_forward(&x.select_rows(&perm), &p, &cfg).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        for c in 0..2 {
            assert!((zp.get(i, c) - z.get(src, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn blstm_forward_contract() {
    let cfg = tiny_blstm();
    let p = BlstmParams::init(&cfg, 9).unwrap();
    let (z, v) = blstm_eend_forward(&random(6, 5, 3), &p, &cfg).unwrap();
    assert_eq!(z.shape(), &[6, 2]);
    assert_eq!(v.shape(), &[6, 4]);
    for i in 0..6 {
        let n: f64 = v.row(i).iter().map(|a| a * a).sum();
        assert!((libm::sqrt(n) - 1.0).abs() < 1e-12);
    }
    assert!(blstm_eend_forward(&random(6, 4, 3), &p, &cfg).is_err());
}

#[test]
fn bidirectional_reversal_symmetry() {
    let cfg = BlstmConfig { layers: 1, ..tiny_blstm() };
    let mut p = BlstmParams::init(&cfg, 10).unwrap();
    p.layers[0].1 = p.layers[0].0.clone();
    let x = random(5, 5, 4);
    let rev: Vec<usize> = (0..5).rev().collect();
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = p.map(&mut |t| g.constant(t.clone()));
        let xv = g.constant(x.clone());
        let out = blstm_eend_graph(&mut g, xv, &b, &cfg).unwrap();
        g.value(out.hidden[0]).clone()
    };
    let h = run(&x);
    let hr = run(&x.select_rows(&rev));
    for t in 0..5 {
        let a = h.row(t);
        let b = hr.row(4 - t);
        assert_eq!(&a[..3], &b[3..]);
        assert_eq!(&a[3..], &b[..3]);
    }
}

fn flat(p: &[&Tensor]) -> Vec<Tensor> {
    p.iter().map(|t| (*t).clone()).collect()
}

#[test]
fn sa_eend_gradients() {
    let cfg = SaEendConfig {
        in_dim: 5,
        ..tiny_sa(false)
    };
    let params = SaEendParams::init(&cfg, 11).unwrap();
    let mut tensors = Vec::new();
    params.visit(&mut |_, t| tensors.push(t));
    let x = random(8, 5, 5);
    let l = LabelSequence::from_rows(&[&[1, 0], &[1, 0], &[1, 1], &[0, 1], &[0, 1], &[0, 0], &[1, 0], &[0, 1]], 0.1).unwrap();
    let r = grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(&mut |_| it.next().unwrap());
            let xv = g.constant(x.clone());
            let out = sa_eend_graph(g, xv, &bound, &cfg, None)?;
            Ok(permutation_free_loss_node(g, out.posteriors, &l, DEFAULT_BCE_CLIP, None)?.0)
        },
        &flat(&tensors),
        1e-5,
        3,
        21,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn blstm_gradients() {
    let cfg = tiny_blstm();
    let params = BlstmParams::init(&cfg, 12).unwrap();
    let mut tensors = Vec::new();
    params.visit(&mut |_, t| tensors.push(t));
    let x = random(6, 5, 6);
    let l = LabelSequence::from_rows(&[&[1, 0], &[1, 1], &[0, 1], &[0, 0], &[1, 0], &[0, 1]], 0.1).unwrap();
    let r = grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(&mut |_| it.next().unwrap());
            let xv = g.constant(x.clone());
            let out = blstm_eend_graph(g, xv, &bound, &cfg)?;
            let (pf, _) = permutation_free_loss_node(g, out.posteriors, &l, DEFAULT_BCE_CLIP, None)?;
            let dc = dc_loss_node(g, out.embeddings, &l, None, 1.0 / 36.0)?;
            crate::loss::multi_objective_node(g, pf, dc, 0.5)
        },
        &flat(&tensors),
        1e-6,
        4,
        22,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn model_tensor_plumbing() {
    let cfg = tiny_sa(false);
    let mut m = Model::SaEend {
        params: SaEendParams::init(&cfg, 1).unwrap(),
        config: cfg.clone(),
    };
    let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(names[0], "input.w");
    assert!(names.contains(&String::from("block1.head3.v.b")));
    let doubled: Vec<Tensor> = m.tensors().iter().map(|t| t.map(|v| 2.0 * v)).collect();
    m.set_tensors(doubled.clone()).unwrap();
    assert_eq!(m.tensors().into_iter().cloned().collect::<Vec<_>>(), doubled);
    assert!(m.set_tensors(vec![Tensor::zeros(&[1])]).is_err());
    let other = Model::SaEend {
        params: SaEendParams::init(&cfg, 2).unwrap(),
        config: cfg,
    };
    assert!(m.same_config(&other));
    let pred = m.predict(&random(3, 6, 1)).unwrap();
    assert_eq!(pred.attention.len(), 2);
    assert!(pred.embeddings.is_none());
}

#[test]
fn gradient_suite_agrees_with_differences() {
    for (name, r) in checks::gradient_suite(4).unwrap() {
        assert!(r.max_relative_error < 1e-4, "{name}: {r:?}");
        assert!(r.checked > 50, "{name}");
    }
}
