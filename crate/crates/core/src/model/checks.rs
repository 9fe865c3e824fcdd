//! Gradient checks of the three differentiable stacks against central
//! differences.

use alloc::vec::Vec;

use super::{blstm_eend_graph, encoder_block, sa_eend_graph, BlstmConfig, BlstmParams, Linear, SaEendConfig, SaEendParams};
use crate::error::Result;
use crate::labels::LabelSequence;
use crate::loss::{dc_loss_node, permutation_free_loss_node, DEFAULT_BCE_CLIP};
use crate::numerics::{grad_check, GradCheckReport, Tensor};
use crate::rng::SplitMix64;

/// Probed coordinates per tensor; every tensor here is small enough to check
/// exhaustively.
const ALL: usize = usize::MAX;

fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

fn labels(t: usize, rng: &mut SplitMix64) -> LabelSequence {
    let rows: Vec<[u8; 2]> = (0..t).map(|_| [rng.below(2) as u8, rng.below(2) as u8]).collect();
    let refs: Vec<&[u8]> = rows.iter().map(|r| &r[..]).collect();
    LabelSequence::from_rows(&refs, 0.1).expect("labels")
}

/// One residual encoder block followed by a sigmoid output layer and the
/// permutation-free loss.
pub fn check_encoder_block(seed: u64) -> Result<GradCheckReport> {
    let cfg = SaEendConfig {
        in_dim: 16,
        model_dim: 16,
        heads: 4,
        ffn_dim: 32,
        blocks: 1,
        speakers: 2,
        residual: true,
    };
    let full = SaEendParams::init(&cfg, seed)?;
    let (block, head) = (full.blocks[0].clone(), full.output.clone());
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let x = random(8, 16, &mut rng);
    let l = labels(8, &mut rng);
    let mut tensors: Vec<Tensor> = Vec::new();
    block.visit("b", &mut |_, t| tensors.push(t.clone()));
    head.visit("h", &mut |_, t| tensors.push(t.clone()));
    grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let b = block.map(&mut |_| it.next().expect("var"));
            let h: Linear<_> = head.map(&mut |_| it.next().expect("var"));
            let xv = g.constant(x.clone());
            let (e, _) = encoder_block(g, xv, &b, true, None)?;
            let z = h.apply(g, e)?;
            let z = g.sigmoid(z);
            Ok(permutation_free_loss_node(g, z, &l, DEFAULT_BCE_CLIP, None)?.0)
        },
        &tensors,
        1e-5,
        ALL,
        seed,
    )
}

/// Two-block SA-EEND with `T = 8`, `D = 16`, `H = 4` under the
/// permutation-free loss.
pub fn check_sa_eend(seed: u64) -> Result<GradCheckReport> {
    let cfg = SaEendConfig {
        in_dim: 10,
        model_dim: 16,
        heads: 4,
        ffn_dim: 32,
        blocks: 2,
        speakers: 2,
        residual: false,
    };
    let params = SaEendParams::init(&cfg, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0x5a);
    let x = random(8, 10, &mut rng);
    let l = labels(8, &mut rng);
    let mut tensors: Vec<Tensor> = Vec::new();
    params.visit(&mut |_, t| tensors.push(t.clone()));
    grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(&mut |_| it.next().expect("var"));
            let xv = g.constant(x.clone());
            let out = sa_eend_graph(g, xv, &bound, &cfg, None)?;
            Ok(permutation_free_loss_node(g, out.posteriors, &l, DEFAULT_BCE_CLIP, None)?.0)
        },
        &tensors,
        1e-5,
        ALL,
        seed,
    )
}

/// A single BLSTM layer feeding the unit-norm embedding head under the Deep
/// Clustering loss.
pub fn check_blstm_dc(seed: u64) -> Result<GradCheckReport> {
    let cfg = BlstmConfig {
        in_dim: 6,
        layers: 1,
        hidden: 4,
        dc_layer: 1,
        embed_dim: 5,
        speakers: 2,
    };
    let params = BlstmParams::init(&cfg, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0xb1);
    let x = random(7, 6, &mut rng);
    let l = labels(7, &mut rng);
    let mut tensors: Vec<Tensor> = Vec::new();
    params.visit(&mut |_, t| tensors.push(t.clone()));
    grad_check(
        |g, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(&mut |_| it.next().expect("var"));
            let xv = g.constant(x.clone());
            let out = blstm_eend_graph(g, xv, &bound, &cfg)?;
            dc_loss_node(g, out.embeddings, &l, None, 1.0 / 49.0)
        },
        &tensors,
        1e-6,
        ALL,
        seed,
    )
}

/// All three checks, labelled.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(alloc::vec![
        ("encoder block + permutation-free loss", check_encoder_block(seed)?),
        ("2-block SA-EEND", check_sa_eend(seed)?),
        ("BLSTM layer + deep clustering loss", check_blstm_dc(seed)?),
    ])
}
