use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sqrt;

use super::{LayerNormParams, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct SaEendConfig {
    pub in_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub speakers: usize,
    pub residual: bool,
}

impl Default for SaEendConfig {
    fn default() -> Self {
        SaEendConfig {
            in_dim: 345,
            model_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            blocks: 2,
            speakers: 2,
            residual: false,
        }
    }
}

impl SaEendConfig {
    /// Small model for single-core training.
    pub fn desk() -> Self {
        SaEendConfig {
            model_dim: 64,
            ffn_dim: 256,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_dim", self.in_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("blocks", self.blocks),
            ("speakers", self.speakers),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::param(
                "heads",
                format!("model_dim {} is not divisible by {} heads", self.model_dim, self.heads),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln_in: LayerNormParams<T>,
    pub heads: Vec<HeadParams<T>>,
    pub out: Linear<T>,
    pub ln_sa: LayerNormParams<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaEendParams<T> {
    pub input: Linear<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_out: LayerNormParams<T>,
    pub output: Linear<T>,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        let q = self.q.map(f);
        let k = self.k.map(f);
        let v = self.v.map(f);
        HeadParams { q, k, v }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        self.q.visit(&format!("{path}.q"), f);
        self.k.visit(&format!("{path}.k"), f);
        self.v.visit(&format!("{path}.v"), f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        let ln_in = self.ln_in.map(f);
        let heads = self.heads.iter().map(|h| h.map(f)).collect();
        let out = self.out.map(f);
        let ln_sa = self.ln_sa.map(f);
        let ff1 = self.ff1.map(f);
        let ff2 = self.ff2.map(f);
        BlockParams {
            ln_in,
            heads,
            out,
            ln_sa,
            ff1,
            ff2,
        }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        self.ln_in.visit(&format!("{path}.ln_in"), f);
        for (h, head) in self.heads.iter().enumerate() {
            head.visit(&format!("{path}.head{h}"), f);
        }
        self.out.visit(&format!("{path}.out"), f);
        self.ln_sa.visit(&format!("{path}.ln_sa"), f);
        self.ff1.visit(&format!("{path}.ff1"), f);
        self.ff2.visit(&format!("{path}.ff2"), f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.ln_in.visit_mut(f);
        for head in &mut self.heads {
            head.visit_mut(f);
        }
        self.out.visit_mut(f);
        self.ln_sa.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

impl<T> SaEendParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SaEendParams<U> {
        let input = self.input.map(f);
        let blocks = self.blocks.iter().map(|b| b.map(f)).collect();
        let ln_out = self.ln_out.map(f);
        let output = self.output.map(f);
        SaEendParams {
            input,
            blocks,
            ln_out,
            output,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.input.visit("input", f);
        for (p, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{p}"), f);
        }
        self.ln_out.visit("ln_out", f);
        self.output.visit("output", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.input.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.ln_out.visit_mut(f);
        self.output.visit_mut(f);
    }
}

impl SaEendParams<Tensor> {
    pub fn init(cfg: &SaEendConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let (d, dh) = (cfg.model_dim, cfg.head_dim());
        let input = Linear::xavier(cfg.in_dim, d, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln_in: LayerNormParams::unit(d),
                heads: (0..cfg.heads)
                    .map(|_| HeadParams {
                        q: Linear::xavier(d, dh, &mut rng),
                        k: Linear::xavier(d, dh, &mut rng),
                        v: Linear::xavier(d, dh, &mut rng),
                    })
                    .collect(),
                out: Linear::xavier(d, d, &mut rng),
                ln_sa: LayerNormParams::unit(d),
                ff1: Linear::xavier(d, cfg.ffn_dim, &mut rng),
                ff2: Linear::xavier(cfg.ffn_dim, d, &mut rng),
            })
            .collect();
        Ok(SaEendParams {
            input,
            blocks,
            ln_out: LayerNormParams::unit(d),
            output: Linear::xavier(d, cfg.speakers, &mut rng),
        })
    }
}

/// Multi-head self-attention over normalized block input `e`. Returns the
/// projected context and the per-head attention nodes.
pub fn multi_head_self_attention(
    g: &mut Graph,
    e: Var,
    block: &BlockParams<Var>,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let dh = g.value(block.heads.first().ok_or_else(|| Error::EmptyInput("attention heads".into()))?.q.w).cols();
    let scale = 1.0 / sqrt(dh as f64);
    let mut contexts = Vec::with_capacity(block.heads.len());
    let mut attention = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let q = head.q.apply(g, e)?;
        let k = head.k.apply(g, e)?;
        let v = head.v.apply(g, e)?;
        let a = g.matmul_nt(q, k)?;
        let a_hat = g.softmax_rows(a, scale, key_mask)?;
        contexts.push(g.matmul(a_hat, v)?);
        attention.push(a_hat);
    }
    let c = g.concat_cols(&contexts)?;
    Ok((block.out.apply(g, c)?, attention))
}

/// One encoder block: layer norm, self-attention, residual and layer norm,
/// feed-forward, residual. Without `residual` both additions are skipped.
pub fn encoder_block(
    g: &mut Graph,
    e_in: Var,
    block: &BlockParams<Var>,
    residual: bool,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let e_bar = block.ln_in.apply(g, e_in)?;
    let (e_sa, attention) = multi_head_self_attention(g, e_bar, block, key_mask)?;
    let pre = if residual { g.add(e_bar, e_sa)? } else { e_sa };
    let e_sa_bar = block.ln_sa.apply(g, pre)?;
    let h = block.ff1.apply(g, e_sa_bar)?;
    let h = g.relu(h);
    let e_ff = block.ff2.apply(g, h)?;
    let out = if residual { g.add(e_sa_bar, e_ff)? } else { e_ff };
    Ok((out, attention))
}

#[derive(Debug, Clone)]
pub struct SaEendGraphOutput {
    /// `T x C` pre-sigmoid scores.
    pub logits: Var,
    pub posteriors: Var,
    /// Per block, per head.
    pub attention: Vec<Vec<Var>>,
}

pub fn sa_eend_graph(
    g: &mut Graph,
    x: Var,
    params: &SaEendParams<Var>,
    cfg: &SaEendConfig,
    key_mask: Option<&[bool]>,
) -> Result<SaEendGraphOutput> {
    let xv = g.value(x);
    if xv.shape().len() != 2 || xv.cols() != cfg.in_dim {
        return Err(Error::dim("sa_eend input", xv.shape(), &[xv.rows(), cfg.in_dim]));
    }
    let mut e = params.input.apply(g, x)?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (out, att) = encoder_block(g, e, block, cfg.residual, key_mask)?;
        e = out;
        attention.push(att);
    }
    let e = params.ln_out.apply(g, e)?;
    let logits = params.output.apply(g, e)?;
    let posteriors = g.sigmoid(logits);
    Ok(SaEendGraphOutput {
        logits,
        posteriors,
        attention,
    })
}

/// Posteriors `T x C` and attention weights per block and head.
pub fn sa_eend_forward(x: &Tensor, params: &SaEendParams<Tensor>, cfg: &SaEendConfig) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let bound = params.map(&mut |t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let out = sa_eend_graph(&mut g, xv, &bound, cfg, None)?;
    let attention = out
        .attention
        .iter()
        .map(|b| b.iter().map(|&a| g.value(a).clone()).collect())
        .collect();
    Ok((g.value(out.posteriors).clone(), attention))
}
