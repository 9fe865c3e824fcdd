use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{xavier, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct BlstmConfig {
    pub in_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// 1-indexed layer whose output feeds the embedding head.
    pub dc_layer: usize,
    pub embed_dim: usize,
    pub speakers: usize,
}

impl Default for BlstmConfig {
    fn default() -> Self {
        BlstmConfig {
            in_dim: 345,
            layers: 5,
            hidden: 256,
            dc_layer: 2,
            embed_dim: 256,
            speakers: 2,
        }
    }
}

impl BlstmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_dim", self.in_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("speakers", self.speakers),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.dc_layer < 1 || self.dc_layer > self.layers {
            return Err(Error::param(
                "dc_layer",
                format!("must be within 1..={}, got {}", self.layers, self.dc_layer),
            ));
        }
        Ok(())
    }
}

/// One direction of one layer; gate blocks ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub b: T,
}

impl<T> LstmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LstmParams<U> {
        let w_ih = f(&self.w_ih);
        let w_hh = f(&self.w_hh);
        let b = f(&self.b);
        LstmParams { w_ih, w_hh, b }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.w_ih"), &self.w_ih);
        f(format!("{path}.w_hh"), &self.w_hh);
        f(format!("{path}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w_ih);
        f(&mut self.w_hh);
        f(&mut self.b);
    }
}

impl LstmParams<Tensor> {
    fn init(inp: usize, h: usize, rng: &mut SplitMix64) -> Self {
        let mut b = Tensor::zeros(&[4 * h]);
        b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        LstmParams {
            w_ih: xavier(inp, 4 * h, rng),
            w_hh: xavier(h, 4 * h, rng),
            b,
        }
    }
}

impl LstmParams<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let pre = g.linear(x, self.w_ih, self.b)?;
        g.lstm(pre, self.w_hh, reverse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlstmParams<T> {
    /// `(forward, backward)` per layer.
    pub layers: Vec<(LstmParams<T>, LstmParams<T>)>,
    pub output: Linear<T>,
    pub dc: Linear<T>,
}

impl<T> BlstmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlstmParams<U> {
        let layers = self.layers.iter().map(|(a, b)| (a.map(f), b.map(f))).collect();
        let output = self.output.map(f);
        let dc = self.dc.map(f);
        BlstmParams { layers, output, dc }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        for (p, (fw, bw)) in self.layers.iter().enumerate() {
            fw.visit(&format!("layer{p}.fwd"), f);
            bw.visit(&format!("layer{p}.bwd"), f);
        }
        self.output.visit("output", f);
        self.dc.visit("dc", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        for (fw, bw) in &mut self.layers {
            fw.visit_mut(f);
            bw.visit_mut(f);
        }
        self.output.visit_mut(f);
        self.dc.visit_mut(f);
    }
}

impl BlstmParams<Tensor> {
    pub fn init(cfg: &BlstmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let h = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|p| {
                let inp = if p == 0 { cfg.in_dim } else { 2 * h };
                let fw = LstmParams::init(inp, h, &mut rng);
                let bw = LstmParams::init(inp, h, &mut rng);
                (fw, bw)
            })
            .collect();
        Ok(BlstmParams {
            layers,
            output: Linear::xavier(2 * h, cfg.speakers, &mut rng),
            dc: Linear::xavier(2 * h, cfg.embed_dim, &mut rng),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlstmGraphOutput {
    pub logits: Var,
    pub posteriors: Var,
    /// Unit-norm `T x V` embeddings.
    pub embeddings: Var,
    /// Hidden sequence of every layer, `T x 2H` (forward then backward).
    pub hidden: Vec<Var>,
}

pub fn blstm_eend_graph(g: &mut Graph, x: Var, params: &BlstmParams<Var>, cfg: &BlstmConfig) -> Result<BlstmGraphOutput> {
    let xv = g.value(x);
    if xv.shape().len() != 2 || xv.cols() != cfg.in_dim {
        return Err(Error::dim("blstm_eend input", xv.shape(), &[xv.rows(), cfg.in_dim]));
    }
    if cfg.dc_layer < 1 || cfg.dc_layer > params.layers.len() {
        return Err(Error::param("dc_layer", "outside the layer stack"));
    }
    let mut h = x;
    let mut hidden = Vec::with_capacity(params.layers.len());
    for (fw, bw) in &params.layers {
        let f = fw.apply(g, h, false)?;
        let b = bw.apply(g, h, true)?;
        h = g.concat_cols(&[f, b])?;
        hidden.push(h);
    }
    let logits = params.output.apply(g, h)?;
    let posteriors = g.sigmoid(logits);
    let e = params.dc.apply(g, hidden[cfg.dc_layer - 1])?;
    let e = g.tanh(e);
    let embeddings = g.l2_normalize_rows(e)?;
    Ok(BlstmGraphOutput {
        logits,
        posteriors,
        embeddings,
        hidden,
    })
}

/// Posteriors `T x C` and unit-norm embeddings `T x V`.
pub fn blstm_eend_forward(x: &Tensor, params: &BlstmParams<Tensor>, cfg: &BlstmConfig) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = params.map(&mut |t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let out = blstm_eend_graph(&mut g, xv, &bound, cfg)?;
    Ok((g.value(out.posteriors).clone(), g.value(out.embeddings).clone()))
}
