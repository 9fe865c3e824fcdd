//! Network architectures: self-attention EEND and BLSTM EEND with a Deep
//! Clustering head.
//!
//! Parameter sets are generic over their leaf type so the same structure
//! holds tensors, graph variables or optimizer moments. Weights are stored
//! `in x out` and applied as `x W + b`.

mod blstm;
pub mod checks;
mod sa;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::SplitMix64;

pub use blstm::{blstm_eend_forward, blstm_eend_graph, BlstmConfig, BlstmGraphOutput, BlstmParams, LstmParams};
pub use sa::{
    encoder_block, multi_head_self_attention, sa_eend_forward, sa_eend_graph, BlockParams, HeadParams, SaEendConfig,
    SaEendGraphOutput, SaEendParams,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        let w = f(&self.w);
        let b = f(&self.b);
        Linear { w, b }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.w"), &self.w);
        f(format!("{path}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl Linear<Tensor> {
    /// Uniform weights within `sqrt(6 / (in + out))`, zero bias.
    pub fn xavier(inp: usize, out: usize, rng: &mut SplitMix64) -> Self {
        Linear {
            w: xavier(inp, out, rng),
            b: Tensor::zeros(&[out]),
        }
    }
}

impl Linear<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        let gain = f(&self.gain);
        let bias = f(&self.bias);
        LayerNormParams { gain, bias }
    }

    pub fn visit<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.gain"), &self.gain);
        f(format!("{path}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl LayerNormParams<Tensor> {
    pub fn unit(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

impl LayerNormParams<Var> {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

pub fn xavier_limit(inp: usize, out: usize) -> f64 {
    sqrt(6.0 / (inp + out) as f64)
}

fn xavier(inp: usize, out: usize, rng: &mut SplitMix64) -> Tensor {
    let lim = xavier_limit(inp, out);
    let data = (0..inp * out).map(|_| rng.uniform_range(-lim, lim)).collect();
    Tensor::new(alloc::vec![inp, out], data).expect("shape matches data")
}

/// Either architecture with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    SaEend {
        config: SaEendConfig,
        params: SaEendParams<Tensor>,
    },
    Blstm {
        config: BlstmConfig,
        params: BlstmParams<Tensor>,
    },
}

/// Model output for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `T x C` posteriors.
    pub posteriors: Tensor,
    /// Per block, per head `T x T` attention weights (self-attention only).
    pub attention: Vec<Vec<Tensor>>,
    /// Unit-norm DC embeddings (BLSTM only).
    pub embeddings: Option<Tensor>,
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::SaEend { .. } => "sa-eend",
            Model::Blstm { .. } => "blstm-eend",
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Model::SaEend { config, .. } => config.in_dim,
            Model::Blstm { config, .. } => config.in_dim,
        }
    }

    pub fn speakers(&self) -> usize {
        match self {
            Model::SaEend { config, .. } => config.speakers,
            Model::Blstm { config, .. } => config.speakers,
        }
    }

    /// Named tensors in the canonical visit order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Model::SaEend { params, .. } => params.visit(&mut |n, t| out.push((n, t))),
            Model::Blstm { params, .. } => params.visit(&mut |n, t| out.push((n, t))),
        }
        out
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        match self {
            Model::SaEend { params, .. } => params.visit_mut(f),
            Model::Blstm { params, .. } => params.visit_mut(f),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Replaces every tensor, in visit order, after checking shapes.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let expected: Vec<Vec<usize>> = self.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if expected.len() != tensors.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(&tensors) {
            if e.as_slice() != t.shape() {
                return Err(Error::dim("set_tensors", e, t.shape()));
            }
        }
        let mut it = tensors.into_iter();
        self.visit_mut(&mut |slot| *slot = it.next().expect("count checked"));
        Ok(())
    }

    /// Same architecture and configuration.
    pub fn same_config(&self, other: &Model) -> bool {
        match (self, other) {
            (Model::SaEend { config: a, .. }, Model::SaEend { config: b, .. }) => a == b,
            (Model::Blstm { config: a, .. }, Model::Blstm { config: b, .. }) => a == b,
            _ => false,
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        match self {
            Model::SaEend { config, params } => {
                let (posteriors, attention) = sa_eend_forward(x, params, config)?;
                Ok(Prediction {
                    posteriors,
                    attention,
                    embeddings: None,
                })
            }
            Model::Blstm { config, params } => {
                let (posteriors, emb) = blstm_eend_forward(x, params, config)?;
                Ok(Prediction {
                    posteriors,
                    attention: Vec::new(),
                    embeddings: Some(emb),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests;
