//! Training objectives: BCE, the permutation-free loss, Deep Clustering and
//! their blend.
//!
//! Sums run frame-major (`t` outer, `c` inner) and are divided once at the
//! end, so a value recomputed through [`LabelSequence::permute_columns`]
//! matches bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::log;

use crate::error::{Error, Result};
use crate::labels::LabelSequence;
use crate::numerics::{matmul, matmul_tn, Graph, Tensor, Var};

pub const DEFAULT_BCE_CLIP: f64 = 1e-7;
/// Largest speaker count for which permutations are enumerated.
pub const MAX_PERMUTATION_SPEAKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the Deep Clustering term.
    pub alpha: f64,
    pub bce_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            bce_clip: DEFAULT_BCE_CLIP,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.bce_clip > 0.0 && self.bce_clip < 0.5) {
            return Err(Error::param("bce_clip", format!("must be in (0, 0.5), got {}", self.bce_clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationResult {
    pub loss: f64,
    /// Output channel `c` is matched to reference column `best_perm[c]`.
    pub best_perm: Vec<usize>,
}

fn check_shapes(z: &Tensor, l: &LabelSequence, mask: Option<&[bool]>) -> Result<()> {
    if z.shape().len() != 2 || z.rows() != l.frames() || z.cols() != l.speakers() {
        return Err(Error::dim("bce", z.shape(), &[l.frames(), l.speakers()]));
    }
    if let Some(m) = mask {
        if m.len() != l.frames() {
            return Err(Error::dim("frame mask", &[l.frames()], &[m.len()]));
        }
    }
    Ok(())
}

fn valid(mask: Option<&[bool]>, t: usize) -> bool {
    mask.map_or(true, |m| m[t])
}

/// Sum of BCE terms against `l` with columns taken through `perm`, and the
/// number of terms.
fn bce_sum(z: &Tensor, l: &LabelSequence, perm: &[usize], clip: f64, mask: Option<&[bool]>) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 0..l.frames() {
        if !valid(mask, t) {
            continue;
        }
        let zr = z.row(t);
        for (c, &src) in perm.iter().enumerate() {
            let p = zr[c].clamp(clip, 1.0 - clip);
            sum -= if l.get(t, src) { log(p) } else { log(1.0 - p) };
            n += 1;
        }
    }
    (sum, n)
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean binary cross-entropy over all `T x C` entries.
pub fn bce(z: &Tensor, l: &LabelSequence) -> Result<f64> {
    bce_with(z, l, DEFAULT_BCE_CLIP, None)
}

/// [`bce`] with an explicit clamp and optional frame mask (`false` frames are skipped).
pub fn bce_with(z: &Tensor, l: &LabelSequence, clip: f64, mask: Option<&[bool]>) -> Result<f64> {
    check_shapes(z, l, mask)?;
    let id: Vec<usize> = (0..l.speakers()).collect();
    let (s, n) = bce_sum(z, l, &id, clip, mask);
    Ok(mean(s, n))
}

/// All permutations of `0..c` in lexicographic order.
pub fn permutations(c: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..c).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..c).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..c).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Minimum BCE over all column permutations of `l`; ties go to the
/// lexicographically smallest permutation.
pub fn permutation_free_loss(z: &Tensor, l: &LabelSequence) -> Result<PermutationResult> {
    permutation_free_loss_with(z, l, DEFAULT_BCE_CLIP, None)
}

pub fn permutation_free_loss_with(z: &Tensor, l: &LabelSequence, clip: f64, mask: Option<&[bool]>) -> Result<PermutationResult> {
    check_shapes(z, l, mask)?;
    if l.speakers() > MAX_PERMUTATION_SPEAKERS {
        return Err(Error::Capacity(format!(
            "{} speakers exceed the permutation cap of {}",
            l.speakers(),
            MAX_PERMUTATION_SPEAKERS
        )));
    }
    let mut best: Option<PermutationResult> = None;
    for perm in permutations(l.speakers()) {
        let (s, n) = bce_sum(z, l, &perm, clip, mask);
        let loss = mean(s, n);
        if best.as_ref().map_or(true, |b| loss < b.loss) {
            best = Some(PermutationResult { loss, best_perm: perm });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Permutation-free loss as a graph node. The argmin permutation is fixed and
/// the gradient is that of BCE against the permuted labels.
pub fn permutation_free_loss_node(
    g: &mut Graph,
    z: Var,
    l: &LabelSequence,
    clip: f64,
    mask: Option<&[bool]>,
) -> Result<(Var, PermutationResult)> {
    let zt = g.value(z).clone();
    let res = permutation_free_loss_with(&zt, l, clip, mask)?;
    let n = (0..l.frames()).filter(|&t| valid(mask, t)).count() * l.speakers();
    let mut grad = Tensor::zeros(zt.shape());
    if n > 0 {
        let inv = 1.0 / n as f64;
        for t in 0..l.frames() {
            if !valid(mask, t) {
                continue;
            }
            for (c, &src) in res.best_perm.iter().enumerate() {
                let p = zt.get(t, c).clamp(clip, 1.0 - clip);
                let y = if l.get(t, src) { 1.0 } else { 0.0 };
                grad.set(t, c, inv * (p - y) / (p * (1.0 - p)));
            }
        }
    }
    let node = g.scalar_fn(z, res.loss, grad)?;
    Ok((node, res))
}

/// One-hot rows over the speaker power set: row `t` has its 1 at
/// `sum_c l[t][c] * 2^c`.
pub fn powerset_onehot(l: &LabelSequence) -> Result<Tensor> {
    if l.speakers() > MAX_PERMUTATION_SPEAKERS {
        return Err(Error::Capacity(format!("2^{} power-set classes", l.speakers())));
    }
    let k = 1usize << l.speakers();
    let mut out = Tensor::zeros(&[l.frames(), k]);
    for t in 0..l.frames() {
        out.set(t, powerset_class(l.row(t)), 1.0);
    }
    Ok(out)
}

fn powerset_class(row: &[u8]) -> usize {
    row.iter().enumerate().map(|(c, &v)| (v as usize) << c).sum()
}

fn frob2(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum()
}

fn masked_rows(v: &Tensor, l: &LabelSequence, mask: Option<&[bool]>) -> Result<(Tensor, LabelSequence, Vec<usize>)> {
    if v.shape().len() != 2 || v.rows() != l.frames() {
        return Err(Error::dim("dc_loss", v.shape(), &[l.frames(), l.speakers()]));
    }
    if let Some(m) = mask {
        if m.len() != l.frames() {
            return Err(Error::dim("frame mask", &[l.frames()], &[m.len()]));
        }
    }
    let keep: Vec<usize> = (0..l.frames()).filter(|&t| valid(mask, t)).collect();
    if keep.len() == l.frames() {
        return Ok((v.clone(), l.clone(), keep));
    }
    Ok((v.select_rows(&keep), l.select_frames(&keep, 1), keep))
}

/// `||V V^T - L' L'^T||_F^2` with `L'` the power-set one-hot labels, evaluated
/// without forming `T x T` matrices.
pub fn dc_loss(v: &Tensor, l: &LabelSequence) -> Result<f64> {
    dc_loss_with(v, l, None)
}

pub fn dc_loss_with(v: &Tensor, l: &LabelSequence, mask: Option<&[bool]>) -> Result<f64> {
    let (v, l, _) = masked_rows(v, l, mask)?;
    let onehot = powerset_onehot(&l)?;
    let vtv = matmul_tn(&v, &v)?;
    let vtl = matmul_tn(&v, &onehot)?;
    let mut counts = vec![0.0f64; onehot.cols()];
    for t in 0..l.frames() {
        counts[powerset_class(l.row(t))] += 1.0;
    }
    let ltl: f64 = counts.iter().map(|n| n * n).sum();
    Ok((frob2(&vtv) - 2.0 * frob2(&vtl) + ltl).max(0.0))
}

/// DC loss as a graph node, multiplied by `weight`.
pub fn dc_loss_node(g: &mut Graph, v: Var, l: &LabelSequence, mask: Option<&[bool]>, weight: f64) -> Result<Var> {
    let vt = g.value(v).clone();
    let (vk, lk, keep) = masked_rows(&vt, l, mask)?;
    let value = dc_loss_with(&vk, &lk, None)?;
    let onehot = powerset_onehot(&lk)?;
    // d/dV = 4 (V V^T V - L' L'^T V)
    let a = matmul(&vk, &matmul_tn(&vk, &vk)?)?;
    let b = matmul(&onehot, &matmul_tn(&onehot, &vk)?)?;
    let mut grad = Tensor::zeros(vt.shape());
    for (k, &t) in keep.iter().enumerate() {
        for (j, out) in grad.row_mut(t).iter_mut().enumerate() {
            *out = 4.0 * weight * (a.get(k, j) - b.get(k, j));
        }
    }
    g.scalar_fn(v, weight * value, grad)
}

/// `(1 - alpha) * pf + alpha * dc`.
pub fn multi_objective(pf: f64, dc: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("must be in [0, 1], got {alpha}")));
    }
    Ok((1.0 - alpha) * pf + alpha * dc)
}

pub fn multi_objective_node(g: &mut Graph, pf: Var, dc: Var, alpha: f64) -> Result<Var> {
    multi_objective(0.0, 0.0, alpha)?;
    let a = g.scale(pf, 1.0 - alpha);
    let b = g.scale(dc, alpha);
    g.add(a, b)
}
