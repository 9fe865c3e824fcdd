//! Binary parameter files and optimizer-state sidecars.
//!
//! Parameter file: `EEND`, a u16 format version, the model config as a
//! `key = value` block (u64 byte length + UTF-8), a u64 tensor count, then per
//! tensor the name (u64 length + UTF-8), rank as u64, dims as u64 and the
//! values as f64. Integers and floats are little-endian.
//!
//! Optimizer sidecar: `EOPT`, version, step, beta1, beta2, eps, a u64 tensor
//! count, then the first moments followed by the second moments, each as
//! rank + dims + values.

use std::path::Path;

use eend_core::model::{BlstmConfig, BlstmParams, Model, SaEendConfig, SaEendParams};
use eend_core::train::AdamState;
use eend_core::Tensor;

use crate::config::parse_kv;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEND";
pub const OPT_MAGIC: &[u8; 4] = b"EOPT";
pub const FORMAT_VERSION: u16 = 1;

/// Model architecture as `key = value` lines.
pub fn model_config_text(m: &Model) -> String {
    match m {
        Model::SaEend { config: c, .. } => format!(
            "kind = sa\nin_dim = {}\nmodel_dim = {}\nheads = {}\nffn_dim = {}\nblocks = {}\nspeakers = {}\nresidual = {}\n",
            c.in_dim, c.model_dim, c.heads, c.ffn_dim, c.blocks, c.speakers, c.residual
        ),
        Model::Blstm { config: c, .. } => format!(
            "kind = blstm\nin_dim = {}\nlayers = {}\nhidden = {}\ndc_layer = {}\nembed_dim = {}\nspeakers = {}\n",
            c.in_dim, c.layers, c.hidden, c.dc_layer, c.embed_dim, c.speakers
        ),
    }
}

/// Zero-initialized model from a config block.
pub fn model_from_config_text(text: &str) -> std::result::Result<Model, String> {
    let kv = parse_kv(text)?;
    let get = |k: &str| -> std::result::Result<&str, String> {
        kv.iter()
            .find(|(key, _, _)| key == k)
            .map(|(_, v, _)| v.as_str())
            .ok_or_else(|| format!("config block lacks `{k}`"))
    };
    let num = |k: &str| -> std::result::Result<usize, String> { get(k)?.parse().map_err(|_| format!("config `{k}` is not a count")) };
    let known: &[&str] = match get("kind")? {
        "sa" => &["kind", "in_dim", "model_dim", "heads", "ffn_dim", "blocks", "speakers", "residual"],
        "blstm" => &["kind", "in_dim", "layers", "hidden", "dc_layer", "embed_dim", "speakers"],
        other => return Err(format!("unknown model kind `{other}`")),
    };
    if let Some((k, _, _)) = kv.iter().find(|(k, _, _)| !known.contains(&k.as_str())) {
        return Err(format!("unknown config key `{k}`"));
    }
    let mut model = if get("kind")? == "sa" {
        let config = SaEendConfig {
            in_dim: num("in_dim")?,
            model_dim: num("model_dim")?,
            heads: num("heads")?,
            ffn_dim: num("ffn_dim")?,
            blocks: num("blocks")?,
            speakers: num("speakers")?,
            residual: get("residual")?.parse().map_err(|_| "config `residual` is not a bool".to_string())?,
        };
        let params = SaEendParams::init(&config, 0).map_err(|e| e.to_string())?;
        Model::SaEend { config, params }
    } else {
        let config = BlstmConfig {
            in_dim: num("in_dim")?,
            layers: num("layers")?,
            hidden: num("hidden")?,
            dc_layer: num("dc_layer")?,
            embed_dim: num("embed_dim")?,
            speakers: num("speakers")?,
        };
        let params = BlstmParams::init(&config, 0).map_err(|e| e.to_string())?;
        Model::Blstm { config, params }
    };
    model.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    Ok(model)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_params(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model_config_text(m);
    put_u64(&mut out, cfg.len() as u64);
    out.extend_from_slice(cfg.as_bytes());
    let named = m.named_tensors();
    put_u64(&mut out, named.len() as u64);
    for (name, t) in named {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated {what}: need {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4, "magic")? != magic {
            return Err(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)));
        }
        let v = u16::from_le_bytes(self.take(2, "version")?.try_into().expect("2 bytes"));
        if v != FORMAT_VERSION {
            return Err(format!("unsupported format version {v}"));
        }
        Ok(())
    }

    /// Rank, dims and values; sizes are checked against the remaining bytes
    /// before allocating.
    fn tensor(&mut self, what: &str) -> std::result::Result<Tensor, String> {
        let rank = self.u64(what)? as usize;
        if rank > 8 {
            return Err(format!("{what}: implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format!("{what}: size overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(format!("truncated {what}: {n} values declared, {} bytes left", self.bytes.len() - self.pos));
        }
        let data = (0..n).map(|_| self.f64(what)).collect::<std::result::Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| format!("{what}: {e}"))
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(MAGIC)?;
    let len = c.u64("config length")? as usize;
    let cfg = std::str::from_utf8(c.take(len, "config block")?).map_err(|_| "config block is not UTF-8".to_string())?;
    let mut model = model_from_config_text(cfg)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = c.u64("tensor count")? as usize;
    if count != expected.len() {
        return Err(format!("{count} tensors recorded, config implies {}", expected.len()));
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, (want, shape)) in expected.iter().enumerate() {
        let record = format!("record {i} (`{want}`)");
        let n = c.u64(&record)? as usize;
        let name = c.take(n, &record)?;
        if name != want.as_bytes() {
            return Err(format!("{record}: found name `{}`", String::from_utf8_lossy(name)));
        }
        let t = c.tensor(&record)?;
        if t.shape() != shape.as_slice() {
            return Err(format!("{record}: shape {:?}, expected {shape:?}", t.shape()));
        }
        tensors.push(t);
    }
    c.finish()?;
    model.set_tensors(tensors).map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn save_params(m: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(m)).map_err(Error::io(path))
}

pub fn load_params(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_params(&bytes).map_err(|r| Error::format(path, r))
}

/// [`load_params`] that also requires the architecture of `expected`.
pub fn load_params_like(path: &Path, expected: &Model) -> Result<Model> {
    let m = load_params(path)?;
    if !m.same_config(expected) {
        return Err(eend_core::Error::ConfigMismatch(format!(
            "{} holds\n{}but\n{}was expected",
            path.display(),
            model_config_text(&m),
            model_config_text(expected)
        ))
        .into());
    }
    Ok(m)
}

pub fn encode_optimizer(s: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut out, s.step);
    for v in [s.beta1, s.beta2, s.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut out, s.m.len() as u64);
    for t in s.m.iter().chain(&s.v) {
        put_tensor(&mut out, t);
    }
    out
}

/// Decodes a sidecar and checks every moment against `model`'s shapes.
pub fn decode_optimizer(bytes: &[u8], model: &Model) -> std::result::Result<AdamState, String> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(OPT_MAGIC)?;
    let step = c.u64("step")?;
    let (beta1, beta2, eps) = (c.f64("beta1")?, c.f64("beta2")?, c.f64("eps")?);
    let shapes: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = c.u64("tensor count")? as usize;
    if count != shapes.len() {
        return Err(format!("{count} moment tensors, model has {}", shapes.len()));
    }
    let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
    for (k, which) in ["m", "v"].iter().enumerate() {
        for (name, shape) in &shapes {
            let record = format!("{which} of `{name}`");
            let t = c.tensor(&record)?;
            if t.shape() != shape.as_slice() {
                return Err(format!("{record}: shape {:?}, expected {shape:?}", t.shape()));
            }
            moments[k].push(t);
        }
    }
    c.finish()?;
    let [m, v] = moments;
    Ok(AdamState { m, v, step, beta1, beta2, eps })
}

pub fn save_optimizer(s: &AdamState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_optimizer(s)).map_err(Error::io(path))
}

pub fn load_optimizer(path: &Path, model: &Model) -> Result<AdamState> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_optimizer(&bytes, model).map_err(|r| Error::format(path, r))
}
