//! Activation capture and the `FDAC` dump format.
//!
//! Layout: `b"FDAC"`, `u32` version, then records until end of file. A
//! record is a `u32` name length, the UTF-8 name, `u32` rows `B`, `u32`
//! columns `H` and `B * H` `f32` values in row-major order. All integers
//! and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::lm::{ForwardOptions, LmModel};
use crate::tensor::{Scalar, Tensor};

use super::sparsity::{nsar, NsarEntry, NsarReport};

pub const CAPTURE_MAGIC: &[u8; 4] = b"FDAC";
pub const CAPTURE_VERSION: u32 = 1;

/// Silu outputs of one dense FFN or one expert sub-layer, `B x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub layer: usize,
    /// `None` for a dense FFN.
    pub sublayer: Option<usize>,
    pub values: Tensor<f32>,
}

impl ActivationCapture {
    pub fn name(&self) -> String {
        match self.sublayer {
            None => format!("layers.{}.ffn", self.layer),
            Some(j) => format!("layers.{}.sub.{j}", self.layer),
        }
    }

    fn parse_name(name: &str) -> Option<(usize, Option<usize>)> {
        let rest = name.strip_prefix("layers.")?;
        let (layer, tail) = rest.split_once('.')?;
        let layer = layer.parse().ok()?;
        if tail == "ffn" {
            return Some((layer, None));
        }
        Some((layer, Some(tail.strip_prefix("sub.")?.parse().ok()?)))
    }
}

/// Runs the model over the first `n_tokens` tokens in `max_seq_len` chunks
/// and stacks each FFN's activations. Expert sub-layers concatenate their
/// experts' columns in position order, giving `H = K * d_e`.
pub fn capture_activations<T: Scalar>(
    model: &LmModel<T>,
    tokens: &[usize],
    n_tokens: usize,
) -> Result<Vec<ActivationCapture>> {
    let n = n_tokens.min(tokens.len());
    if n == 0 {
        return Err(Error::Input("no tokens to capture".into()));
    }
    let chunks: Vec<&[usize]> = tokens[..n].chunks(model.config().max_seq_len).collect();
    let per_chunk = chunks
        .par_iter()
        .map(|chunk| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let opts = ForwardOptions { capture: true, ablate_ffn: false };
            let trace = model.forward_graph(&mut g, &vars, chunk, opts)?;
            let mut out = Vec::new();
            for layer in &trace.activations {
                for experts in &layer.sublayers {
                    let parts: Vec<&Tensor<T>> = experts.iter().map(|&v| g.value(v)).collect();
                    out.push(Tensor::hcat(&parts)?.cast::<f32>());
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let dense = model.config().arch == crate::model::Arch::Dense;
    let m = model.config().sublayers;
    let slots = per_chunk[0].len();
    (0..slots)
        .map(|s| {
            let parts: Vec<&Tensor<f32>> = per_chunk.iter().map(|c| &c[s]).collect();
            let (layer, sublayer) = if dense { (s, None) } else { (s / m, Some(s % m)) };
            Ok(ActivationCapture { layer, sublayer, values: Tensor::vcat(&parts)? })
        })
        .collect()
}

pub fn nsar_report(captures: &[ActivationCapture], tau: f64) -> Result<NsarReport> {
    let entries = captures
        .iter()
        .map(|c| Ok(NsarEntry { layer: c.layer, sublayer: c.sublayer, rate: nsar(&c.values, tau)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(NsarReport { tau, entries })
}

pub fn write_captures<W: Write>(mut w: W, captures: &[ActivationCapture]) -> Result<()> {
    w.write_all(CAPTURE_MAGIC)?;
    w.write_all(&CAPTURE_VERSION.to_le_bytes())?;
    for c in captures {
        let name = c.name();
        let (b, h) = c.values.require_matrix("capture")?;
        w.write_all(&u32::try_from(name.len()).expect("short name").to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for dim in [b, h] {
            let dim = u32::try_from(dim).map_err(|_| Error::Input(format!("capture dimension {dim} exceeds u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(b * h * 4);
        for v in c.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_captures(bytes: &[u8]) -> Result<Vec<ActivationCapture>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CAPTURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected FDAC"));
    }
    let version = cur.u32("version")?;
    if version != CAPTURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos as u64;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format(start + 4, "record name is not UTF-8"))?;
        let (layer, sublayer) = ActivationCapture::parse_name(name)
            .ok_or_else(|| Error::format(start + 4, format!("unrecognised record name {name:?}")))?;
        let b = cur.u32("row count")? as usize;
        let h = cur.u32("column count")? as usize;
        let n = b
            .checked_mul(h)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(cur.pos as u64, "record size overflows"))?;
        let raw = cur.take(n, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let values = Tensor::new(vec![b, h], data).map_err(|e| Error::format(start, e.to_string()))?;
        out.push(ActivationCapture { layer, sublayer, values });
    }
    Ok(out)
}

pub fn read_captures<R: Read>(mut r: R) -> Result<Vec<ActivationCapture>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_captures(&bytes)
}

/// Captures `n_tokens` of activations and writes them to `path`.
pub fn dump_activations<T: Scalar>(
    model: &LmModel<T>,
    tokens: &[usize],
    n_tokens: usize,
    path: &Path,
) -> Result<Vec<ActivationCapture>> {
    let captures = capture_activations(model, tokens, n_tokens)?;
    let file = std::fs::File::create(path)?;
    write_captures(std::io::BufWriter::new(file), &captures)?;
    Ok(captures)
}
