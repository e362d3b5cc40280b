//! `FDCP` checkpoint files.
//!
//! ```text
//! 0   b"FDCP"
//! 4   u32 version (1)
//! 8   u64 header length N
//! 16  N bytes of JSON: {"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
//!     zero padding to a multiple of 64
//! P   payload: f32 values per manifest entry, each entry starting on a
//!     64-byte boundary relative to P
//! ```
//!
//! Integers and floats are little-endian. Offsets in the manifest are
//! relative to `P`. Writers lay tensors out in canonical order with minimal
//! padding, and readers insist on that layout so that load then save
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LmModel, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn manifest<T: Scalar>(model: &LmModel<T>) -> Vec<ManifestEntry> {
    let mut offset = 0usize;
    model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let e = ManifestEntry { name, shape: t.shape().to_vec(), offset: offset as u64 };
            offset = align_up(offset + 4 * t.numel());
            e
        })
        .collect()
}

/// Serialises `model`, rounding values to `f32`.
pub fn checkpoint_bytes<T: Scalar>(model: &LmModel<T>) -> Vec<u8> {
    let header = Header { config: model.config().clone(), tensors: manifest(model) };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let payload_start = align_up(PREFIX + json.len());
    let mut out = Vec::with_capacity(payload_start);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for ((_, t), e) in model.named_tensors().into_iter().zip(&header.tensors) {
        out.resize(payload_start + e.offset as usize, 0);
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(model: &LmModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

/// Parses checkpoint bytes. Structural problems are format errors carrying
/// the byte offset where they were detected; an invalid config is a
/// configuration error.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<LmModel<T>> {
    if bytes.len() < PREFIX {
        return Err(Error::format(bytes.len() as u64, "file shorter than the 16-byte prefix"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected FDCP"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREFIX as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(8, format!("header length {header_len} runs past end of file")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| Error::format(PREFIX as u64 + e.column() as u64, format!("bad header JSON: {e}")))?;
    let payload_start = align_up(header_end);
    if let Some(pos) = bytes[header_end..payload_start.min(bytes.len())].iter().position(|&b| b != 0) {
        return Err(Error::format((header_end + pos) as u64, "non-zero header padding"));
    }

    let mut entries = header.tensors.iter();
    let mut seen = std::collections::HashSet::new();
    let model = LmModel::build(&header.config, |name, shape, _| {
        let e = entries
            .next()
            .ok_or_else(|| Error::format(PREFIX as u64, format!("manifest is missing tensor {name}")))?;
        if !seen.insert(e.name.clone()) {
            return Err(Error::format(PREFIX as u64, format!("duplicate tensor name {}", e.name)));
        }
        if e.name != name || e.shape != shape {
            return Err(Error::format(
                PREFIX as u64,
                format!("manifest entry {} {:?} where {name} {shape:?} was expected", e.name, e.shape),
            ));
        }
        read_tensor(bytes, payload_start, e)
    })?;
    if let Some(extra) = entries.next() {
        return Err(Error::format(PREFIX as u64, format!("unexpected manifest entry {}", extra.name)));
    }
    let canonical = manifest(&model);
    if canonical != header.tensors {
        return Err(Error::format(PREFIX as u64, "manifest offsets differ from the canonical layout"));
    }
    let expected_len = canonical
        .last()
        .map(|e| payload_start + e.offset as usize + 4 * e.shape.iter().product::<usize>())
        .unwrap_or(payload_start);
    if bytes.len() != expected_len {
        return Err(Error::format(expected_len as u64, format!("{} trailing bytes", bytes.len() - expected_len)));
    }
    Ok(model)
}

fn read_tensor<T: Scalar>(bytes: &[u8], payload_start: usize, e: &ManifestEntry) -> Result<Tensor<T>> {
    let start = payload_start as u64 + e.offset;
    let n: usize = e.shape.iter().product();
    let end = start + 4 * n as u64;
    if end > bytes.len() as u64 {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload of {} truncated: needs bytes {start}..{end}", e.name),
        ));
    }
    let raw = &bytes[start as usize..end as usize];
    let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
    Tensor::new(e.shape.clone(), data)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LmModel<T>> {
    parse_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::toy().with_finedeep(2, 2);
        c.hidden_size = 8;
        c.n_heads = 2;
        c.n_layers = 2;
        c.intermediate_size = 16;
        c.vocab_size = 11;
        c.max_seq_len = 8;
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = LmModel::<f64>::init(&cfg()).unwrap();
        let bytes = checkpoint_bytes(&m);
        assert_eq!(&bytes[..4], b"FDCP");
        let back: LmModel<f64> = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back), bytes);
        let as_f32: LmModel<f32> = parse_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&as_f32), bytes);
    }

    #[test]
    fn layout_is_aligned() {
        let m = LmModel::<f32>::init(&cfg()).unwrap();
        let bytes = checkpoint_bytes(&m);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert!(header.tensors.iter().all(|e| e.offset % 64 == 0));
        assert_eq!(align_up(16 + hl) % 64, 0);
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let m = LmModel::<f32>::init(&cfg()).unwrap();
        let bytes = checkpoint_bytes(&m);
        let check = |b: &[u8]| match parse_checkpoint::<f32>(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(check(&bytes[..bytes.len() - 1]), (bytes.len() - 1) as u64);
        assert_eq!(check(&bytes[..10]), 10);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(check(&bad), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(check(&bad), 4);
        let mut bad = bytes.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(check(&bad), 8);
        let mut longer = bytes.clone();
        longer.push(0);
        check(&longer);
    }

    #[test]
    fn invalid_config_is_a_configuration_error() {
        let m = LmModel::<f32>::init(&cfg()).unwrap();
        let bytes = checkpoint_bytes(&m);
        let needle = b"\"n_heads\":2";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut tampered = bytes.clone();
        tampered[at + needle.len() - 1] = b'3';
        assert!(matches!(parse_checkpoint::<f32>(&tampered), Err(Error::Config(_))));
    }
}
