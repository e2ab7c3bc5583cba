//! Single-file parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CKDT" | u32 version | u64 header_len | header JSON
//! u64 entry_count | entries...
//! entry: u32 key_len | key | u32 ndim | u64 dims[ndim] | values
//! ```
//!
//! Keys are `branch/layer_index/param_name` (e.g. `cls/3/weight`). Values
//! are stored at the width named by `header.dtype`, so write-then-read is
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DetectorModel, DetectorSpec, RegMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CKDT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n_layers: usize,
    pub hidden_channels: usize,
    pub num_classes: usize,
    pub reg_mode: RegMode,
    pub strides: Vec<usize>,
    pub dtype: String,
    pub spec: DetectorSpec,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, values: impl Iterator<Item = T>) {
    for v in values {
        if T::DTYPE == "f32" {
            out.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
}

/// Serializes a model to bytes.
pub fn encode<T: Scalar>(model: &DetectorModel<T>, config_hash: Option<&str>, seed: Option<u64>) -> Vec<u8> {
    let spec = &model.spec;
    let header = CheckpointHeader {
        n_layers: spec.head.n_layers,
        hidden_channels: spec.head.hidden_channels,
        num_classes: spec.head.num_classes,
        reg_mode: spec.head.reg_mode,
        strides: spec.strides.clone(),
        dtype: T::DTYPE.to_string(),
        spec: spec.clone(),
        config_hash: config_hash.map(str::to_string),
        seed,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, header_json.len() as u64);
    out.extend_from_slice(&header_json);
    let layers = model.layers();
    put_u64(&mut out, 2 * layers.len() as u64);
    for (prefix, _, conv) in layers {
        let key = format!("{prefix}/weight");
        put_u32(&mut out, key.len() as u32);
        out.extend_from_slice(key.as_bytes());
        put_u32(&mut out, 4);
        for d in [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel] {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, conv.weight.iter().copied());

        let key = format!("{prefix}/bias");
        put_u32(&mut out, key.len() as u32);
        out.extend_from_slice(key.as_bytes());
        put_u32(&mut out, 1);
        put_u64(&mut out, conv.out_channels as u64);
        put_values(&mut out, conv.bias.iter().copied());
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of archive".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(DetectorModel<T>, CheckpointHeader)> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = cur.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    let mut model = DetectorModel::<T>::zeros(header.spec.clone())?;
    let mut entries = std::collections::BTreeMap::new();
    let count = cur.u64()?;
    for _ in 0..count {
        let klen = cur.u32()? as usize;
        let key = String::from_utf8(cur.take(klen)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 key".into()))?;
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = cur.take(len * width)?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("f32 value")
                } else {
                    T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        entries.insert(key, (dims, values));
    }
    let prefixes: Vec<String> = model.layers().into_iter().map(|(p, _, _)| p).collect();
    for (prefix, (_, conv)) in prefixes.iter().zip(model.layers_mut()) {
        let (wdims, w) = entries
            .remove(&format!("{prefix}/weight"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/weight")))?;
        let expected = [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
        if wdims != expected {
            return Err(Error::Checkpoint(format!("{prefix}/weight has shape {wdims:?}, expected {expected:?}")));
        }
        conv.weight = Array2::from_shape_vec(conv.weight.raw_dim(), w).expect("checked shape");
        let (bdims, b) = entries
            .remove(&format!("{prefix}/bias"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/bias")))?;
        if bdims != [conv.out_channels] {
            return Err(Error::Checkpoint(format!("{prefix}/bias has shape {bdims:?}")));
        }
        conv.bias = Array1::from_vec(b);
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
    }
    Ok((model, header))
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    model: &DetectorModel<T>,
    config_hash: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let bytes = encode(model, config_hash, seed);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(DetectorModel<T>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
