//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TTLM"                magic
//! u32                   format version (1)
//! u32                   length of the JSON header in bytes
//! [u8]                  UTF-8 JSON header (model config, optimizer, vocabulary)
//! repeated until EOF:
//!   u32                 name length
//!   [u8]                UTF-8 name
//!   u32                 rank
//!   u64 × rank          dims
//!   f32 × Π dims        values
//! ```
//!
//! Parameters come first in model layout order, followed by the Adam first
//! and second moments as `adam.m.<name>` and `adam.v.<name>`. Values are
//! stored as `f32`, so `f32` models round-trip bit for bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{param_layout, Model, ModelConfig};
use crate::tensor::{Matrix, Scalar};
use crate::training::{Adam, AdamConfig, Vocabulary};

pub const MAGIC: &[u8; 4] = b"TTLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    optimizer: OptimizerHeader,
    vocabulary: Option<Vocabulary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

/// Everything restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub vocabulary: Option<Vocabulary>,
}

/// Serializes a model, its optimizer state and (optionally) its vocabulary.
pub fn encode_checkpoint<T: Scalar>(
    model: &Model<T>,
    optimizer: &Adam<T>,
    vocabulary: Option<&Vocabulary>,
) -> Result<Vec<u8>> {
    let params = model.params();
    if optimizer.m.len() != params.len() || optimizer.v.len() != params.len() {
        return Err(Error::dim("optimizer moments do not match the model"));
    }
    let header = Header {
        model: model.config().clone(),
        optimizer: OptimizerHeader {
            config: optimizer.config,
            step: optimizer.step,
        },
        vocabulary: vocabulary.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 12 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |name: &str, m: &Matrix<T>| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for (_, name, value) in params.iter() {
        put(name, value);
    }
    for (prefix, moments) in [("adam.m.", &optimizer.m), ("adam.v.", &optimizer.v)] {
        for ((_, name, _), m) in params.iter().zip(moments) {
            put(&format!("{prefix}{name}"), m);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    optimizer: &Adam<T>,
    vocabulary: Option<&Vocabulary>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optimizer, vocabulary)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a TTLM checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let len = r.u32("config_length")? as usize;
    let json = r.take(len, "config")?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::format("config", e.to_string()))?;
    header
        .model
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;

    let mut tensors: Vec<(String, Matrix<f32>)> = Vec::new();
    while !r.done() {
        let i = tensors.len();
        let name_len = r.u32(&format!("tensor[{i}].name_length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("tensor[{i}].name"))?)
            .map_err(|_| Error::format(format!("tensor[{i}].name"), "not UTF-8"))?
            .to_string();
        let rank = r.u32(&format!("{name}.rank"))?;
        if rank != 2 {
            return Err(Error::format(format!("{name}.rank"), format!("expected 2, found {rank}")));
        }
        let rows = r.u64(&format!("{name}.dims"))? as usize;
        let cols = r.u64(&format!("{name}.dims"))? as usize;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format(format!("{name}.dims"), "size overflows"))?;
        let raw = r.take(count, &format!("{name}.values"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::format(format!("{name}.dims"), e.to_string()))?;
        tensors.push((name, m));
    }

    let layout = param_layout(&header.model);
    let expected: Vec<(String, (usize, usize))> = layout
        .iter()
        .map(|(n, s, _)| (n.clone(), *s))
        .chain(layout.iter().map(|(n, s, _)| (format!("adam.m.{n}"), *s)))
        .chain(layout.iter().map(|(n, s, _)| (format!("adam.v.{n}"), *s)))
        .collect();
    if tensors.len() != expected.len() {
        let field = expected
            .get(tensors.len())
            .map_or_else(|| tensors[expected.len()].0.clone(), |(n, _)| n.clone());
        return Err(Error::format(
            field,
            format!(
                "expected {} tensors for the embedded config, found {}",
                expected.len(),
                tensors.len()
            ),
        ));
    }
    for ((name, m), (want, shape)) in tensors.iter().zip(&expected) {
        if name != want {
            return Err(Error::format(want.clone(), format!("found tensor {name} in its place")));
        }
        if m.shape() != *shape {
            return Err(Error::format(
                format!("{name}.dims"),
                format!("{:?} disagrees with config shape {shape:?}", m.shape()),
            ));
        }
    }

    let n = layout.len();
    let mut it = tensors.into_iter().map(|(_, m)| m);
    let mut store = ParamStore::new();
    for (name, _, _) in &layout {
        store.add(name.clone(), it.next().expect("count checked"));
    }
    let m: Vec<_> = it.by_ref().take(n).collect();
    let v: Vec<_> = it.collect();
    let model = Model::from_store(header.model, store)?;
    Ok(Checkpoint {
        model,
        optimizer: Adam {
            config: header.optimizer.config,
            step: header.optimizer.step,
            m,
            v,
        },
        vocabulary: header.vocabulary,
    })
}
