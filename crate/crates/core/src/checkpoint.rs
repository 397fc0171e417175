//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"KWSFORGE"            8-byte magic
//! u32 version            currently 1
//! u32 header_len         followed by header_len bytes of UTF-8 JSON:
//!                        {"spec", "n_labels", "seed", "epoch", "val_accuracy"}
//! per parameter, in build order:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u32 dims
//!   product(dims) x f32
//! ```
//!
//! The file must end right after the last parameter.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelName, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KWSFORGE";
pub const VERSION: u32 = 1;

// Guards allocation on corrupt length fields.
const MAX_HEADER_LEN: usize = 1 << 20;
const MAX_NAME_LEN: usize = 1 << 10;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(CheckpointError::Corrupt(msg.into()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u32,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelName,
    n_labels: usize,
    seed: u64,
    epoch: u32,
    val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = Header {
            spec: self.model.spec().name,
            n_labels: self.model.n_labels(),
            seed: self.meta.seed,
            epoch: self.meta.epoch,
            val_accuracy: self.meta.val_accuracy,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, param) in self.model.parameters() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(param.dims().len() as u32).to_le_bytes())?;
            for &d in param.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(param.value.len() * 4);
            for v in param.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    /// Parses a checkpoint whose architecture is named in its header.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = parse(bytes)?;
        let spec = ModelSpec::for_name(header.spec, header.n_labels);
        assemble(header, params, spec)
    }

    /// Parses a checkpoint and requires it to match `expected`.
    pub fn from_bytes_as(bytes: &[u8], expected: &ModelSpec) -> Result<Self> {
        let (header, params) = parse(bytes)?;
        assemble(header, params, expected.clone())
    }
}

struct RawParam {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse(bytes: &[u8]) -> Result<(Header, Vec<RawParam>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return corrupt("bad magic, not a kwsforge checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return corrupt(format!("unsupported version {version}, expected {VERSION}"));
    }
    let header_len = r.u32("header length")?;
    if header_len > MAX_HEADER_LEN {
        return corrupt(format!("header length {header_len} too large"));
    }
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Corrupt(format!("bad header: {e}")))?;

    let mut params = Vec::new();
    while !r.done() {
        let name_len = r.u32("parameter name length")?;
        if name_len > MAX_NAME_LEN {
            return corrupt(format!("parameter name length {name_len} too large"));
        }
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return corrupt(format!("{name}: rank {rank} too large"));
        }
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dims {dims:?} overflow")))?;
        let data = r
            .take(n, &format!("{name} payload"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(RawParam { name, dims, data });
    }
    Ok((header, params))
}

fn assemble(header: Header, params: Vec<RawParam>, spec: ModelSpec) -> Result<Checkpoint> {
    if header.spec != spec.name || header.n_labels != spec.n_labels {
        let found: Vec<String> = params.iter().map(|p| format!("{}{:?}", p.name, p.dims)).collect();
        return corrupt(format!(
            "checkpoint holds {} with {} labels, expected {} with {} labels; file parameters: {}",
            header.spec,
            header.n_labels,
            spec.name,
            spec.n_labels,
            found.join(", ")
        ));
    }
    let mut model = Model::zeroed(spec).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .parameters()
        .map(|(n, p)| (n.to_string(), p.dims().to_vec()))
        .collect();
    let n_found = params.len();
    for (i, ((name, dims), raw)) in expected.iter().zip(params).enumerate() {
        if *name != raw.name || *dims != raw.dims {
            return corrupt(format!(
                "parameter {i}: expected {name}{dims:?}, file has {}{:?}",
                raw.name, raw.dims
            ));
        }
        let value = Tensor::from_vec(&raw.dims, raw.data).expect("payload sized from dims");
        model.set_value(i, value);
    }
    if expected.len() != n_found {
        return corrupt(format!("expected {} parameters, file has {n_found}", expected.len()));
    }
    Ok(Checkpoint {
        model,
        meta: CheckpointMeta {
            seed: header.seed,
            epoch: header.epoch,
            val_accuracy: header.val_accuracy,
        },
    })
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}

pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelSpec) -> Result<Checkpoint> {
    Checkpoint::from_bytes_as(&read_file(path.as_ref())?, expected)
}
