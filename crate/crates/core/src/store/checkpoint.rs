use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netmodel::ParameterSet;

pub const MAGIC: &[u8; 6] = b"SMETA1";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

/// Per-user adaptation details stored alongside the adapted weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRecord {
    pub user_id: u32,
    pub n_references: usize,
    pub k: usize,
    pub alpha: f64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Flat run configuration as written in the config file.
    pub config: BTreeMap<String, String>,
    pub epoch: Option<usize>,
    pub val_eer: Option<f64>,
    pub enrollment: Option<EnrollmentRecord>,
}

/// Named `f32` tensors plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: ParameterSet<f32>, meta: CheckpointMeta) -> Self {
        Self { params, meta }
    }

    /// Serialized form: magic, version, shape table, metadata JSON, then the
    /// tensors as little-endian `f32`, row-major, in table order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let numel: usize = self.params.tensors().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(numel * 4 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.entries() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::format("magic", "not an SMETA1 checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let count = r.u32("shape table")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32("shape table")? as usize;
            let name = std::str::from_utf8(r.take(len, "shape table")?)
                .map_err(|_| Error::format("shape table", "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32("shape table")?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format("shape table", format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = r.u64("shape table")?;
                if d == 0 || d > u32::MAX as u64 {
                    return Err(Error::format("shape table", format!("tensor {name} has extent {d}")));
                }
                shape.push(d as usize);
            }
            table.push((name, shape));
        }
        let meta_len = r.u32("metadata")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        let mut params = ParameterSet::new();
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "tensor data",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { params, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(field, "file truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
