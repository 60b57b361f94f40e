//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers u64 little-endian, all values f64
//! little-endian):
//!
//! ```text
//! "TONETCKPT1"
//! repeated, in parameter registration order:
//!     name_len  name (UTF-8)  rank  dims[rank]  values[product(dims)]
//! ```
//!
//! Records run to end of file. Registration order is the order in which the
//! model constructor creates its parameters, so it is fixed for a given model
//! configuration.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"TONETCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint record for `{0}`")]
    Truncated(String),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    trainable: bool,
}

/// Ordered collection of named tensors. Non-trainable entries (batch-norm
/// running statistics) are checkpointed but never touched by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f64> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Panics on duplicate names, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<S>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Total number of scalar values across trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.value.rank() as u64).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses a checkpoint into `(name, tensor)` records in file order.
    pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut cur = Cursor {
            bytes: &bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let mut out = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u64().ok_or_else(|| CheckpointError::Truncated("<name>".into()))?;
            let raw = cur
                .take(name_len as usize)
                .ok_or_else(|| CheckpointError::Truncated("<name>".into()))?;
            let name = std::str::from_utf8(raw).map_err(|_| CheckpointError::BadName)?.to_string();
            let truncated = || CheckpointError::Truncated(name.clone());
            let rank = cur.u64().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64().ok_or_else(truncated)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::lit(cur.f64().ok_or_else(truncated)?));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
            out.push((name, t));
        }
        Ok(out)
    }

    /// Overwrites every entry from a checkpoint. Names, order and shapes must
    /// match this store exactly.
    pub fn load_from<R: Read>(&mut self, r: R) -> Result<(), CheckpointError> {
        let records = Self::read_records(r)?;
        if records.len() != self.entries.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter().zip(&records) {
            if &e.name != name {
                return Err(CheckpointError::Mismatch(format!("expected `{}`, found `{name}`", e.name)));
            }
            if e.value.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "`{name}`: expected shape {:?}, found {:?}",
                    e.value.shape(),
                    t.shape()
                )));
            }
        }
        for (e, (_, t)) in self.entries.iter_mut().zip(records) {
            e.value = t;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::open(path)?;
        self.load_from(io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
