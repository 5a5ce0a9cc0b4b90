//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "BLENDACK"
//! version   u8       1
//! kind      u8       0 = weights only, 1 = resumable fine-tune state
//! iteration u64      optimizer steps taken so far
//! count     u32      number of arrays
//! per array:
//!   rank    u32      always 2
//!   dims    u64 x rank
//!   values  f64 x prod(dims), IEEE-754 bits
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"BLENDACK";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("unknown checkpoint kind {0}")]
    BadKind(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("unsupported array rank {0}")]
    BadRank(u32),
    #[error("trailing bytes after last array")]
    TrailingBytes,
    #[error("checkpoint has {found} arrays, model expects {expected}")]
    ArrayCount { expected: usize, found: usize },
    #[error("array {index}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongKind {
        expected: CheckpointKind,
        found: CheckpointKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Weights,
    Resumable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub iteration: u64,
    pub arrays: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self.kind {
            CheckpointKind::Weights => 0,
            CheckpointKind::Resumable => 1,
        });
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for t in &self.arrays {
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = take::<1>(&mut r)?[0];
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let kind = match take::<1>(&mut r)?[0] {
            0 => CheckpointKind::Weights,
            1 => CheckpointKind::Resumable,
            k => return Err(CheckpointError::BadKind(k)),
        };
        let iteration = u64::from_le_bytes(take::<8>(&mut r)?);
        let count = u32::from_le_bytes(take::<4>(&mut r)?) as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = u32::from_le_bytes(take::<4>(&mut r)?);
            if rank != 2 {
                return Err(CheckpointError::BadRank(rank));
            }
            let rows = u64::from_le_bytes(take::<8>(&mut r)?) as usize;
            let cols = u64::from_le_bytes(take::<8>(&mut r)?) as usize;
            let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
            if r.len() < n.saturating_mul(8) {
                return Err(CheckpointError::Truncated);
            }
            let data = (0..n)
                .map(|_| take::<8>(&mut r).map(|b| f64::from_bits(u64::from_le_bytes(b))))
                .collect::<Result<Vec<_>, _>>()?;
            arrays
                .push(Tensor::from_vec(rows, cols, data).map_err(|_| CheckpointError::Truncated)?);
        }
        if !r.is_empty() {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(Self {
            kind,
            iteration,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the leading arrays match `shapes` exactly.
    pub fn check_shapes(
        &self,
        shapes: &[(usize, usize)],
        total: usize,
    ) -> Result<(), CheckpointError> {
        if self.arrays.len() != total {
            return Err(CheckpointError::ArrayCount {
                expected: total,
                found: self.arrays.len(),
            });
        }
        for (index, (t, &expected)) in self.arrays.iter().zip(shapes).enumerate() {
            if t.shape() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    index,
                    expected,
                    found: t.shape(),
                });
            }
        }
        Ok(())
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Truncated)?;
    Ok(buf)
}
