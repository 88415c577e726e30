use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EmbeddingIndex, IndexEntry, RetrievalError};
use crate::binio::{Reader, Truncated, Writer};
use crate::data::ProbePose;

const MAGIC: &[u8; 4] = b"SWIX";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an index file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u32),
    #[error("index truncated: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("sweep id is not UTF-8")]
    BadSweepId,
    #[error("invalid index: {0}")]
    Invalid(#[from] RetrievalError),
}

impl From<Truncated> for IndexFileError {
    fn from(t: Truncated) -> Self {
        IndexFileError::Truncated(t.0)
    }
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), IndexFileError> {
    index.validate()?;
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(&index.sweep_id);
    w.u32(index.embedding_dim as u32);
    w.f32(index.alpha);
    w.u32(index.entries.len() as u32);
    for e in &index.entries {
        w.u32(e.frame_index as u32);
        for v in e.pose.position {
            w.f32(v as f32);
        }
        w.f32s(&e.embedding);
    }
    fs::write(path, &w.buf).map_err(|source| IndexFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex, IndexFileError> {
    let bytes = fs::read(path).map_err(|source| IndexFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<EmbeddingIndex, IndexFileError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(IndexFileError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(IndexFileError::UnsupportedVersion(version));
    }
    let sweep_id = r.str("sweep id")?.ok_or(IndexFileError::BadSweepId)?;
    let embedding_dim = r.u32("embedding dim")? as usize;
    let alpha = r.f32("alpha")?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(r.remaining() / 16 + 1));
    for k in 0..count {
        let frame_index = r.u32(&format!("entry {k} frame index"))? as usize;
        let mut position = [0.0; 3];
        for p in &mut position {
            *p = r.f32(&format!("entry {k} pose"))? as f64;
        }
        let embedding = r.f32s(embedding_dim, &format!("entry {k} embedding"))?;
        entries.push(IndexEntry {
            frame_index,
            embedding,
            pose: ProbePose { position },
        });
    }
    if r.remaining() != 0 {
        return Err(IndexFileError::TrailingBytes(r.remaining()));
    }
    let index = EmbeddingIndex {
        sweep_id,
        embedding_dim,
        alpha,
        entries,
    };
    index.validate()?;
    Ok(index)
}
