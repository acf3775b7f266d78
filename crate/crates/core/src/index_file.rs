//! On-disk vector index.
//!
//! ```text
//! magic   b"SGIX1"
//! dim     u32 LE
//! count   u64 LE
//! count × { id_len u32 LE, id bytes (UTF-8), dim × f32 LE }
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::embedding::EmbeddingVector;
use crate::retrieval::{RetrievalError, VectorIndex};

pub const MAGIC: &[u8; 5] = b"SGIX1";

#[derive(Debug, thiserror::Error)]
pub enum IndexFileError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Index(#[from] RetrievalError),
}

pub fn write_index(index: &VectorIndex, mut out: impl Write) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(index.dim() as u32).to_le_bytes())?;
    out.write_all(&(index.len() as u64).to_le_bytes())?;
    for (id, v) in index.entries() {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        for x in v.values() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_index(mut r: impl Read) -> Result<VectorIndex, IndexFileError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| IndexFileError::BadMagic)?;
    if &magic != MAGIC {
        return Err(IndexFileError::BadMagic);
    }
    let truncated = |e: io::Error| match e.kind() {
        io::ErrorKind::UnexpectedEof => IndexFileError::Corrupt("truncated".into()),
        _ => IndexFileError::Io(e),
    };
    let dim = read_u32(&mut r).map_err(truncated)? as usize;
    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(truncated)?;
    let count = u64::from_le_bytes(count);
    if dim == 0 {
        return Err(IndexFileError::Corrupt("dim is zero".into()));
    }
    let mut entries = Vec::new();
    let mut row = vec![0u8; dim * 4];
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(truncated)? as usize;
        if len > 1 << 20 {
            return Err(IndexFileError::Corrupt(format!("doc_id length {len} too large")));
        }
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(truncated)?;
        let id = String::from_utf8(id).map_err(|_| IndexFileError::Corrupt("doc_id is not UTF-8".into()))?;
        r.read_exact(&mut row).map_err(truncated)?;
        let values: Vec<f32> = row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexFileError::Corrupt(format!("non-finite value in {id:?}")));
        }
        let nonzero = values.iter().any(|v| *v != 0.0);
        entries.push((id, EmbeddingVector::from_raw(values, nonzero)));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(IndexFileError::Corrupt("trailing bytes".into()));
    }
    Ok(VectorIndex::from_entries(dim, entries)?)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_index(index: &VectorIndex, path: impl AsRef<Path>) -> io::Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir()?,
    };
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "index".into());
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_index(index, &mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn load_index(path: impl AsRef<Path>) -> Result<VectorIndex, IndexFileError> {
    read_index(BufReader::new(fs::File::open(path)?))
}
