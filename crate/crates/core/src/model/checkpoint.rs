//! Binary checkpoint container for one table state.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            4  bytes  "LUPD"
//! format_version   u32       currently 1
//! vocab            u64
//! dim              u32
//! rank             u32
//! row_count        u64       number of hot adapter rows
//! weights          vocab * dim * f32   base table, row-major
//! rows             row_count * (index u64, a_row rank * f32), ascending index
//! b                rank * dim * f32
//! ```
//!
//! Loading validates shape, ordering and finiteness; a load/save cycle
//! reproduces the input byte for byte.

use super::{EmbeddingTable, ModelError, TableState};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LUPD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected {MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("declared shape is invalid: vocab {vocab}, dim {dim}, rank {rank}")]
    BadShape { vocab: u64, dim: u32, rank: u32 },
    #[error("row count {rows} exceeds vocabulary {vocab}")]
    TooManyRows { rows: u64, vocab: u64 },
    #[error("adapter row indices must be strictly increasing and inside the vocabulary")]
    BadRowIndex,
    #[error("checkpoint contains a non-finite value")]
    NonFinite,
    #[error("trailing bytes after checkpoint payload")]
    TrailingBytes,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn save(state: &TableState, w: &mut impl Write) -> Result<(), CheckpointError> {
    let table = state.table();
    let adapter = state.adapter();
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(table.vocab() as u64).to_le_bytes())?;
    w.write_all(&(table.dim() as u32).to_le_bytes())?;
    w.write_all(&(adapter.rank() as u32).to_le_bytes())?;
    w.write_all(&(adapter.hot_count() as u64).to_le_bytes())?;
    for x in table.weights() {
        w.write_all(&x.to_le_bytes())?;
    }
    for (index, row) in adapter.iter_rows() {
        w.write_all(&index.to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for x in adapter.b() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(r: &mut impl Read, table_id: u16) -> Result<TableState, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let vocab = read_u64(r)?;
    let dim = read_u32(r)?;
    let rank = read_u32(r)?;
    let row_count = read_u64(r)?;
    if vocab == 0 || dim == 0 || rank == 0 || rank as u64 > dim as u64 {
        return Err(CheckpointError::BadShape { vocab, dim, rank });
    }
    if row_count > vocab {
        return Err(CheckpointError::TooManyRows { rows: row_count, vocab });
    }
    let (vocab, dim, rank) = (vocab as usize, dim as usize, rank as usize);

    let weights = read_f32_vec(r, vocab * dim)?;
    let mut rows = BTreeMap::new();
    let mut prev: Option<u64> = None;
    for _ in 0..row_count {
        let index = read_u64(r)?;
        if index >= vocab as u64 || prev.is_some_and(|p| index <= p) {
            return Err(CheckpointError::BadRowIndex);
        }
        prev = Some(index);
        let row = read_f32_vec(r, rank)?;
        rows.insert(index, row);
    }
    let b = read_f32_vec(r, rank * dim)?;

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(CheckpointError::TrailingBytes),
    }

    let table = EmbeddingTable::from_weights(table_id, vocab, dim, weights)?;
    let capacity = (row_count as usize).max(1);
    let mut state = TableState::new(table, rank, capacity)?;
    state.set_b(b)?;
    for (index, row) in rows {
        state.upsert_a_row(index, &row)?;
    }
    Ok(state)
}

pub fn save_to_path(state: &TableState, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    save(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path(path: &Path, table_id: u16) -> Result<TableState, CheckpointError> {
    load(&mut BufReader::new(File::open(path)?), table_id)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut out = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(CheckpointError::NonFinite);
        }
        out.push(x);
    }
    Ok(out)
}
