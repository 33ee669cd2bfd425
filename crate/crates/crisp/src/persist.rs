//! Index persistence.
//!
//! Layout (all integers little-endian, fixed width):
//! magic "CRSP", u32 version, u64 N, u32 D, u32 padded_D, u32 M, u32 K,
//! u32 flags (bit 0 = rotation applied); rotation record (u8 applied,
//! f64 cev, u64 seed, D x D f32 matrix iff applied); per-subspace left and
//! right codebooks (K x half f32 each); per-subspace offsets (K^2+1 u64)
//! and ids (N i32); packed binary codes (N x words u64); raw corpus
//! (N x padded_D f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::DatasetMatrix;
use crate::error::{CrispError, Result};
use crate::index::{CrispIndex, CsrPostingIndex, SubspaceCodebooks};
use crate::preprocess::RotationRecord;

const MAGIC: [u8; 4] = *b"CRSP";
const VERSION: u32 = 1;
const FLAG_ROTATED: u32 = 1;

pub fn save_index(index: &CrispIndex, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u64(&mut w, index.n() as u64)?;
    write_u32(&mut w, index.d() as u32)?;
    write_u32(&mut w, index.padded_d() as u32)?;
    write_u32(&mut w, index.m() as u32)?;
    write_u32(&mut w, index.k() as u32)?;
    let flags = if index.rotation().applied() {
        FLAG_ROTATED
    } else {
        0
    };
    write_u32(&mut w, flags)?;

    let rot = index.rotation();
    w.write_all(&[rot.applied() as u8])?;
    w.write_all(&rot.cev().to_le_bytes())?;
    write_u64(&mut w, rot.seed())?;
    if let Some(matrix) = rot.matrix() {
        write_f32_slice(&mut w, matrix)?;
    }

    for s in 0..index.m() {
        write_f32_slice(&mut w, index.codebooks().left(s))?;
        write_f32_slice(&mut w, index.codebooks().right(s))?;
    }
    for s in 0..index.m() {
        for &off in index.postings().offsets(s) {
            write_u64(&mut w, off)?;
        }
        for &id in index.postings().ids(s) {
            w.write_all(&(id as i32).to_le_bytes())?;
        }
    }
    for &word in index.binary_codes_flat() {
        write_u64(&mut w, word)?;
    }
    write_f32_slice(&mut w, index.stored_data().data())?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<CrispIndex> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CrispError::format("bad magic; not an index file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CrispError::format(format!(
            "unsupported index version {version} (expected {VERSION})"
        )));
    }
    let n = read_u64(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let padded_d = read_u32(&mut r)? as usize;
    let m = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let flags = read_u32(&mut r)?;
    if m == 0 || k == 0 || padded_d < d || !padded_d.is_multiple_of(2 * m) {
        return Err(CrispError::format("inconsistent index header"));
    }

    let applied = {
        let mut b = [0u8; 1];
        read_exact(&mut r, &mut b)?;
        b[0] != 0
    };
    if applied != (flags & FLAG_ROTATED != 0) {
        return Err(CrispError::format("rotation flag mismatch"));
    }
    let cev = {
        let mut b = [0u8; 8];
        read_exact(&mut r, &mut b)?;
        f64::from_le_bytes(b)
    };
    let seed = read_u64(&mut r)?;
    let matrix = if applied {
        Some(read_f32_vec(&mut r, d * d)?)
    } else {
        None
    };
    let rotation = RotationRecord::from_parts(d, cev, applied, matrix, seed)?;

    let dims_per_subspace = padded_d / m;
    let half = dims_per_subspace / 2;
    let mut left = Vec::with_capacity(m);
    let mut right = Vec::with_capacity(m);
    for _ in 0..m {
        left.push(read_f32_vec(&mut r, k * half)?);
        right.push(read_f32_vec(&mut r, k * half)?);
    }
    let codebooks = SubspaceCodebooks::from_parts(m, k, dims_per_subspace, left, right)?;

    let cells = k * k;
    let mut offsets = Vec::with_capacity(m);
    let mut ids = Vec::with_capacity(m);
    for _ in 0..m {
        let mut offs = Vec::with_capacity(cells + 1);
        for _ in 0..cells + 1 {
            offs.push(read_u64(&mut r)?);
        }
        let mut id_arr = Vec::with_capacity(n);
        let mut buf = vec![0u8; n * 4];
        read_exact(&mut r, &mut buf)?;
        for chunk in buf.chunks_exact(4) {
            let id = i32::from_le_bytes(chunk.try_into().unwrap());
            if id < 0 || id as usize >= n {
                return Err(CrispError::format(format!("posting id {id} out of range")));
            }
            id_arr.push(id as u32);
        }
        offsets.push(offs);
        ids.push(id_arr);
    }
    let postings = CsrPostingIndex::from_parts(cells, n, offsets, ids)?;

    let words_per_code = padded_d.div_ceil(64);
    let mut binary_codes = Vec::with_capacity(n * words_per_code);
    let mut buf = vec![0u8; n * words_per_code * 8];
    read_exact(&mut r, &mut buf)?;
    for chunk in buf.chunks_exact(8) {
        binary_codes.push(u64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let data = DatasetMatrix::new(padded_d, read_f32_vec(&mut r, n * padded_d)?)?;
    if data.n() != n {
        return Err(CrispError::format("corpus row count mismatch"));
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(CrispError::format("trailing bytes after index payload"));
    }

    Ok(CrispIndex {
        rotation,
        codebooks,
        postings,
        binary_codes,
        words_per_code,
        data,
        original_d: d,
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32_slice<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CrispError::format("truncated index file")
        } else {
            CrispError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; len * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
