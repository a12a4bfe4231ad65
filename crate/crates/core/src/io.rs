//! Binary file formats.
//!
//! Feature file: `SSMLFT01`, u64 rows, u64 cols, rows*cols f32 row-major.
//! Label file: `SSMLLB01`, u64 count, count u32 identity ids.
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::featurestore::FeatureMatrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"SSMLFT01";
pub const LABEL_MAGIC: &[u8; 8] = b"SSMLLB01";

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("expected {count} floats")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

fn checked_len(rows: u64, cols: u64) -> Result<usize> {
    rows.checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("matrix {rows}x{cols} too large")))
}

/// Writes a raw row-major matrix in the feature file layout.
pub fn write_matrix<W: Write>(w: &mut W, data: &[f32], rows: usize, cols: usize) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {rows}x{cols} matrix",
            data.len()
        )));
    }
    w.write_all(FEATURE_MAGIC)?;
    write_u64(w, rows as u64)?;
    write_u64(w, cols as u64)?;
    write_f32s(w, data)
}

/// Reads a raw matrix, returning `(data, rows, cols)`.
pub fn read_matrix<R: Read>(r: &mut R) -> Result<(Vec<f32>, usize, usize)> {
    read_magic(r, FEATURE_MAGIC)?;
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    let len = checked_len(rows, cols)?;
    let data = read_f32s(r, len)?;
    expect_eof(r)?;
    Ok((data, rows as usize, cols as usize))
}

pub fn write_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, features.as_slice(), features.n(), features.d())?;
    w.flush()?;
    Ok(())
}

/// Reads a feature file. Rows are returned as stored, without renormalising.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let (data, n, d) = read_matrix(&mut r)?;
    FeatureMatrix::new(data, n, d)
}

pub fn write_label_stream<W: Write>(w: &mut W, labels: &[u32]) -> Result<()> {
    w.write_all(LABEL_MAGIC)?;
    write_u64(w, labels.len() as u64)?;
    for &l in labels {
        write_u32(w, l)?;
    }
    Ok(())
}

pub fn read_label_stream<R: Read>(r: &mut R) -> Result<Vec<u32>> {
    read_magic(r, LABEL_MAGIC)?;
    let n = read_u64(r)?;
    let n = usize::try_from(n).map_err(|_| Error::Format("label count too large".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("expected {n} labels")))?;
    expect_eof(r)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_label_stream(&mut w, labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_label_stream(&mut r)
}
