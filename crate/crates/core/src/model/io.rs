//! Binary matrix files.
//!
//! Layout: magic `SMSD`, `u32` version (1), `u64` rows, `u64` cols, then
//! `rows * cols` little-endian `f64` values in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMSD";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 8;

pub fn write_matrix<W: Write>(mut w: W, matrix: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(matrix.nrows() as u64).to_le_bytes())?;
    w.write_all(&(matrix.ncols() as u64).to_le_bytes())?;
    for v in matrix.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads one matrix, reporting the byte offset of the first problem.
pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut offset = 0u64;
    let mut take = |buf: &mut [u8], offset: &mut u64, what: &str| -> Result<()> {
        read_full(&mut r, buf).map_err(|got| Error::Format {
            offset: *offset + got as u64,
            reason: format!("truncated {what}"),
        })?;
        *offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let mut word = [0u8; 4];
    take(&mut word, &mut offset, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut long = [0u8; 8];
    take(&mut long, &mut offset, "row count")?;
    let rows = u64::from_le_bytes(long);
    take(&mut long, &mut offset, "column count")?;
    let cols = u64::from_le_bytes(long);

    let len = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::Format {
            offset: 8,
            reason: format!("dimensions {rows}x{cols} overflow"),
        })?;

    let mut data = Vec::new();
    let mut chunk = [0u8; 8];
    for _ in 0..len {
        take(&mut chunk, &mut offset, "matrix data")?;
        data.push(f64::from_le_bytes(chunk));
    }
    let mut probe = [0u8; 1];
    if matches!(r.read(&mut probe), Ok(n) if n > 0) {
        return Err(Error::Format {
            offset,
            reason: "trailing bytes after matrix data".into(),
        });
    }
    debug_assert_eq!(offset, HEADER_LEN + 8 * len);
    Ok(DMatrix::from_vec(rows as usize, cols as usize, data))
}

/// Like `read_exact`, but reports how many bytes were read on a short read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(got),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return Err(got),
        }
    }
    Ok(())
}

pub fn save_matrix(matrix: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix(BufWriter::new(file), matrix).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(BufReader::new(file))
}

/// Row-major CSV; `{}` formatting of `f64` is the shortest round-tripping form.
pub fn to_csv(matrix: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in matrix.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn save_csv(matrix: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(matrix)).map_err(|e| Error::io(path, e))
}
