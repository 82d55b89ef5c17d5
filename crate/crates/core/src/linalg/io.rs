//! Matrix files: CSV (one row per line) and a raw binary layout of two
//! little-endian `u64` dimensions followed by row-major little-endian `f64`s.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DenseMatrix, LinalgError};

pub fn write_csv(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<(), LinalgError> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<DenseMatrix, LinalgError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row = trimmed
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| LinalgError::Format(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

pub fn write_binary(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<(), LinalgError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<DenseMatrix, LinalgError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(LinalgError::Format("missing header".into()));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i * 8..i * 8 + 8].try_into().unwrap() };
    let rows = u64::from_le_bytes(word(0)) as usize;
    let cols = u64::from_le_bytes(word(1)) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| LinalgError::Format("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(LinalgError::Format(format!(
            "expected {expected} bytes for {rows}x{cols}, found {}",
            bytes.len()
        )));
    }
    let data = (0..rows * cols).map(|i| f64::from_le_bytes(word(i + 2))).collect();
    DenseMatrix::from_row_major(rows, cols, data)
}
