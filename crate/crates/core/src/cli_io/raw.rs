//! Headerless little-endian row-major matrices.

use std::fs;
use std::path::Path;

use crate::error::{FluteError, Result};
use crate::matrix::Matrix;
use crate::numerics::Half;

fn check_len(path: &Path, bytes: usize, rows: usize, cols: usize, width: usize) -> Result<()> {
    let want = rows * cols * width;
    if bytes != want {
        return Err(FluteError::Input(format!(
            "{}: {bytes} bytes, expected {want} for a {rows}x{cols} matrix of {width}-byte values",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_f32(path: &Path, rows: usize, cols: usize) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| FluteError::Io(format!("{}: {e}", path.display())))?;
    check_len(path, bytes.len(), rows, cols, 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn read_f16(path: &Path, rows: usize, cols: usize) -> Result<Matrix<Half>> {
    let bytes = fs::read(path).map_err(|e| FluteError::Io(format!("{}: {e}", path.display())))?;
    check_len(path, bytes.len(), rows, cols, 2)?;
    let data = bytes
        .chunks_exact(2)
        .map(|c| Half::from_bits(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn f32_bytes(m: &Matrix<f32>) -> Vec<u8> {
    m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f16_bytes(m: &Matrix<Half>) -> Vec<u8> {
    m.as_slice()
        .iter()
        .flat_map(|h| h.to_bits().to_le_bytes())
        .collect()
}

pub fn write_f32(path: &Path, m: &Matrix<f32>) -> Result<()> {
    fs::write(path, f32_bytes(m)).map_err(|e| FluteError::Io(format!("{}: {e}", path.display())))
}

pub fn write_f16(path: &Path, m: &Matrix<Half>) -> Result<()> {
    fs::write(path, f16_bytes(m)).map_err(|e| FluteError::Io(format!("{}: {e}", path.display())))
}
