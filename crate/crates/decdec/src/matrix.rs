//! Dense row-major f32 matrix and the DDMX on-disk format.
//!
//! Weight matrices are `[d_in x d_out]`: rows are input channels, columns
//! are output channels. Activation traces reuse the same type with rows as
//! decoding steps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DDMX_MAGIC: &[u8; 4] = b"DDMX";
pub const DDMX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for {}x{}, got {}",
                rows * cols,
                rows,
                cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` copied out as a vector.
    pub fn col(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Fails with the position of the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.get(r, c).is_finite() {
                    return Err(Error::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Serialize in DDMX format: magic, version, rows, cols, dtype byte,
    /// then row-major little-endian f32 payload.
    pub fn write_ddmx<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DDMX_MAGIC)?;
        w.write_all(&DDMX_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&[0u8])?; // dtype 0 = f32
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_ddmx<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DDMX_MAGIC {
            return Err(Error::Parse("bad DDMX magic".into()));
        }
        let version = read_u32(r)?;
        if version != DDMX_VERSION {
            return Err(Error::Parse(format!("unsupported DDMX version {version}")));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != 0 {
            return Err(Error::Parse(format!("unsupported DDMX dtype {}", dtype[0])));
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ddmx(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_ddmx(&mut f)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
