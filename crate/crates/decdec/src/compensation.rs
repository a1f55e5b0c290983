//! Compensated matrix-vector products: `o = Ŵx + (R̂ ⊙ M)x`.
//!
//! Accumulation is fixed ascending-index in f64, rounded to f32 at the
//! end, so results are deterministic regardless of caller parallelism.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quantizer::{QuantizedResidual, WeightSet};
use crate::selection::{approx_topk, BucketBoundaries, Selection};

#[derive(Debug, Clone, PartialEq)]
pub struct OutputVector {
    pub o: Vec<f32>,
}

impl OutputVector {
    pub fn zeros(d_out: usize) -> Self {
        Self {
            o: vec![0.0; d_out],
        }
    }

    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn add(&self, other: &OutputVector) -> Result<OutputVector> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(OutputVector {
            o: self
                .o
                .iter()
                .zip(&other.o)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// `o[j] = Σ_i w[i][j] * x[i]`, with `w` laid out `[d_in x d_out]`.
pub fn gemv(w: &Matrix, x: &[f32]) -> Result<OutputVector> {
    if x.len() != w.rows() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, w has {} rows",
            x.len(),
            w.rows()
        )));
    }
    let d_out = w.cols();
    let mut acc = vec![0.0f64; d_out];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for j in 0..d_out {
            acc[j] += row[j] as f64 * xi as f64;
        }
    }
    Ok(OutputVector {
        o: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Error compensation term: `o_dec[j] = Σ_{i in sel} x[i] * scales[j] * codes[i][j]`.
pub fn dec_gemv(qr: &QuantizedResidual, sel: &Selection) -> Result<OutputVector> {
    let d_out = qr.d_out;
    let mut acc = vec![0.0f64; d_out];
    for (&i, &xi) in sel.indices.iter().zip(&sel.values) {
        if i >= qr.d_in {
            return Err(Error::IndexOutOfRange {
                index: i,
                limit: qr.d_in,
            });
        }
        for j in 0..d_out {
            acc[j] += xi as f64 * qr.scales[j] as f64 * qr.code(i, j) as f64;
        }
    }
    Ok(OutputVector {
        o: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Full compensated forward pass:
/// `gemv(w_hat, x) + dec_gemv(qr, approx_topk(x, k_chunk, b, seed))`.
/// `k_chunk = 0` returns the base result unchanged.
pub fn decdec_forward(
    ws: &WeightSet,
    qr: &QuantizedResidual,
    x: &[f32],
    k_chunk: usize,
    b: &BucketBoundaries,
    seed: u64,
) -> Result<OutputVector> {
    if qr.d_in != ws.d_in() || qr.d_out != ws.d_out() {
        return Err(Error::DimensionMismatch(format!(
            "residual {}x{} vs weights {}x{}",
            qr.d_in,
            qr.d_out,
            ws.d_in(),
            ws.d_out()
        )));
    }
    let base = gemv(&ws.w_hat, x)?;
    if k_chunk == 0 {
        return Ok(base);
    }
    let sel = approx_topk(x, k_chunk, b, seed)?;
    let dec = dec_gemv(qr, &sel)?;
    base.add(&dec)
}

/// Mean squared difference of two output vectors.
pub fn output_mse(a: &OutputVector, b: &OutputVector) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    let acc: f64 = a
        .o
        .iter()
        .zip(&b.o)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok((acc / a.len() as f64) as f32)
}
