//! Base weight quantization, residual extraction, and the symmetric
//! low-bit residual encoding with grid-searched per-output-channel scales.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{read_u32, Matrix};

pub const DDQR_MAGIC: &[u8; 4] = b"DDQR";
pub const DDQR_VERSION: u32 = 1;

/// Number of candidate scales evaluated per channel.
const GRID_POINTS: usize = 128;
/// Grid spans `[GRID_LO, 1.0] * max|r| / q_max`.
const GRID_LO: f32 = 0.30;

/// Full-precision weights, dequantized base-quantized weights, and their
/// difference for one linear layer. All three share `[d_in x d_out]`.
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub w: Matrix,
    pub w_hat: Matrix,
    pub residual: Matrix,
}

impl WeightSet {
    /// Build from `w` and `w_hat`; the residual is recomputed so the
    /// `residual == w - w_hat` invariant holds exactly.
    pub fn new(w: Matrix, w_hat: Matrix) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(Error::Precondition("empty weight matrix".into()));
        }
        w.check_finite()?;
        w_hat.check_finite()?;
        let residual = w.sub(&w_hat)?;
        Ok(Self { w, w_hat, residual })
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    /// Read `w` and `w_hat` from two DDMX files, e.g. exported by an
    /// external quantizer.
    pub fn import(w_path: &Path, w_hat_path: &Path) -> Result<Self> {
        let w = Matrix::load(w_path)?;
        let w_hat = Matrix::load(w_hat_path)?;
        Self::new(w, w_hat)
    }
}

/// Residual codes: low-bit integers for 2/4/8-bit modes, raw f32 residuals
/// for the 16-bit (lossless) mode.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualCodes {
    Int(Vec<i8>),
    Raw(Vec<f32>),
}

/// Per-output-channel symmetric quantization of a residual matrix.
///
/// `codes` is `[d_in x d_out]` row-major; `scales` has one entry per
/// output channel. Dequantized value is `scales[c] * codes[r][c]`.
#[derive(Debug, Clone)]
pub struct QuantizedResidual {
    pub bits: u8,
    pub d_in: usize,
    pub d_out: usize,
    pub scales: Vec<f32>,
    pub codes: ResidualCodes,
}

impl QuantizedResidual {
    #[inline]
    pub fn code(&self, r: usize, c: usize) -> f32 {
        match &self.codes {
            ResidualCodes::Int(v) => v[r * self.d_out + c] as f32,
            ResidualCodes::Raw(v) => v[r * self.d_out + c],
        }
    }

    /// Dequantized row `r` (one input channel across all output channels).
    pub fn dequantize_row(&self, r: usize) -> Result<Vec<f32>> {
        if r >= self.d_in {
            return Err(Error::IndexOutOfRange {
                index: r,
                limit: self.d_in,
            });
        }
        Ok((0..self.d_out)
            .map(|c| self.scales[c] * self.code(r, c))
            .collect())
    }

    pub fn write_ddqr<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DDQR_MAGIC)?;
        w.write_all(&DDQR_VERSION.to_le_bytes())?;
        w.write_all(&(self.d_in as u32).to_le_bytes())?;
        w.write_all(&(self.d_out as u32).to_le_bytes())?;
        w.write_all(&[self.bits])?;
        for s in &self.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        match &self.codes {
            ResidualCodes::Int(v) => {
                // 2/4/8-bit codes stored sign-extended, one byte each
                let bytes: Vec<u8> = v.iter().map(|&c| c as u8).collect();
                w.write_all(&bytes)?;
            }
            ResidualCodes::Raw(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_ddqr<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DDQR_MAGIC {
            return Err(Error::Parse("bad DDQR magic".into()));
        }
        let version = read_u32(r)?;
        if version != DDQR_VERSION {
            return Err(Error::Parse(format!("unsupported DDQR version {version}")));
        }
        let d_in = read_u32(r)? as usize;
        let d_out = read_u32(r)? as usize;
        let mut bits = [0u8; 1];
        r.read_exact(&mut bits)?;
        let bits = bits[0];
        if !matches!(bits, 2 | 4 | 8 | 16) {
            return Err(Error::UnsupportedBits(bits));
        }
        let mut scales = Vec::with_capacity(d_out);
        let mut buf = [0u8; 4];
        for _ in 0..d_out {
            r.read_exact(&mut buf)?;
            scales.push(f32::from_le_bytes(buf));
        }
        let n = d_in * d_out;
        let codes = if bits == 16 {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                v.push(f32::from_le_bytes(buf));
            }
            ResidualCodes::Raw(v)
        } else {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            ResidualCodes::Int(bytes.into_iter().map(|b| b as i8).collect())
        };
        Ok(Self {
            bits,
            d_in,
            d_out,
            scales,
            codes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ddqr(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_ddqr(&mut f)
    }
}

/// Round half away from zero, so positive and negative residuals are
/// treated symmetrically.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

/// Group-wise asymmetric round-to-nearest quantization of `w`. Stands in
/// for an external base quantizer; each contiguous `group_size` run of
/// input-channel entries within an output channel shares one min/max grid.
pub fn base_quantize(w: &Matrix, bits: u8, group_size: usize) -> Result<WeightSet> {
    if !matches!(bits, 2 | 3 | 4) {
        return Err(Error::UnsupportedBits(bits));
    }
    w.check_finite()?;
    let d_in = w.rows();
    let d_out = w.cols();
    if d_in == 0 || d_out == 0 {
        return Err(Error::Precondition("empty weight matrix".into()));
    }
    if group_size == 0 || d_in % group_size != 0 {
        return Err(Error::Precondition(format!(
            "group_size {group_size} does not divide d_in {d_in}"
        )));
    }
    let levels = (1u32 << bits) - 1; // 2^bits - 1 intervals endpoints
    let mut w_hat = Matrix::zeros(d_in, d_out);
    for c in 0..d_out {
        for g in (0..d_in).step_by(group_size) {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for r in g..g + group_size {
                let v = w.get(r, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi == lo {
                for r in g..g + group_size {
                    w_hat.set(r, c, lo);
                }
                continue;
            }
            let scale = (hi - lo) / levels as f32;
            for r in g..g + group_size {
                let q = round_half_away((w.get(r, c) - lo) / scale).clamp(0.0, levels as f32);
                w_hat.set(r, c, lo + q * scale);
            }
        }
    }
    WeightSet::new(w.clone(), w_hat)
}

fn quantize_channel_with_scale(channel: &[f32], scale: f32, q_max: f32) -> Vec<i8> {
    channel
        .iter()
        .map(|&r| round_half_away(r / scale).clamp(-q_max, q_max) as i8)
        .collect()
}

fn channel_mse(channel: &[f32], scale: f32, codes: &[i8]) -> f64 {
    let mut acc = 0.0f64;
    for (&r, &q) in channel.iter().zip(codes) {
        let e = r as f64 - scale as f64 * q as f64;
        acc += e * e;
    }
    acc / channel.len() as f64
}

/// Per-channel MSE-optimal scale over the fixed search grid
/// `(max|r| / q_max) * g`, `g` in 128 uniform steps on `[0.30, 1.00]`.
/// Ties break toward the larger scale. All-zero channels get scale 1.0.
fn grid_search_scale(channel: &[f32], q_max: f32) -> (f32, Vec<i8>) {
    let max_abs = channel.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (1.0, vec![0; channel.len()]);
    }
    let base = max_abs / q_max;
    let mut best_scale = 0.0f32;
    let mut best_codes = Vec::new();
    let mut best_mse = f64::INFINITY;
    for i in 0..GRID_POINTS {
        let g = GRID_LO + (1.0 - GRID_LO) * i as f32 / (GRID_POINTS - 1) as f32;
        let scale = base * g;
        let codes = quantize_channel_with_scale(channel, scale, q_max);
        let mse = channel_mse(channel, scale, &codes);
        if mse <= best_mse {
            best_mse = mse;
            best_scale = scale;
            best_codes = codes;
        }
    }
    (best_scale, best_codes)
}

/// Symmetric per-output-channel quantization of a residual matrix.
/// 16-bit mode stores the residuals verbatim with unit scales.
pub fn residual_quantize(residual: &Matrix, bits: u8) -> Result<QuantizedResidual> {
    if !matches!(bits, 2 | 4 | 8 | 16) {
        return Err(Error::UnsupportedBits(bits));
    }
    residual.check_finite()?;
    let d_in = residual.rows();
    let d_out = residual.cols();
    if bits == 16 {
        return Ok(QuantizedResidual {
            bits,
            d_in,
            d_out,
            scales: vec![1.0; d_out],
            codes: ResidualCodes::Raw(residual.data().to_vec()),
        });
    }
    let q_max = ((1u32 << (bits - 1)) - 1) as f32;
    let mut scales = vec![1.0f32; d_out];
    let mut codes = vec![0i8; d_in * d_out];
    for c in 0..d_out {
        let channel = residual.col(c);
        let (scale, ch_codes) = grid_search_scale(&channel, q_max);
        scales[c] = scale;
        for (r, &q) in ch_codes.iter().enumerate() {
            codes[r * d_out + c] = q;
        }
    }
    Ok(QuantizedResidual {
        bits,
        d_in,
        d_out,
        scales,
        codes: ResidualCodes::Int(codes),
    })
}

/// Dequantize the listed input channels; output is `[rows.len() x d_out]`
/// in the order given.
pub fn residual_dequantize_rows(qr: &QuantizedResidual, rows: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows.len() * qr.d_out);
    for &r in rows {
        data.extend(qr.dequantize_row(r)?);
    }
    Matrix::from_vec(rows.len(), qr.d_out, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent scalar oracle: asymmetric round-to-nearest over one group.
    fn rtn_oracle(vals: &[f32], bits: u8) -> Vec<f32> {
        let levels = ((1u32 << bits) - 1) as f32;
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi == lo {
            return vals.to_vec();
        }
        let scale = (hi - lo) / levels;
        vals.iter()
            .map(|&v| {
                let q = ((v - lo) / scale).round().clamp(0.0, levels);
                lo + q * scale
            })
            .collect()
    }

    #[test]
    fn base_quantize_zeros() {
        let w = Matrix::zeros(4, 4);
        let ws = base_quantize(&w, 3, 4).unwrap();
        assert!(ws.w_hat.data().iter().all(|&v| v == 0.0));
        assert!(ws.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_quantize_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::from_fn(16, 8, |_, _| rng.gen_range(-1.0..1.0));
        let ws = base_quantize(&w, 3, 8).unwrap();
        let again = base_quantize(&ws.w_hat, 3, 8).unwrap();
        assert_eq!(ws.w_hat.data(), again.w_hat.data());
        assert!(again.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_quantize_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 128;
        let w = Matrix::from_fn(d, d, |_, _| {
            let u1: f32 = rng.gen_range(1e-6..1.0);
            let u2: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos()
        });
        let ws = base_quantize(&w, 3, 128).unwrap();
        for c in 0..d {
            let col = w.col(c);
            let oracle = rtn_oracle(&col, 3);
            for r in 0..d {
                assert_eq!(
                    ws.w_hat.get(r, c),
                    oracle[r],
                    "channel {c}, row {r}: {} vs {}",
                    ws.w_hat.get(r, c),
                    oracle[r]
                );
            }
        }
    }

    #[test]
    fn base_quantize_rejects_bad_group() {
        let w = Matrix::zeros(10, 2);
        assert!(base_quantize(&w, 3, 3).is_err());
    }

    #[test]
    fn base_quantize_rejects_nonfinite() {
        let mut w = Matrix::zeros(4, 2);
        w.set(1, 0, f32::NAN);
        assert!(base_quantize(&w, 3, 4).is_err());
    }

    #[test]
    fn residual_quantize_zero_channel() {
        let r = Matrix::zeros(8, 3);
        let qr = residual_quantize(&r, 4).unwrap();
        assert_eq!(qr.scales, vec![1.0, 1.0, 1.0]);
        for row in 0..8 {
            assert_eq!(qr.dequantize_row(row).unwrap(), vec![0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn residual_quantize_known_channel() {
        // channel [7s, -7s, 3.5s]: with scale s codes are [7, -7, 4],
        // MSE = (0.5 s)^2 / 3; grid search must do at least as well.
        let s = 0.125f32;
        let r = Matrix::from_vec(3, 1, vec![7.0 * s, -7.0 * s, 3.5 * s]).unwrap();
        let qr = residual_quantize(&r, 4).unwrap();
        let mse: f64 = (0..3)
            .map(|row| {
                let dq = qr.scales[0] as f64 * qr.code(row, 0) as f64;
                (r.get(row, 0) as f64 - dq).powi(2)
            })
            .sum::<f64>()
            / 3.0;
        let naive = (0.5 * s as f64).powi(2) / 3.0;
        assert!(mse <= naive + 1e-12, "grid mse {mse} > naive {naive}");

        // brute-force confirm the argmin over the same grid
        let channel = r.col(0);
        let max_abs = 7.0 * s;
        let mut best = f64::INFINITY;
        for i in 0..128 {
            let g = 0.30 + 0.70 * i as f32 / 127.0;
            let scale = max_abs / 7.0 * g;
            let codes = quantize_channel_with_scale(&channel, scale, 7.0);
            best = best.min(channel_mse(&channel, scale, &codes));
        }
        let got = channel_mse(
            &channel,
            qr.scales[0],
            &match &qr.codes {
                ResidualCodes::Int(v) => v.clone(),
                _ => unreachable!(),
            },
        );
        assert!((got - best).abs() < 1e-15);
    }

    #[test]
    fn grid_beats_naive_scale_on_gaussian_channels() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4096;
            let channel: Vec<f32> = (0..n)
                .map(|_| {
                    let u1: f32 = rng.gen_range(1e-6..1.0);
                    let u2: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                    (-2.0 * u1.ln()).sqrt() * u2.cos()
                })
                .collect();
            let (scale, codes) = grid_search_scale(&channel, 7.0);
            let grid_mse = channel_mse(&channel, scale, &codes);
            let max_abs = channel.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let naive_scale = max_abs / 7.0;
            let naive_codes = quantize_channel_with_scale(&channel, naive_scale, 7.0);
            let naive_mse = channel_mse(&channel, naive_scale, &naive_codes);
            assert!(
                grid_mse <= naive_mse,
                "seed {seed}: {grid_mse} > {naive_mse}"
            );
        }
    }

    #[test]
    fn bits16_roundtrip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Matrix::from_fn(32, 16, |_, _| rng.gen_range(-0.1..0.1));
        let qr = residual_quantize(&r, 16).unwrap();
        let rows: Vec<usize> = (0..32).collect();
        let dq = residual_dequantize_rows(&qr, &rows).unwrap();
        assert_eq!(dq.data(), r.data());
    }

    #[test]
    fn monotone_fidelity_across_bitwidths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = Matrix::from_fn(256, 8, |_, _| rng.gen_range(-0.05..0.05));
        let mse_at = |bits: u8| -> f64 {
            let qr = residual_quantize(&r, bits).unwrap();
            let mut acc = 0.0;
            for row in 0..256 {
                let dq = qr.dequantize_row(row).unwrap();
                for c in 0..8 {
                    acc += (r.get(row, c) as f64 - dq[c] as f64).powi(2);
                }
            }
            acc / (256.0 * 8.0)
        };
        let m2 = mse_at(2);
        let m4 = mse_at(4);
        let m8 = mse_at(8);
        assert!(m8 <= m4 && m4 <= m2, "{m8} {m4} {m2}");
    }

    #[test]
    fn dequantize_rows_empty_and_bounds() {
        let r = Matrix::zeros(4, 3);
        let qr = residual_quantize(&r, 4).unwrap();
        let empty = residual_dequantize_rows(&qr, &[]).unwrap();
        assert_eq!(empty.rows(), 0);
        assert_eq!(empty.cols(), 3);
        assert!(residual_dequantize_rows(&qr, &[4]).is_err());
    }

    #[test]
    fn ddqr_roundtrip_int_and_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Matrix::from_fn(16, 4, |_, _| rng.gen_range(-0.2..0.2));
        for bits in [2u8, 4, 8, 16] {
            let qr = residual_quantize(&r, bits).unwrap();
            let mut buf = Vec::new();
            qr.write_ddqr(&mut buf).unwrap();
            let back = QuantizedResidual::read_ddqr(&mut buf.as_slice()).unwrap();
            assert_eq!(back.bits, qr.bits);
            assert_eq!(back.scales, qr.scales);
            assert_eq!(back.codes, qr.codes);
        }
    }

    proptest::proptest! {
        #[test]
        fn clip_bound_never_violated(
            seed in 0u64..200,
            bits in proptest::sample::select(vec![2u8, 4, 8]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Matrix::from_fn(32, 4, |_, _| rng.gen_range(-1.0..1.0f32));
            let qr = residual_quantize(&r, bits).unwrap();
            let q_max = ((1i32 << (bits - 1)) - 1) as i8;
            if let ResidualCodes::Int(codes) = &qr.codes {
                for &c in codes {
                    proptest::prop_assert!(c >= -q_max && c <= q_max);
                }
            }
            // every scale for a nonzero channel is positive
            for c in 0..4 {
                let nonzero = (0..32).any(|row| r.get(row, c) != 0.0);
                if nonzero {
                    proptest::prop_assert!(qr.scales[c] > 0.0);
                }
            }
        }

        #[test]
        fn grid_optimality(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let channel: Vec<f32> = (0..64).map(|_| rng.gen_range(-0.5..0.5f32)).collect();
            let (scale, codes) = grid_search_scale(&channel, 7.0);
            let chosen = channel_mse(&channel, scale, &codes);
            let max_abs = channel.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            if max_abs > 0.0 {
                for i in 0..128 {
                    let g = 0.30 + 0.70 * i as f32 / 127.0;
                    let s = max_abs / 7.0 * g;
                    let cs = quantize_channel_with_scale(&channel, s, 7.0);
                    let mse = channel_mse(&channel, s, &cs);
                    proptest::prop_assert!(mse >= chosen - 1e-15);
                }
            }
        }
    }
}
