//! Salient-channel selection: exact Top-K, calibration-derived bucket
//! boundaries, and the chunked 32-bucket approximate Top-K.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Input-dimension chunk size for local selection.
pub const CHUNK: usize = 1024;
/// Bucket count per chunk, one warp lane per bucket in the modeled kernel.
pub const NUM_BUCKETS: usize = 32;

/// Activation vectors, one decoding step per row. Doubles as the
/// calibration set when deriving boundaries.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub steps: Matrix,
}

impl ActivationTrace {
    pub fn new(steps: Matrix) -> Result<Self> {
        if steps.rows() == 0 {
            return Err(Error::Precondition("empty activation trace".into()));
        }
        steps.check_finite()?;
        Ok(Self { steps })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.rows()
    }

    pub fn d_in(&self) -> usize {
        self.steps.cols()
    }

    pub fn step(&self, i: usize) -> &[f32] {
        self.steps.row(i)
    }
}

/// The two anchor boundaries from which all 32 bucket edges are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketBoundaries {
    pub b0: f32,
    pub b15: f32,
    pub k: usize,
}

/// Selected channel indices (strictly ascending) with the matching
/// activation values.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub values: Vec<f32>,
}

impl Selection {
    pub fn from_indices(indices: Vec<usize>, x: &[f32]) -> Self {
        let values = indices.iter().map(|&i| x[i]).collect();
        Self { indices, values }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The k largest-magnitude entries of `x`; ties break toward the lower
/// index; indices are reported ascending.
pub fn exact_topk(x: &[f32], k: usize) -> Result<Selection> {
    if k == 0 || k > x.len() {
        return Err(Error::Precondition(format!(
            "k = {k} out of range for d_in = {}",
            x.len()
        )));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[b].abs()
            .partial_cmp(&x[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..k].to_vec();
    indices.sort_unstable();
    Ok(Selection::from_indices(indices, x))
}

/// k-th largest absolute value of a slice (1-based k).
fn kth_largest_abs(row: &[f32], k: usize) -> f32 {
    let mut mags: Vec<f32> = row.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mags[k - 1]
}

/// `b15` = max over calibration rows of the k-th largest magnitude;
/// `b0` = global max magnitude.
pub fn derive_boundaries(calibration: &ActivationTrace, k: usize) -> Result<BucketBoundaries> {
    if k == 0 || k > calibration.d_in() {
        return Err(Error::Precondition(format!(
            "k = {k} out of range for d_in = {}",
            calibration.d_in()
        )));
    }
    let mut b15 = 0.0f32;
    let mut b0 = 0.0f32;
    for s in 0..calibration.num_steps() {
        let row = calibration.step(s);
        b15 = b15.max(kth_largest_abs(row, k));
        b0 = b0.max(row.iter().fold(0.0f32, |m, v| m.max(v.abs())));
    }
    if b15 == 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    Ok(BucketBoundaries { b0, b15, k })
}

/// Map a magnitude to one of 32 buckets. Bucket 0 holds the largest
/// magnitudes (`m >= b0`), bucket 31 the smallest. The upper 16 buckets
/// uniformly divide `[b15, b0]`, the lower 16 divide `[0, b15)`.
pub fn bucket_index(m: f32, b: &BucketBoundaries) -> usize {
    debug_assert!(m >= 0.0);
    if m >= b.b15 {
        if b.b0 <= b.b15 {
            // degenerate calibration: upper region collapses
            return 0;
        }
        let step = (b.b0 - b.b15) / 16.0;
        let j = ((m - b.b15) / step).floor() as i64;
        (15 - j.min(15)).max(0) as usize
    } else {
        let step = b.b15 / 16.0;
        let j = ((m / step).floor() as i64).min(15).max(0);
        (31 - j) as usize
    }
}

/// Chunked bucket-based approximate Top-K. Each 1024-entry chunk selects
/// its `k_chunk` locally: buckets are gathered whole from bucket 0 down
/// until the next bucket would overflow the quota, then that boundary
/// bucket is sampled uniformly at random (seeded, per chunk) to fill the
/// remaining slots. A final short chunk gets a clamped quota.
pub fn approx_topk(
    x: &[f32],
    k_chunk: usize,
    b: &BucketBoundaries,
    seed: u64,
) -> Result<Selection> {
    if x.is_empty() {
        return Err(Error::Precondition("empty input vector".into()));
    }
    if k_chunk == 0 || k_chunk > CHUNK {
        return Err(Error::Precondition(format!(
            "k_chunk = {k_chunk} out of range [1, {CHUNK}]"
        )));
    }
    let mut indices = Vec::new();
    for (chunk_idx, chunk) in x.chunks(CHUNK).enumerate() {
        let quota = k_chunk.min(chunk.len());
        let base = chunk_idx * CHUNK;
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); NUM_BUCKETS];
        for (i, &v) in chunk.iter().enumerate() {
            buckets[bucket_index(v.abs(), b)].push(base + i);
        }
        let mut picked: Vec<usize> = Vec::with_capacity(quota);
        for bucket in &buckets {
            let remaining = quota - picked.len();
            if remaining == 0 {
                break;
            }
            if bucket.len() <= remaining {
                picked.extend_from_slice(bucket);
            } else {
                // per-chunk seed so parallel chunk order cannot matter
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ chunk_idx as u64);
                let chosen = rand::seq::index::sample(&mut rng, bucket.len(), remaining);
                picked.extend(chosen.iter().map(|i| bucket[i]));
                break;
            }
        }
        picked.sort_unstable();
        indices.extend(picked);
    }
    Ok(Selection::from_indices(indices, x))
}

/// `|approx ∩ exact| / |exact|`.
pub fn recall(approx: &Selection, exact: &Selection) -> Result<f32> {
    if exact.is_empty() {
        return Err(Error::Precondition("empty exact selection".into()));
    }
    let mut hits = 0usize;
    let mut it = exact.indices.iter().peekable();
    for &a in &approx.indices {
        while let Some(&&e) = it.peek() {
            if e < a {
                it.next();
            } else {
                break;
            }
        }
        if it.peek() == Some(&&a) {
            hits += 1;
            it.next();
        }
    }
    Ok(hits as f32 / exact.len() as f32)
}

/// Serialize boundaries as one `k b0 b15` text line per layer.
pub fn boundaries_to_line(b: &BucketBoundaries) -> String {
    format!("{} {} {}", b.k, b.b0, b.b15)
}

pub fn boundaries_from_line(line: &str) -> Result<BucketBoundaries> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("expected 'k b0 b15', got {line:?}")));
    }
    let k = parts[0]
        .parse::<usize>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    let b0 = parts[1]
        .parse::<f32>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    let b15 = parts[2]
        .parse::<f32>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(BucketBoundaries { b0, b15, k })
}
