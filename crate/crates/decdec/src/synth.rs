//! Synthetic inputs for the analysis experiments: Gaussian weight
//! matrices and heavy-tailed activation traces with partially persistent
//! outlier channels. Real traces in DDMX format can be used instead
//! wherever a trace is consumed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, StudentT};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::selection::ActivationTrace;

/// Standard-normal weight matrix.
pub fn gen_weights(d_in: usize, d_out: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(d_in, d_out, |_, _| rng.sample(StandardNormal))
}

/// iid standard-normal activation trace (chance-level baseline; no
/// channel structure at all).
pub fn gen_gaussian_trace(steps: usize, d_in: usize, seed: u64) -> Result<ActivationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActivationTrace::new(Matrix::from_fn(steps, d_in, |_, _| {
        rng.sample(StandardNormal)
    }))
}

/// Heavy-tailed trace generator.
#[derive(Debug, Clone)]
pub struct SynthTraceConfig {
    pub steps: usize,
    pub d_in: usize,
    /// Fraction of channels whose scale is boosted every step.
    pub persistent_fraction: f64,
    /// Scale multiplier for persistent outlier channels.
    pub persistent_boost: f64,
    /// Sigma of the log-normal per-channel scale.
    pub scale_sigma: f64,
    /// Degrees of freedom of the per-step Student-t draw; smaller means
    /// heavier tails and more concentrated outlier mass.
    pub dof: f64,
}

impl Default for SynthTraceConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            d_in: 4096,
            persistent_fraction: 0.01,
            persistent_boost: 10.0,
            scale_sigma: 0.5,
            dof: 3.0,
        }
    }
}

/// Per-channel scale from a log-normal, per-step values Student-t(3), a
/// random subset of channels boosted into persistent outliers. The t
/// tails supply the step-random outliers.
pub fn gen_trace(config: &SynthTraceConfig, seed: u64) -> Result<ActivationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lognormal = LogNormal::new(0.0, config.scale_sigma).expect("valid sigma");
    let student = StudentT::new(config.dof).expect("valid dof");
    let mut scales: Vec<f32> = (0..config.d_in)
        .map(|_| lognormal.sample(&mut rng) as f32)
        .collect();
    let n_persistent = (config.persistent_fraction * config.d_in as f64).round() as usize;
    let mut channels: Vec<usize> = (0..config.d_in).collect();
    channels.shuffle(&mut rng);
    for &c in channels.iter().take(n_persistent) {
        scales[c] *= config.persistent_boost as f32;
    }
    ActivationTrace::new(Matrix::from_fn(config.steps, config.d_in, |_, c| {
        scales[c] * student.sample(&mut rng) as f32
    }))
}
