//! Desk-scale analysis experiments: cumulative
//! error curves, static-vs-dynamic recall, the selection-policy
//! comparison, and the residual-bitwidth sweep at matched transfer
//! budgets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compensation::{dec_gemv, gemv, output_mse, OutputVector};
use crate::error::{Error, Result};
use crate::quantizer::{residual_quantize, QuantizedResidual, WeightSet};
use crate::selection::{
    approx_topk, exact_topk, recall, ActivationTrace, BucketBoundaries, Selection, CHUNK,
};

/// Channel-selection policies compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Sorted,
    Random,
    Static,
    DecDec,
    Exact,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Sorted => "sorted",
            Policy::Random => "random",
            Policy::Static => "static",
            Policy::DecDec => "decdec",
            Policy::Exact => "exact",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sorted" => Ok(Policy::Sorted),
            "random" => Ok(Policy::Random),
            "static" => Ok(Policy::Static),
            "decdec" => Ok(Policy::DecDec),
            "exact" => Ok(Policy::Exact),
            other => Err(Error::Parse(format!("unknown policy {other:?}"))),
        }
    }
}

/// Output MSE as a function of the number of compensated channels.
#[derive(Debug, Clone)]
pub struct ErrorCurve {
    pub n_compensated: Vec<usize>,
    pub mse: Vec<f32>,
    pub policy: Policy,
}

/// Auxiliary inputs some policies need.
#[derive(Debug, Clone, Default)]
pub struct CurveAux<'a> {
    pub calibration: Option<&'a ActivationTrace>,
    pub boundaries: Option<BucketBoundaries>,
}

/// Mean square of each channel's activation over the calibration steps;
/// descending order defines the static channel ranking.
pub fn static_profile(calibration: &ActivationTrace) -> Vec<f32> {
    let d_in = calibration.d_in();
    let n = calibration.num_steps();
    let mut acc = vec![0.0f64; d_in];
    for s in 0..n {
        for (i, &v) in calibration.step(s).iter().enumerate() {
            acc[i] += (v as f64).powi(2);
        }
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// Indices sorted by descending score, magnitude ties toward lower index.
fn ranking_by_score(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn mse_to_full(acc: &[f64], full: &OutputVector) -> f32 {
    let s: f64 = acc
        .iter()
        .zip(&full.o)
        .map(|(a, f)| (a - *f as f64).powi(2))
        .sum();
    (s / acc.len() as f64) as f32
}

/// Progressive FP16 compensation curve: for n = 0, step, 2*step, ..., d_in,
/// compensate the first n channels of the policy's ranking with exact
/// residuals and record the output MSE against `gemv(w, x)`.
pub fn error_curve(
    ws: &WeightSet,
    x: &[f32],
    policy: Policy,
    step: usize,
    seed: u64,
    aux: &CurveAux,
) -> Result<ErrorCurve> {
    if step == 0 {
        return Err(Error::Precondition("step must be >= 1".into()));
    }
    let d_in = ws.d_in();
    if x.len() != d_in {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, weights have {} input channels",
            x.len(),
            d_in
        )));
    }
    let full = gemv(&ws.w, x)?;
    let base = gemv(&ws.w_hat, x)?;
    let mut grid: Vec<usize> = (0..=d_in / step).map(|i| i * step).collect();
    if *grid.last().unwrap() != d_in {
        grid.push(d_in);
    }

    let mut n_compensated = Vec::with_capacity(grid.len());
    let mut mse = Vec::with_capacity(grid.len());

    match policy {
        Policy::Sorted | Policy::Random | Policy::Static | Policy::Exact => {
            // prefix-nested rankings compensate incrementally
            let ranking: Vec<usize> = match policy {
                Policy::Sorted | Policy::Exact => {
                    let mags: Vec<f32> = x.iter().map(|v| v.abs()).collect();
                    ranking_by_score(&mags)
                }
                Policy::Random => {
                    let mut order: Vec<usize> = (0..d_in).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    order
                }
                Policy::Static => {
                    let calibration = aux.calibration.ok_or_else(|| {
                        Error::Precondition("static policy needs calibration aux".into())
                    })?;
                    if calibration.d_in() != d_in {
                        return Err(Error::DimensionMismatch(
                            "calibration d_in differs from weights".into(),
                        ));
                    }
                    ranking_by_score(&static_profile(calibration))
                }
                Policy::DecDec => unreachable!(),
            };
            let mut acc: Vec<f64> = base.o.iter().map(|&v| v as f64).collect();
            let mut done = 0usize;
            for &n in &grid {
                for &i in &ranking[done..n] {
                    let xi = x[i] as f64;
                    if xi != 0.0 {
                        for (a, &r) in acc.iter_mut().zip(ws.residual.row(i)) {
                            *a += xi * r as f64;
                        }
                    }
                }
                done = n;
                n_compensated.push(n);
                mse.push(mse_to_full(&acc, &full));
            }
        }
        Policy::DecDec => {
            let b = aux.boundaries.ok_or_else(|| {
                Error::Precondition("decdec policy needs boundaries aux".into())
            })?;
            let num_chunks = d_in.div_ceil(CHUNK);
            for &n in &grid {
                let sel = if n == 0 {
                    Selection {
                        indices: vec![],
                        values: vec![],
                    }
                } else {
                    if n % num_chunks != 0 {
                        return Err(Error::Precondition(format!(
                            "n = {n} not divisible by {num_chunks} chunks"
                        )));
                    }
                    approx_topk(x, n / num_chunks, &b, seed)?
                };
                let mut acc: Vec<f64> = base.o.iter().map(|&v| v as f64).collect();
                for &i in &sel.indices {
                    let xi = x[i] as f64;
                    for (a, &r) in acc.iter_mut().zip(ws.residual.row(i)) {
                        *a += xi * r as f64;
                    }
                }
                n_compensated.push(n);
                mse.push(mse_to_full(&acc, &full));
            }
        }
    }
    Ok(ErrorCurve {
        n_compensated,
        mse,
        policy,
    })
}

/// Trapezoid area under an error curve; the Monte-Carlo separation
/// checks compare these between policies.
pub fn curve_area(curve: &ErrorCurve) -> f64 {
    let mut area = 0.0;
    for w in curve.n_compensated.windows(2).zip(curve.mse.windows(2)) {
        let (ns, ms) = w;
        area += (ns[1] - ns[0]) as f64 * (ms[0] as f64 + ms[1] as f64) / 2.0;
    }
    area
}

/// Per-step recall of the static top-`ceil(fraction * d_in)` channel set
/// against each step's exact top set.
pub fn recall_experiment(
    trace: &ActivationTrace,
    calibration: &ActivationTrace,
    top_fraction: f64,
) -> Result<(Vec<f32>, f32)> {
    if !(0.0 < top_fraction && top_fraction <= 1.0) {
        return Err(Error::Precondition(
            "top_fraction must be in (0, 1]".into(),
        ));
    }
    if trace.d_in() != calibration.d_in() {
        return Err(Error::DimensionMismatch(
            "trace and calibration d_in differ".into(),
        ));
    }
    let d_in = trace.d_in();
    let k = ((top_fraction * d_in as f64).ceil() as usize).clamp(1, d_in);
    let mut static_set: Vec<usize> =
        ranking_by_score(&static_profile(calibration))[..k].to_vec();
    static_set.sort_unstable();
    let static_sel = Selection {
        values: vec![0.0; k],
        indices: static_set,
    };
    let mut per_step = Vec::with_capacity(trace.num_steps());
    for s in 0..trace.num_steps() {
        let exact = exact_topk(trace.step(s), k)?;
        per_step.push(recall(&static_sel, &exact)?);
    }
    let mean = per_step.iter().map(|&r| r as f64).sum::<f64>() / per_step.len() as f64;
    Ok((per_step, mean as f32))
}

/// One row of the residual-bitwidth sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r_bits: u8,
    pub k_chunk: usize,
    pub budget_bytes: usize,
    pub mean_mse: f32,
}

/// Budgets that could not fit any k_chunk >= 1 at some bitwidth.
#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<(usize, u8)>,
}

/// k_chunk matching a per-chunk transfer budget at a bitwidth:
/// `k_chunk * d_out * r_bits / 8 ~= budget`, so k_chunk halves when the
/// bitwidth doubles.
pub fn kchunk_for_budget(budget_bytes: usize, d_out: usize, r_bits: u8) -> usize {
    ((budget_bytes as f64 * 8.0) / (d_out as f64 * r_bits as f64)).round() as usize
}

/// Residual bitwidth sweep at matched per-chunk transfer budgets, using
/// exact Top-K selection over the trace.
pub fn bitwidth_sweep(
    ws: &WeightSet,
    trace: &ActivationTrace,
    budgets: &[usize],
) -> Result<SweepReport> {
    if trace.d_in() != ws.d_in() {
        return Err(Error::DimensionMismatch(
            "trace d_in differs from weights".into(),
        ));
    }
    let d_in = ws.d_in();
    let d_out = ws.d_out();
    let num_chunks = d_in.div_ceil(CHUNK);
    let mut report = SweepReport::default();
    let quantized: Vec<(u8, QuantizedResidual)> = [2u8, 4, 8, 16]
        .iter()
        .map(|&bits| Ok((bits, residual_quantize(&ws.residual, bits)?)))
        .collect::<Result<_>>()?;
    let full: Vec<OutputVector> = (0..trace.num_steps())
        .map(|s| gemv(&ws.w, trace.step(s)))
        .collect::<Result<_>>()?;
    let base: Vec<OutputVector> = (0..trace.num_steps())
        .map(|s| gemv(&ws.w_hat, trace.step(s)))
        .collect::<Result<_>>()?;
    for &budget in budgets {
        for (bits, qr) in &quantized {
            let k_chunk = kchunk_for_budget(budget, d_out, *bits);
            let k = k_chunk * num_chunks;
            if k_chunk == 0 || k > d_in {
                report.skipped.push((budget, *bits));
                continue;
            }
            let mut acc = 0.0f64;
            for s in 0..trace.num_steps() {
                let sel = exact_topk(trace.step(s), k)?;
                let o = base[s].add(&dec_gemv(qr, &sel)?)?;
                acc += output_mse(&o, &full[s])? as f64;
            }
            report.rows.push(SweepRow {
                r_bits: *bits,
                k_chunk,
                budget_bytes: budget,
                mean_mse: (acc / trace.num_steps() as f64) as f32,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PolicyStats {
    pub policy: Policy,
    pub mean_mse: f32,
    pub mean_recall: f32,
}

/// Evaluate random / static / decdec / exact selection at identical k
/// over the trace, with quantized-residual compensation.
pub fn selection_comparison(
    ws: &WeightSet,
    qr: &QuantizedResidual,
    trace: &ActivationTrace,
    calibration: &ActivationTrace,
    k_chunk: usize,
    boundaries: &BucketBoundaries,
    seed: u64,
) -> Result<Vec<PolicyStats>> {
    if trace.d_in() != ws.d_in() || calibration.d_in() != ws.d_in() {
        return Err(Error::DimensionMismatch(
            "trace/calibration d_in differs from weights".into(),
        ));
    }
    let d_in = ws.d_in();
    let num_chunks = d_in.div_ceil(CHUNK);
    let k = k_chunk * num_chunks;
    if k == 0 || k > d_in {
        return Err(Error::Precondition(format!(
            "total k = {k} out of range for d_in = {d_in}"
        )));
    }
    let mut static_set: Vec<usize> =
        ranking_by_score(&static_profile(calibration))[..k].to_vec();
    static_set.sort_unstable();

    let policies = [Policy::Random, Policy::Static, Policy::DecDec, Policy::Exact];
    let mut acc_mse = [0.0f64; 4];
    let mut acc_recall = [0.0f64; 4];
    for s in 0..trace.num_steps() {
        let x = trace.step(s);
        let full = gemv(&ws.w, x)?;
        let base = gemv(&ws.w_hat, x)?;
        let exact = exact_topk(x, k)?;
        for (pi, policy) in policies.iter().enumerate() {
            let sel = match policy {
                Policy::Random => {
                    let mut order: Vec<usize> = (0..d_in).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ s as u64));
                    let mut indices: Vec<usize> = order[..k].to_vec();
                    indices.sort_unstable();
                    Selection::from_indices(indices, x)
                }
                Policy::Static => Selection::from_indices(static_set.clone(), x),
                Policy::DecDec => approx_topk(x, k_chunk, boundaries, seed ^ s as u64)?,
                Policy::Exact => exact.clone(),
                Policy::Sorted => unreachable!(),
            };
            let o = base.add(&dec_gemv(qr, &sel)?)?;
            acc_mse[pi] += output_mse(&o, &full)? as f64;
            acc_recall[pi] += recall(&sel, &exact)? as f64;
        }
    }
    let n = trace.num_steps() as f64;
    Ok(policies
        .iter()
        .enumerate()
        .map(|(pi, &policy)| PolicyStats {
            policy,
            mean_mse: (acc_mse[pi] / n) as f32,
            mean_recall: (acc_recall[pi] / n) as f32,
        })
        .collect())
}
