//! Two-phase parameter search: phase 1 picks the thread-block cap
//! n_tb^max via a uniform coarse k_chunk scan, phase 2 greedily grows
//! per-layer k_chunk under the target slowdown.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::hwmodel::{candidate_ntb, max_kchunk, LayerShape, ModelShapes, TimingOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssignment {
    pub label: String,
    pub n_tb: usize,
    pub k_chunk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerResult {
    pub n_max_tb: usize,
    pub per_layer: Vec<LayerAssignment>,
    pub predicted_slowdown: f64,
    /// Layers forced to k_chunk = 0 during phase 1.
    pub frozen_zero: Vec<String>,
}

impl TunerResult {
    /// One-line summary: `n_max_tb / (k_a, k_b, ...)` in layer order.
    pub fn summary_line(&self) -> String {
        let ks: Vec<String> = self
            .per_layer
            .iter()
            .map(|l| l.k_chunk.to_string())
            .collect();
        format!("{} / ({})", self.n_max_tb, ks.join(", "))
    }
}

#[derive(Debug, Clone)]
pub struct Phase1Outcome {
    pub n_max_tb: usize,
    pub steps: usize,
    pub frozen_zero: Vec<String>,
}

/// Largest candidate n_tb not exceeding the cap (candidate sets always
/// contain 1, so this is total).
fn layer_ntb(layer: &LayerShape, n_max_tb: usize) -> Result<usize> {
    let candidates = candidate_ntb(layer.d_in, layer.d_out)?;
    Ok(candidates
        .iter()
        .copied()
        .filter(|&n| n <= n_max_tb)
        .max()
        .unwrap_or(candidates[0]))
}

/// Sum over layer classes of `count_per_block * num_blocks * time`.
pub fn total_time(
    model: &ModelShapes,
    assignment: &[LayerAssignment],
    oracle: &dyn TimingOracle,
) -> Result<f64> {
    let mut total = 0.0;
    for layer in &model.layers {
        let a = assignment
            .iter()
            .find(|a| a.label == layer.label)
            .ok_or_else(|| {
                Error::Precondition(format!("assignment missing layer {}", layer.label))
            })?;
        total += layer.count_per_block as f64
            * model.num_blocks as f64
            * oracle.time(layer, a.n_tb, a.k_chunk)?;
    }
    Ok(total)
}

fn assignment_for(
    model: &ModelShapes,
    n_max_tb: usize,
    frozen: &BTreeSet<String>,
    k: usize,
) -> Result<Vec<LayerAssignment>> {
    model
        .layers
        .iter()
        .map(|layer| {
            Ok(LayerAssignment {
                label: layer.label.clone(),
                n_tb: layer_ntb(layer, n_max_tb)?,
                k_chunk: if frozen.contains(&layer.label) { 0 } else { k },
            })
        })
        .collect()
}

/// Number of uniform +1 increments sustainable for this n_max_tb, or None
/// if even the baseline cannot be evaluated.
fn uniform_steps(
    model: &ModelShapes,
    n_max_tb: usize,
    frozen: &BTreeSet<String>,
    oracle: &dyn TimingOracle,
    target_slowdown: f64,
    k_cap: usize,
) -> Result<usize> {
    let baseline = total_time(model, &assignment_for(model, n_max_tb, frozen, 0)?, oracle)?;
    let bound = (1.0 + target_slowdown) * baseline;
    let mut steps = 0;
    for k in 1..=k_cap {
        let assignment = assignment_for(model, n_max_tb, frozen, k)?;
        // an oracle that cannot price this k (e.g. beyond a measured
        // grid) ends the scan rather than failing the tuner
        match total_time(model, &assignment, oracle) {
            Ok(t) if t <= bound => steps = k,
            _ => break,
        }
    }
    Ok(steps)
}

/// Phase 1: scan n_max_tb in 1..=sm_count/2; pick the value sustaining
/// the most uniform k_chunk increments (ties toward smaller n_max_tb).
/// If no n_max_tb sustains any increment, freeze the layer with the
/// smallest weight footprint to k_chunk = 0 and retry.
pub fn phase1(
    model: &ModelShapes,
    sm_count: usize,
    shared_mem_bytes: usize,
    oracle: &dyn TimingOracle,
    target_slowdown: f64,
) -> Result<Phase1Outcome> {
    if model.layers.is_empty() {
        return Err(Error::Precondition("empty model".into()));
    }
    if target_slowdown <= 0.0 {
        return Err(Error::Precondition("target_slowdown must be > 0".into()));
    }
    let k_cap = max_kchunk(shared_mem_bytes)?;
    let n_max_candidates = 1..=(sm_count / 2).max(1);
    let mut frozen: BTreeSet<String> = BTreeSet::new();
    loop {
        let mut best: Option<(usize, usize)> = None; // (n_max, steps)
        for n_max in n_max_candidates.clone() {
            let steps = uniform_steps(model, n_max, &frozen, oracle, target_slowdown, k_cap)?;
            let better = match best {
                None => true,
                Some((_, best_steps)) => steps > best_steps,
            };
            if better {
                best = Some((n_max, steps));
            }
        }
        let (n_max_tb, steps) = best.expect("at least one candidate");
        if steps > 0 {
            return Ok(Phase1Outcome {
                n_max_tb,
                steps,
                frozen_zero: frozen.into_iter().collect(),
            });
        }
        // freeze the smallest remaining weight matrix and retry
        let smallest = model
            .layers
            .iter()
            .filter(|l| !frozen.contains(&l.label))
            .min_by_key(|l| l.weight_elems() * l.count_per_block);
        match smallest {
            Some(layer) => {
                frozen.insert(layer.label.clone());
            }
            None => {
                return Ok(Phase1Outcome {
                    n_max_tb: 1,
                    steps: 0,
                    frozen_zero: frozen.into_iter().collect(),
                })
            }
        }
        if frozen.len() == model.layers.len() {
            return Ok(Phase1Outcome {
                n_max_tb: 1,
                steps: 0,
                frozen_zero: frozen.into_iter().collect(),
            });
        }
    }
}

/// Phase 2: starting from the uniform phase-1 level, repeatedly apply the
/// single cheapest +1 k_chunk increment (marginal cost recomputed after
/// every acceptance, ties by label order) until no increment fits the
/// target or the shared-memory bound.
pub fn phase2(
    model: &ModelShapes,
    shared_mem_bytes: usize,
    oracle: &dyn TimingOracle,
    target_slowdown: f64,
    phase1_result: &Phase1Outcome,
) -> Result<TunerResult> {
    let k_cap = max_kchunk(shared_mem_bytes)?;
    let frozen_zero: BTreeSet<String> = phase1_result.frozen_zero.iter().cloned().collect();
    let mut assignment = assignment_for(
        model,
        phase1_result.n_max_tb,
        &frozen_zero,
        phase1_result.steps,
    )?;
    let baseline = total_time(
        model,
        &assignment_for(model, phase1_result.n_max_tb, &frozen_zero, 0)?,
        oracle,
    )?;
    let bound = (1.0 + target_slowdown) * baseline;
    let mut current = total_time(model, &assignment, oracle)?;

    let mut active: BTreeSet<String> = model
        .layers
        .iter()
        .filter(|l| !frozen_zero.contains(&l.label))
        .map(|l| l.label.clone())
        .collect();
    while !active.is_empty() {
        // cheapest feasible +1 among active layers; layers whose
        // increment cannot even be priced freeze immediately
        let mut best: Option<(f64, String)> = None;
        let mut to_freeze: Vec<String> = Vec::new();
        for layer in &model.layers {
            if !active.contains(&layer.label) {
                continue;
            }
            let a = assignment
                .iter()
                .find(|a| a.label == layer.label)
                .unwrap();
            if a.k_chunk + 1 > k_cap {
                to_freeze.push(layer.label.clone());
                continue;
            }
            let t_now = oracle.time(layer, a.n_tb, a.k_chunk)?;
            let t_next = match oracle.time(layer, a.n_tb, a.k_chunk + 1) {
                Ok(t) => t,
                Err(_) => {
                    to_freeze.push(layer.label.clone());
                    continue;
                }
            };
            let marginal =
                layer.count_per_block as f64 * model.num_blocks as f64 * (t_next - t_now);
            let better = match &best {
                None => true,
                Some((m, _)) => marginal < *m,
            };
            if better {
                best = Some((marginal, layer.label.clone()));
            }
        }
        for label in to_freeze {
            active.remove(&label);
        }
        let Some((marginal, label)) = best else {
            continue;
        };
        if !active.contains(&label) {
            continue;
        }
        if current + marginal <= bound {
            let a = assignment
                .iter_mut()
                .find(|a| a.label == label)
                .unwrap();
            a.k_chunk += 1;
            current += marginal;
        } else {
            active.remove(&label);
        }
    }

    let predicted_slowdown = total_time(model, &assignment, oracle)? / baseline - 1.0;
    Ok(TunerResult {
        n_max_tb: phase1_result.n_max_tb,
        per_layer: assignment,
        predicted_slowdown,
        frozen_zero: phase1_result.frozen_zero.clone(),
    })
}

/// Full two-phase search.
pub fn tune(
    model: &ModelShapes,
    sm_count: usize,
    shared_mem_bytes: usize,
    oracle: &dyn TimingOracle,
    target_slowdown: f64,
) -> Result<TunerResult> {
    let p1 = phase1(model, sm_count, shared_mem_bytes, oracle, target_slowdown)?;
    phase2(model, shared_mem_bytes, oracle, target_slowdown, &p1)
}

/// Mixed-precision composition: take the assignment from `primary` for
/// the listed labels and from `secondary` for the rest. Both results must
/// cover identical label sets.
pub fn merge_mixed(
    primary: &TunerResult,
    secondary: &TunerResult,
    primary_labels: &[String],
) -> Result<TunerResult> {
    let labels_a: BTreeSet<&String> = primary.per_layer.iter().map(|l| &l.label).collect();
    let labels_b: BTreeSet<&String> = secondary.per_layer.iter().map(|l| &l.label).collect();
    if labels_a != labels_b {
        return Err(Error::Precondition(
            "tuner results cover different layer sets".into(),
        ));
    }
    for label in primary_labels {
        if !labels_a.contains(label) {
            return Err(Error::Precondition(format!("unknown layer label {label}")));
        }
    }
    let per_layer = primary
        .per_layer
        .iter()
        .map(|a| {
            if primary_labels.contains(&a.label) {
                a.clone()
            } else {
                secondary
                    .per_layer
                    .iter()
                    .find(|b| b.label == a.label)
                    .unwrap()
                    .clone()
            }
        })
        .collect();
    Ok(TunerResult {
        n_max_tb: primary.n_max_tb.max(secondary.n_max_tb),
        per_layer,
        predicted_slowdown: primary.predicted_slowdown.max(secondary.predicted_slowdown),
        frozen_zero: Vec::new(),
    })
}
