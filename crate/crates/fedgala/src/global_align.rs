//! Server-side aggregation: plain averaging and the iterative
//! cosine-weighted refinement.
//!
//! The server weighs each client by how well its whole update (all layers
//! flattened — the server loop carries no layer index) aligns with the
//! current aggregate: `w_i = (cos(g_i, g) + 1) / 2`, normalized to sum 1,
//! then `g = sum w_i g_i`, repeated for a fixed number of iterations after
//! a uniform-mean initialization.

use crate::encoders::{LayeredParams, UpdateDelta};
use crate::error::{Error, Result};
use crate::linalg::cosine;

/// Weight history plus the final update of one aggregation call.
#[derive(Debug, Clone)]
pub struct AggregationReport {
    pub weights_per_iteration: Vec<Vec<f64>>,
    pub final_update: UpdateDelta,
    pub fallback_used: bool,
}

/// Per-client update `theta_i - theta_prev`.
pub fn client_updates(
    client_params: &[LayeredParams],
    global_prev: &LayeredParams,
    round: usize,
) -> Result<Vec<UpdateDelta>> {
    client_params.iter().map(|p| p.subtract(global_prev, round)).collect()
}

/// Uniform mean of the updates.
pub fn fedavg_aggregate(updates: &[UpdateDelta]) -> Result<UpdateDelta> {
    weighted_aggregate(updates, &vec![1.0 / updates.len().max(1) as f64; updates.len()])
}

/// Mean weighted by client dataset sizes.
pub fn fedavg_aggregate_by_size(updates: &[UpdateDelta], sizes: &[usize]) -> Result<UpdateDelta> {
    if updates.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            context: "fedavg_aggregate_by_size",
            expected: updates.len(),
            got: sizes.len(),
        });
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptyRequest("fedavg_aggregate_by_size with zero total size"));
    }
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    weighted_aggregate(updates, &weights)
}

fn weighted_aggregate(updates: &[UpdateDelta], weights: &[f64]) -> Result<UpdateDelta> {
    let first = updates.first().ok_or(Error::EmptyRequest("aggregate with no updates"))?;
    let mut acc = UpdateDelta {
        layers: first
            .layers
            .iter()
            .map(|l| crate::encoders::Layer { name: l.name.clone(), values: vec![0.0; l.values.len()] })
            .collect(),
        round: first.round,
    };
    for (u, &w) in updates.iter().zip(weights) {
        acc.axpy(w, u);
    }
    Ok(acc)
}

/// Iterative cosine-weighted aggregation.
///
/// `iterations = 0` is exactly the uniform mean. If every raw weight comes
/// out zero (all clients exactly antiparallel to the aggregate) the
/// iteration falls back to uniform weights and flags it.
pub fn aligned_aggregate(updates: &[UpdateDelta], iterations: usize) -> Result<AggregationReport> {
    if updates.is_empty() {
        return Err(Error::EmptyRequest("aligned_aggregate with no updates"));
    }
    let k = updates.len();
    let flats: Vec<Vec<f64>> = updates.iter().map(UpdateDelta::flatten).collect();
    let mut aggregate = fedavg_aggregate(updates)?;
    let mut weights_per_iteration = Vec::with_capacity(iterations);
    let mut fallback_used = false;

    for _ in 0..iterations {
        let flat_agg = aggregate.flatten();
        let mut weights: Vec<f64> = flats
            .iter()
            .map(|f| cosine(f, &flat_agg).map(|c| (c + 1.0) / 2.0))
            .collect::<Result<_>>()?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            weights = vec![1.0 / k as f64; k];
            fallback_used = true;
        } else {
            for w in &mut weights {
                *w /= sum;
            }
        }
        aggregate = weighted_aggregate(updates, &weights)?;
        weights_per_iteration.push(weights);
    }

    Ok(AggregationReport { weights_per_iteration, final_update: aggregate, fallback_used })
}

/// theta_next = theta_prev + update.
pub fn apply_global_update(
    global_prev: &LayeredParams,
    update: &UpdateDelta,
) -> Result<LayeredParams> {
    global_prev.add_delta(update)
}
