//! Replication allocation across sampled inputs.
//!
//! Scores follow the large-budget approximation `N_i ∝ sqrt([w_i - P̄]_+)`;
//! rounding leftovers are spread over the largest allocations.

use serde::{Deserialize, Serialize};

use crate::error::{CesisError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationInput<'a> {
    /// Likelihood ratios `f(x_i) / q(x_i; θ)`.
    pub weights: &'a [f64],
    /// Probability estimate from the previous iteration.
    pub p_ref: f64,
    /// Replication budget for the iteration.
    pub n_t: usize,
}

/// Summary of how the scores behaved, kept in run reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationDiagnostics {
    pub min_w: f64,
    pub max_w: f64,
    /// Fraction of inputs with `w_i <= p_ref`, which get a single replication.
    pub fraction_clamped: f64,
    pub max_n: usize,
}

/// `sqrt(max(w_i - p_ref, 0))` for every input.
pub fn allocation_scores(input: &AllocationInput<'_>) -> Vec<f64> {
    input
        .weights
        .iter()
        .map(|w| (w - input.p_ref).max(0.0).sqrt())
        .collect()
}

/// Replication counts `N_i >= 1` summing to `max(n_t, m)`.
pub fn allocate(input: &AllocationInput<'_>) -> Result<Vec<usize>> {
    let m = input.weights.len();
    if m == 0 {
        return Err(CesisError::config("cannot allocate replications over zero inputs"));
    }
    if input.n_t < m {
        return Err(CesisError::config(format!(
            "iteration budget {} is smaller than the number of inputs {m}",
            input.n_t
        )));
    }
    if input.weights.iter().any(|w| !w.is_finite()) {
        return Err(CesisError::invalid("likelihood ratios must be finite"));
    }
    let scores = allocation_scores(input);
    let total: f64 = scores.iter().sum();
    let raw: Vec<f64> = if total > 0.0 {
        scores.iter().map(|s| input.n_t as f64 * s / total).collect()
    } else {
        vec![0.0; m]
    };
    Ok(round_to_budget(&raw, &scores, input.n_t))
}

/// Rounds real allocations half away from zero with a floor of one, then adds
/// or removes single units, cycling over inputs ordered by allocation
/// (largest first), until the total equals `max(n_t, m)`.
///
/// `priority` breaks ties between equal allocations: when adding, higher
/// priority goes first; when removing, lower priority goes first. With
/// `priority` monotone in the raw allocation this keeps the result monotone.
pub fn round_to_budget(raw: &[f64], priority: &[f64], n_t: usize) -> Vec<usize> {
    let m = raw.len();
    let target = n_t.max(m);
    let mut n: Vec<usize> = raw.iter().map(|r| (r.round().max(1.0)) as usize).collect();
    let sum: usize = n.iter().sum();
    if sum == target {
        return n;
    }
    let adding = sum < target;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        n[b].cmp(&n[a])
            .then_with(|| {
                let by_priority = priority[b].total_cmp(&priority[a]);
                if adding {
                    by_priority
                } else {
                    by_priority.reverse()
                }
            })
            .then(a.cmp(&b))
    });
    let mut remaining = sum.abs_diff(target);
    while remaining > 0 {
        let mut changed = false;
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if adding {
                n[i] += 1;
            } else if n[i] > 1 {
                n[i] -= 1;
            } else {
                continue;
            }
            remaining -= 1;
            changed = true;
        }
        // target >= m, so removal always finds an entry above one
        debug_assert!(changed);
        if !changed {
            break;
        }
    }
    n
}

pub fn diagnostics(input: &AllocationInput<'_>, allocation: &[usize]) -> AllocationDiagnostics {
    let m = input.weights.len().max(1);
    AllocationDiagnostics {
        min_w: input.weights.iter().copied().fold(f64::INFINITY, f64::min),
        max_w: input.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fraction_clamped: input.weights.iter().filter(|&&w| w <= input.p_ref).count() as f64 / m as f64,
        max_n: allocation.iter().copied().max().unwrap_or(0),
    }
}
