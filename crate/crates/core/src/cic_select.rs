//! Mixture-order selection by the cross-entropy information criterion.

use serde::{Deserialize, Serialize};

use crate::densities::{param_dimension, GmmParams};
use crate::error::{CesisError, Result};
use crate::estimators::{p_bar_sis, Dataset};
use crate::fmt::sig6;
use crate::rng::{derive_seed, tag};
use crate::weighted_em::{em_fit, EmSettings, FitOutcome};

/// Effective samples required per free mixture parameter.
pub const SAMPLES_PER_PARAMETER: usize = 5;

/// Candidate mixture orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KGrid {
    pub k_min: usize,
    pub k_max_cap: usize,
}

impl Default for KGrid {
    fn default() -> Self {
        Self { k_min: 1, k_max_cap: 10 }
    }
}

impl KGrid {
    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_min > self.k_max_cap {
            return Err(CesisError::config(format!(
                "need 1 <= grid.k_min ({}) <= grid.k_max ({})",
                self.k_min, self.k_max_cap
            )));
        }
        Ok(())
    }

    /// Largest order the current sample supports: the biggest `k` whose
    /// parameter count fits `positive / 5`, capped by `k_max_cap` and never
    /// below `k_min`.
    pub fn effective_k_max(&self, p: usize, positive: usize) -> usize {
        let mut k = self.k_min;
        while k < self.k_max_cap && param_dimension(k + 1, p) * SAMPLES_PER_PARAMETER <= positive {
            k += 1;
        }
        k
    }
}

/// One row of the selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicRow {
    pub k: usize,
    pub d: usize,
    pub ce: Option<f64>,
    pub penalty: Option<f64>,
    pub cic: Option<f64>,
    pub infeasible: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CicTrace {
    pub rows: Vec<CicRow>,
}

impl CicTrace {
    pub const CSV_HEADER: &'static str = "k,d,ce,penalty,cic,infeasible";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig6).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.k,
                r.d,
                opt(r.ce),
                opt(r.penalty),
                opt(r.cic),
                r.infeasible
            ));
        }
        out
    }
}

/// Aggregated cross-entropy estimate `-(1/Σ_s m_s) Σ_s Σ_i v_i ln q(x_i; θ)`
/// using each record's frozen weight.
pub fn aggregated_ce(theta: &GmmParams, dataset: &Dataset) -> f64 {
    let total = dataset.total_records();
    if total == 0 {
        return 0.0;
    }
    let sum: f64 = dataset
        .records()
        .filter(|r| r.v > 0.0)
        .map(|r| r.v * theta.log_pdf(&r.x))
        .sum();
    -sum / total as f64
}

/// Penalty scale: the aggregated probability estimate of the data so far.
pub fn k_hat_sis(dataset: &Dataset) -> f64 {
    p_bar_sis(dataset)
}

/// `ce + k_hat · d / total_m`.
pub fn cic_sis(ce_value: f64, k_hat: f64, d: usize, total_m: usize) -> f64 {
    ce_value + cic_penalty(k_hat, d, total_m)
}

pub fn cic_penalty(k_hat: f64, d: usize, total_m: usize) -> f64 {
    debug_assert!(total_m >= 1);
    k_hat * d as f64 / total_m as f64
}

/// Outcome of a successful order search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub k_star: usize,
    pub theta: GmmParams,
    pub trace: CicTrace,
}

/// Scans `k = k_min, k_min+1, ...` up to the effective maximum, fitting each
/// order by weighted EM and scoring it by CIC. The scan stops at the first
/// infeasible order. Ties go to the smaller `k`.
pub fn select_k(dataset: &Dataset, grid: &KGrid, settings: &EmSettings, seed: u64) -> Result<Selection> {
    grid.validate()?;
    let p = dataset
        .dimension()
        .ok_or_else(|| CesisError::invalid("cannot select a mixture order on an empty dataset"))?;
    let samples = dataset.weighted_samples();
    let positive = samples.iter().filter(|s| s.v > 0.0).count();
    if positive == 0 {
        return Err(CesisError::NoEffectiveSamples);
    }
    let total_m = dataset.total_records();
    let k_hat = k_hat_sis(dataset);
    let k_max = grid.effective_k_max(p, positive);

    let mut trace = CicTrace::default();
    let mut best: Option<(usize, GmmParams, f64)> = None;
    for k in grid.k_min..=k_max {
        let d = param_dimension(k, p);
        match em_fit(k, &samples, settings, derive_seed(seed, &[tag::ORDER, k as u64]))? {
            FitOutcome::Infeasible { .. } => {
                trace.rows.push(CicRow {
                    k,
                    d,
                    ce: None,
                    penalty: None,
                    cic: None,
                    infeasible: true,
                });
                break;
            }
            FitOutcome::Fitted { theta, objective, .. } => {
                let penalty = cic_penalty(k_hat, d, total_m);
                let cic = objective + penalty;
                trace.rows.push(CicRow {
                    k,
                    d,
                    ce: Some(objective),
                    penalty: Some(penalty),
                    cic: Some(cic),
                    infeasible: false,
                });
                if best.as_ref().is_none_or(|(_, _, b)| cic < *b) {
                    best = Some((k, theta, cic));
                }
            }
        }
    }
    let (k_star, theta, _) = best.ok_or(CesisError::Selection)?;
    Ok(Selection { k_star, theta, trace })
}
