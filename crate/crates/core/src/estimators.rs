//! Probability estimators and the plug-in quantities they feed.

use serde::{Deserialize, Serialize};

use crate::densities::{GmmParams, InputDensity};
use crate::error::{CesisError, Result};
use crate::model::OracleModel;
use crate::quadrature::{integrate, QuadSettings};
use crate::rng::Stream;
use crate::weighted_em::WeightedSample;
use rand::Rng;

/// One distinct input together with the outcome of its replications.
///
/// `w` and `v` are frozen when the record is created: `w` uses the density the
/// input was drawn from, and later refits never touch it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub x: Vec<f64>,
    pub iteration: usize,
    /// Likelihood ratio `f(x) / q(x; θ_s)`.
    pub w: f64,
    /// Number of replications.
    pub n: u32,
    pub failures: u32,
    /// EM weight `ĥ(x) · w`.
    pub v: f64,
}

impl SimRecord {
    /// Creates a record and freezes `v = ĥ(ŝ) · w`; `n_total` is the run's
    /// whole simulation budget.
    pub fn new(x: Vec<f64>, iteration: usize, w: f64, n: u32, failures: u32, n_total: u64) -> Result<Self> {
        if n == 0 || failures > n {
            return Err(CesisError::invalid(format!("record needs 0 <= failures ({failures}) <= N ({n}), N >= 1")));
        }
        if !(w >= 0.0 && w.is_finite()) {
            return Err(CesisError::invalid(format!("likelihood ratio must be finite and >= 0, got {w}")));
        }
        let v = h_hat(s_hat(failures, n), n_total) * w;
        Ok(Self {
            x,
            iteration,
            w,
            n,
            failures,
            v,
        })
    }

    pub fn s_hat(&self) -> f64 {
        s_hat(self.failures, self.n)
    }

    /// `ŝ · w`, this record's contribution to the probability estimators.
    pub fn weighted_exceedance(&self) -> f64 {
        self.s_hat() * self.w
    }
}

/// Records drawn in one iteration, with the density used to draw them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub iteration: usize,
    pub theta: GmmParams,
    pub records: Vec<SimRecord>,
}

/// All batches gathered so far, iteration 0 first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    batches: Vec<Batch>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, batch: Batch) -> Result<()> {
        if batch.iteration != self.batches.len() {
            return Err(CesisError::invalid(format!(
                "batch for iteration {} appended after {} batches",
                batch.iteration,
                self.batches.len()
            )));
        }
        if batch.records.is_empty() {
            return Err(CesisError::invalid("empty batch"));
        }
        if batch.records.iter().any(|r| r.iteration != batch.iteration) {
            return Err(CesisError::invalid("record iteration does not match its batch"));
        }
        self.batches.push(batch);
        Ok(())
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &SimRecord> {
        self.batches.iter().flat_map(|b| b.records.iter())
    }

    /// `Σ_s m^(s)`.
    pub fn total_records(&self) -> usize {
        self.batches.iter().map(|b| b.records.len()).sum()
    }

    pub fn positive_weight_count(&self) -> usize {
        self.records().filter(|r| r.v > 0.0).count()
    }

    pub fn weighted_samples(&self) -> Vec<WeightedSample> {
        self.records()
            .map(|r| WeightedSample {
                x: r.x.clone(),
                v: r.v,
            })
            .collect()
    }

    /// Aggregated estimate over every batch, see [`p_bar_sis`].
    pub fn p_bar(&self) -> f64 {
        p_bar_sis(self)
    }

    pub fn dimension(&self) -> Option<usize> {
        self.records().next().map(|r| r.x.len())
    }
}

/// Fraction of replications that exceeded the threshold.
pub fn s_hat(failures: u32, n: u32) -> f64 {
    debug_assert!(n >= 1);
    failures as f64 / n as f64
}

/// Plug-in `ĥ = sqrt(ŝ(1 - ŝ)/n + ŝ²)`.
pub fn h_hat(s_hat: f64, n_total: u64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&s_hat) && n_total >= 1);
    (s_hat * (1.0 - s_hat) / n_total as f64 + s_hat * s_hat).sqrt()
}

/// Single-batch estimator `(1/m) Σ_i ŝ_i w_i`.
pub fn p_sis(records: &[SimRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(SimRecord::weighted_exceedance).sum::<f64>() / records.len() as f64
}

/// Aggregated estimator: the plain average of the per-iteration estimators.
pub fn p_bar_sis(dataset: &Dataset) -> f64 {
    let batches = dataset.batches();
    if batches.is_empty() {
        return 0.0;
    }
    batches.iter().map(|b| p_sis(&b.records)).sum::<f64>() / batches.len() as f64
}

/// Crude Monte Carlo estimate.
pub fn p_cmc(failures: u64, n: u64) -> f64 {
    debug_assert!(n >= 1 && failures <= n);
    failures as f64 / n as f64
}

/// Fraction of the crude Monte Carlo budget needed to match `se`:
/// `n_used · se² / (p_ref (1 - p_ref))`.
pub fn cmc_ratio(n_used: u64, se: f64, p_ref: f64) -> f64 {
    n_used as f64 * se * se / (p_ref * (1.0 - p_ref))
}

/// Real-valued variance-optimal replication counts for known `s_i`:
/// `N_i ∝ sqrt(n(1 - s_i) / (1 + (n - 1)s_i))`, scaled to sum to `n`.
///
/// A term with `s_i = 1` is zero; if every term is zero the budget is split
/// evenly.
pub fn optimal_allocation_exact(s_values: &[f64], n: u64) -> Vec<f64> {
    let m = s_values.len();
    if m == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    let terms: Vec<f64> = s_values
        .iter()
        .map(|&s| {
            let s = s.clamp(0.0, 1.0);
            (nf * (1.0 - s) / (1.0 + (nf - 1.0) * s)).sqrt()
        })
        .collect();
    let total: f64 = terms.iter().sum();
    if total <= 0.0 {
        return vec![nf / m as f64; m];
    }
    terms.iter().map(|t| nf * t / total).collect()
}

/// Tabulated variance-optimal input density for a one-dimensional oracle model,
/// `q(x) ∝ f(x) sqrt(s(x)(1 - s(x))/n + s(x)²)`.
///
/// The table is piecewise linear on an adaptively refined grid. Its `pdf` is
/// exactly the density that `sample` draws from, so likelihood ratios built
/// from it keep estimators unbiased.
#[derive(Debug, Clone)]
pub struct OptimalSisTable {
    xs: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
    normalizer: f64,
}

impl OptimalSisTable {
    const INITIAL_CELLS: usize = 4096;
    const MAX_NODES: usize = 400_000;
    const REFINE_TOL: f64 = 1e-7;

    pub fn build(model: &dyn OracleModel, f: &dyn InputDensity, l: f64, n: u64) -> Result<Self> {
        Self::from_fn(f, |x| model.true_s(&[x], l), n)
    }

    /// Builds the table from any exceedance function `s(x)`.
    pub fn from_fn<S>(f: &dyn InputDensity, s: S, n: u64) -> Result<Self>
    where
        S: Fn(f64) -> Result<f64>,
    {
        let (a, b) = f
            .integration_bounds()
            .ok_or_else(|| CesisError::Oracle("optimal density table needs a 1-dimensional input".into()))?;
        let unnormalized = |x: f64| -> Result<f64> {
            let fx = f.pdf(&[x]);
            if fx == 0.0 {
                return Ok(0.0);
            }
            Ok(fx * h_hat(s(x)?.clamp(0.0, 1.0), n))
        };

        let mut xs: Vec<f64> = (0..=Self::INITIAL_CELLS)
            .map(|i| a + (b - a) * i as f64 / Self::INITIAL_CELLS as f64)
            .collect();
        let mut ys = xs.iter().map(|&x| unnormalized(x)).collect::<Result<Vec<_>>>()?;
        let scale = ys.iter().copied().fold(0.0, f64::max);
        if !(scale > 0.0) {
            return Err(CesisError::Oracle("optimal density vanishes on the whole support".into()));
        }
        // bisect cells whose midpoint departs from the chord
        loop {
            let mut nx = Vec::with_capacity(xs.len() * 2);
            let mut ny = Vec::with_capacity(xs.len() * 2);
            let mut refined = false;
            for i in 0..xs.len() - 1 {
                nx.push(xs[i]);
                ny.push(ys[i]);
                let mid = 0.5 * (xs[i] + xs[i + 1]);
                let ym = unnormalized(mid)?;
                if (ym - 0.5 * (ys[i] + ys[i + 1])).abs() > Self::REFINE_TOL * scale {
                    nx.push(mid);
                    ny.push(ym);
                    refined = true;
                }
            }
            nx.push(*xs.last().unwrap());
            ny.push(*ys.last().unwrap());
            xs = nx;
            ys = ny;
            if !refined || xs.len() > Self::MAX_NODES {
                break;
            }
        }

        let normalizer = integrate(
            |x| unnormalized(x).unwrap_or(f64::NAN),
            a,
            b,
            QuadSettings {
                abs_tol: 1e-14,
                rel_tol: 1e-10,
                ..QuadSettings::default()
            },
        )?;

        let mut cdf = Vec::with_capacity(xs.len());
        cdf.push(0.0);
        for i in 0..xs.len() - 1 {
            let area = 0.5 * (ys[i] + ys[i + 1]) * (xs[i + 1] - xs[i]);
            cdf.push(cdf[i] + area);
        }
        let table_mass = *cdf.last().unwrap();
        if !(table_mass > 0.0) || ((table_mass - normalizer) / normalizer).abs() > 1e-5 {
            return Err(CesisError::Oracle(format!(
                "table mass {table_mass:e} disagrees with quadrature {normalizer:e}"
            )));
        }
        let pdf = ys.iter().map(|y| y / table_mass).collect();
        cdf.iter_mut().for_each(|c| *c /= table_mass);
        Ok(Self {
            xs,
            pdf,
            cdf,
            normalizer,
        })
    }

    /// Normalizing constant `C_q` from adaptive quadrature.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn nodes(&self) -> usize {
        self.xs.len()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (a, b) = self.bounds();
        if !(a..=b).contains(&x) {
            return 0.0;
        }
        let i = self.xs.partition_point(|&v| v <= x).clamp(1, self.xs.len() - 1) - 1;
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let t = (x - x0) / (x1 - x0);
        self.pdf[i] + t * (self.pdf[i + 1] - self.pdf[i])
    }

    /// Integrates `g` against the table cell by cell; exact up to the
    /// smoothness of `g` because the table is linear inside each cell.
    pub fn integrate_cells<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        self.xs
            .windows(2)
            .map(|c| crate::quadrature::gauss_kronrod15(&g, c[0], c[1]))
            .sum()
    }

    /// Inverse-CDF draw from the piecewise-linear density.
    pub fn sample(&self, rng: &mut Stream) -> f64 {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, self.xs.len() - 1) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let (y0, y1) = (self.pdf[i], self.pdf[i + 1]);
        let r = (u - self.cdf[i]).max(0.0);
        let slope = (y1 - y0) / h;
        let disc = (y0 * y0 + 2.0 * slope * r).max(0.0);
        let denom = y0 + disc.sqrt();
        let d = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        self.xs[i] + d.clamp(0.0, h)
    }
}
