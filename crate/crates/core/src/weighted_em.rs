//! Weighted EM for Gaussian mixtures: minimizes the importance-weighted
//! cross-entropy `-(1/M) Σ_i v_i ln q(x_i; θ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{log_sum_exp, GmmParams};
use crate::error::{CesisError, Result};
use crate::parallel::{map_indexed, Execution};
use crate::rng::{self, tag, Stream};

/// Component log-densities below this are treated as underflowed.
const UNDERFLOW_LOG: f64 = -700.0;
/// Minimum responsibility mass a component may carry.
const MIN_COMPONENT_WEIGHT: f64 = 1e-12;

/// A point and its non-negative weight `v = ĥ(x) · w(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub x: Vec<f64>,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    pub restarts: usize,
    /// Stop once an EM step improves the objective by less than this fraction.
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Covariance condition number above which a fit counts as ill-conditioned.
    pub cond_threshold: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            restarts: 10,
            rel_tol: 0.01,
            max_iters: 200,
            cond_threshold: 1e5,
            execution: Execution::default(),
        }
    }
}

impl EmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(CesisError::config("em.restarts and em.max_iters must be positive"));
        }
        if !(self.rel_tol > 0.0) || !(self.cond_threshold > 0.0) {
            return Err(CesisError::config("em.rel_tol and em.cond_threshold must be positive"));
        }
        Ok(())
    }
}

/// Result of [`em_fit`].
#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    Fitted {
        theta: GmmParams,
        objective: f64,
        ill_conditioned: usize,
    },
    /// Too few usable samples, or more than half the restarts degenerated.
    Infeasible { ill_conditioned: usize },
}

impl FitOutcome {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, FitOutcome::Infeasible { .. })
    }
}

fn check_weights(samples: &[WeightedSample]) -> Result<()> {
    if samples.iter().any(|s| !(s.v >= 0.0) || !s.v.is_finite()) {
        return Err(CesisError::invalid("sample weights must be finite and non-negative"));
    }
    if !samples.iter().any(|s| s.v > 0.0) {
        return Err(CesisError::NoEffectiveSamples);
    }
    Ok(())
}

/// `-(1/M) Σ_i v_i ln q(x_i; θ)` with `M = samples.len()`.
pub fn weighted_ce_objective(theta: &GmmParams, samples: &[WeightedSample]) -> Result<f64> {
    check_weights(samples)?;
    Ok(objective_unchecked(theta, samples, samples.len()))
}

/// Objective over the positive-weight subset, normalized by the full count `m_total`.
fn objective_unchecked(theta: &GmmParams, samples: &[WeightedSample], m_total: usize) -> f64 {
    let sum: f64 = samples
        .iter()
        .filter(|s| s.v > 0.0)
        .map(|s| s.v * theta.log_pdf(&s.x))
        .sum();
    -sum / m_total as f64
}

/// Posterior component probabilities `γ_j(x)`.
pub fn responsibilities(theta: &GmmParams, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; theta.k()];
    responsibilities_into(theta, x, &mut g);
    g
}

fn responsibilities_into(theta: &GmmParams, x: &[f64], out: &mut [f64]) {
    theta.weighted_component_log_pdfs(x, out);
    let k = out.len();
    if k == 1 {
        out[0] = 1.0;
        return;
    }
    let underflow = out
        .iter()
        .zip(theta.alpha())
        .all(|(lw, a)| lw - a.ln() < UNDERFLOW_LOG);
    if underflow {
        out.fill(1.0 / k as f64);
        return;
    }
    let norm = log_sum_exp(out);
    out.iter_mut().for_each(|v| *v = (*v - norm).exp());
}

/// One EM update of weights, means and covariances.
pub fn em_step(theta: &GmmParams, samples: &[WeightedSample]) -> Result<GmmParams> {
    check_weights(samples)?;
    em_step_unchecked(theta, samples)
}

fn em_step_unchecked(theta: &GmmParams, samples: &[WeightedSample]) -> Result<GmmParams> {
    let k = theta.k();
    let p = theta.dim();
    let active: Vec<&WeightedSample> = samples.iter().filter(|s| s.v > 0.0).collect();

    // E-step: v_i γ_ij
    let mut vg = vec![0.0; active.len() * k];
    for (i, s) in active.iter().enumerate() {
        let row = &mut vg[i * k..(i + 1) * k];
        responsibilities_into(theta, &s.x, row);
        row.iter_mut().for_each(|g| *g *= s.v);
    }

    let mut mass = vec![0.0; k];
    let mut means = vec![vec![0.0; p]; k];
    for (i, s) in active.iter().enumerate() {
        for j in 0..k {
            let c = vg[i * k + j];
            mass[j] += c;
            for (m, x) in means[j].iter_mut().zip(&s.x) {
                *m += c * x;
            }
        }
    }
    for j in 0..k {
        if !(mass[j] >= MIN_COMPONENT_WEIGHT) {
            return Err(CesisError::Degenerate {
                component: j,
                reason: format!("responsibility mass {:e}", mass[j]),
            });
        }
        means[j].iter_mut().for_each(|m| *m /= mass[j]);
    }

    let mut covs = vec![vec![0.0; p * p]; k];
    let mut diff = vec![0.0; p];
    for (i, s) in active.iter().enumerate() {
        for j in 0..k {
            let c = vg[i * k + j];
            for (d, (x, m)) in diff.iter_mut().zip(s.x.iter().zip(&means[j])) {
                *d = x - m;
            }
            let cov = &mut covs[j];
            for r in 0..p {
                for col in r..p {
                    cov[r * p + col] += c * diff[r] * diff[col];
                }
            }
        }
    }
    for j in 0..k {
        let cov = &mut covs[j];
        for r in 0..p {
            for col in r..p {
                cov[r * p + col] /= mass[j];
                cov[col * p + r] = cov[r * p + col];
            }
        }
    }

    let total: f64 = mass.iter().sum();
    let alpha: Vec<f64> = mass.iter().map(|m| m / total).collect();
    GmmParams::new(alpha, means, covs)
}

/// Weighted mean and (biased) covariance of the positive-weight samples.
fn weighted_moments(samples: &[&WeightedSample], p: usize) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = samples.iter().map(|s| s.v).sum();
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(&s.x) {
            *m += s.v * x / total;
        }
    }
    let mut cov = vec![0.0; p * p];
    for s in samples {
        for r in 0..p {
            for c in 0..p {
                cov[r * p + c] += s.v * (s.x[r] - mean[r]) * (s.x[c] - mean[c]) / total;
            }
        }
    }
    (mean, cov)
}

/// Picks `k` distinct indices with probability proportional to weight, without replacement.
fn weighted_pick(weights: &[f64], k: usize, rng: &mut Stream) -> Vec<usize> {
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, w) in remaining.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < *w {
                break;
            }
            u -= w;
        }
        let i = pick.expect("enough positive weights remain");
        chosen.push(i);
        remaining[i] = 0.0;
    }
    chosen
}

enum RestartResult {
    Converged { theta: GmmParams, objective: f64 },
    IllConditioned,
}

fn run_restart(
    k: usize,
    active: &[&WeightedSample],
    all: &[WeightedSample],
    settings: &EmSettings,
    rng: &mut Stream,
) -> RestartResult {
    let p = active[0].x.len();
    let weights: Vec<f64> = active.iter().map(|s| s.v).collect();
    let (_, global_cov) = weighted_moments(active, p);
    let means = weighted_pick(&weights, k, rng)
        .into_iter()
        .map(|i| active[i].x.clone())
        .collect();
    let Ok(mut theta) = GmmParams::new(vec![1.0 / k as f64; k], means, vec![global_cov; k]) else {
        return RestartResult::IllConditioned;
    };
    let m_total = all.len();
    let mut objective = objective_unchecked(&theta, all, m_total);
    for _ in 0..settings.max_iters {
        let Ok(next) = em_step_unchecked(&theta, all) else {
            return RestartResult::IllConditioned;
        };
        let next_obj = objective_unchecked(&next, all, m_total);
        if !next_obj.is_finite() {
            return RestartResult::IllConditioned;
        }
        let reduction = objective - next_obj;
        theta = next;
        let converged = reduction < settings.rel_tol * objective.abs();
        objective = next_obj;
        if converged {
            break;
        }
    }
    if theta.max_condition_number() > settings.cond_threshold {
        return RestartResult::IllConditioned;
    }
    RestartResult::Converged { theta, objective }
}

/// Fits a `k`-component mixture from `settings.restarts` random starts and
/// keeps the best well-conditioned result.
///
/// Each restart draws its initial means from the data (weighted, without
/// replacement), starts every covariance at the weighted global covariance and
/// uses uniform mixture weights. Restarts use streams derived from `seed`, so
/// the outcome does not depend on scheduling.
pub fn em_fit(k: usize, samples: &[WeightedSample], settings: &EmSettings, seed: u64) -> Result<FitOutcome> {
    if k == 0 {
        return Err(CesisError::invalid("mixture order must be positive"));
    }
    check_weights(samples)?;
    let active: Vec<&WeightedSample> = samples.iter().filter(|s| s.v > 0.0).collect();
    if active.len() < k {
        return Ok(FitOutcome::Infeasible { ill_conditioned: 0 });
    }
    let results = map_indexed(settings.execution, settings.restarts, |r| {
        let mut rng = rng::stream(seed, &[tag::RESTART, r as u64]);
        run_restart(k, &active, samples, settings, &mut rng)
    });

    let ill_conditioned = results
        .iter()
        .filter(|r| matches!(r, RestartResult::IllConditioned))
        .count();
    if 2 * ill_conditioned > settings.restarts {
        return Ok(FitOutcome::Infeasible { ill_conditioned });
    }
    let mut best: Option<(GmmParams, f64)> = None;
    for r in results {
        if let RestartResult::Converged { theta, objective } = r {
            // strict comparison keeps the lowest restart index on ties
            if best.as_ref().is_none_or(|(_, b)| objective < *b) {
                best = Some((theta, objective));
            }
        }
    }
    Ok(match best {
        Some((theta, objective)) => FitOutcome::Fitted {
            theta,
            objective,
            ill_conditioned,
        },
        None => FitOutcome::Infeasible { ill_conditioned },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::std_normal_pdf;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ws(x: f64, v: f64) -> WeightedSample {
        WeightedSample { x: vec![x], v }
    }

    fn random_dataset(seed: u64, n: usize) -> Vec<WeightedSample> {
        let mut rng = stream(seed, &[]);
        (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = if i % 3 == 0 { 2.5 + 0.4 * z } else { -1.0 + z };
                let v = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 3.0 };
                ws(x, v)
            })
            .collect()
    }

    #[test]
    fn objective_single_term() {
        let theta = GmmParams::standard(1);
        let samples = vec![ws(0.0, 1.0), ws(1.0, 0.0), ws(-2.0, 0.0), ws(3.0, 0.0)];
        let obj = weighted_ce_objective(&theta, &samples).unwrap();
        let expected = -(1.0f64 / (2.0 * std::f64::consts::PI).sqrt()).ln() / 4.0;
        assert!((obj - expected).abs() < 1e-15);
    }

    #[test]
    fn objective_is_linear_in_weights() {
        let theta = GmmParams::single(vec![0.5], vec![2.0]).unwrap();
        let s = random_dataset(1, 30);
        let doubled: Vec<_> = s.iter().map(|w| ws(w.x[0], 2.0 * w.v)).collect();
        let a = weighted_ce_objective(&theta, &s).unwrap();
        let b = weighted_ce_objective(&theta, &doubled).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn tight_component_scores_better_on_its_point() {
        let samples = vec![ws(1.0, 1.0), ws(5.0, 0.0)];
        let broad = GmmParams::single(vec![1.0], vec![4.0]).unwrap();
        let tight = GmmParams::single(vec![1.0], vec![0.01]).unwrap();
        assert!(weighted_ce_objective(&tight, &samples).unwrap() < weighted_ce_objective(&broad, &samples).unwrap());
    }

    #[test]
    fn zero_weights_rejected() {
        let theta = GmmParams::standard(1);
        let samples = vec![ws(0.0, 0.0), ws(1.0, 0.0)];
        assert!(matches!(weighted_ce_objective(&theta, &samples), Err(CesisError::NoEffectiveSamples)));
        assert!(matches!(em_fit(1, &samples, &EmSettings::default(), 0), Err(CesisError::NoEffectiveSamples)));
    }

    #[test]
    fn responsibilities_cases() {
        assert_eq!(responsibilities(&GmmParams::standard(1), &[3.0]), vec![1.0]);
        let twin = GmmParams::new(vec![0.5, 0.5], vec![vec![1.0], vec![1.0]], vec![vec![2.0], vec![2.0]]).unwrap();
        let g = responsibilities(&twin, &[-0.3]);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);

        let theta = GmmParams::new(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![vec![0.25], vec![4.0]]).unwrap();
        let x = 0.4;
        let a = 0.3 * std_normal_pdf((x + 1.0) / 0.5) / 0.5;
        let b = 0.7 * std_normal_pdf((x - 2.0) / 2.0) / 2.0;
        let g = responsibilities(&theta, &[x]);
        assert!((g[0] - a / (a + b)).abs() < 1e-14);
        assert!((g[1] - b / (a + b)).abs() < 1e-14);
    }

    #[test]
    fn responsibilities_underflow_is_uniform() {
        let theta = GmmParams::new(vec![0.3, 0.7], vec![vec![-1.0], vec![2.0]], vec![vec![1e-4], vec![1e-4]]).unwrap();
        let g = responsibilities(&theta, &[1e3]);
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn single_component_step_is_weighted_mle() {
        let xs = [0.5, -1.2, 3.3, 0.9, 2.0];
        let samples: Vec<_> = xs.iter().map(|&x| ws(x, 1.0)).collect();
        let next = em_step(&GmmParams::standard(1), &samples).unwrap();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((next.mean(0)[0] - mean).abs() < 1e-14);
        assert!((next.covariance(0)[0] - var).abs() < 1e-14);
    }

    #[test]
    fn single_positive_point_degenerates() {
        let samples = vec![ws(1.5, 2.0), ws(0.0, 0.0), ws(3.0, 0.0)];
        let err = em_step(&GmmParams::standard(1), &samples).unwrap_err();
        assert!(matches!(err, CesisError::Degenerate { .. }));
    }

    #[test]
    fn k1_fit_is_analytic() {
        let samples = random_dataset(3, 60);
        for seed in 0..3 {
            let FitOutcome::Fitted { theta, .. } = em_fit(1, &samples, &EmSettings::default(), seed).unwrap() else {
                panic!("k = 1 must be feasible");
            };
            let active: Vec<_> = samples.iter().filter(|s| s.v > 0.0).collect();
            let (mean, cov) = weighted_moments(&active, 1);
            assert!((theta.mean(0)[0] - mean[0]).abs() < 1e-12);
            assert!((theta.covariance(0)[0] - cov[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_separated_mixture() {
        let truth = GmmParams::new(vec![0.4, 0.6], vec![vec![-3.0], vec![3.0]], vec![vec![0.5], vec![1.0]]).unwrap();
        let mut rng = stream(21, &[]);
        let samples: Vec<_> = (0..2000).map(|_| ws(truth.sample(&mut rng)[0], 1.0)).collect();
        let settings = EmSettings {
            rel_tol: 1e-6,
            ..EmSettings::default()
        };
        let FitOutcome::Fitted { theta, .. } = em_fit(2, &samples, &settings, 9).unwrap() else {
            panic!("k = 2 must be feasible");
        };
        let mut means = [theta.mean(0)[0], theta.mean(1)[0]];
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 3.0).abs() < 0.1, "{means:?}");
        assert!((means[1] - 3.0).abs() < 0.1, "{means:?}");
    }

    #[test]
    fn identical_points_are_infeasible() {
        let samples = vec![ws(2.0, 1.0); 20];
        assert!(em_fit(1, &samples, &EmSettings::default(), 0).unwrap().is_infeasible());
        assert!(em_fit(2, &samples, &EmSettings::default(), 0).unwrap().is_infeasible());
    }

    #[test]
    fn too_few_points_for_order() {
        let samples = vec![ws(0.0, 1.0), ws(1.0, 1.0), ws(2.0, 0.0)];
        assert!(em_fit(3, &samples, &EmSettings::default(), 0).unwrap().is_infeasible());
    }

    #[test]
    fn ill_conditioned_restarts_are_counted() {
        // points on a line in 2-D: every covariance is singular
        let samples: Vec<_> = (0..30)
            .map(|i| WeightedSample {
                x: vec![i as f64, 2.0 * i as f64],
                v: 1.0,
            })
            .collect();
        let out = em_fit(1, &samples, &EmSettings::default(), 0).unwrap();
        assert!(matches!(out, FitOutcome::Infeasible { ill_conditioned } if ill_conditioned > 5));
    }

    #[test]
    fn fit_is_deterministic_across_execution_modes() {
        let samples = random_dataset(5, 200);
        let seq = EmSettings {
            execution: Execution::Sequential,
            ..EmSettings::default()
        };
        let par = EmSettings {
            execution: Execution::Parallel,
            ..EmSettings::default()
        };
        assert_eq!(em_fit(2, &samples, &seq, 77).unwrap(), em_fit(2, &samples, &par, 77).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn step_never_increases_objective(seed in 0u64..10_000, k in 1usize..4) {
            let samples = random_dataset(seed, 80);
            let mut rng = stream(seed, &[1]);
            let means = (0..k).map(|_| vec![rng.random::<f64>() * 6.0 - 3.0]).collect();
            let mut theta = GmmParams::new(vec![1.0 / k as f64; k], means, vec![vec![1.5]; k]).unwrap();
            let mut obj = weighted_ce_objective(&theta, &samples).unwrap();
            for _ in 0..25 {
                let Ok(next) = em_step(&theta, &samples) else { break };
                let next_obj = weighted_ce_objective(&next, &samples).unwrap();
                prop_assert!(next_obj <= obj + 1e-10 * obj.abs());
                let asum: f64 = next.alpha().iter().sum();
                prop_assert!((asum - 1.0).abs() < 1e-12);
                theta = next;
                obj = next_obj;
            }
            for s in &samples {
                let g = responsibilities(&theta, &s.x);
                prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn step_is_invariant_to_weight_scale(seed in 0u64..10_000, c in 0.001f64..1000.0) {
            let samples = random_dataset(seed, 50);
            let scaled: Vec<_> = samples.iter().map(|s| ws(s.x[0], c * s.v)).collect();
            let theta = GmmParams::new(vec![0.5, 0.5], vec![vec![-1.0], vec![2.0]], vec![vec![1.0], vec![1.0]]).unwrap();
            let a = em_step(&theta, &samples).unwrap();
            let b = em_step(&theta, &scaled).unwrap();
            for j in 0..2 {
                prop_assert!((a.alpha()[j] - b.alpha()[j]).abs() < 1e-10);
                prop_assert!((a.mean(j)[0] - b.mean(j)[0]).abs() < 1e-10);
                prop_assert!((a.covariance(j)[0] - b.covariance(j)[0]).abs() < 1e-10);
            }
        }
    }
}
