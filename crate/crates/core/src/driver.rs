//! The CE-SIS outer loop.
//!
//! Iteration 0 explores with the initial density and one replication per
//! input. Every later iteration refits the importance density on all data
//! gathered so far (order chosen by CIC), draws new inputs from it, spreads
//! the replication budget over them and appends the outcomes.

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, diagnostics, AllocationDiagnostics, AllocationInput};
use crate::cic_select::{select_k, CicTrace, KGrid};
use crate::densities::{input_density_by_name, GmmParams, InputDensity};
use crate::error::{CesisError, Result};
use crate::estimators::{Batch, Dataset, SimRecord};
use crate::fmt::sig6;
use crate::model::{ModelRegistry, SimulationModel};
use crate::parallel::{map_indexed, Execution};
use crate::rng::{self, derive_seed, tag};
use crate::weighted_em::EmSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    pub input_density: String,
    pub input_dim: usize,
    /// Failure threshold `l`: a replication fails when `Y > l`.
    pub threshold: f64,
    /// Replication budget `n^(t)` for `t = 0..=τ`.
    pub schedule: Vec<usize>,
    /// `m^(t) / n^(t)` for `t >= 1`.
    pub m_ratio: f64,
    pub grid: KGrid,
    pub em: EmSettings,
    pub seed: u64,
    pub initial: GmmParams,
    /// Minimum number of records with `ĥ > 0` before a refit is attempted.
    pub min_weighted: usize,
    pub execution: Execution,
}

impl RunConfig {
    /// Numerical-example defaults: `n^(0) = 600`, ten iterations of 100.
    pub fn numerical_example(threshold: f64, seed: u64) -> Self {
        let mut schedule = vec![600];
        schedule.extend(std::iter::repeat_n(100, 10));
        Self {
            model: "numerical_example".into(),
            input_density: "standard_normal".into(),
            input_dim: 1,
            threshold,
            schedule,
            m_ratio: 0.3,
            grid: KGrid::default(),
            em: EmSettings::default(),
            seed,
            initial: GmmParams::standard(1),
            min_weighted: 5,
            execution: Execution::default(),
        }
    }

    /// `n = Σ_t n^(t)`.
    pub fn total_budget(&self) -> u64 {
        self.schedule.iter().map(|&n| n as u64).sum()
    }

    pub fn tau(&self) -> usize {
        self.schedule.len().saturating_sub(1)
    }

    /// Number of distinct inputs drawn at iteration `t`.
    pub fn m_at(&self, t: usize) -> usize {
        let n = self.schedule[t];
        if t == 0 {
            n
        } else {
            ((self.m_ratio * n as f64).round() as usize).clamp(1, n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(CesisError::config("budget schedule must be non-empty with positive entries"));
        }
        if !(self.m_ratio > 0.0 && self.m_ratio <= 1.0) {
            return Err(CesisError::config(format!("budget.m_ratio must lie in (0, 1], got {}", self.m_ratio)));
        }
        if !self.threshold.is_finite() {
            return Err(CesisError::config("threshold must be finite"));
        }
        if self.input_dim == 0 || self.initial.dim() != self.input_dim {
            return Err(CesisError::config(format!(
                "initial density has dimension {}, inputs have {}",
                self.initial.dim(),
                self.input_dim
            )));
        }
        self.grid.validate()?;
        self.em.validate()
    }
}

/// Why an iteration reused the previous density instead of refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum FallbackEvent {
    TooFewWeighted { weighted: usize, required: usize },
    SelectionInfeasible,
}

/// Decision taken before refitting on the aggregated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackDecision {
    Refit,
    ReusePrevious { weighted: usize },
}

/// Refuses to refit while fewer than `min_weighted` records carry weight.
pub fn zero_failure_fallback(dataset: &Dataset, min_weighted: usize) -> FallbackDecision {
    let weighted = dataset.positive_weight_count();
    if weighted < min_weighted {
        FallbackDecision::ReusePrevious { weighted }
    } else {
        FallbackDecision::Refit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub n_t: usize,
    pub m_t: usize,
    pub k_star: Option<usize>,
    pub trace: Option<CicTrace>,
    /// Density the iteration's inputs were drawn from.
    pub theta: GmmParams,
    /// Aggregated estimate after this iteration.
    pub p_bar: f64,
    pub sims_used: u64,
    pub fallback: Option<FallbackEvent>,
    pub allocation: Option<AllocationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub threshold: f64,
    pub n_total: u64,
    pub iterations: Vec<IterationReport>,
    pub final_estimate: f64,
    pub total_simulations: u64,
}

impl RunReport {
    pub const ITERATION_CSV_HEADER: &'static str = "iteration,k_star,p_bar,sims_used";

    /// Compact per-iteration CSV.
    pub fn iteration_csv(&self) -> String {
        let mut out = String::from(Self::ITERATION_CSV_HEADER);
        out.push('\n');
        for it in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{}\n",
                it.iteration,
                it.k_star.map(|k| k.to_string()).unwrap_or_default(),
                sig6(it.p_bar),
                it.sims_used
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A finished run together with every record it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CeSisRun {
    pub report: RunReport,
    pub dataset: Dataset,
}

/// Runs CE-SIS against an explicit model and input density.
pub struct CeSisRunner<'a> {
    model: &'a dyn SimulationModel,
    input: &'a dyn InputDensity,
    config: &'a RunConfig,
}

impl<'a> CeSisRunner<'a> {
    pub fn new(model: &'a dyn SimulationModel, input: &'a dyn InputDensity, config: &'a RunConfig) -> Result<Self> {
        config.validate()?;
        if model.input_dimension() != config.input_dim || input.dimension() != config.input_dim {
            return Err(CesisError::config(format!(
                "dimension mismatch: model {}, input density {}, config {}",
                model.input_dimension(),
                input.dimension(),
                config.input_dim
            )));
        }
        Ok(Self { model, input, config })
    }

    pub fn run(&self) -> Result<CeSisRun> {
        let cfg = self.config;
        let n_total = cfg.total_budget();
        let mut dataset = Dataset::new();
        let mut report = RunReport {
            seed: cfg.seed,
            threshold: cfg.threshold,
            n_total,
            iterations: Vec::with_capacity(cfg.schedule.len()),
            final_estimate: 0.0,
            total_simulations: 0,
        };
        let mut theta = cfg.initial.clone();

        for t in 0..=cfg.tau() {
            let n_t = cfg.schedule[t];
            let m_t = cfg.m_at(t);
            let mut k_star = None;
            let mut trace = None;
            let mut fallback = None;

            if t > 0 {
                match zero_failure_fallback(&dataset, cfg.min_weighted) {
                    FallbackDecision::ReusePrevious { weighted } => {
                        fallback = Some(FallbackEvent::TooFewWeighted {
                            weighted,
                            required: cfg.min_weighted,
                        });
                    }
                    FallbackDecision::Refit => {
                        let seed = derive_seed(cfg.seed, &[tag::ITERATION, t as u64, tag::SELECT]);
                        match select_k(&dataset, &cfg.grid, &cfg.em, seed) {
                            Ok(sel) => {
                                k_star = Some(sel.k_star);
                                trace = Some(sel.trace);
                                theta = sel.theta;
                            }
                            Err(CesisError::Selection) => fallback = Some(FallbackEvent::SelectionInfeasible),
                            Err(e) => return Err(e),
                        }
                    }
                }
            }

            let mut sample_rng = rng::stream(cfg.seed, &[tag::ITERATION, t as u64, tag::SAMPLE]);
            let xs: Vec<Vec<f64>> = (0..m_t).map(|_| theta.sample(&mut sample_rng)).collect();
            let weights: Vec<f64> = xs
                .iter()
                .map(|x| (self.input.log_pdf(x) - theta.log_pdf(x)).exp())
                .collect();

            let (replications, alloc_diag) = if t == 0 {
                (vec![1usize; m_t], None)
            } else {
                let input = AllocationInput {
                    weights: &weights,
                    p_ref: dataset.p_bar(),
                    n_t,
                };
                let n = allocate(&input)?;
                let diag = diagnostics(&input, &n);
                (n, Some(diag))
            };

            let outcomes = map_indexed(cfg.execution, m_t, |i| {
                let mut rng = rng::stream(cfg.seed, &[tag::ITERATION, t as u64, tag::RECORD, i as u64]);
                let mut failures = 0u32;
                for _ in 0..replications[i] {
                    let y = self.model.simulate(&xs[i], &mut rng)?;
                    failures += u32::from(y > cfg.threshold);
                }
                Ok(failures)
            });

            let mut records = Vec::with_capacity(m_t);
            for (i, outcome) in outcomes.into_iter().enumerate() {
                let failures = match outcome {
                    Ok(f) => f,
                    Err(e) => {
                        let e: CesisError = e;
                        report.final_estimate = dataset.p_bar();
                        return Err(CesisError::Simulation {
                            iteration: t,
                            message: e.to_string(),
                            partial: Box::new(report),
                        });
                    }
                };
                records.push(SimRecord::new(
                    xs[i].clone(),
                    t,
                    weights[i],
                    replications[i] as u32,
                    failures,
                    n_total,
                )?);
            }
            let sims_used: u64 = replications.iter().map(|&n| n as u64).sum();
            dataset.push(Batch {
                iteration: t,
                theta: theta.clone(),
                records,
            })?;
            let p_bar = dataset.p_bar();
            report.total_simulations += sims_used;
            report.iterations.push(IterationReport {
                iteration: t,
                n_t,
                m_t,
                k_star,
                trace,
                theta: theta.clone(),
                p_bar,
                sims_used,
                fallback,
                allocation: alloc_diag,
            });
        }
        report.final_estimate = dataset.p_bar();
        Ok(CeSisRun { report, dataset })
    }
}

/// Runs CE-SIS with the model and input density named in `config`.
pub fn run_ce_sis(config: &RunConfig) -> Result<RunReport> {
    run_ce_sis_with_registry(config, &ModelRegistry::default()).map(|r| r.report)
}

pub fn run_ce_sis_with_registry(config: &RunConfig, registry: &ModelRegistry) -> Result<CeSisRun> {
    let model = registry.get(&config.model)?;
    let input = input_density_by_name(&config.input_density, config.input_dim)?;
    CeSisRunner::new(model.as_ref(), input.as_ref(), config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::StandardNormalDensity;
    use crate::model::NumericalExample;
    use crate::rng::Stream;

    const L: f64 = 9.150_979_8;

    fn small_config(seed: u64) -> RunConfig {
        let mut c = RunConfig::numerical_example(L, seed);
        c.schedule = vec![300, 60, 60, 60];
        c
    }

    #[test]
    fn budget_is_respected() {
        let run = run_ce_sis_with_registry(&small_config(3), &ModelRegistry::default()).unwrap();
        assert_eq!(run.report.total_simulations, 480);
        for (it, b) in run.report.iterations.iter().zip(run.dataset.batches()) {
            assert_eq!(it.sims_used, it.n_t as u64);
            assert_eq!(b.records.len(), it.m_t);
            let n: u64 = b.records.iter().map(|r| r.n as u64).sum();
            assert_eq!(n, it.n_t as u64);
        }
        assert_eq!(run.report.iterations[1].m_t, 18);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = run_ce_sis(&small_config(42)).unwrap();
        let b = run_ce_sis(&small_config(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let mut seq = small_config(42);
        seq.execution = Execution::Sequential;
        seq.em.execution = Execution::Sequential;
        assert_eq!(run_ce_sis(&seq).unwrap(), a);
    }

    #[test]
    fn tau_zero_with_f_is_crude_monte_carlo() {
        let mut c = small_config(9);
        c.schedule = vec![2000];
        c.threshold = 1.0;
        let run = run_ce_sis_with_registry(&c, &ModelRegistry::default()).unwrap();
        let recs = &run.dataset.batches()[0].records;
        assert!(recs.iter().all(|r| r.n == 1 && (r.w - 1.0).abs() < 1e-12));
        let fails: u32 = recs.iter().map(|r| r.failures).sum();
        assert!((run.report.final_estimate - fails as f64 / 2000.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_threshold() {
        let mut d = Dataset::new();
        let records = (0..10)
            .map(|i| SimRecord::new(vec![i as f64], 0, 1.0, 1, u32::from(i < 4), 100).unwrap())
            .collect();
        d.push(Batch {
            iteration: 0,
            theta: GmmParams::standard(1),
            records,
        })
        .unwrap();
        assert_eq!(zero_failure_fallback(&d, 5), FallbackDecision::ReusePrevious { weighted: 4 });
        assert_eq!(zero_failure_fallback(&d, 4), FallbackDecision::Refit);
    }

    #[test]
    fn no_failures_reuses_initial_density() {
        let mut c = small_config(1);
        c.threshold = 1e9;
        let run = run_ce_sis(&c).unwrap();
        assert_eq!(run.final_estimate, 0.0);
        for it in &run.iterations[1..] {
            assert_eq!(it.theta, GmmParams::standard(1));
            assert!(matches!(it.fallback, Some(FallbackEvent::TooFewWeighted { weighted: 0, .. })));
        }
    }

    #[test]
    fn earlier_records_are_never_modified() {
        let cfg = small_config(5);
        let full = run_ce_sis_with_registry(&cfg, &ModelRegistry::default()).unwrap();
        let mut shorter = cfg.clone();
        shorter.schedule.truncate(2);
        let partial = run_ce_sis_with_registry(&shorter, &ModelRegistry::default()).unwrap();
        // v depends on the total budget, so compare the budget-free fields
        for (a, b) in partial.dataset.batches().iter().zip(full.dataset.batches()) {
            assert_eq!(a.theta, b.theta);
            for (ra, rb) in a.records.iter().zip(&b.records) {
                assert_eq!((&ra.x, ra.w, ra.n, ra.failures), (&rb.x, rb.w, rb.n, rb.failures));
            }
        }
    }

    struct Exploding;
    impl SimulationModel for Exploding {
        fn name(&self) -> &str {
            "exploding"
        }
        fn input_dimension(&self) -> usize {
            1
        }
        fn simulate(&self, x: &[f64], _rng: &mut Stream) -> Result<f64> {
            if x[0] > 1.5 {
                Err(CesisError::invalid("simulator crashed"))
            } else {
                Ok(x[0])
            }
        }
    }

    #[test]
    fn simulation_failure_returns_partial_report() {
        let cfg = small_config(2);
        let f = StandardNormalDensity::new(1);
        let err = CeSisRunner::new(&Exploding, &f, &cfg).unwrap().run().unwrap_err();
        assert!(matches!(err, CesisError::Simulation { iteration: 0, .. }));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0);
        c.m_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.schedule.push(0);
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.initial = GmmParams::standard(2);
        assert!(c.validate().is_err());
        let f = StandardNormalDensity::new(2);
        assert!(CeSisRunner::new(&NumericalExample, &f, &small_config(0)).is_err());
    }
}
