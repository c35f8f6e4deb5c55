//! Experiment harness: configuration files, repeated runs, baselines,
//! quadrature oracles and result files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::allocation::round_to_budget;
use crate::cic_select::KGrid;
use crate::densities::{input_density_by_name, GmmParams, InputDensity};
use crate::driver::{run_ce_sis_with_registry, RunConfig, RunReport};
use crate::error::{CesisError, Result};
use crate::estimators::{cmc_ratio, optimal_allocation_exact, p_cmc, OptimalSisTable};
use crate::fmt::sig6;
use crate::model::{ModelRegistry, OracleModel, SimulationModel};
use crate::parallel::{map_indexed, Execution};
use crate::quadrature::{integrate, QuadSettings};
use crate::rng::{self, derive_seed, tag};
use crate::weighted_em::EmSettings;

/// A full experiment: one run configuration repeated, plus baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub run: RunConfig,
    pub repetitions: usize,
    pub out_dir: Option<PathBuf>,
    pub cmc: bool,
    pub optimal_sis: bool,
    /// Replications per optimal-SIS repetition.
    pub optimal_n: usize,
    /// Distinct inputs per optimal-SIS repetition, as a fraction of `optimal_n`.
    pub optimal_m_ratio: f64,
    /// Reference probability for the CMC ratio.
    pub reference_p: Option<f64>,
    /// Probability the threshold was (or should be) calibrated to.
    pub target_p: Option<f64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.repetitions == 0 {
            return Err(CesisError::config("experiment.repetitions must be at least 1"));
        }
        if self.optimal_n == 0 || !(self.optimal_m_ratio > 0.0 && self.optimal_m_ratio <= 1.0) {
            return Err(CesisError::config("baseline.optimal_n must be positive and baseline.optimal_m_ratio in (0, 1]"));
        }
        if let Some(p) = self.reference_p {
            if !(p > 0.0 && p < 1.0) {
                return Err(CesisError::config("experiment.reference_p must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Seed of repetition `r`.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        derive_seed(self.run.seed, &[tag::REPETITION, r as u64])
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "input",
    "input.dim",
    "threshold",
    "threshold.target_p",
    "seed",
    "execution",
    "budget.n0",
    "budget.nt",
    "budget.tau",
    "budget.schedule",
    "budget.m_ratio",
    "grid.k_min",
    "grid.k_max",
    "em.restarts",
    "em.rel_tol",
    "em.max_iters",
    "em.cond_threshold",
    "driver.min_weighted",
    "init.mean",
    "init.cov",
    "experiment.repetitions",
    "experiment.reference_p",
    "baseline.cmc",
    "baseline.optimal_sis",
    "baseline.optimal_n",
    "baseline.optimal_m_ratio",
];

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CesisError::config(format!("line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(CesisError::config(format!("line {}: unknown key {k:?}", lineno + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CesisError::config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(map)
}

struct Keys(BTreeMap<String, String>);

impl Keys {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CesisError::config(format!("cannot parse {key} = {v:?}")))
            })
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.0
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| CesisError::config(format!("cannot parse {key} entry {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Parses the flat `key = value` configuration format.
///
/// When `threshold` is absent but `threshold.target_p` is given, the threshold
/// is calibrated by quadrature before returning.
pub fn parse_config(text: &str, registry: &ModelRegistry) -> Result<ExperimentSpec> {
    let keys = Keys(parse_kv(text)?);
    let model: String = keys.or("model", "numerical_example".to_string())?;
    let input: String = keys.or("input", "standard_normal".to_string())?;
    let dim: usize = keys.or("input.dim", 1)?;
    if dim == 0 {
        return Err(CesisError::config("input.dim must be positive"));
    }

    let schedule = match keys.list("budget.schedule")? {
        Some(s) => s
            .into_iter()
            .map(|v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(CesisError::config(format!("budget.schedule entries must be positive integers, got {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let n0: usize = keys.or("budget.n0", 600)?;
            let nt: usize = keys.or("budget.nt", 100)?;
            let tau: usize = keys.or("budget.tau", 10)?;
            let mut s = vec![n0];
            s.extend(std::iter::repeat_n(nt, tau));
            s
        }
    };

    let execution = match keys.or("execution", "parallel".to_string())?.as_str() {
        "parallel" => Execution::Parallel,
        "sequential" => Execution::Sequential,
        other => return Err(CesisError::config(format!("execution must be parallel or sequential, got {other:?}"))),
    };

    let defaults = EmSettings::default();
    let em = EmSettings {
        restarts: keys.or("em.restarts", defaults.restarts)?,
        rel_tol: keys.or("em.rel_tol", defaults.rel_tol)?,
        max_iters: keys.or("em.max_iters", defaults.max_iters)?,
        cond_threshold: keys.or("em.cond_threshold", defaults.cond_threshold)?,
        execution,
    };
    let grid = KGrid {
        k_min: keys.or("grid.k_min", 1)?,
        k_max_cap: keys.or("grid.k_max", KGrid::default().k_max_cap)?,
    };

    let mean = keys.list("init.mean")?.unwrap_or_else(|| vec![0.0; dim]);
    let cov = match keys.list("init.cov")? {
        None => identity(dim, 1.0),
        Some(v) if v.len() == 1 => identity(dim, v[0]),
        Some(v) => v,
    };
    if mean.len() != dim || cov.len() != dim * dim {
        return Err(CesisError::config(format!(
            "init.mean needs {dim} entries and init.cov 1 or {} entries",
            dim * dim
        )));
    }
    let initial = GmmParams::single(mean, cov).map_err(|e| CesisError::config(format!("init: {e}")))?;

    let target_p: Option<f64> = keys.get("threshold.target_p")?;
    let threshold = match (keys.get::<f64>("threshold")?, target_p) {
        (Some(l), _) => l,
        (None, Some(p)) => {
            let m = registry.get(&model)?;
            let oracle = m
                .as_oracle()
                .ok_or_else(|| CesisError::config(format!("model {model} has no closed-form exceedance to calibrate against")))?;
            let f = input_density_by_name(&input, dim)?;
            calibrate_l(oracle, f.as_ref(), p)?
        }
        (None, None) => return Err(CesisError::config("either threshold or threshold.target_p is required")),
    };

    let run = RunConfig {
        model,
        input_density: input,
        input_dim: dim,
        threshold,
        schedule,
        m_ratio: keys.or("budget.m_ratio", 0.3)?,
        grid,
        em,
        seed: keys.or("seed", 0)?,
        initial,
        min_weighted: keys.or("driver.min_weighted", 5)?,
        execution,
    };
    let spec = ExperimentSpec {
        run,
        repetitions: keys.or("experiment.repetitions", 1)?,
        out_dir: None,
        cmc: keys.or("baseline.cmc", true)?,
        optimal_sis: keys.or("baseline.optimal_sis", true)?,
        optimal_n: keys.or("baseline.optimal_n", 1000)?,
        optimal_m_ratio: keys.or("baseline.optimal_m_ratio", 0.3)?,
        reference_p: keys.get("experiment.reference_p")?,
        target_p,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_config(path: &Path, registry: &ModelRegistry) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| CesisError::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, registry)
}

fn identity(p: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; p * p];
    for i in 0..p {
        m[i * p + i] = scale;
    }
    m
}

fn oracle_quad() -> QuadSettings {
    QuadSettings {
        abs_tol: 1e-12,
        rel_tol: 1e-11,
        max_intervals: 50_000,
    }
}

/// `P(Y > l) = ∫ f(x) s(x) dx` by adaptive quadrature (one-dimensional inputs).
pub fn oracle_p(model: &dyn OracleModel, f: &dyn InputDensity, l: f64) -> Result<f64> {
    oracle_p_from_fn(f, |x| model.true_s(&[x], l))
}

pub fn oracle_p_from_fn<S: Fn(f64) -> Result<f64>>(f: &dyn InputDensity, s: S) -> Result<f64> {
    let (a, b) = f
        .integration_bounds()
        .ok_or_else(|| CesisError::Oracle("quadrature oracle needs a 1-dimensional input".into()))?;
    integrate(
        |x| {
            let fx = f.pdf(&[x]);
            if fx == 0.0 {
                0.0
            } else {
                s(x).map(|v| fx * v).unwrap_or(f64::NAN)
            }
        },
        a,
        b,
        oracle_quad(),
    )
}

/// Finds `l` with `oracle_p(l)` within `1e-6` relative of `target_p`, by bisection.
pub fn calibrate_l(model: &dyn OracleModel, f: &dyn InputDensity, target_p: f64) -> Result<f64> {
    if !(target_p > 0.0 && target_p < 1.0) {
        return Err(CesisError::config(format!("target probability must lie in (0, 1), got {target_p}")));
    }
    let p = |l: f64| oracle_p(model, f, l);
    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut tries = 0;
    while p(lo)? < target_p {
        lo = lo * 2.0 - 1.0;
        tries += 1;
        if tries > 60 {
            return Err(CesisError::Oracle("could not bracket the target from below".into()));
        }
    }
    while p(hi)? > target_p {
        hi = hi * 2.0 + 1.0;
        tries += 1;
        if tries > 120 {
            return Err(CesisError::Oracle("could not bracket the target from above".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let pm = p(mid)?;
        if (pm - target_p).abs() < 1e-6 * target_p {
            return Ok(mid);
        }
        if pm > target_p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(CesisError::Oracle("bisection did not reach the tolerance".into()))
}

/// `KL(q* ‖ θ) = ∫ q* ln(q*/θ)` over the table support.
pub fn kl_divergence(table: &OptimalSisTable, theta: &GmmParams) -> f64 {
    table.integrate_cells(|x| {
        let q = table.pdf(x);
        if q <= 0.0 {
            0.0
        } else {
            q * (q.ln() - theta.log_pdf(&[x]))
        }
    })
}

/// KL divergence from the optimal density to each iteration's sampling density.
pub fn kl_diag(report: &RunReport, table: &OptimalSisTable) -> Vec<f64> {
    report.iterations.iter().map(|it| kl_divergence(table, &it.theta)).collect()
}

/// Per-repetition result of any method.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub estimate: f64,
    pub n_used: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mean: f64,
    pub std_error: f64,
    pub cmc_ratio: f64,
    pub n_total: u64,
    /// Reference probability the CMC ratio was computed with.
    pub p_ref: f64,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "method,mean,std_error,cmc_ratio,n_total";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method,
            sig6(self.mean),
            sig6(self.std_error),
            sig6(self.cmc_ratio),
            self.n_total
        )
    }
}

/// Sample mean and sample standard deviation (zero for a single value).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Summarizes repetitions: the standard error is the spread of the estimates.
/// `p_ref = None` falls back to the method's own mean.
pub fn summarize(method: &str, results: &[RepetitionResult], p_ref: Option<f64>) -> SummaryRow {
    let estimates: Vec<f64> = results.iter().map(|r| r.estimate).collect();
    let (mean, sd) = mean_and_sd(&estimates);
    let n_total = results.first().map(|r| r.n_used).unwrap_or(0);
    let p_ref = p_ref.unwrap_or(mean);
    SummaryRow {
        method: method.to_string(),
        mean,
        std_error: sd,
        cmc_ratio: cmc_ratio(n_total, sd, p_ref),
        n_total,
        p_ref,
    }
}

/// Resolved model and input density for an experiment.
pub struct Resolved {
    pub model: std::sync::Arc<dyn SimulationModel>,
    pub input: Box<dyn InputDensity>,
}

pub fn resolve(spec: &ExperimentSpec, registry: &ModelRegistry) -> Result<Resolved> {
    Ok(Resolved {
        model: registry.get(&spec.run.model)?,
        input: input_density_by_name(&spec.run.input_density, spec.run.input_dim)?,
    })
}

/// Reference probability for CMC ratios: configured value, else the
/// quadrature oracle when the model has one and inputs are one-dimensional.
pub fn reference_p(spec: &ExperimentSpec, resolved: &Resolved) -> Option<f64> {
    spec.reference_p.or_else(|| {
        let oracle = resolved.model.as_oracle()?;
        oracle_p(oracle, resolved.input.as_ref(), spec.run.threshold)
            .ok()
            .filter(|p| *p > 0.0 && *p < 1.0)
    })
}

/// All CE-SIS repetitions, each with its own derived seed.
pub fn run_repetitions(spec: &ExperimentSpec, registry: &ModelRegistry) -> Result<Vec<RunReport>> {
    spec.validate()?;
    map_indexed(spec.run.execution, spec.repetitions, |r| {
        let mut cfg = spec.run.clone();
        cfg.seed = spec.repetition_seed(r);
        run_ce_sis_with_registry(&cfg, registry).map(|run| run.report)
    })
    .into_iter()
    .collect()
}

/// Crude Monte Carlo with `n` replications at inputs drawn from `f`.
pub fn cmc_repetition(model: &dyn SimulationModel, f: &dyn InputDensity, l: f64, n: u64, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, &[tag::BASELINE, 0]);
    let mut failures = 0u64;
    for _ in 0..n {
        let x = f.sample(&mut rng);
        failures += u64::from(model.simulate(&x, &mut rng)? > l);
    }
    Ok(p_cmc(failures, n))
}

/// One optimal-SIS estimate: inputs from the tabulated optimal density,
/// replications by the exact optimal allocation, rounded to the budget.
pub fn optimal_sis_repetition(
    model: &dyn OracleModel,
    f: &dyn InputDensity,
    table: &OptimalSisTable,
    l: f64,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, &[tag::BASELINE, 1, tag::SAMPLE]);
    let xs: Vec<f64> = (0..m).map(|_| table.sample(&mut rng)).collect();
    let s = xs.iter().map(|&x| model.true_s(&[x], l)).collect::<Result<Vec<_>>>()?;
    let raw = optimal_allocation_exact(&s, n as u64);
    let reps = round_to_budget(&raw, &raw, n);
    let mut total = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let mut rrng = rng::stream(seed, &[tag::BASELINE, 1, tag::RECORD, i as u64]);
        let mut failures = 0u32;
        for _ in 0..reps[i] {
            failures += u32::from(model.simulate(&[x], &mut rrng)? > l);
        }
        let w = f.pdf(&[x]) / table.pdf(x);
        total += failures as f64 / reps[i] as f64 * w;
    }
    Ok(total / m as f64)
}

pub fn cmc_baseline(spec: &ExperimentSpec, resolved: &Resolved) -> Result<Vec<RepetitionResult>> {
    let n = spec.run.total_budget();
    map_indexed(spec.run.execution, spec.repetitions, |r| {
        let seed = derive_seed(spec.repetition_seed(r), &[tag::BASELINE, 0]);
        cmc_repetition(resolved.model.as_ref(), resolved.input.as_ref(), spec.run.threshold, n, seed).map(
            |estimate| RepetitionResult {
                repetition: r,
                estimate,
                n_used: n,
            },
        )
    })
    .into_iter()
    .collect()
}

pub fn optimal_sis_baseline(spec: &ExperimentSpec, resolved: &Resolved) -> Result<Vec<RepetitionResult>> {
    let oracle = resolved.model.as_oracle().ok_or_else(|| {
        CesisError::config(format!("optimal-SIS baseline needs a model with closed-form exceedance; {} has none", spec.run.model))
    })?;
    if spec.run.input_dim != 1 {
        return Err(CesisError::config("optimal-SIS baseline is one-dimensional only"));
    }
    let n = spec.optimal_n;
    let m = ((spec.optimal_m_ratio * n as f64).round() as usize).clamp(1, n);
    let table = OptimalSisTable::build(oracle, resolved.input.as_ref(), spec.run.threshold, n as u64)?;
    map_indexed(spec.run.execution, spec.repetitions, |r| {
        let seed = derive_seed(spec.repetition_seed(r), &[tag::BASELINE, 1]);
        optimal_sis_repetition(oracle, resolved.input.as_ref(), &table, spec.run.threshold, n, m, seed).map(
            |estimate| RepetitionResult {
                repetition: r,
                estimate,
                n_used: n as u64,
            },
        )
    })
    .into_iter()
    .collect()
}

pub fn ce_sis_results(reports: &[RunReport]) -> Vec<RepetitionResult> {
    reports
        .iter()
        .enumerate()
        .map(|(r, rep)| RepetitionResult {
            repetition: r,
            estimate: rep.final_estimate,
            n_used: rep.total_simulations,
        })
        .collect()
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{header}")?;
    }
    for l in lines {
        writeln!(file, "{l}")?;
    }
    Ok(())
}

fn write_results(out: &Path, method: &str, results: &[RepetitionResult], fresh: bool) -> Result<()> {
    let path = out.join("results.csv");
    if fresh && path.exists() {
        fs::remove_file(&path)?;
    }
    let lines: Vec<String> = results
        .iter()
        .map(|r| format!("{method},{},{},{}", r.repetition, sig6(r.estimate), r.n_used))
        .collect();
    append_lines(&path, "method,repetition,estimate,n_used", &lines)
}

/// Runs the CE-SIS repetitions and writes `summary.csv`, `results.csv`,
/// `iterations.csv` and one JSON report per repetition under `out`.
pub fn cmd_run(spec: &ExperimentSpec, registry: &ModelRegistry, out: &Path) -> Result<SummaryRow> {
    let resolved = resolve(spec, registry)?;
    let reports = run_repetitions(spec, registry)?;
    let results = ce_sis_results(&reports);
    let row = summarize("ce_sis", &results, reference_p(spec, &resolved));

    fs::create_dir_all(out.join("reports"))?;
    fs::write(out.join("summary.csv"), format!("{}\n{}\n", SummaryRow::CSV_HEADER, row.csv_line()))?;
    write_results(out, "ce_sis", &results, true)?;
    let mut iterations = String::from("repetition,iteration,k_star,p_bar,sims_used\n");
    for (r, rep) in reports.iter().enumerate() {
        for line in rep.iteration_csv().lines().skip(1) {
            iterations.push_str(&format!("{r},{line}\n"));
        }
        fs::write(out.join("reports").join(format!("rep_{r:04}.json")), rep.to_json()?)?;
    }
    fs::write(out.join("iterations.csv"), iterations)?;
    Ok(row)
}

/// Runs the enabled baselines and appends their rows to `summary.csv` and
/// `results.csv` under `out`.
pub fn cmd_baselines(spec: &ExperimentSpec, registry: &ModelRegistry, out: &Path) -> Result<Vec<SummaryRow>> {
    spec.validate()?;
    let resolved = resolve(spec, registry)?;
    if spec.optimal_sis && resolved.model.as_oracle().is_none() {
        return Err(CesisError::config("optimal-SIS baseline requested for a model without an oracle"));
    }
    let p_ref = reference_p(spec, &resolved);
    let mut rows = Vec::new();
    fs::create_dir_all(out)?;
    if spec.cmc {
        let res = cmc_baseline(spec, &resolved)?;
        write_results(out, "cmc", &res, false)?;
        rows.push(summarize("cmc", &res, p_ref));
    }
    if spec.optimal_sis {
        let res = optimal_sis_baseline(spec, &resolved)?;
        write_results(out, "optimal_sis", &res, false)?;
        rows.push(summarize("optimal_sis", &res, p_ref));
    }
    let lines: Vec<String> = rows.iter().map(SummaryRow::csv_line).collect();
    append_lines(&out.join("summary.csv"), SummaryRow::CSV_HEADER, &lines)?;
    Ok(rows)
}
