use std::fs;

use cesis::driver::run_ce_sis_with_registry;
use cesis::harness::{self, cmd_baselines, cmd_run, parse_config};
use cesis::model::ModelRegistry;
use cesis::parallel::Execution;
use cesis::{run_ce_sis, RunConfig, RunReport};

const CANONICAL: &str = include_str!("../../../configs/numerical_example.conf");
const L: f64 = 9.150_979_800_093_381;

fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::numerical_example(L, seed);
    c.schedule = vec![300, 60, 60, 60];
    c.em.restarts = 3;
    c
}

#[test]
fn same_seed_same_report() {
    let a = run_ce_sis(&small_config(11)).unwrap();
    let b = run_ce_sis(&small_config(11)).unwrap();
    assert_eq!(a, b);
    let c = run_ce_sis(&small_config(12)).unwrap();
    assert_ne!(a.final_estimate, c.final_estimate);
}

#[test]
fn sequential_and_parallel_agree() {
    let mut seq = small_config(5);
    seq.execution = Execution::Sequential;
    seq.em.execution = Execution::Sequential;
    let mut par = small_config(5);
    par.execution = Execution::Parallel;
    par.em.execution = Execution::Parallel;
    assert_eq!(run_ce_sis(&seq).unwrap(), run_ce_sis(&par).unwrap());
}

#[test]
fn budget_is_spent_exactly() {
    let cfg = small_config(3);
    let report = run_ce_sis(&cfg).unwrap();
    assert_eq!(report.total_simulations, cfg.total_budget());
    for (it, &n_t) in report.iterations.iter().zip(&cfg.schedule) {
        assert_eq!(it.sims_used, n_t as u64);
        assert_eq!(it.m_t, cfg.m_at(it.iteration));
    }
    assert_eq!(report.final_estimate, report.iterations.last().unwrap().p_bar);
}

#[test]
fn dataset_keeps_every_batch() {
    let cfg = small_config(8);
    let run = run_ce_sis_with_registry(&cfg, &ModelRegistry::default()).unwrap();
    assert_eq!(run.dataset.batches().len(), cfg.schedule.len());
    let m: usize = (0..cfg.schedule.len()).map(|t| cfg.m_at(t)).sum();
    assert_eq!(run.dataset.total_records(), m);
    assert_eq!(run.dataset.p_bar(), run.report.final_estimate);
}

#[test]
fn report_json_round_trip() {
    let mut cfg = small_config(21);
    cfg.schedule = vec![600, 100, 100];
    let report = run_ce_sis(&cfg).unwrap();
    assert!(report.iterations.iter().any(|it| it.trace.is_some()));
    let back = RunReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(report, back);
}

#[test]
fn unknown_model_is_a_config_error() {
    let mut cfg = small_config(1);
    cfg.model = "nope".into();
    assert!(run_ce_sis(&cfg).unwrap_err().is_config());
}

#[test]
fn run_and_baseline_outputs() {
    let registry = ModelRegistry::default();
    let mut spec = parse_config(CANONICAL, &registry).unwrap();
    spec.repetitions = 3;
    spec.run.schedule = vec![300, 60, 60];
    spec.optimal_n = 200;
    let dir = tempfile::tempdir().unwrap();

    let row = cmd_run(&spec, &registry, dir.path()).unwrap();
    assert_eq!(row.n_total, 420);
    assert!(row.mean > 0.0 && row.mean < 0.1);
    let rows = cmd_baselines(&spec, &registry, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], harness::SummaryRow::CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("ce_sis,"));
    assert!(lines[2].starts_with("cmc,"));
    assert!(lines[3].starts_with("optimal_sis,"));

    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3 * 3);
    let iterations = fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    assert_eq!(iterations.lines().count(), 1 + 3 * 3);
    for r in 0..3 {
        let text = fs::read_to_string(dir.path().join(format!("reports/rep_{r:04}.json"))).unwrap();
        let report = RunReport::from_json(&text).unwrap();
        assert_eq!(report.seed, spec.repetition_seed(r));
    }
}
