//! Injected task and worker failures must not change results.

mod common;

use std::path::Path;

use common::{fresh, graph_records, iter_spec, map_keys, max_abs_diff, numeric_state, random_graph, write_delta, write_records};
use imr_apps::PageRank;
use imr_core::engine::JobSpec;
use imr_core::faults::{FailureKind, FailurePlan, InjectedFailure};
use imr_core::incr_iter::run_incr_iterative;
use imr_core::iterative::{run_iterative, IterReport, RunOptions};
use imr_core::metrics::MetricEvent;
use imr_core::record::{DeltaRecord, KvRecord};

const PARTITIONS: usize = 4;
const WORKERS: usize = 4;

fn spec() -> JobSpec {
    JobSpec {
        max_iterations: 30,
        tolerance: 0.0,
        ..iter_spec(PARTITIONS, WORKERS)
    }
}

fn failure(kind: FailureKind, iteration: usize, target: usize) -> InjectedFailure {
    InjectedFailure {
        kind,
        iteration,
        partition: target,
        worker: target,
    }
}

fn cases() -> Vec<(&'static str, FailurePlan)> {
    vec![
        ("prime map", FailurePlan::new(vec![failure(FailureKind::PrimeMap, 3, 1)])),
        ("prime reduce", FailurePlan::new(vec![failure(FailureKind::PrimeReduce, 6, 2)])),
        ("worker", FailurePlan::new(vec![failure(FailureKind::Worker, 4, 3)])),
    ]
}

fn recovery_kinds(report: &IterReport) -> Vec<String> {
    report
        .metrics
        .events
        .iter()
        .filter_map(|e| match e {
            MetricEvent::Recovery { kind, .. } => Some(kind.clone()),
            _ => None,
        })
        .collect()
}

fn check_report(name: &str, report: &IterReport, worker_failed: bool) {
    assert!(report.recoveries >= 1, "{name}: no recovery recorded");
    assert!(!recovery_kinds(report).is_empty(), "{name}");
    assert!(report.rows().iter().all(|r| r.checkpoint_bytes > 0), "{name}: iteration without checkpoint");
    if worker_failed {
        assert!(!report.scheduler.is_healthy(3));
        assert!(report.scheduler.colocated(), "{name}: {:?}", report.scheduler);
        assert!(report.colocated_after_recovery);
        assert!(report.scheduler.map_assignment().iter().all(|&w| w != 3));
    }
}

fn graph_input(dir: &Path) -> (Vec<KvRecord>, std::path::PathBuf) {
    let records = graph_records(&random_graph(21, 300, 4), false);
    let input = write_records(&dir.join("g.run"), records.clone());
    (records, input)
}

#[test]
fn iterative_run_survives_each_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, input) = graph_input(tmp.path());
    let app = PageRank::default();
    let clean = tmp.path().join("clean");
    run_iterative(&spec(), &app, std::slice::from_ref(&input), &clean, RunOptions::default()).unwrap();
    let want = numeric_state(&clean);
    for (name, plan) in cases() {
        let dir = tmp.path().join(name.replace(' ', "-"));
        let opts = RunOptions {
            failures: plan,
            ..Default::default()
        };
        let report = run_iterative(&spec(), &app, std::slice::from_ref(&input), &dir, opts).unwrap();
        check_report(name, &report, name == "worker");
        let err = max_abs_diff(&numeric_state(&dir), &want);
        assert!(err <= 1e-12, "{name}: max difference {err}");
    }
}

#[test]
fn incremental_iterative_run_survives_each_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (records, input) = graph_input(tmp.path());
    let app = PageRank::default();
    let snapshot = tmp.path().join("snapshot");
    run_iterative(&spec(), &app, &[input], &snapshot, RunOptions::default()).unwrap();

    // Rewire the out-links of every tenth vertex.
    let mks = map_keys(&records);
    let mut delta = Vec::new();
    for (i, rec) in records.iter().enumerate().step_by(10) {
        let target = (i * 7 + 1) % records.len();
        delta.push(DeltaRecord::delete(rec.clone(), mks[&rec.key]));
        delta.push(DeltaRecord::insert(KvRecord::new(rec.key.clone(), target.to_string()), fresh(i as u64)));
    }
    let delta = write_delta(&tmp.path().join("delta.run"), delta);

    let clean = tmp.path().join("clean");
    run_incr_iterative(&spec(), &app, &snapshot, std::slice::from_ref(&delta), &clean, FailurePlan::default()).unwrap();
    let want = numeric_state(&clean);
    for (name, plan) in cases() {
        let dir = tmp.path().join(name.replace(' ', "-"));
        let report = run_incr_iterative(&spec(), &app, &snapshot, std::slice::from_ref(&delta), &dir, plan).unwrap();
        check_report(name, &report, name == "worker");
        let err = max_abs_diff(&numeric_state(&dir), &want);
        assert!(err <= 1e-12, "{name}: max difference {err}");
    }
}

#[test]
fn losing_the_only_worker_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, input) = graph_input(tmp.path());
    let spec = JobSpec {
        workers: 1,
        ..spec()
    };
    let opts = RunOptions {
        failures: FailurePlan::new(vec![failure(FailureKind::Worker, 2, 0)]),
        ..Default::default()
    };
    assert!(run_iterative(&spec, &PageRank::default(), &[input], tmp.path().join("w"), opts).is_err());
}
