//! One-step incremental refresh: apply a delta input to a job whose
//! MRBGraph and per-K2 results were preserved by an earlier run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::engine::{
    accumulator_of, callback_error, fold, push_map_outputs, reduce_values, run_map_tasks, run_reduce_tasks, JobDirs,
    JobMeta, JobReport, JobSpec, MapReduceApp, ReducerKind,
};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{MetricEvent, MetricsLog};
use crate::mrbg::{MrbgStore, StoreCounters};
use crate::pool::{TaskKind, WorkerPool};
use crate::record::{show, DeltaRecord, MrbgEdge, Sign};
use crate::result::PartitionResults;
use crate::run::RunReader;
use crate::shuffle::{shuffle_sort, RunSource};

#[derive(Default)]
struct PartitionRefresh {
    invocations: u64,
    retractions: u64,
    output_records: u64,
    counters: StoreCounters,
}

/// Applies `deltas` (runs of [`DeltaRecord`]) to the job in `workdir` and
/// rewrites its output. Only reduce instances whose K2 received a delta
/// edge are recomputed.
pub fn refresh(spec: &JobSpec, app: &dyn MapReduceApp, deltas: &[PathBuf], workdir: impl AsRef<Path>) -> Result<JobReport> {
    spec.validate()?;
    let dirs = JobDirs::new(workdir);
    let mut meta = JobMeta::load(&dirs.meta_path())?;
    if meta.app != app.name() {
        return Err(Error::InvalidSpec(format!(
            "job was created by app {}, not {}",
            meta.app,
            app.name()
        )));
    }
    if meta.partitions != spec.partitions {
        return Err(Error::InvalidSpec(format!(
            "job has {} partitions; refresh requested {}",
            meta.partitions, spec.partitions
        )));
    }
    let reducer = meta.reducer;
    if reducer == ReducerKind::Accumulator {
        accumulator_of(app)?;
    }
    let pool = WorkerPool::new(spec.workers);
    let mut metrics = MetricsLog::default();
    let stage = format!("delta{}", meta.epoch + 1);
    let spill = dirs.spill_dir().join(&stage);

    let started = Instant::now();
    let tasks: Vec<(usize, PathBuf)> = deltas.iter().cloned().enumerate().collect();
    let (partitions, map_invocations, edges, bytes) =
        run_map_tasks(&pool, spec, &spill, &stage, 0, tasks, |_, (i, path), buf| {
            let reader = RunReader::<DeltaRecord>::open(&path)?;
            let mut n = 0;
            for rec in reader.iter()? {
                let rec = rec?;
                if rec.sign == Sign::Delete && reducer == ReducerKind::Accumulator {
                    return Err(Error::Contract(format!(
                        "accumulator reduce accepts insert-only deltas; got a delete of {}",
                        show(&rec.record.key)
                    )));
                }
                let outputs = app
                    .map(&rec.record.key, &rec.record.value)
                    .map_err(|e| callback_error(TaskKind::Map, i, 0, &rec.record.key, e))?;
                push_map_outputs(buf, outputs, rec.map_key, rec.sign == Sign::Delete, true)?;
                n += 1;
            }
            Ok(n)
        })?;
    metrics.stage(app.name(), "delta-map", started, map_invocations, edges, bytes);

    let started = Instant::now();
    let runs = run_reduce_tasks(&pool, 0, partitions.into_iter().enumerate().collect(), |_, (p, sources)| match reducer {
        ReducerKind::General => refresh_partition(spec, app, &dirs, p, sources),
        ReducerKind::Accumulator => accumulate_partition(app, &dirs, p, sources),
    })?;
    let mut report = JobReport {
        outputs: (0..spec.partitions).map(|p| dirs.output_part(p)).collect(),
        map_invocations,
        shuffled_edges: edges,
        shuffled_bytes: bytes,
        ..Default::default()
    };
    for (p, r) in runs.into_iter().enumerate() {
        report.reduce_invocations += r.invocations;
        report.retractions += r.retractions;
        report.output_records += r.output_records;
        if reducer == ReducerKind::General {
            metrics.push(MetricEvent::Store {
                partition: p,
                counters: r.counters,
            });
        }
    }
    metrics.stage(app.name(), "delta-reduce", started, edges, report.reduce_instances(), bytes);
    if spill.exists() {
        fs::remove_dir_all(&spill).at(&spill)?;
    }
    meta.epoch += 1;
    meta.save(&dirs.meta_path())?;
    metrics.append_jsonl(dirs.metrics_path())?;
    report.metrics = metrics;
    Ok(report)
}

fn collect_groups(sources: Vec<RunSource>) -> Result<Vec<(Vec<u8>, Vec<MrbgEdge>)>> {
    shuffle_sort(sources)?.collect()
}

fn refresh_partition(
    spec: &JobSpec,
    app: &dyn MapReduceApp,
    dirs: &JobDirs,
    p: usize,
    sources: Vec<RunSource>,
) -> Result<PartitionRefresh> {
    let groups = collect_groups(sources)?;
    let mut out = PartitionRefresh::default();
    if groups.is_empty() {
        return Ok(out);
    }
    let mut store = MrbgStore::open(dirs.mrbg_dir(p), spec.store)?;
    let mut results = PartitionResults::load(dirs.results_part(p))?;
    store.merge_delta(&groups, |k2, chunk| {
        if chunk.is_empty() {
            if results.by_k2.remove(k2).is_some() {
                out.retractions += 1;
            }
        } else {
            let outputs = reduce_values(app, ReducerKind::General, p, k2, &chunk.values())?;
            out.invocations += 1;
            results.by_k2.insert(k2.to_vec(), outputs);
        }
        Ok(())
    })?;
    out.counters = store.take_counters();
    results.save(dirs.results_part(p))?;
    let flat = results.flatten();
    out.output_records = flat.len() as u64;
    crate::result::write_output(dirs.output_part(p), flat)?;
    Ok(out)
}

fn accumulate_partition(app: &dyn MapReduceApp, dirs: &JobDirs, p: usize, sources: Vec<RunSource>) -> Result<PartitionRefresh> {
    let groups = collect_groups(sources)?;
    let mut out = PartitionRefresh::default();
    if groups.is_empty() {
        return Ok(out);
    }
    let acc = accumulator_of(app)?;
    let mut results = PartitionResults::load(dirs.results_part(p))?;
    for (k2, edges) in groups {
        let values: Vec<&[u8]> = edges.iter().filter_map(|e| e.value.as_value()).collect();
        let prev = match results.by_k2.get(&k2).and_then(|o| o.first()) {
            Some((_, v)) => v.clone(),
            None => acc.identity(),
        };
        let folded = fold(acc, prev, &values).map_err(|e| callback_error(TaskKind::Reduce, p, 0, &k2, e))?;
        out.invocations += 1;
        results.by_k2.insert(k2.clone(), vec![(k2, folded)]);
    }
    results.save(dirs.results_part(p))?;
    let flat = results.flatten();
    out.output_records = flat.len() as u64;
    crate::result::write_output(dirs.output_part(p), flat)?;
    Ok(out)
}
