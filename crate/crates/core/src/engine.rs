//! Job specification, application callbacks and the plain MapReduce run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::metrics::MetricsLog;
use crate::mrbg::{Chunk, MrbgStore, StoreConfig};
use crate::partition::Partitioner;
use crate::pool::{TaskId, TaskKind, WorkerPool};
use crate::record::{show, KvRecord, MapKey, MrbgEdge};
use crate::result::{Outputs, PartitionResults};
use crate::run::RunReader;
use crate::shuffle::{collect_partitions, shuffle_sort, MapOutput, MapOutputBuffer, RunSource, DEFAULT_SPILL_BUDGET};

/// A one-step MapReduce application.
pub trait MapReduceApp: Send + Sync {
    fn name(&self) -> &str;

    /// Must be deterministic: deleting an input replays `map` to find the
    /// edges it produced. When the MRBGraph is preserved, one invocation
    /// may emit each K2 at most once.
    fn map(&self, key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>>;

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs>;

    /// Present if the reduce is a fold that can absorb new values without
    /// revisiting old ones.
    fn accumulator(&self) -> Option<&dyn Accumulator> {
        None
    }
}

/// `reduce(k, V) = fold(accumulate, identity, V)`, with `accumulate`
/// associative and commutative. The output for K2 is `(K2, folded)`.
pub trait Accumulator: Send + Sync {
    fn identity(&self) -> Vec<u8>;
    fn accumulate(&self, acc: &[u8], value: &[u8]) -> anyhow::Result<Vec<u8>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    #[default]
    General,
    Accumulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub partitions: usize,
    pub workers: usize,
    pub reducer: ReducerKind,
    /// Keep the MRBGraph and per-K2 results for later incremental runs.
    pub preserve_mrbg: bool,
    pub store: StoreConfig,
    pub spill_budget: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Change propagation threshold; `None` propagates every change.
    pub filter_threshold: Option<f64>,
    /// Fraction of changed state above which MRBGraph maintenance is
    /// switched off for the rest of the job.
    pub auto_off_threshold: f64,
    /// Stop with an error once the L1 delta has grown this many
    /// consecutive iterations.
    pub divergence_patience: Option<usize>,
    /// Checkpoint every k iterations; 0 disables checkpointing.
    pub checkpoint_interval: usize,
}

impl Default for JobSpec {
    fn default() -> Self {
        JobSpec {
            partitions: 4,
            workers: 4,
            reducer: ReducerKind::General,
            preserve_mrbg: true,
            store: StoreConfig::default(),
            spill_budget: DEFAULT_SPILL_BUDGET,
            max_iterations: 50,
            tolerance: 1e-6,
            filter_threshold: None,
            auto_off_threshold: 0.5,
            divergence_patience: None,
            checkpoint_interval: 1,
        }
    }
}

impl JobSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.partitions == 0 {
            return bad("partitions must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.auto_off_threshold > 0.0 && self.auto_off_threshold <= 1.0) {
            return bad(format!("auto-off threshold {} outside (0, 1]", self.auto_off_threshold));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return bad(format!("tolerance {} must be finite and non-negative", self.tolerance));
        }
        if let Some(t) = self.filter_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("filter threshold {t} must be finite and non-negative"));
            }
        }
        if self.max_iterations == 0 {
            return bad("max iterations must be at least 1".into());
        }
        if self.store.read_cache_size == 0 {
            return bad("read cache size must be positive".into());
        }
        if self.store.gap_threshold >= self.store.read_cache_size {
            return bad(format!(
                "gap threshold {} must be below read cache size {}",
                self.store.gap_threshold, self.store.read_cache_size
            ));
        }
        if self.divergence_patience == Some(0) {
            return bad("divergence patience must be at least 1".into());
        }
        Ok(())
    }
}

/// Directory layout of one job's working directory.
#[derive(Debug, Clone)]
pub struct JobDirs {
    pub root: PathBuf,
}

impl JobDirs {
    pub fn new(root: impl AsRef<Path>) -> Self {
        JobDirs {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.root.join("output")
    }

    pub fn output_part(&self, p: usize) -> PathBuf {
        self.output_dir().join(format!("part-{p:05}.run"))
    }

    pub fn state_dir(&self) -> PathBuf {
        self.root.join("state")
    }

    pub fn mrbg_dir(&self, p: usize) -> PathBuf {
        self.state_dir().join("mrbg").join(format!("p-{p:05}"))
    }

    pub fn results_part(&self, p: usize) -> PathBuf {
        self.state_dir().join("results").join(format!("part-{p:05}.run"))
    }

    pub fn meta_path(&self) -> PathBuf {
        self.state_dir().join("job.json")
    }

    pub fn spill_dir(&self) -> PathBuf {
        self.root.join("spill")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
}

/// Persisted description of a one-step job, checked by later refreshes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMeta {
    pub app: String,
    pub partitions: usize,
    pub reducer: ReducerKind,
    /// Number of incremental refreshes applied since the initial run.
    pub epoch: u64,
}

impl JobMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("job metadata {}", path.display())),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Metadata(e.to_string()))?;
        let tmp = crate::run::tmp_sibling(path);
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }
}

#[derive(Debug, Default)]
pub struct JobReport {
    pub outputs: Vec<PathBuf>,
    pub metrics: MetricsLog,
    pub map_invocations: u64,
    pub reduce_invocations: u64,
    /// K2s whose chunk became empty, so their outputs were withdrawn.
    pub retractions: u64,
    pub shuffled_edges: u64,
    pub shuffled_bytes: u64,
    pub output_records: u64,
}

impl JobReport {
    /// Reduce instances recomputed: re-run reduces plus retractions.
    pub fn reduce_instances(&self) -> u64 {
        self.reduce_invocations + self.retractions
    }
}

pub(crate) fn callback_error(kind: TaskKind, index: usize, iteration: usize, key: &[u8], source: anyhow::Error) -> Error {
    Error::Callback {
        task: TaskId::new(kind, index, iteration),
        key: show(key),
        source,
    }
}

/// Pushes one map invocation's outputs as edges carrying `mk`.
pub(crate) fn push_map_outputs(
    buf: &mut MapOutputBuffer,
    outputs: Vec<(Vec<u8>, Vec<u8>)>,
    mk: MapKey,
    tombstone: bool,
    unique_k2: bool,
) -> Result<()> {
    if unique_k2 && outputs.len() > 1 {
        let mut keys: Vec<&[u8]> = outputs.iter().map(|(k, _)| k.as_slice()).collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "map invocation {mk} emitted K2 {} more than once; aggregate locally when the MRBGraph is preserved",
                show(w[0])
            )));
        }
    }
    for (k2, v2) in outputs {
        if k2.is_empty() {
            return Err(Error::EmptyKey);
        }
        let edge = if tombstone {
            MrbgEdge::tombstone(k2, mk)
        } else {
            MrbgEdge::valued(k2, mk, v2)
        };
        buf.push(edge)?;
    }
    Ok(())
}

/// Runs map tasks on the pool. `task` fills the buffer for one input and
/// returns its invocation count.
pub(crate) fn run_map_tasks<T, F>(
    pool: &WorkerPool,
    spec: &JobSpec,
    spill_dir: &Path,
    stage: &str,
    iteration: usize,
    inputs: Vec<T>,
    task: F,
) -> Result<(Vec<Vec<RunSource>>, u64, u64, u64)>
where
    T: Send,
    F: Fn(usize, T, &mut MapOutputBuffer) -> Result<u64> + Sync,
{
    fs::create_dir_all(spill_dir).at(spill_dir)?;
    let partitioner = Partitioner::new(spec.partitions);
    let assignment = pool.round_robin(inputs.len());
    let results = pool.run(&assignment, inputs, |i, input| {
        let mut buf = MapOutputBuffer::new(partitioner, spec.spill_budget, spill_dir, format!("{stage}-m{i}"));
        let n = task(i, input, &mut buf)?;
        Ok::<_, Error>((buf.finish(), n))
    });
    let mut outputs: Vec<MapOutput> = Vec::with_capacity(results.len());
    let mut invocations = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (out, n) = r.map_err(|reason| Error::TaskFailed {
            task: TaskId::new(TaskKind::Map, i, iteration),
            reason,
        })??;
        invocations += n;
        outputs.push(out);
    }
    let records = outputs.iter().map(|o| o.records).sum();
    let bytes = outputs.iter().map(|o| o.bytes).sum();
    Ok((collect_partitions(outputs, spec.partitions), invocations, records, bytes))
}

/// Runs one reduce task per partition and returns results in partition order.
pub(crate) fn run_reduce_tasks<T, R, F>(pool: &WorkerPool, iteration: usize, inputs: Vec<T>, task: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> Result<R> + Sync,
{
    let assignment = pool.round_robin(inputs.len());
    pool.run(&assignment, inputs, task)
        .into_iter()
        .enumerate()
        .map(|(p, r)| {
            r.map_err(|reason| Error::TaskFailed {
                task: TaskId::new(TaskKind::Reduce, p, iteration),
                reason,
            })?
        })
        .collect()
}

/// Applies the configured reducer to one group of values.
pub(crate) fn reduce_values(app: &dyn MapReduceApp, kind: ReducerKind, p: usize, k2: &[u8], values: &[&[u8]]) -> Result<Outputs> {
    match kind {
        ReducerKind::General => app
            .reduce(k2, values)
            .map_err(|e| callback_error(TaskKind::Reduce, p, 0, k2, e)),
        ReducerKind::Accumulator => {
            let acc = accumulator_of(app)?;
            let folded = fold(acc, acc.identity(), values).map_err(|e| callback_error(TaskKind::Reduce, p, 0, k2, e))?;
            Ok(vec![(k2.to_vec(), folded)])
        }
    }
}

pub(crate) fn accumulator_of(app: &dyn MapReduceApp) -> Result<&dyn Accumulator> {
    app.accumulator()
        .ok_or_else(|| Error::InvalidSpec(format!("app {} has no accumulator", app.name())))
}

pub(crate) fn fold(acc: &dyn Accumulator, mut state: Vec<u8>, values: &[&[u8]]) -> anyhow::Result<Vec<u8>> {
    for v in values {
        state = acc.accumulate(&state, v)?;
    }
    Ok(state)
}

/// Reads one input file as map tasks keyed `(file index, record position)`.
pub(crate) fn map_input_file(
    app: &dyn MapReduceApp,
    file_index: usize,
    path: &Path,
    buf: &mut MapOutputBuffer,
    unique_k2: bool,
) -> Result<u64> {
    let reader = RunReader::<KvRecord>::open(path)?;
    let mut n = 0;
    for (pos, rec) in reader.iter()?.enumerate() {
        let rec = rec?;
        let outputs = app
            .map(&rec.key, &rec.value)
            .map_err(|e| callback_error(TaskKind::Map, file_index, 0, &rec.key, e))?;
        push_map_outputs(buf, outputs, MapKey::new(file_index as u32, pos as u64), false, unique_k2)?;
        n += 1;
    }
    Ok(n)
}

struct PartitionRun {
    invocations: u64,
    output_records: u64,
}

/// Runs a one-step job over `inputs` (runs of [`KvRecord`], each sorted by
/// key). With `preserve_mrbg`, the MRBGraph and per-K2 results are kept in
/// the working directory for [`crate::incremental::refresh`].
pub fn run_job(spec: &JobSpec, app: &dyn MapReduceApp, inputs: &[PathBuf], workdir: impl AsRef<Path>) -> Result<JobReport> {
    spec.validate()?;
    if spec.reducer == ReducerKind::Accumulator {
        accumulator_of(app)?;
    }
    let dirs = JobDirs::new(workdir);
    for d in [dirs.output_dir(), dirs.state_dir()] {
        if d.exists() {
            fs::remove_dir_all(&d).at(&d)?;
        }
    }
    fs::create_dir_all(dirs.output_dir()).at(dirs.output_dir())?;
    let pool = WorkerPool::new(spec.workers);
    let mut metrics = MetricsLog::default();
    let spill = dirs.spill_dir().join("initial");

    let started = Instant::now();
    let tasks: Vec<(usize, PathBuf)> = inputs.iter().cloned().enumerate().collect();
    let (partitions, map_invocations, edges, bytes) =
        run_map_tasks(&pool, spec, &spill, "initial", 0, tasks, |_, (i, path), buf| {
            map_input_file(app, i, &path, buf, spec.preserve_mrbg)
        })?;
    metrics.stage(app.name(), "map", started, map_invocations, edges, bytes);

    let started = Instant::now();
    let runs = run_reduce_tasks(&pool, 0, partitions.into_iter().enumerate().collect(), |_, (p, sources)| {
        reduce_partition(spec, app, &dirs, p, sources)
    })?;
    let reduce_invocations = runs.iter().map(|r| r.invocations).sum();
    let output_records = runs.iter().map(|r| r.output_records).sum();
    metrics.stage(app.name(), "reduce", started, edges, output_records, bytes);
    if spill.exists() {
        fs::remove_dir_all(&spill).at(&spill)?;
    }

    if spec.preserve_mrbg {
        JobMeta {
            app: app.name().to_string(),
            partitions: spec.partitions,
            reducer: spec.reducer,
            epoch: 0,
        }
        .save(&dirs.meta_path())?;
    }
    metrics.append_jsonl(dirs.metrics_path())?;
    Ok(JobReport {
        outputs: (0..spec.partitions).map(|p| dirs.output_part(p)).collect(),
        metrics,
        map_invocations,
        reduce_invocations,
        retractions: 0,
        shuffled_edges: edges,
        shuffled_bytes: bytes,
        output_records,
    })
}

fn reduce_partition(spec: &JobSpec, app: &dyn MapReduceApp, dirs: &JobDirs, p: usize, sources: Vec<RunSource>) -> Result<PartitionRun> {
    let mut results = PartitionResults::default();
    // Accumulator jobs refresh from the stored result alone.
    let mut store = if spec.preserve_mrbg && spec.reducer == ReducerKind::General {
        Some(MrbgStore::create(dirs.mrbg_dir(p), spec.store)?)
    } else {
        None
    };
    let mut pass = match store.as_mut() {
        Some(s) => Some(s.begin_pass(&[])?),
        None => None,
    };
    let mut invocations = 0;
    for group in shuffle_sort(sources)? {
        let (k2, edges) = group?;
        let values: Vec<&[u8]> = edges.iter().filter_map(|e| e.value.as_value()).collect();
        let outputs = reduce_values(app, spec.reducer, p, &k2, &values)?;
        invocations += 1;
        if let Some(pass) = pass.as_mut() {
            pass.put(&Chunk::from_edges(&k2, &edges)?)?;
        }
        results.by_k2.insert(k2, outputs);
    }
    if let Some(pass) = pass {
        pass.finish()?;
    }
    let flat = results.flatten();
    let output_records = flat.len() as u64;
    crate::result::write_output(dirs.output_part(p), flat)?;
    if spec.preserve_mrbg {
        results.save(dirs.results_part(p))?;
    }
    Ok(PartitionRun {
        invocations,
        output_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        JobSpec::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        let cases = [
            JobSpec {
                partitions: 0,
                ..Default::default()
            },
            JobSpec {
                auto_off_threshold: 0.0,
                ..Default::default()
            },
            JobSpec {
                filter_threshold: Some(-1.0),
                ..Default::default()
            },
            JobSpec {
                store: StoreConfig {
                    gap_threshold: 1 << 20,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for spec in cases {
            assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
    }
}
