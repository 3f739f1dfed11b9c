//! Iterative jobs over loop-invariant structure data and loop-variant
//! state data.
//!
//! Structure records are partitioned by the hash of their projected state
//! key, so each partition's prime map joins its structure file against its
//! own state file in one sequential pass, and prime reduce writes the next
//! state in place. Small state (all-to-one projections, or fewer state keys
//! than partitions) is instead replicated to every partition and rebuilt by
//! a coordinator-side gather.
//!
//! Partition directory `parts/p-NNNNN/`:
//! - `structure.run`: [`StructureEntry`] sorted by `(dk, sk)`
//! - `state.run`: current state `(dk, dv)` sorted by `dk`
//! - `visible.run`: state values the stored MRBGraph edges were mapped from
//! - `pending.run`: state changes emitted but not yet propagated
//! - `cpc.run`: accumulated change per key since its last emission
//! - `sdelta.run`: structure delta awaiting the first incremental iteration
//! - `mrbg/`: the partition's MRBGraph store
//!
//! A phase writes `next-*` files; the coordinator renames them at the
//! iteration barrier.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{callback_error, push_map_outputs, JobSpec};
use crate::error::{Error, IoContext, Result};
use crate::faults::{CheckpointStore, FailureKind, FailurePlan, Manifest, RunnerState, Scheduler};
use crate::metrics::{IterationMetrics, MetricEvent, MetricsLog};
use crate::mrbg::{Chunk, MrbgStore, StoreCounters};
use crate::partition::Partitioner;
use crate::pool::{TaskId, TaskKind, WorkerPool};
use crate::record::{show, DeltaRecord, KvRecord, MapKey, Sign, StructureEntry};
use crate::run::{read_run_or_empty, write_sorted_run, RunReader};
use crate::shuffle::{collect_partitions, shuffle_sort, MapOutput, MapOutputBuffer, RunSource};

pub type Pair = (Vec<u8>, Vec<u8>);
pub type StateMap = BTreeMap<Vec<u8>, Vec<u8>>;

/// How structure keys relate to state keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    OneToOne,
    ManyToOne,
    AllToOne,
    OneToMany,
    ManyToMany,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLayout {
    /// State partitioned with its structure; reduce output stays local.
    CoLocated,
    /// Full state copy in every partition; structure hashed by SK.
    Replicated,
}

/// An iterative application. The prime reduce output key is always the
/// reduce key K2.
pub trait IterativeApp: Send + Sync {
    fn name(&self) -> &str;

    fn projection(&self) -> Projection;

    /// The single state key that structure key `sk` depends on.
    fn project(&self, sk: &[u8]) -> anyhow::Result<Vec<u8>>;

    /// State value for a key with no stored state.
    fn init(&self, dk: &[u8]) -> Vec<u8>;

    /// Rejects malformed structure records at load time.
    fn check_structure(&self, _sk: &[u8], _sv: &[u8]) -> anyhow::Result<()> {
        Ok(())
    }

    /// Must be deterministic and emit each K2 at most once.
    fn map(&self, sk: &[u8], sv: &[u8], dk: &[u8], dv: &[u8]) -> anyhow::Result<Vec<Pair>>;

    fn reduce(&self, k2: &[u8], values: &[&[u8]]) -> anyhow::Result<Vec<u8>>;

    /// Non-negative distance between two values of one state key.
    fn difference(&self, prev: &[u8], curr: &[u8]) -> anyhow::Result<f64>;

    /// Replicated layout only: folds reduce outputs into the next state.
    /// The default overwrites state keys with reduce outputs of the same key.
    fn gather(&self, state: &StateMap, reduced: Vec<Pair>) -> anyhow::Result<StateMap> {
        let mut next = state.clone();
        next.extend(reduced);
        Ok(next)
    }
}

pub const STRUCTURE: &str = "structure.run";
pub const STATE: &str = "state.run";
pub const VISIBLE: &str = "visible.run";
pub const PENDING: &str = "pending.run";
pub const CPC: &str = "cpc.run";
pub const STRUCTURE_DELTA: &str = "sdelta.run";
const NEXT_PREFIX: &str = "next-";

#[derive(Debug, Clone)]
pub struct IterDirs {
    pub root: PathBuf,
}

impl IterDirs {
    pub fn new(root: impl AsRef<Path>) -> Self {
        IterDirs {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn parts(&self) -> PathBuf {
        self.root.join("parts")
    }

    pub fn partition(&self, p: usize) -> PathBuf {
        self.parts().join(format!("p-{p:05}"))
    }

    pub fn partitions(&self, n: usize) -> Vec<PathBuf> {
        (0..n).map(|p| self.partition(p)).collect()
    }

    pub fn file(&self, p: usize, name: &str) -> PathBuf {
        self.partition(p).join(name)
    }

    pub fn next(&self, p: usize, name: &str) -> PathBuf {
        self.partition(p).join(format!("{NEXT_PREFIX}{name}"))
    }

    pub fn mrbg(&self, p: usize) -> PathBuf {
        self.partition(p).join("mrbg")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.root.join("output")
    }

    pub fn output_part(&self, p: usize) -> PathBuf {
        self.output_dir().join(format!("part-{p:05}.run"))
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("snapshot.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn spill(&self) -> PathBuf {
        self.root.join("spill")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn iterations_csv(&self) -> PathBuf {
        self.root.join("iterations.csv")
    }
}

/// Persisted description of a converged iterative job, used to seed
/// incremental iterative jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMeta {
    pub app: String,
    pub partitions: usize,
    pub layout: StateLayout,
    /// Incremented by every job that derives a new snapshot from this one.
    pub lineage: u64,
    pub iterations: usize,
    pub converged: bool,
    /// False once MRBGraph maintenance was switched off; incremental jobs
    /// then need a fresh full run first.
    pub mrbg_valid: bool,
}

impl IterMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("snapshot metadata {}", path.display())),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Metadata(e.to_string()))?;
        let tmp = crate::run::tmp_sibling(path);
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }
}

/// Extra inputs for an iterative run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Initial state runs of `(dk, dv)`; missing keys use `init`.
    pub initial_state: Vec<PathBuf>,
    pub failures: FailurePlan,
}

#[derive(Debug)]
pub struct IterReport {
    pub iterations: usize,
    pub converged: bool,
    pub metrics: MetricsLog,
    pub outputs: Vec<PathBuf>,
    pub recoveries: u64,
    pub mrbg_active: bool,
    pub scheduler: Scheduler,
    /// Co-location held after every recovery.
    pub colocated_after_recovery: bool,
}

impl IterReport {
    pub fn rows(&self) -> Vec<&IterationMetrics> {
        self.metrics.iterations().collect()
    }
}

pub fn read_state(path: impl AsRef<Path>) -> Result<StateMap> {
    Ok(read_run_or_empty::<KvRecord>(path)?
        .into_iter()
        .map(|r| (r.key, r.value))
        .collect())
}

pub fn write_state(path: impl AsRef<Path>, state: &StateMap) -> Result<u64> {
    let mut w = crate::run::RunWriter::<KvRecord>::create(path, 0)?;
    for (k, v) in state {
        w.append(&KvRecord::new(k.clone(), v.clone()))?;
    }
    Ok(w.finish()?.bytes)
}

/// Reads the final state of a finished job from its output directory.
pub fn read_output_state(dir: impl AsRef<Path>) -> Result<StateMap> {
    let mut out = StateMap::new();
    for path in crate::run::list_runs(dir)? {
        out.extend(read_state(path)?);
    }
    Ok(out)
}

pub(crate) fn layout_for(app: &dyn IterativeApp, state_keys: usize, n: usize) -> Result<StateLayout> {
    match app.projection() {
        Projection::OneToMany | Projection::ManyToMany => Err(Error::InvalidSpec(format!(
            "{}: one-to-many and many-to-many projections are not supported; redefine the state key so that each structure key depends on exactly one state key",
            app.name()
        ))),
        Projection::AllToOne => Ok(StateLayout::Replicated),
        _ if state_keys < n => Ok(StateLayout::Replicated),
        _ => Ok(StateLayout::CoLocated),
    }
}

pub(crate) fn place(partitioner: &Partitioner, layout: StateLayout, sk: &[u8], dk: &[u8]) -> usize {
    match layout {
        StateLayout::CoLocated => partitioner.partition_of(dk),
        StateLayout::Replicated => partitioner.partition_of(sk),
    }
}

fn sort_structure(entries: &mut [StructureEntry]) {
    entries.sort_by(|a, b| {
        a.dk.cmp(&b.dk)
            .then_with(|| a.sk.cmp(&b.sk))
            .then_with(|| a.map_key.cmp(&b.map_key))
    });
}

/// Applies a structure delta: deletes drop the entry with the same map
/// key, inserts add a new entry.
pub(crate) fn apply_structure_delta(
    app: &dyn IterativeApp,
    mut entries: Vec<StructureEntry>,
    delta: &[DeltaRecord],
) -> Result<Vec<StructureEntry>> {
    let deleted: HashSet<MapKey> = delta.iter().filter(|d| d.sign == Sign::Delete).map(|d| d.map_key).collect();
    let before = entries.len();
    entries.retain(|e| !deleted.contains(&e.map_key));
    if before - entries.len() != deleted.len() {
        return Err(Error::Contract("structure delta deletes a record that is not in the structure".into()));
    }
    for d in delta.iter().filter(|d| d.sign == Sign::Insert) {
        app.check_structure(&d.record.key, &d.record.value)
            .map_err(|e| callback_error(TaskKind::PrimeMap, 0, 0, &d.record.key, e))?;
        let dk = app
            .project(&d.record.key)
            .map_err(|e| callback_error(TaskKind::PrimeMap, 0, 0, &d.record.key, e))?;
        entries.push(StructureEntry {
            dk,
            sk: d.record.key.clone(),
            sv: d.record.value.clone(),
            map_key: d.map_key,
        });
    }
    sort_structure(&mut entries);
    Ok(entries)
}

pub(crate) enum Flow {
    Fatal(Error),
    Rollback(usize, Box<Manifest>),
}

impl From<Error> for Flow {
    fn from(e: Error) -> Self {
        Flow::Fatal(e)
    }
}

pub(crate) struct MapPart {
    pub output: MapOutput,
    pub invocations: u64,
}

#[derive(Debug, Default)]
pub(crate) struct ReducePart {
    pub invocations: u64,
    pub l1: f64,
    pub changed: u64,
    pub emitted: u64,
    pub state_keys: u64,
    pub backward_bytes: u64,
    pub reduced: Vec<Pair>,
    pub counters: StoreCounters,
}

#[derive(Debug, Default)]
pub(crate) struct Step {
    pub l1: f64,
    pub changed: u64,
    pub emitted: u64,
    pub state_keys: u64,
    pub map_invocations: u64,
    pub reduce_invocations: u64,
    pub shuffled_bytes: u64,
    pub backward_bytes: u64,
    pub replicated_bytes: u64,
    pub counters: StoreCounters,
    pub incremental: bool,
}

pub(crate) struct Runner<'a> {
    pub spec: &'a JobSpec,
    pub app: &'a dyn IterativeApp,
    pub dirs: IterDirs,
    pub layout: StateLayout,
    pub n: usize,
    pub partitioner: Partitioner,
    pub pool: WorkerPool,
    pub sched: Scheduler,
    pub plan: FailurePlan,
    pub ckpt: Option<CheckpointStore>,
    pub state: RunnerState,
    pub metrics: MetricsLog,
    pub recoveries: u64,
    pub colocated_after_recovery: bool,
}

pub(crate) fn injected(what: &str, p: usize, t: usize) -> Error {
    Error::InjectedCrash(format!("{what} of partition {p} at iteration {t}"))
}

impl<'a> Runner<'a> {
    pub fn new(
        spec: &'a JobSpec,
        app: &'a dyn IterativeApp,
        dirs: IterDirs,
        layout: StateLayout,
        plan: FailurePlan,
    ) -> Self {
        let n = spec.partitions;
        Runner {
            spec,
            app,
            layout,
            n,
            partitioner: Partitioner::new(n),
            pool: WorkerPool::new(spec.workers),
            sched: Scheduler::new(spec.workers, n),
            plan,
            ckpt: (spec.checkpoint_interval > 0).then(|| CheckpointStore::new(dirs.checkpoints(), 3)),
            dirs,
            state: RunnerState::default(),
            metrics: MetricsLog::default(),
            recoveries: 0,
            colocated_after_recovery: true,
        }
    }

    pub fn replicated(&self) -> bool {
        self.layout == StateLayout::Replicated
    }

    pub fn init_cached<'v>(&self, cache: &'v mut Option<(Vec<u8>, Vec<u8>)>, dk: &[u8]) -> &'v [u8] {
        if cache.as_ref().is_none_or(|(k, _)| k != dk) {
            *cache = Some((dk.to_vec(), self.app.init(dk)));
        }
        &cache.as_ref().expect("filled").1
    }

    pub fn difference(&self, p: usize, t: usize, k: &[u8], prev: &[u8], curr: &[u8]) -> Result<f64> {
        let d = self
            .app
            .difference(prev, curr)
            .map_err(|e| callback_error(TaskKind::PrimeReduce, p, t, k, e))?;
        if d.is_nan() || d < 0.0 {
            return Err(Error::Contract(format!(
                "difference for state key {} is {d}; it must be non-negative",
                show(k)
            )));
        }
        Ok(d)
    }

    pub fn new_buffer(&self, t: usize, p: usize) -> Result<MapOutputBuffer> {
        let dir = self.dirs.spill();
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(MapOutputBuffer::new(
            self.partitioner,
            self.spec.spill_budget,
            dir,
            format!("i{t}-m{p}"),
        ))
    }

    pub fn call_map(&self, t: usize, p: usize, e: &StructureEntry, dv: &[u8]) -> Result<Vec<Pair>> {
        self.app
            .map(&e.sk, &e.sv, &e.dk, dv)
            .map_err(|err| callback_error(TaskKind::PrimeMap, p, t, &e.sk, err))
    }

    pub fn call_reduce(&self, t: usize, p: usize, k2: &[u8], values: &[&[u8]]) -> Result<Vec<u8>> {
        self.app
            .reduce(k2, values)
            .map_err(|err| callback_error(TaskKind::PrimeReduce, p, t, k2, err))
    }

    /// Full prime map: one merge-join pass over the sorted structure and
    /// state files.
    pub fn map_full(&self, t: usize, p: usize, inject: bool) -> Result<MapPart> {
        let mut buf = self.new_buffer(t, p)?;
        let structure = RunReader::<StructureEntry>::open(self.dirs.file(p, STRUCTURE))?;
        let total = structure.header().record_count;
        let state_path = self.dirs.file(p, STATE);
        let mut state = if state_path.exists() {
            Some(RunReader::<KvRecord>::open(&state_path)?.iter()?.peekable())
        } else {
            None
        };
        let mut current: Option<(Vec<u8>, Vec<u8>)> = None;
        let mut n = 0u64;
        for entry in structure.iter()? {
            let entry = entry?;
            if inject && n * 2 >= total {
                return Err(injected("prime map", p, t));
            }
            if current.as_ref().is_none_or(|(dk, _)| *dk != entry.dk) {
                let mut found = None;
                if let Some(it) = state.as_mut() {
                    while let Some(rec) = it.next_if(|r| r.as_ref().map_or(true, |r| r.key <= entry.dk)) {
                        let rec = rec?;
                        if rec.key == entry.dk {
                            found = Some(rec.value);
                        }
                    }
                }
                let dv = found.unwrap_or_else(|| self.app.init(&entry.dk));
                current = Some((entry.dk.clone(), dv));
            }
            let dv = &current.as_ref().expect("joined").1;
            let outputs = self.call_map(t, p, &entry, dv)?;
            push_map_outputs(&mut buf, outputs, entry.map_key, false, true)?;
            n += 1;
        }
        Ok(MapPart {
            output: buf.finish(),
            invocations: n,
        })
    }

    /// Full prime reduce. Co-located: writes the next state of partition
    /// `p`. Replicated: returns reduce outputs for the gather.
    pub fn reduce_full(&self, t: usize, p: usize, sources: Vec<RunSource>, inject: bool) -> Result<ReducePart> {
        let mut part = ReducePart::default();
        let old = if self.replicated() {
            StateMap::new()
        } else {
            read_state(self.dirs.file(p, STATE))?
        };
        let mut next = old.clone();
        let mut init = None;
        for group in shuffle_sort(sources)? {
            let (k2, edges) = group?;
            let values: Vec<&[u8]> = edges.iter().filter_map(|e| e.value.as_value()).collect();
            let v = self.call_reduce(t, p, &k2, &values)?;
            part.invocations += 1;
            if self.replicated() {
                part.reduced.push((k2, v));
                continue;
            }
            if self.partitioner.partition_of(&k2) != p {
                part.backward_bytes += (k2.len() + v.len()) as u64;
            }
            let prev = old.get(&k2).map(Vec::as_slice);
            part.l1 += self.difference(p, t, &k2, prev.unwrap_or_else(|| self.init_cached(&mut init, &k2)), &v)?;
            if prev != Some(v.as_slice()) {
                part.changed += 1;
            }
            next.insert(k2, v);
        }
        if inject {
            fs::write(self.dirs.next(p, STATE), b"partial").at(self.dirs.next(p, STATE))?;
            return Err(injected("prime reduce", p, t));
        }
        if !self.replicated() {
            part.state_keys = next.len() as u64;
            part.emitted = part.changed;
            write_state(self.dirs.next(p, STATE), &next)?;
        }
        Ok(part)
    }

    /// Coordinator side of a replicated full iteration.
    fn gather_full(&self, t: usize, reduced: Vec<Pair>, step: &mut Step) -> Result<()> {
        let old = read_state(self.dirs.file(0, STATE))?;
        let next = self
            .app
            .gather(&old, reduced)
            .map_err(|e| callback_error(TaskKind::PrimeReduce, 0, t, b"gather", e))?;
        for (k, v) in &next {
            let prev = old.get(k).cloned().unwrap_or_else(|| self.app.init(k));
            step.l1 += self.difference(0, t, k, &prev, v)?;
            if old.get(k) != Some(v) {
                step.changed += 1;
            }
        }
        step.emitted = step.changed;
        step.state_keys = next.len() as u64;
        for p in 0..self.n {
            step.replicated_bytes += write_state(self.dirs.next(p, STATE), &next)?;
        }
        Ok(())
    }

    /// Runs every partition's prime map, retrying injected failures on the
    /// worker that owns the partition's reduce.
    pub fn map_phase(&mut self, t: usize, incremental: bool) -> std::result::Result<(Vec<Vec<RunSource>>, u64, u64), Flow> {
        let inject: HashSet<usize> = self
            .plan
            .take(FailureKind::PrimeMap, t)
            .into_iter()
            .map(|f| f.partition)
            .collect();
        let assignment = self.sched.map_assignment().to_vec();
        let this = &*self;
        let run = |p: usize, inj: bool| {
            if incremental {
                this.map_incremental(t, p, inj)
            } else {
                this.map_full(t, p, inj)
            }
        };
        let results = self.pool.run(&assignment, (0..self.n).collect(), |_, p| run(p, inject.contains(&p)));
        let mut parts = Vec::with_capacity(self.n);
        let mut retried = Vec::new();
        for (p, r) in results.into_iter().enumerate() {
            match flatten(r, TaskKind::PrimeMap, p, t) {
                Err(Error::InjectedCrash(what)) => {
                    log::info!("recovering from {what}: re-running on worker {}", assignment[p]);
                    let again = self.pool.run(&[assignment[p]], vec![p], |_, p| run(p, false));
                    let part = flatten(again.into_iter().next().expect("one task"), TaskKind::PrimeMap, p, t)?;
                    retried.push(p);
                    parts.push(part);
                }
                other => parts.push(other?),
            }
        }
        for p in retried {
            self.note_recovery(t, "prime_map", p, t.saturating_sub(1));
        }
        let invocations = parts.iter().map(|m| m.invocations).sum();
        let bytes = parts.iter().map(|m| m.output.bytes).sum();
        let outputs = parts.into_iter().map(|m| m.output).collect();
        Ok((collect_partitions(outputs, self.n), invocations, bytes))
    }

    /// Runs every partition's prime reduce. A failed attempt restores the
    /// partition from the previous iteration's checkpoint and re-runs over
    /// the same map outputs.
    pub fn reduce_phase(&mut self, t: usize, incremental: bool, sources: Vec<Vec<RunSource>>) -> std::result::Result<Vec<ReducePart>, Flow> {
        let inject: HashSet<usize> = self
            .plan
            .take(FailureKind::PrimeReduce, t)
            .into_iter()
            .map(|f| f.partition)
            .collect();
        let assignment = self.sched.reduce_assignment().to_vec();
        let inputs: Vec<(usize, Vec<RunSource>)> = sources.iter().cloned().enumerate().collect();
        let results = {
            let this = &*self;
            self.pool.run(&assignment, inputs, |_, (p, src)| {
                if incremental {
                    this.reduce_incremental(t, p, src, inject.contains(&p))
                } else {
                    this.reduce_full(t, p, src, inject.contains(&p))
                }
            })
        };
        let mut parts = Vec::with_capacity(self.n);
        for (p, r) in results.into_iter().enumerate() {
            match flatten(r, TaskKind::PrimeReduce, p, t) {
                Err(Error::InjectedCrash(what)) => {
                    log::info!("recovering from {what}");
                    let from = self.restore_partition(p, t)?;
                    self.note_recovery(t, "prime_reduce", p, from);
                    let src = sources[p].clone();
                    let this = &*self;
                    let again = self.pool.run(&[assignment[p]], vec![src], |_, src| {
                        if incremental {
                            this.reduce_incremental(t, p, src, false)
                        } else {
                            this.reduce_full(t, p, src, false)
                        }
                    });
                    parts.push(flatten(again.into_iter().next().expect("one task"), TaskKind::PrimeReduce, p, t)?);
                }
                other => parts.push(other?),
            }
        }
        Ok(parts)
    }

    /// Worker failures fire at the start of the map phase: the worker's
    /// local partition files are lost and its map/reduce pairs move.
    fn worker_failures(&mut self, t: usize) -> std::result::Result<(), Flow> {
        for f in self.plan.take(FailureKind::Worker, t) {
            let moved = self.sched.fail_worker(f.worker)?;
            for p in moved {
                let dir = self.dirs.partition(p);
                if dir.exists() {
                    fs::remove_dir_all(&dir).at(&dir)?;
                }
                let from = self.restore_partition(p, t)?;
                self.note_recovery(t, "worker", p, from);
            }
        }
        Ok(())
    }

    fn note_recovery(&mut self, t: usize, kind: &str, p: usize, from: usize) {
        self.recoveries += 1;
        self.colocated_after_recovery &= self.sched.colocated();
        self.metrics.push(MetricEvent::Recovery {
            iteration: t,
            kind: kind.to_string(),
            partition: p,
            restored_from: from,
        });
    }

    /// Restores partition `p` to the state committed by iteration `t - 1`,
    /// or requests a global rollback if that checkpoint is unusable.
    fn restore_partition(&mut self, p: usize, t: usize) -> std::result::Result<usize, Flow> {
        let Some(store) = self.ckpt.clone() else {
            return Err(Flow::Fatal(Error::CheckpointRejected {
                iteration: t.saturating_sub(1),
                reason: "checkpointing is disabled; cannot recover partition state".into(),
            }));
        };
        let want = t - 1;
        match store.verify(want) {
            Ok(_) => {
                store.restore_partition(want, p, &self.dirs.partition(p))?;
                Ok(want)
            }
            Err(e) => {
                log::warn!("{e}; rolling back");
                match store.latest_valid(want)? {
                    Some((it, manifest)) => Err(Flow::Rollback(it, Box::new(manifest))),
                    None => Err(Flow::Fatal(Error::CheckpointRejected {
                        iteration: want,
                        reason: "no valid checkpoint to roll back to".into(),
                    })),
                }
            }
        }
    }

    /// Publishes every partition's `next-*` files.
    fn commit(&mut self) -> Result<()> {
        let consumed_delta = self.state.structure_delta_pending;
        for p in 0..self.n {
            let dir = self.dirs.partition(p);
            let mut staged: Vec<PathBuf> = fs::read_dir(&dir)
                .at(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|path| {
                    path.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(NEXT_PREFIX) && !n.ends_with(".tmp"))
                })
                .collect();
            staged.sort();
            for path in staged {
                let name = path.file_name().and_then(|n| n.to_str()).expect("utf-8 name");
                let target = dir.join(&name[NEXT_PREFIX.len()..]);
                fs::rename(&path, &target).at(&target)?;
            }
            let sdelta = dir.join(STRUCTURE_DELTA);
            if consumed_delta && sdelta.exists() {
                fs::remove_file(&sdelta).at(&sdelta)?;
            }
        }
        self.state.structure_delta_pending = false;
        Ok(())
    }

    fn iterate(&mut self, t: usize) -> std::result::Result<Step, Flow> {
        self.worker_failures(t)?;
        let incremental = self.state.mrbg_active;
        let (sources, map_invocations, bytes) = self.map_phase(t, incremental)?;
        let parts = self.reduce_phase(t, incremental, sources)?;
        let mut step = Step {
            map_invocations,
            shuffled_bytes: bytes,
            incremental,
            ..Default::default()
        };
        let mut reduced = Vec::new();
        for part in parts {
            step.reduce_invocations += part.invocations;
            step.l1 += part.l1;
            step.changed += part.changed;
            step.emitted += part.emitted;
            step.state_keys += part.state_keys;
            step.backward_bytes += part.backward_bytes;
            step.counters.add(&part.counters);
            reduced.extend(part.reduced);
        }
        if self.replicated() {
            reduced.sort();
            if incremental {
                self.gather_incremental(t, reduced, &mut step)?;
            } else {
                self.gather_full(t, reduced, &mut step)?;
            }
        }
        if incremental {
            self.apply_auto_off(&step);
        }
        self.commit()?;
        Ok(step)
    }

    /// Iterates until convergence or the iteration cap, starting at `t`.
    pub fn run_loop(&mut self, mut t: usize) -> Result<(usize, bool)> {
        let last = t + self.spec.max_iterations - 1;
        let mut done = 0;
        while t <= last {
            let started = Instant::now();
            let step = match self.iterate(t) {
                Ok(step) => step,
                Err(Flow::Fatal(e)) => return Err(e),
                Err(Flow::Rollback(it, manifest)) => {
                    let store = self.ckpt.clone().expect("rollback implies checkpoints");
                    store.restore_all(it, &self.dirs.partitions(self.n))?;
                    self.state = manifest.runner;
                    self.recoveries += 1;
                    self.metrics.push(MetricEvent::Recovery {
                        iteration: t,
                        kind: "rollback".into(),
                        partition: usize::MAX,
                        restored_from: it,
                    });
                    t = it + 1;
                    continue;
                }
            };
            self.state.l1_trace.push(step.l1);
            let converged = if step.incremental {
                step.emitted == 0 || step.l1 <= self.spec.tolerance
            } else {
                step.l1 <= self.spec.tolerance
            };
            let mut row = IterationMetrics {
                iteration: t,
                l1_delta: step.l1,
                wall_ms: 0.0,
                bytes_shuffled: step.shuffled_bytes,
                map_invocations: step.map_invocations,
                reduce_invocations: step.reduce_invocations,
                propagated: step.emitted,
                p_delta: if step.state_keys == 0 {
                    0.0
                } else {
                    step.emitted as f64 / step.state_keys as f64
                },
                mrbg_enabled: step.incremental,
                state_keys: step.state_keys,
                backward_shuffle_bytes: step.backward_bytes,
                replicated_bytes: step.replicated_bytes,
                recoveries: self.recoveries,
                store_reads: step.counters.reads,
                store_bytes_read: step.counters.bytes_read,
                store_cache_hits: step.counters.cache_hits,
                ..Default::default()
            };
            if let Some(store) = &self.ckpt {
                if t.is_multiple_of(self.spec.checkpoint_interval) {
                    let cost = store.write(t, &self.dirs.partitions(self.n), &self.state)?;
                    row.checkpoint_ms = cost.millis;
                    row.checkpoint_bytes = cost.bytes;
                }
            }
            row.wall_ms = started.elapsed().as_secs_f64() * 1e3;
            log::debug!("iteration {t}: l1 {} emitted {} mrbg {}", step.l1, step.emitted, step.incremental);
            self.metrics.push(MetricEvent::Iteration(row));
            done += 1;
            if converged {
                return Ok((done, true));
            }
            if let Some(patience) = self.spec.divergence_patience {
                let trace = &self.state.l1_trace;
                if trace.len() > patience && trace[trace.len() - patience - 1..].windows(2).all(|w| w[1] > w[0]) {
                    return Err(Error::Diverged {
                        patience,
                        trace: trace.clone(),
                    });
                }
            }
            t += 1;
        }
        Ok((done, false))
    }

    pub fn checkpoint_start(&self, t: usize) -> Result<()> {
        if let Some(store) = &self.ckpt {
            store.write(t, &self.dirs.partitions(self.n), &self.state)?;
        }
        Ok(())
    }

    /// Rebuilds every partition's MRBGraph from the current state so an
    /// incremental job can start from this snapshot.
    pub fn seal(&mut self, t: usize) -> Result<()> {
        let assignment = self.sched.map_assignment().to_vec();
        let this = &*self;
        let maps = self.pool.run(&assignment, (0..self.n).collect(), |_, p| this.map_full(t, p, false));
        let mut outputs = Vec::with_capacity(self.n);
        for (p, r) in maps.into_iter().enumerate() {
            outputs.push(flatten(r, TaskKind::PrimeMap, p, t)?.output);
        }
        let sources = collect_partitions(outputs, self.n);
        let reduce_assignment = self.sched.reduce_assignment().to_vec();
        let results = self.pool.run(&reduce_assignment, sources.into_iter().enumerate().collect(), |_, (p, src)| {
            this.seal_partition(p, src)
        });
        for (p, r) in results.into_iter().enumerate() {
            flatten(r, TaskKind::PrimeReduce, p, t)?;
        }
        Ok(())
    }

    fn seal_partition(&self, p: usize, sources: Vec<RunSource>) -> Result<()> {
        let mut store = MrbgStore::create(self.dirs.mrbg(p), self.spec.store)?;
        let mut pass = store.begin_pass(&[])?;
        for group in shuffle_sort(sources)? {
            let (k2, edges) = group?;
            pass.put(&Chunk::from_edges(&k2, &edges)?)?;
        }
        pass.finish()?;
        let state = self.dirs.file(p, STATE);
        let visible = self.dirs.file(p, VISIBLE);
        if state.exists() {
            fs::copy(&state, &visible).at(&visible)?;
        } else if visible.exists() {
            fs::remove_file(&visible).at(&visible)?;
        }
        for name in [PENDING, CPC] {
            let path = self.dirs.file(p, name);
            if path.exists() {
                fs::remove_file(&path).at(&path)?;
            }
        }
        Ok(())
    }

    /// Copies final state files to `output/`.
    pub fn export(&self) -> Result<Vec<PathBuf>> {
        let out = self.dirs.output_dir();
        if out.exists() {
            fs::remove_dir_all(&out).at(&out)?;
        }
        fs::create_dir_all(&out).at(&out)?;
        let count = if self.replicated() { 1 } else { self.n };
        let mut paths = Vec::new();
        for p in 0..count {
            let dst = self.dirs.output_part(p);
            let state = read_state(self.dirs.file(p, STATE))?;
            write_state(&dst, &state)?;
            paths.push(dst);
        }
        let spill = self.dirs.spill();
        if spill.exists() {
            fs::remove_dir_all(&spill).at(&spill)?;
        }
        Ok(paths)
    }

    pub fn finish_metrics(&self) -> Result<()> {
        self.metrics.append_jsonl(self.dirs.metrics_path())?;
        self.metrics.write_iterations_csv(self.dirs.iterations_csv())
    }
}

pub(crate) fn flatten<R>(r: std::result::Result<Result<R>, String>, kind: TaskKind, p: usize, t: usize) -> Result<R> {
    r.map_err(|reason| Error::TaskFailed {
        task: TaskId::new(kind, p, t),
        reason,
    })?
}

type PartitionedStructure = (StateLayout, Vec<Vec<StructureEntry>>, BTreeSet<Vec<u8>>);

/// Splits structure inputs (runs of `(sk, sv)`) by partition; also returns
/// the distinct state keys.
fn partition_structure(
    app: &dyn IterativeApp,
    n: usize,
    inputs: &[PathBuf],
    initial_state: &StateMap,
) -> Result<PartitionedStructure> {
    let mut entries = Vec::new();
    let mut keys: BTreeSet<Vec<u8>> = initial_state.keys().cloned().collect();
    for (i, path) in inputs.iter().enumerate() {
        let reader = RunReader::<KvRecord>::open(path)?;
        for (pos, rec) in reader.iter()?.enumerate() {
            let rec = rec?;
            app.check_structure(&rec.key, &rec.value)
                .map_err(|e| callback_error(TaskKind::PrimeMap, i, 0, &rec.key, e))?;
            let dk = app
                .project(&rec.key)
                .map_err(|e| callback_error(TaskKind::PrimeMap, i, 0, &rec.key, e))?;
            keys.insert(dk.clone());
            entries.push(StructureEntry {
                dk,
                sk: rec.key,
                sv: rec.value,
                map_key: MapKey::new(i as u32, pos as u64),
            });
        }
    }
    let layout = layout_for(app, keys.len(), n)?;
    let partitioner = Partitioner::new(n);
    let mut parts: Vec<Vec<StructureEntry>> = (0..n).map(|_| Vec::new()).collect();
    for e in entries {
        let p = place(&partitioner, layout, &e.sk, &e.dk);
        parts[p].push(e);
    }
    for part in &mut parts {
        sort_structure(part);
    }
    Ok((layout, parts, keys))
}

/// Runs an iterative job from scratch over `structure` inputs (runs of
/// `(sk, sv)` records). With `spec.preserve_mrbg` the final state is sealed
/// into a snapshot that incremental iterative jobs can start from.
pub fn run_iterative(
    spec: &JobSpec,
    app: &dyn IterativeApp,
    structure: &[PathBuf],
    workdir: impl AsRef<Path>,
    options: RunOptions,
) -> Result<IterReport> {
    spec.validate()?;
    let dirs = IterDirs::new(workdir);
    for d in [dirs.parts(), dirs.output_dir(), dirs.checkpoints(), dirs.spill()] {
        if d.exists() {
            fs::remove_dir_all(&d).at(&d)?;
        }
    }
    let n = spec.partitions;
    let mut initial = StateMap::new();
    for path in &options.initial_state {
        initial.extend(read_state(path)?);
    }
    let (layout, parts, keys) = partition_structure(app, n, structure, &initial)?;
    let partitioner = Partitioner::new(n);
    let replicated_state: StateMap = match layout {
        StateLayout::Replicated => keys
            .iter()
            .map(|k| (k.clone(), initial.get(k).cloned().unwrap_or_else(|| app.init(k))))
            .collect(),
        StateLayout::CoLocated => StateMap::new(),
    };
    let mut per_partition_state: Vec<StateMap> = (0..n).map(|_| StateMap::new()).collect();
    if layout == StateLayout::CoLocated {
        for (k, v) in initial {
            per_partition_state[partitioner.partition_of(&k)].insert(k, v);
        }
    }
    for (p, entries) in parts.iter().enumerate() {
        fs::create_dir_all(dirs.partition(p)).at(dirs.partition(p))?;
        write_sorted_run(dirs.file(p, STRUCTURE), 0, entries)?;
        match layout {
            StateLayout::Replicated => write_state(dirs.file(p, STATE), &replicated_state)?,
            StateLayout::CoLocated => write_state(dirs.file(p, STATE), &per_partition_state[p])?,
        };
    }

    let mut runner = Runner::new(spec, app, dirs.clone(), layout, options.failures);
    runner.checkpoint_start(0)?;
    let (iterations, converged) = runner.run_loop(1)?;
    if spec.preserve_mrbg {
        runner.seal(iterations + 1)?;
    }
    let outputs = runner.export()?;
    IterMeta {
        app: app.name().to_string(),
        partitions: n,
        layout,
        lineage: 0,
        iterations,
        converged,
        mrbg_valid: spec.preserve_mrbg,
    }
    .save(&dirs.meta_path())?;
    runner.finish_metrics()?;
    Ok(IterReport {
        iterations,
        converged,
        outputs,
        recoveries: runner.recoveries,
        mrbg_active: spec.preserve_mrbg,
        colocated_after_recovery: runner.colocated_after_recovery,
        scheduler: runner.sched.clone(),
        metrics: std::mem::take(&mut runner.metrics),
    })
}
