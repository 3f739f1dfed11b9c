//! Incremental iterative jobs: start from a converged snapshot, apply a
//! structure delta, and re-run only the map and reduce instances affected
//! by changes, with optional change propagation control.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::{push_map_outputs, JobSpec};
use crate::error::{Error, IoContext, Result};
use crate::faults::{replace_dir, FailurePlan};
use crate::iterative::{
    apply_structure_delta, injected, place, read_state, write_state, IterDirs, IterMeta, IterReport, IterativeApp, MapPart,
    ReducePart, Runner, StateLayout, StateMap, Step, CPC, PENDING, STATE, STRUCTURE, STRUCTURE_DELTA, VISIBLE,
};
use crate::mrbg::MrbgStore;
use crate::partition::Partitioner;
use crate::record::{show, DeltaRecord, KvRecord, MapKey, Sign, StructureEntry};
use crate::run::{read_run_or_empty, write_sorted_run, RunReader};
use crate::shuffle::{shuffle_sort, RunSource};

/// Change propagation decision for one reduced state key. With a
/// threshold, the change accumulates until it strictly exceeds the
/// threshold, then is emitted and the accumulator resets. Without one,
/// every changed value is emitted.
pub fn cpc_decide(acc: &mut f64, difference: f64, threshold: Option<f64>, changed: bool) -> bool {
    match threshold {
        None => changed,
        Some(th) => {
            *acc += difference;
            if *acc > th {
                *acc = 0.0;
                true
            } else {
                false
            }
        }
    }
}

/// True when the fraction of propagated state keys is high enough that
/// maintaining the MRBGraph costs more than recomputing everything.
pub fn should_switch_off(propagated: u64, state_keys: u64, threshold: f64) -> bool {
    state_keys > 0 && propagated as f64 / state_keys as f64 > threshold
}

fn read_cpc(path: impl AsRef<Path>) -> Result<HashMap<Vec<u8>, f64>> {
    let mut out = HashMap::new();
    for rec in read_run_or_empty::<KvRecord>(path)? {
        let bytes: [u8; 8] = rec
            .value
            .as_slice()
            .try_into()
            .map_err(|_| Error::corrupt(0, "change accumulator is not 8 bytes"))?;
        out.insert(rec.key, f64::from_be_bytes(bytes));
    }
    Ok(out)
}

fn write_cpc(path: impl AsRef<Path>, acc: &HashMap<Vec<u8>, f64>) -> Result<u64> {
    let state: StateMap = acc
        .iter()
        .filter(|(_, v)| **v != 0.0)
        .map(|(k, v)| (k.clone(), v.to_be_bytes().to_vec()))
        .collect();
    write_state(path, &state)
}

fn merged(mut base: StateMap, over: &StateMap) -> StateMap {
    base.extend(over.iter().map(|(k, v)| (k.clone(), v.clone())));
    base
}

impl Runner<'_> {
    /// Incremental prime map: re-maps structure records touched by the
    /// structure delta or whose state value was propagated last iteration,
    /// emitting only edges that differ from the stored MRBGraph.
    pub(crate) fn map_incremental(&self, t: usize, p: usize, inject: bool) -> Result<MapPart> {
        let mut buf = self.new_buffer(t, p)?;
        let visible = read_state(self.dirs.file(p, VISIBLE))?;
        let pending = read_state(self.dirs.file(p, PENDING))?;
        let sdelta: Vec<DeltaRecord> = if self.state.structure_delta_pending {
            read_run_or_empty(self.dirs.file(p, STRUCTURE_DELTA))?
        } else {
            Vec::new()
        };
        let mut deleted: HashMap<MapKey, &DeltaRecord> =
            sdelta.iter().filter(|d| d.sign == Sign::Delete).map(|d| (d.map_key, d)).collect();
        let old_value = |dk: &[u8]| visible.get(dk).cloned().unwrap_or_else(|| self.app.init(dk));
        let new_value = |dk: &[u8]| pending.get(dk).cloned().unwrap_or_else(|| old_value(dk));
        let mut invocations = 0u64;

        if !deleted.is_empty() || !pending.is_empty() {
            let structure = RunReader::<StructureEntry>::open(self.dirs.file(p, STRUCTURE))?;
            let total = structure.header().record_count;
            let mut cached: Option<(Vec<u8>, Vec<u8>, Vec<u8>)> = None;
            for (i, entry) in structure.iter()?.enumerate() {
                let entry = entry?;
                if inject && (i as u64) * 2 >= total {
                    return Err(injected("prime map", p, t));
                }
                if let Some(d) = deleted.remove(&entry.map_key) {
                    if d.record.key != entry.sk {
                        return Err(Error::Contract(format!(
                            "structure delete {} names key {} but the record there has key {}",
                            entry.map_key,
                            show(&d.record.key),
                            show(&entry.sk)
                        )));
                    }
                    let old = self.call_map(t, p, &entry, &old_value(&entry.dk))?;
                    invocations += 1;
                    push_map_outputs(&mut buf, old, entry.map_key, true, true)?;
                    continue;
                }
                if !pending.contains_key(&entry.dk) {
                    continue;
                }
                if cached.as_ref().is_none_or(|(dk, _, _)| *dk != entry.dk) {
                    cached = Some((entry.dk.clone(), old_value(&entry.dk), new_value(&entry.dk)));
                }
                let (_, before, after) = cached.as_ref().expect("cached");
                let old = self.call_map(t, p, &entry, before)?;
                let new = self.call_map(t, p, &entry, after)?;
                invocations += 2;
                let new_keys: HashSet<&[u8]> = new.iter().map(|(k, _)| k.as_slice()).collect();
                let old_edges: HashMap<&[u8], &[u8]> = old.iter().map(|(k, v)| (k.as_slice(), v.as_slice())).collect();
                let gone: Vec<_> = old
                    .iter()
                    .filter(|(k, _)| !new_keys.contains(k.as_slice()))
                    .cloned()
                    .collect();
                let changed: Vec<_> = new
                    .iter()
                    .filter(|(k, v)| old_edges.get(k.as_slice()) != Some(&v.as_slice()))
                    .cloned()
                    .collect();
                push_map_outputs(&mut buf, gone, entry.map_key, true, true)?;
                push_map_outputs(&mut buf, changed, entry.map_key, false, true)?;
            }
        }
        if let Some(mk) = deleted.keys().min() {
            return Err(Error::Contract(format!(
                "structure delta deletes map key {mk}, which is not in partition {p}"
            )));
        }
        for d in sdelta.iter().filter(|d| d.sign == Sign::Insert) {
            let dk = self
                .app
                .project(&d.record.key)
                .map_err(|e| crate::engine::callback_error(crate::pool::TaskKind::PrimeMap, p, t, &d.record.key, e))?;
            let entry = StructureEntry {
                dk,
                sk: d.record.key.clone(),
                sv: d.record.value.clone(),
                map_key: d.map_key,
            };
            let out = self.call_map(t, p, &entry, &new_value(&entry.dk))?;
            invocations += 1;
            push_map_outputs(&mut buf, out, entry.map_key, false, true)?;
        }
        Ok(MapPart {
            output: buf.finish(),
            invocations,
        })
    }

    /// Incremental prime reduce: merges delta edges into the partition's
    /// MRBGraph and re-reduces affected K2s.
    pub(crate) fn reduce_incremental(&self, t: usize, p: usize, sources: Vec<RunSource>, inject: bool) -> Result<ReducePart> {
        let groups: Vec<_> = shuffle_sort(sources)?.collect::<Result<_>>()?;
        let mut part = ReducePart::default();
        let mut store = MrbgStore::open(self.dirs.mrbg(p), self.spec.store)?;
        let replicated = self.replicated();
        let (old, mut acc) = if replicated {
            (StateMap::new(), HashMap::new())
        } else {
            (read_state(self.dirs.file(p, STATE))?, read_cpc(self.dirs.file(p, CPC))?)
        };
        let mut next = old.clone();
        let mut emitted = StateMap::new();
        store.merge_delta(&groups, |k2, chunk| {
            if chunk.is_empty() {
                return Ok(());
            }
            let v = self.call_reduce(t, p, k2, &chunk.values())?;
            part.invocations += 1;
            if replicated {
                part.reduced.push((k2.to_vec(), v));
                return Ok(());
            }
            if self.partitioner.partition_of(k2) != p {
                part.backward_bytes += (k2.len() + v.len()) as u64;
            }
            let prev = old.get(k2);
            let d = match prev {
                Some(prev) => self.difference(p, t, k2, prev, &v)?,
                None => self.difference(p, t, k2, &self.app.init(k2), &v)?,
            };
            part.l1 += d;
            let changed = prev != Some(&v);
            if changed {
                part.changed += 1;
            }
            let a = acc.entry(k2.to_vec()).or_insert(0.0);
            if cpc_decide(a, d, self.spec.filter_threshold, changed) {
                emitted.insert(k2.to_vec(), v.clone());
            }
            next.insert(k2.to_vec(), v);
            Ok(())
        })?;
        part.counters = store.take_counters();
        if inject {
            fs::write(self.dirs.next(p, STATE), b"partial").at(self.dirs.next(p, STATE))?;
            return Err(injected("prime reduce", p, t));
        }
        if self.state.structure_delta_pending {
            let structure = read_run_or_empty::<StructureEntry>(self.dirs.file(p, STRUCTURE))?;
            let sdelta = read_run_or_empty::<DeltaRecord>(self.dirs.file(p, STRUCTURE_DELTA))?;
            let updated = apply_structure_delta(self.app, structure, &sdelta)?;
            write_sorted_run(self.dirs.next(p, STRUCTURE), 0, &updated)?;
        }
        if !replicated {
            let visible = read_state(self.dirs.file(p, VISIBLE))?;
            let consumed = read_state(self.dirs.file(p, PENDING))?;
            write_state(self.dirs.next(p, VISIBLE), &merged(visible, &consumed))?;
            write_state(self.dirs.next(p, STATE), &next)?;
            write_state(self.dirs.next(p, PENDING), &emitted)?;
            write_cpc(self.dirs.next(p, CPC), &acc)?;
            part.emitted = emitted.len() as u64;
            part.state_keys = next.len() as u64;
        }
        Ok(part)
    }

    /// Coordinator side of a replicated incremental iteration.
    pub(crate) fn gather_incremental(&self, t: usize, reduced: Vec<(Vec<u8>, Vec<u8>)>, step: &mut Step) -> Result<()> {
        let old = read_state(self.dirs.file(0, STATE))?;
        let visible = read_state(self.dirs.file(0, VISIBLE))?;
        let consumed = read_state(self.dirs.file(0, PENDING))?;
        let mut acc = read_cpc(self.dirs.file(0, CPC))?;
        let next = if reduced.is_empty() {
            old.clone()
        } else {
            self.app
                .gather(&old, reduced)
                .map_err(|e| crate::engine::callback_error(crate::pool::TaskKind::PrimeReduce, 0, t, b"gather", e))?
        };
        let mut emitted = StateMap::new();
        for (k, v) in &next {
            let prev = old.get(k);
            let d = match prev {
                Some(prev) => self.difference(0, t, k, prev, v)?,
                None => self.difference(0, t, k, &self.app.init(k), v)?,
            };
            step.l1 += d;
            let changed = prev != Some(v);
            if changed {
                step.changed += 1;
            }
            let a = acc.entry(k.clone()).or_insert(0.0);
            if cpc_decide(a, d, self.spec.filter_threshold, changed) {
                emitted.insert(k.clone(), v.clone());
            }
        }
        step.emitted = emitted.len() as u64;
        step.state_keys = next.len() as u64;
        let visible = merged(visible, &consumed);
        for p in 0..self.n {
            step.replicated_bytes += write_state(self.dirs.next(p, STATE), &next)?;
            write_state(self.dirs.next(p, VISIBLE), &visible)?;
            write_state(self.dirs.next(p, PENDING), &emitted)?;
            write_cpc(self.dirs.next(p, CPC), &acc)?;
        }
        Ok(())
    }

    pub(crate) fn apply_auto_off(&mut self, step: &Step) {
        if should_switch_off(step.emitted, step.state_keys, self.spec.auto_off_threshold) {
            log::info!(
                "propagated {} of {} state keys; switching MRBGraph maintenance off",
                step.emitted,
                step.state_keys
            );
            self.state.mrbg_active = false;
        }
    }
}

/// Splits structure delta runs into per-partition delta files. Returns
/// whether any delta record was found.
fn distribute_structure_delta(
    app: &dyn IterativeApp,
    dirs: &IterDirs,
    layout: StateLayout,
    n: usize,
    deltas: &[PathBuf],
) -> Result<bool> {
    let partitioner = Partitioner::new(n);
    let mut parts: Vec<Vec<DeltaRecord>> = (0..n).map(|_| Vec::new()).collect();
    for path in deltas {
        for d in RunReader::<DeltaRecord>::open(path)?.read_all()? {
            let dk = app
                .project(&d.record.key)
                .map_err(|e| crate::engine::callback_error(crate::pool::TaskKind::PrimeMap, 0, 0, &d.record.key, e))?;
            if d.sign == Sign::Insert {
                app.check_structure(&d.record.key, &d.record.value)
                    .map_err(|e| crate::engine::callback_error(crate::pool::TaskKind::PrimeMap, 0, 0, &d.record.key, e))?;
            }
            parts[place(&partitioner, layout, &d.record.key, &dk)].push(d);
        }
    }
    let any = parts.iter().any(|p| !p.is_empty());
    for (p, mut records) in parts.into_iter().enumerate() {
        let path = dirs.file(p, STRUCTURE_DELTA);
        if records.is_empty() {
            if path.exists() {
                fs::remove_file(&path).at(&path)?;
            }
            continue;
        }
        records.sort_by(|a, b| a.record.key.cmp(&b.record.key));
        write_sorted_run(&path, 0, &records)?;
    }
    Ok(any)
}

/// Runs an incremental iterative job. The snapshot in `snapshot` (written
/// by [`crate::iterative::run_iterative`] or a previous incremental job) is
/// copied into `workdir` unless they are the same directory; `deltas` are
/// runs of [`DeltaRecord`] over the structure data.
pub fn run_incr_iterative(
    spec: &JobSpec,
    app: &dyn IterativeApp,
    snapshot: impl AsRef<Path>,
    deltas: &[PathBuf],
    workdir: impl AsRef<Path>,
    failures: FailurePlan,
) -> Result<IterReport> {
    spec.validate()?;
    let source = IterDirs::new(snapshot);
    let dirs = IterDirs::new(workdir);
    let mut meta = IterMeta::load(&source.meta_path())?;
    if meta.app != app.name() {
        return Err(Error::InvalidSpec(format!(
            "snapshot was created by app {}, not {}",
            meta.app,
            app.name()
        )));
    }
    if meta.partitions != spec.partitions {
        return Err(Error::InvalidSpec(format!(
            "snapshot has {} partitions; job requested {}",
            meta.partitions, spec.partitions
        )));
    }
    if spec.preserve_mrbg && !meta.mrbg_valid {
        return Err(Error::InvalidSpec(
            "snapshot has no valid MRBGraph; run a full iterative job with MRBGraph preservation first".into(),
        ));
    }
    let same = fs::canonicalize(&source.root).ok() == fs::canonicalize(&dirs.root).ok();
    if !same {
        fs::create_dir_all(&dirs.root).at(&dirs.root)?;
        replace_dir(&source.parts(), &dirs.parts())?;
    }
    for d in [dirs.checkpoints(), dirs.spill()] {
        if d.exists() {
            fs::remove_dir_all(&d).at(&d)?;
        }
    }
    let n = spec.partitions;
    let layout = meta.layout;
    let has_delta = distribute_structure_delta(app, &dirs, layout, n, deltas)?;

    let mut runner = Runner::new(spec, app, dirs.clone(), layout, failures);
    if spec.preserve_mrbg {
        runner.state.mrbg_active = true;
        runner.state.structure_delta_pending = has_delta;
    } else if has_delta {
        for p in 0..n {
            let structure = read_run_or_empty::<StructureEntry>(dirs.file(p, STRUCTURE))?;
            let sdelta = read_run_or_empty::<DeltaRecord>(dirs.file(p, STRUCTURE_DELTA))?;
            let updated = apply_structure_delta(app, structure, &sdelta)?;
            write_sorted_run(dirs.file(p, STRUCTURE), 0, &updated)?;
            fs::remove_file(dirs.file(p, STRUCTURE_DELTA)).ok();
        }
    }
    if !runner.state.mrbg_active {
        meta.mrbg_valid = false;
        meta.save(&dirs.meta_path())?;
    }
    runner.checkpoint_start(0)?;
    let (iterations, converged) = runner.run_loop(1)?;
    let outputs = runner.export()?;
    meta.lineage += 1;
    meta.iterations = iterations;
    meta.converged = converged;
    // After auto-off the stores are stale; only a full run can rebuild them.
    meta.mrbg_valid = runner.state.mrbg_active;
    meta.save(&dirs.meta_path())?;
    runner.finish_metrics()?;
    Ok(IterReport {
        iterations,
        converged,
        outputs,
        recoveries: runner.recoveries,
        mrbg_active: runner.state.mrbg_active,
        colocated_after_recovery: runner.colocated_after_recovery,
        scheduler: runner.sched.clone(),
        metrics: std::mem::take(&mut runner.metrics),
    })
}
