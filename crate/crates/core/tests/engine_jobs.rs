//! Plain and incremental one-step jobs with small test-local apps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use imr_core::engine::{run_job, Accumulator, JobSpec, MapReduceApp, ReducerKind};
use imr_core::incremental::refresh;
use imr_core::record::{DeltaRecord, KvRecord, MapKey};
use imr_core::result::Outputs;
use imr_core::run::{list_runs, write_sorted_run, RunReader};
use proptest::prelude::*;

/// Counts words; each document emits one edge per distinct word.
struct Count;

impl MapReduceApp for Count {
    fn name(&self) -> &str {
        "count"
    }

    fn map(&self, _key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut per_doc: BTreeMap<&str, u64> = BTreeMap::new();
        for w in std::str::from_utf8(value)?.split_whitespace() {
            *per_doc.entry(w).or_default() += 1;
        }
        Ok(per_doc
            .into_iter()
            .map(|(w, n)| (w.as_bytes().to_vec(), n.to_string().into_bytes()))
            .collect())
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        let mut sum = 0u64;
        for v in values {
            sum += std::str::from_utf8(v)?.parse::<u64>()?;
        }
        Ok(vec![(key.to_vec(), sum.to_string().into_bytes())])
    }

    fn accumulator(&self) -> Option<&dyn Accumulator> {
        Some(self)
    }
}

impl Accumulator for Count {
    fn identity(&self) -> Vec<u8> {
        b"0".to_vec()
    }

    fn accumulate(&self, acc: &[u8], value: &[u8]) -> anyhow::Result<Vec<u8>> {
        let a: u64 = std::str::from_utf8(acc)?.parse()?;
        let b: u64 = std::str::from_utf8(value)?.parse()?;
        Ok((a + b).to_string().into_bytes())
    }
}

/// Passes each record through to a reduce that echoes it.
struct Identity;

impl MapReduceApp for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn map(&self, key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        Ok(vec![(key.to_vec(), value.to_vec())])
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        Ok(values.iter().map(|v| (key.to_vec(), v.to_vec())).collect())
    }
}

/// Mean kept as a `sum,count` pair; every record feeds the key "mean".
struct Mean;

fn pair(v: &[u8]) -> anyhow::Result<(f64, u64)> {
    let (s, c) = std::str::from_utf8(v)?
        .split_once(',')
        .ok_or_else(|| anyhow::anyhow!("expected sum,count"))?;
    Ok((s.parse()?, c.parse()?))
}

impl MapReduceApp for Mean {
    fn name(&self) -> &str {
        "mean"
    }

    fn map(&self, _key: &[u8], value: &[u8]) -> anyhow::Result<Vec<(Vec<u8>, Vec<u8>)>> {
        Ok(vec![(b"mean".to_vec(), value.to_vec())])
    }

    fn reduce(&self, key: &[u8], values: &[&[u8]]) -> anyhow::Result<Outputs> {
        let mut acc = self.identity();
        for v in values {
            acc = self.accumulate(&acc, v)?;
        }
        Ok(vec![(key.to_vec(), acc)])
    }

    fn accumulator(&self) -> Option<&dyn Accumulator> {
        Some(self)
    }
}

impl Accumulator for Mean {
    fn identity(&self) -> Vec<u8> {
        b"0,0".to_vec()
    }

    fn accumulate(&self, acc: &[u8], value: &[u8]) -> anyhow::Result<Vec<u8>> {
        let (s1, c1) = pair(acc)?;
        let (s2, c2) = pair(value)?;
        Ok(format!("{},{}", s1 + s2, c1 + c2).into_bytes())
    }
}

fn spec(partitions: usize, workers: usize) -> JobSpec {
    JobSpec {
        partitions,
        workers,
        ..Default::default()
    }
}

fn write_input(dir: &Path, records: &[KvRecord]) -> PathBuf {
    let mut sorted = records.to_vec();
    sorted.sort();
    let path = dir.join("input.run");
    write_sorted_run(&path, 0, &sorted).unwrap();
    path
}

/// Map keys the plain job assigns to a single sorted input file.
fn with_map_keys(records: &[KvRecord]) -> Vec<(MapKey, KvRecord)> {
    let mut sorted = records.to_vec();
    sorted.sort();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, r)| (MapKey::new(0, i as u64), r))
        .collect()
}

fn write_delta(path: &Path, mut delta: Vec<DeltaRecord>) -> PathBuf {
    // Stable sort keeps each delete ahead of its paired insert.
    delta.sort_by(|a, b| a.record.key.cmp(&b.record.key));
    write_sorted_run(path, 1, &delta).unwrap();
    path.to_path_buf()
}

fn fresh(sequence: u64) -> MapKey {
    MapKey::new(0x8000_0001, sequence)
}

fn output(dir: &Path) -> BTreeMap<Vec<u8>, Vec<u8>> {
    let mut out = BTreeMap::new();
    for path in list_runs(dir.join("output")).unwrap() {
        for rec in RunReader::<KvRecord>::open(&path).unwrap().read_all().unwrap() {
            assert!(out.insert(rec.key, rec.value).is_none(), "duplicate output key");
        }
    }
    out
}

fn output_bytes(dir: &Path) -> Vec<Vec<u8>> {
    list_runs(dir.join("output"))
        .unwrap()
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect()
}

fn docs(texts: &[&str]) -> Vec<KvRecord> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| KvRecord::new(format!("d{i:04}"), *t))
        .collect()
}

#[test]
fn empty_input_gives_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_input(tmp.path(), &[]);
    let report = run_job(&spec(3, 2), &Count, &[input], tmp.path().join("job")).unwrap();
    assert_eq!(report.reduce_invocations, 0);
    assert_eq!(report.output_records, 0);
    assert!(output(&tmp.path().join("job")).is_empty());
}

#[test]
fn output_is_independent_of_workers_and_spills() {
    let tmp = tempfile::tempdir().unwrap();
    let words = ["a", "bb", "c", "dd", "e", "ff", "g"];
    let records: Vec<KvRecord> = (0..2000)
        .map(|i| {
            let text: Vec<&str> = (0..5).map(|j| words[(i * 7 + j * 3) % words.len()]).collect();
            KvRecord::new(format!("d{i:05}"), text.join(" "))
        })
        .collect();
    let input = write_input(tmp.path(), &records);
    let mut seen = Vec::new();
    for (workers, spill_budget) in [(1, usize::MAX / 2), (4, 4096), (3, 1 << 20)] {
        let s = JobSpec {
            spill_budget,
            ..spec(5, workers)
        };
        let dir = tmp.path().join(format!("job-{workers}"));
        run_job(&s, &Count, std::slice::from_ref(&input), &dir).unwrap();
        seen.push(output_bytes(&dir));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn empty_delta_leaves_output_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_input(tmp.path(), &docs(&["a b", "b c", "c d"]));
    let job = tmp.path().join("job");
    run_job(&spec(2, 2), &Count, &[input], &job).unwrap();
    let before = output_bytes(&job);
    let delta = write_delta(&tmp.path().join("delta.run"), Vec::new());
    let report = refresh(&spec(2, 2), &Count, &[delta], &job).unwrap();
    assert_eq!(report.reduce_instances(), 0);
    assert_eq!(output_bytes(&job), before);
}

#[test]
fn single_changed_key_reruns_one_reduce() {
    let tmp = tempfile::tempdir().unwrap();
    let records: Vec<KvRecord> = (0..10_000).map(|i| KvRecord::new(format!("k{i:05}"), "v")).collect();
    let input = write_input(tmp.path(), &records);
    let job = tmp.path().join("job");
    run_job(&spec(4, 4), &Identity, &[input], &job).unwrap();
    let (mk, old) = with_map_keys(&records).swap_remove(4321);
    let delta = write_delta(
        &tmp.path().join("delta.run"),
        vec![
            DeltaRecord::delete(old.clone(), mk),
            DeltaRecord::insert(KvRecord::new(old.key.clone(), "w"), fresh(0)),
        ],
    );
    let report = refresh(&spec(4, 4), &Identity, &[delta], &job).unwrap();
    assert_eq!(report.reduce_invocations, 1);
    assert_eq!(report.retractions, 0);
    let out = output(&job);
    assert_eq!(out.len(), 10_000);
    assert_eq!(out[&old.key], b"w");
}

#[test]
fn accumulator_folds_new_pairs_into_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_input(tmp.path(), &[KvRecord::new("r0", "6,1"), KvRecord::new("r1", "4,1")]);
    let job = tmp.path().join("job");
    let s = JobSpec {
        reducer: ReducerKind::Accumulator,
        ..spec(1, 1)
    };
    run_job(&s, &Mean, &[input], &job).unwrap();
    assert_eq!(output(&job)[b"mean".as_slice()], b"10,2");
    let delta = write_delta(
        &tmp.path().join("delta.run"),
        vec![DeltaRecord::insert(KvRecord::new("r2", "4,1"), fresh(0))],
    );
    let report = refresh(&s, &Mean, &[delta], &job).unwrap();
    assert_eq!(report.reduce_invocations, 1);
    assert_eq!(output(&job)[b"mean".as_slice()], b"14,3");
}

#[test]
fn accumulator_rejects_deletes() {
    let tmp = tempfile::tempdir().unwrap();
    let records = docs(&["a"]);
    let input = write_input(tmp.path(), &records);
    let job = tmp.path().join("job");
    let s = JobSpec {
        reducer: ReducerKind::Accumulator,
        ..spec(1, 1)
    };
    run_job(&s, &Count, &[input], &job).unwrap();
    let (mk, old) = with_map_keys(&records).remove(0);
    let delta = write_delta(&tmp.path().join("delta.run"), vec![DeltaRecord::delete(old, mk)]);
    assert!(refresh(&s, &Count, &[delta], &job).is_err());
}

const WORDS: &[&str] = &["ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen"];

fn doc_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 0..6).prop_map(|w| w.join(" "))
}

#[derive(Debug, Clone)]
enum Change {
    Delete(usize),
    Update(usize, String),
    Insert(String),
}

fn change() -> impl Strategy<Value = Change> {
    prop_oneof![
        any::<usize>().prop_map(Change::Delete),
        (any::<usize>(), doc_text()).prop_map(|(i, t)| Change::Update(i, t)),
        doc_text().prop_map(Change::Insert),
    ]
}

type Live = BTreeMap<Vec<u8>, (MapKey, KvRecord)>;

fn live_input(records: &[KvRecord]) -> Live {
    with_map_keys(records).into_iter().map(|(mk, r)| (r.key.clone(), (mk, r))).collect()
}

/// Applies one round of `changes` to `live` and returns the delta. Each
/// record changes at most once per round; inserts get map keys unique to
/// the round.
fn apply_changes(live: &mut Live, changes: &[Change], round: u32) -> Vec<DeltaRecord> {
    let fresh = |n: usize| MapKey::new(0x8000_0000 | round, n as u64);
    let mut delta = Vec::new();
    let mut touched = std::collections::BTreeSet::new();
    for (n, c) in changes.iter().enumerate() {
        match c {
            Change::Delete(i) | Change::Update(i, _) => {
                if live.is_empty() {
                    continue;
                }
                let key = live.keys().nth(i % live.len()).cloned().unwrap();
                if !touched.insert(key.clone()) {
                    continue;
                }
                let (mk, old) = live.remove(&key).unwrap();
                delta.push(DeltaRecord::delete(old, mk));
                if let Change::Update(_, text) = c {
                    let new = KvRecord::new(key.clone(), text.as_str());
                    delta.push(DeltaRecord::insert(new.clone(), fresh(n)));
                    live.insert(key, (fresh(n), new));
                }
            }
            Change::Insert(text) => {
                let key = format!("r{round}n{n:04}").into_bytes();
                touched.insert(key.clone());
                let new = KvRecord::new(key.clone(), text.as_str());
                delta.push(DeltaRecord::insert(new.clone(), fresh(n)));
                live.insert(key, (fresh(n), new));
            }
        }
    }
    delta
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refresh_matches_recompute(
        base in prop::collection::vec(doc_text(), 0..40),
        rounds in prop::collection::vec(prop::collection::vec(change(), 0..10), 1..4),
        partitions in 1usize..5,
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let s = spec(partitions, 2);
        let texts: Vec<&str> = base.iter().map(String::as_str).collect();
        let records = docs(&texts);
        let mut live = live_input(&records);
        let input = write_input(tmp.path(), &records);
        let job = tmp.path().join("job");
        run_job(&s, &Count, &[input], &job).unwrap();
        for (r, changes) in rounds.iter().enumerate() {
            let delta = apply_changes(&mut live, changes, r as u32 + 1);
            let delta = write_delta(&tmp.path().join(format!("delta-{r}.run")), delta);
            refresh(&s, &Count, &[delta], &job).unwrap();
            let current: Vec<KvRecord> = live.values().map(|(_, rec)| rec.clone()).collect();
            let oracle_dir = tmp.path().join(format!("oracle-{r}"));
            std::fs::create_dir_all(&oracle_dir).unwrap();
            let oracle_input = write_input(&oracle_dir, &current);
            run_job(&s, &Count, &[oracle_input], &oracle_dir).unwrap();
            prop_assert_eq!(output(&job), output(&oracle_dir));
            prop_assert_eq!(output_bytes(&job), output_bytes(&oracle_dir));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn accumulator_general_and_recompute_agree(
        base in prop::collection::vec(doc_text(), 0..12),
        added in prop::collection::vec(doc_text(), 0..6),
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let texts: Vec<&str> = base.iter().map(String::as_str).collect();
        let records = docs(&texts);
        let input = write_input(tmp.path(), &records);
        let inserts: Vec<DeltaRecord> = added
            .iter()
            .enumerate()
            .map(|(i, t)| DeltaRecord::insert(KvRecord::new(format!("n{i:04}"), t.as_str()), fresh(i as u64)))
            .collect();
        let delta = write_delta(&tmp.path().join("delta.run"), inserts.clone());
        let mut results = Vec::new();
        for reducer in [ReducerKind::General, ReducerKind::Accumulator] {
            let s = JobSpec { reducer, ..spec(2, 2) };
            let job = tmp.path().join(format!("{reducer:?}"));
            run_job(&s, &Count, std::slice::from_ref(&input), &job).unwrap();
            refresh(&s, &Count, std::slice::from_ref(&delta), &job).unwrap();
            results.push(output(&job));
        }
        let mut all = records;
        all.extend(inserts.into_iter().map(|d| d.record));
        let oracle_dir = tmp.path().join("oracle");
        std::fs::create_dir_all(&oracle_dir).unwrap();
        let oracle_input = write_input(&oracle_dir, &all);
        run_job(&spec(2, 2), &Count, &[oracle_input], &oracle_dir).unwrap();
        prop_assert_eq!(&results[0], &output(&oracle_dir));
        prop_assert_eq!(&results[1], &output(&oracle_dir));
    }
}
