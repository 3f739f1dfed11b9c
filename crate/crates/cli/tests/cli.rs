//! Drives the `imr` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn imr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imr"))
        .args(args)
        .current_dir(dir)
        .env_remove("IMR_WORKDIR")
        .output()
        .expect("spawn imr")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = imr(dir, args);
    assert!(
        out.status.success(),
        "imr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const GRAPH: &[&str] = &["--vertices", "300", "--degree", "4"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_with(dir: &Path, base: &[&str], extra: &[&str]) -> String {
    let args = with(base, extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &refs)
}

#[test]
fn pagerank_incremental_run_matches_recompute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok_with(d, &["gen-data", "--app", "pagerank", "--out", "g", "--seed", "1"], GRAPH);
    let iter = ["run", "--mode", "iter", "--app", "pagerank", "--tol", "1e-10", "--max-iters", "200"];
    ok_with(d, &iter, &["--structure", "g", "--workdir", "snap"]);
    ok_with(
        d,
        &["gen-delta", "--app", "pagerank", "--base", "g", "--out", "delta", "--fraction", "0.05", "--seed", "2"],
        GRAPH,
    );
    let summary = ok(
        d,
        &[
            "run", "--mode", "incr-iter", "--app", "pagerank", "--snapshot", "snap", "--delta-structure", "delta",
            "--workdir", "incr", "--tol", "1e-10", "--max-iters", "200",
        ],
    );
    assert!(summary.contains("converged true"), "{summary}");
    ok_with(d, &iter, &["--structure", "delta/updated", "--workdir", "full"]);

    let verdict = ok(d, &["compare", "incr", "full", "--tol", "1e-9"]);
    assert!(verdict.contains("verdict: PASS"), "{verdict}");
    // The stale snapshot differs from the recompute.
    let stale = imr(d, &["compare", "snap", "full", "--tol", "1e-9"]);
    assert_eq!(stale.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&stale.stdout).contains("verdict: FAIL"));

    let listing = ok(d, &["checkpoint-ls", "--workdir", "snap"]);
    assert!(listing.lines().all(|l| l.contains(": ok, ")), "{listing}");
    let compacted = ok(d, &["compact", "--workdir", "incr"]);
    assert_eq!(compacted.lines().count(), 4, "{compacted}");
    let verdict = ok(d, &["compare", "incr", "full", "--tol", "1e-9"]);
    assert!(verdict.contains("verdict: PASS"));
}

#[test]
fn wordcount_refresh_matches_recompute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = ["--records", "500", "--vocab", "200", "--doc-len", "8"];
    ok_with(d, &["gen-data", "--app", "wordcount", "--out", "docs", "--seed", "3"], &data);
    ok(d, &["run", "--app", "wordcount", "--input", "docs", "--workdir", "job"]);
    ok_with(
        d,
        &["gen-delta", "--app", "wordcount", "--base", "docs", "--out", "delta", "--fraction", "0.1", "--seed", "4"],
        &data,
    );
    let summary = ok(d, &["run", "--mode", "incr", "--app", "wordcount", "--delta", "delta", "--workdir", "job"]);
    assert!(summary.contains("reduce invocations"), "{summary}");
    ok(d, &["run", "--app", "wordcount", "--input", "delta/updated", "--workdir", "full"]);
    let verdict = ok(d, &["compare", "job", "full", "--tol", "0"]);
    assert!(verdict.contains("verdict: PASS"), "{verdict}");
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok_with(d, &["gen-data", "--app", "pagerank", "--out", "g"], GRAPH);
    ok(d, &["run", "--mode", "iter", "--app", "pagerank", "--structure", "g", "--workdir", "w", "--max-iters", "3"]);
    let ckpt = d.join("w/ckpt");
    let latest = std::fs::read_dir(&ckpt)
        .unwrap()
        .map(|e| e.unwrap().path())
        .max_by_key(|p| p.file_name().unwrap().to_string_lossy().parse::<usize>().unwrap_or(0))
        .unwrap();
    let victim = latest.join("0/state.run");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    let out = imr(d, &["checkpoint-ls", "--workdir", "w"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("invalid"));
}

#[test]
fn import_and_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("edges.txt"), "1 2\n2 3\n3 1\n").unwrap();
    ok(d, &["import", "--format", "edges", "--input", "edges.txt", "--out", "g"]);
    let text = ok(d, &["dump", "g/part-00000.run"]);
    assert_eq!(text, "1\t2\n2\t3\n3\t1\n");
    let summary = ok(
        d,
        &["run", "--mode", "iter", "--app", "pagerank", "--structure", "g", "--workdir", "w", "--tol", "1e-12"],
    );
    assert!(summary.contains("converged true"), "{summary}");
    let ranks = ok(d, &["dump", "w/output"]);
    let values: Vec<f64> = ranks
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|v| (v - 1.0).abs() < 1e-9), "{ranks}");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let no_workdir = imr(d, &["run", "--app", "wordcount", "--input", "x"]);
    assert_eq!(no_workdir.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_workdir.stderr).contains("IMR_WORKDIR"));

    let misplaced = imr(d, &["run", "--mode", "incr-iter", "--app", "pagerank", "--snapshot", "s", "--delta", "x", "--workdir", "w"]);
    assert_eq!(misplaced.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&misplaced.stderr).contains("--delta"));

    let missing = imr(d, &["compare", "nowhere", "nothing"]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_flag = imr(d, &["run", "--app", "wordcount", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
}

#[test]
fn workdir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("docs.txt"), "a b\nb c\n").unwrap();
    ok(d, &["import", "--format", "docs", "--input", "docs.txt", "--out", "docs"]);
    let out = Command::new(env!("CARGO_BIN_EXE_imr"))
        .args(["run", "--app", "wordcount", "--input", "docs"])
        .current_dir(d)
        .env("IMR_WORKDIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let counts = ok(d, &["dump", "from-env/output"]);
    let mut lines: Vec<&str> = counts.lines().filter(|l| !l.starts_with('#')).collect();
    lines.sort();
    assert_eq!(lines, vec!["a\t1", "b\t2", "c\t1"]);
}
