//! `imr run` and the maintenance commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use imr_core::engine::{run_job, JobSpec, ReducerKind};
use imr_core::faults::{CheckpointStore, FailurePlan};
use imr_core::incr_iter::run_incr_iterative;
use imr_core::incremental::refresh;
use imr_core::iterative::{read_output_state, run_iterative, IterDirs, RunOptions};
use imr_core::mrbg::{CompactionReport, MrbgStore, ReadPolicy, StoreConfig, DATA_FILE};
use serde::{Deserialize, Serialize};

use crate::apps::{self, input_runs, AppKind, AppParams};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One-step job from scratch.
    #[default]
    Plain,
    /// One-step refresh of a preserved job with a delta.
    Incr,
    /// Iterative job from scratch.
    Iter,
    /// Iterative job seeded from a converged snapshot and a structure delta.
    IncrIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Reducer {
    #[default]
    General,
    Accumulator,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = Mode::Plain)]
    pub mode: Mode,
    #[arg(long, value_enum)]
    pub app: AppKind,
    /// Input directory of a plain job.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Structure directory of an iterative job.
    #[arg(long)]
    pub structure: Option<PathBuf>,
    /// Optional initial state directory of an iterative job.
    #[arg(long)]
    pub init_state: Option<PathBuf>,
    /// Delta directory of an incremental one-step job.
    #[arg(long)]
    pub delta: Option<PathBuf>,
    /// Structure delta directory of an incremental iterative job.
    #[arg(long)]
    pub delta_structure: Option<PathBuf>,
    /// Converged snapshot that seeds an incremental iterative job.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Working directory of the job; also the preserved state of `incr`.
    #[arg(long, env = "IMR_WORKDIR", visible_aliases = ["state", "out"])]
    pub workdir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub partitions: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = Reducer::General)]
    pub reducer: Reducer,
    /// Do not preserve the MRBGraph.
    #[arg(long)]
    pub no_mrbg: bool,
    #[arg(long = "tol", default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    /// Change propagation threshold; unset propagates every change.
    #[arg(long)]
    pub filter_thresh: Option<f64>,
    /// Propagated fraction of state above which MRBGraph maintenance stops.
    #[arg(long, default_value_t = 0.5)]
    pub auto_off: f64,
    #[arg(long)]
    pub divergence_patience: Option<usize>,
    /// Checkpoint every k iterations; 0 disables.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    /// JSON failure plan.
    #[arg(long)]
    pub inject_failures: Option<PathBuf>,
    #[arg(long, default_value = "multi-dynamic")]
    pub read_policy: ReadPolicy,
    #[arg(long, default_value_t = imr_core::mrbg::DEFAULT_READ_CACHE)]
    pub read_cache: u64,
    #[arg(long, default_value_t = imr_core::mrbg::DEFAULT_GAP_THRESHOLD)]
    pub gap_threshold: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub params: AppParams,
}

impl RunArgs {
    pub fn new(mode: Mode, app: AppKind) -> Self {
        RunArgs {
            mode,
            app,
            input: None,
            structure: None,
            init_state: None,
            delta: None,
            delta_structure: None,
            snapshot: None,
            workdir: None,
            partitions: 4,
            workers: 4,
            reducer: Reducer::General,
            no_mrbg: false,
            tolerance: 1e-6,
            max_iters: 50,
            filter_thresh: None,
            auto_off: 0.5,
            divergence_patience: None,
            checkpoint_every: 1,
            inject_failures: None,
            read_policy: ReadPolicy::MultiDynamic,
            read_cache: imr_core::mrbg::DEFAULT_READ_CACHE,
            gap_threshold: imr_core::mrbg::DEFAULT_GAP_THRESHOLD,
            seed: 0,
            params: AppParams::default(),
        }
    }

    pub fn spec(&self) -> JobSpec {
        JobSpec {
            partitions: self.partitions,
            workers: self.workers,
            reducer: match self.reducer {
                Reducer::General => ReducerKind::General,
                Reducer::Accumulator => ReducerKind::Accumulator,
            },
            preserve_mrbg: !self.no_mrbg,
            store: StoreConfig {
                read_cache_size: self.read_cache,
                gap_threshold: self.gap_threshold,
                policy: self.read_policy,
                ..Default::default()
            },
            max_iterations: self.max_iters,
            tolerance: self.tolerance,
            filter_threshold: self.filter_thresh,
            auto_off_threshold: self.auto_off,
            divergence_patience: self.divergence_patience,
            checkpoint_interval: self.checkpoint_every,
            ..Default::default()
        }
    }

    fn workdir(&self) -> anyhow::Result<PathBuf> {
        match (&self.workdir, self.mode, &self.snapshot) {
            (Some(w), _, _) => Ok(w.clone()),
            (None, Mode::IncrIter, Some(s)) => Ok(s.clone()),
            _ => bail!("no working directory: pass --workdir or set IMR_WORKDIR"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub workdir: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub manifest: RunManifest,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, mode: Mode) -> anyhow::Result<&'a Path> {
    v.as_deref()
        .with_context(|| format!("--{flag} is required in {} mode", mode_name(mode)))
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Plain => "plain",
        Mode::Incr => "incr",
        Mode::Iter => "iter",
        Mode::IncrIter => "incr-iter",
    }
}

/// Rejects input flags the chosen mode would otherwise ignore.
fn check_inputs(args: &RunArgs) -> anyhow::Result<()> {
    let given = [
        ("input", args.input.is_some(), Mode::Plain),
        ("structure", args.structure.is_some(), Mode::Iter),
        ("init-state", args.init_state.is_some(), Mode::Iter),
        ("delta", args.delta.is_some(), Mode::Incr),
        ("delta-structure", args.delta_structure.is_some(), Mode::IncrIter),
        ("snapshot", args.snapshot.is_some(), Mode::IncrIter),
    ];
    for (flag, present, mode) in given {
        if present && mode != args.mode {
            bail!(
                "--{flag} applies to {} mode, not {} mode",
                mode_name(mode),
                mode_name(args.mode)
            );
        }
    }
    Ok(())
}

pub fn run(args: &RunArgs) -> anyhow::Result<RunOutcome> {
    check_inputs(args)?;
    let spec = args.spec();
    let workdir = args.workdir()?;
    std::fs::create_dir_all(&workdir).with_context(|| format!("creating {}", workdir.display()))?;
    let failures = match &args.inject_failures {
        Some(p) => FailurePlan::load(p)?,
        None => FailurePlan::default(),
    };
    let mut summary = Vec::new();
    let (inputs, outputs, iterations, converged, recoveries) = match args.mode {
        Mode::Plain => {
            let inputs = input_runs(required(&args.input, "input", args.mode)?)?;
            let app = apps::one_step(args.app, &args.params)?;
            let report = run_job(&spec, app.as_ref(), &inputs, &workdir)?;
            summary.push(format!(
                "map invocations {}, reduce invocations {}, output records {}",
                report.map_invocations, report.reduce_invocations, report.output_records
            ));
            (inputs, report.outputs, None, None, 0)
        }
        Mode::Incr => {
            let deltas = input_runs(required(&args.delta, "delta", args.mode)?)?;
            let app = apps::one_step(args.app, &args.params)?;
            let report = refresh(&spec, app.as_ref(), &deltas, &workdir)?;
            summary.push(format!(
                "delta map invocations {}, reduce invocations {}, retractions {}, output records {}",
                report.map_invocations, report.reduce_invocations, report.retractions, report.output_records
            ));
            (deltas, report.outputs, None, None, 0)
        }
        Mode::Iter => {
            let structure = input_runs(required(&args.structure, "structure", args.mode)?)?;
            let initial_state = match &args.init_state {
                Some(dir) => input_runs(dir)?,
                None => Vec::new(),
            };
            let app = apps::iterative(args.app, &args.params, &structure, None, args.seed)?;
            let report = run_iterative(
                &spec,
                app.as_ref(),
                &structure,
                &workdir,
                RunOptions {
                    initial_state,
                    failures,
                },
            )?;
            summary.push(format!("iterations {}, converged {}", report.iterations, report.converged));
            (structure, report.outputs, Some(report.iterations), Some(report.converged), report.recoveries)
        }
        Mode::IncrIter => {
            let snapshot = required(&args.snapshot, "snapshot", args.mode)?;
            let deltas = match &args.delta_structure {
                Some(dir) => input_runs(dir)?,
                None => Vec::new(),
            };
            let state = read_output_state(IterDirs::new(snapshot).output_dir())?;
            let app = apps::iterative(args.app, &args.params, &[], Some(&state), args.seed)?;
            let report = run_incr_iterative(&spec, app.as_ref(), snapshot, &deltas, &workdir, failures)?;
            summary.push(format!(
                "iterations {}, converged {}, MRBGraph maintained {}, recoveries {}",
                report.iterations, report.converged, report.mrbg_active, report.recoveries
            ));
            (deltas, report.outputs, Some(report.iterations), Some(report.converged), report.recoveries)
        }
    };
    let mut manifest = RunManifest::new(args.mode, args.app, args.params.clone(), args.seed, spec, &inputs, &outputs)?;
    manifest.iterations = iterations;
    manifest.converged = converged;
    manifest.recoveries = recoveries;
    manifest.save(&workdir)?;
    summary.push(format!("run id {}", manifest.run_id));
    Ok(RunOutcome {
        workdir,
        outputs,
        manifest,
        summary,
    })
}

/// Every MRBGraph store directory under `root`.
pub fn find_stores(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(DATA_FILE).exists() {
            out.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() && entry.file_name() != "ckpt" {
                stack.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn compact_all(root: &Path) -> anyhow::Result<Vec<(PathBuf, CompactionReport)>> {
    let mut out = Vec::new();
    for dir in find_stores(root)? {
        let mut store = MrbgStore::open(&dir, StoreConfig::default())?;
        let report = store.compact()?;
        out.push((dir, report));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointStatus {
    pub iteration: usize,
    pub bytes: u64,
    /// `None` when the manifest verifies, else the rejection reason.
    pub problem: Option<String>,
}

pub fn list_checkpoints(workdir: &Path) -> anyhow::Result<Vec<CheckpointStatus>> {
    let store = CheckpointStore::new(IterDirs::new(workdir).checkpoints(), 3);
    let mut out = Vec::new();
    for iteration in store.list()? {
        out.push(match store.verify(iteration) {
            Ok(m) => CheckpointStatus {
                iteration,
                bytes: m.total_bytes(),
                problem: None,
            },
            Err(e) => CheckpointStatus {
                iteration,
                bytes: 0,
                problem: Some(e.to_string()),
            },
        });
    }
    Ok(out)
}
