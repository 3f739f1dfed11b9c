//! Maps app names and command-line parameters to app instances.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use imr_apps::codec::parse_vec;
use imr_apps::kmeans::{decode_centroids, CENTROIDS_KEY};
use imr_apps::{Gimv, InEdgeSum, KMeans, PageRank, PairCount, Sssp, WordCount};
use imr_core::engine::MapReduceApp;
use imr_core::iterative::{IterativeApp, StateMap};
use imr_core::record::KvRecord;
use imr_core::run::RunReader;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppKind {
    #[default]
    Wordcount,
    Paircount,
    Inedge,
    Pagerank,
    Sssp,
    Kmeans,
    Gimv,
}

impl AppKind {
    pub fn is_iterative(self) -> bool {
        matches!(self, AppKind::Pagerank | AppKind::Sssp | AppKind::Kmeans | AppKind::Gimv)
    }

    pub fn name(self) -> &'static str {
        match self {
            AppKind::Wordcount => "wordcount",
            AppKind::Paircount => "paircount",
            AppKind::Inedge => "inedge",
            AppKind::Pagerank => "pagerank",
            AppKind::Sssp => "sssp",
            AppKind::Kmeans => "kmeans",
            AppKind::Gimv => "gimv",
        }
    }
}

impl std::fmt::Display for AppKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppParams {
    /// PageRank damping factor.
    #[arg(long, default_value_t = imr_apps::pagerank::DEFAULT_DAMPING)]
    pub damping: f64,
    /// SSSP source vertex.
    #[arg(long, default_value = "0")]
    pub source: String,
    /// Number of k-means clusters, seeded from a sample of the points.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// GIM-V matrix block side length.
    #[arg(long, default_value_t = 4)]
    pub block_size: usize,
    /// GIM-V initial vector element.
    #[arg(long, default_value_t = 1.0)]
    pub gimv_init: f64,
    /// Candidate pairs for paircount, one `a,b` per line.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

impl Default for AppParams {
    fn default() -> Self {
        AppParams {
            damping: imr_apps::pagerank::DEFAULT_DAMPING,
            source: "0".into(),
            k: 4,
            block_size: 4,
            gimv_init: 1.0,
            candidates: None,
        }
    }
}

pub fn one_step(kind: AppKind, params: &AppParams) -> anyhow::Result<Box<dyn MapReduceApp>> {
    Ok(match kind {
        AppKind::Wordcount => Box::new(WordCount),
        AppKind::Inedge => Box::new(InEdgeSum),
        AppKind::Paircount => {
            let path = params
                .candidates
                .as_ref()
                .context("paircount needs --candidates")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(PairCount::from_lines(&text)?)
        }
        other => bail!("{other} is an iterative app; use --mode iter or incr-iter"),
    })
}

/// Builds an iterative app. K-means takes its centroids from `state` when
/// resuming, otherwise samples `k` points from `structure` with `seed`.
pub fn iterative(
    kind: AppKind,
    params: &AppParams,
    structure: &[PathBuf],
    state: Option<&StateMap>,
    seed: u64,
) -> anyhow::Result<Box<dyn IterativeApp>> {
    Ok(match kind {
        AppKind::Pagerank => Box::new(PageRank::new(params.damping)?),
        AppKind::Sssp => Box::new(Sssp::new(params.source.as_bytes())),
        AppKind::Gimv => Box::new(Gimv::matvec(params.block_size, params.gimv_init)?),
        AppKind::Kmeans => {
            let centroids = match state.and_then(|s| s.get(CENTROIDS_KEY)) {
                Some(v) => decode_centroids(v)?,
                None => sample_centroids(structure, params.k, seed)?,
            };
            Box::new(KMeans::new(centroids)?)
        }
        other => bail!("{other} is a one-step app; use --mode plain or incr"),
    })
}

/// `k` distinct points chosen uniformly with `seed`, in input order.
pub fn sample_centroids(structure: &[PathBuf], k: usize, seed: u64) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut points = Vec::new();
    for path in structure {
        for rec in RunReader::<KvRecord>::open(path)?.read_all()? {
            points.push(rec.value);
        }
    }
    if k == 0 || k > points.len() {
        bail!("cannot seed {k} centroids from {} points", points.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, points.len(), k).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| parse_vec(&points[i])).collect()
}

pub fn input_runs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let runs = imr_core::run::list_runs(dir)?;
    if runs.is_empty() {
        bail!("no .run files in {}", dir.display());
    }
    Ok(runs)
}
