//! K-means clustering over points `(id, "x1,x2,...")`. The whole centroid
//! set is one state value under key `"1"`, replicated to every partition.

use anyhow::{bail, Context};
use imr_core::iterative::{IterativeApp, Pair, Projection, StateMap};

use crate::codec::{fmt_vec, parse_vec, utf8};

pub const CENTROIDS_KEY: &[u8] = b"1";

pub type Centroids = Vec<Vec<f64>>;

/// `"x,y;x,y;..."`, one centroid per cluster id `0..k`.
pub fn encode_centroids(centroids: &[Vec<f64>]) -> Vec<u8> {
    centroids
        .iter()
        .map(|c| fmt_vec(c))
        .collect::<Vec<_>>()
        .join(&b';')
}

pub fn decode_centroids(bytes: &[u8]) -> anyhow::Result<Centroids> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    bytes.split(|&b| b == b';').map(parse_vec).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the smallest id.
pub fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeans {
    initial: Centroids,
    dims: usize,
}

impl KMeans {
    pub fn new(initial: Centroids) -> anyhow::Result<Self> {
        let Some(first) = initial.first() else {
            bail!("k-means needs at least one initial centroid");
        };
        let dims = first.len();
        if dims == 0 || initial.iter().any(|c| c.len() != dims) {
            bail!("initial centroids must share one non-zero dimension");
        }
        Ok(KMeans { initial, dims })
    }

    pub fn k(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &Centroids {
        &self.initial
    }

    fn point(&self, bytes: &[u8]) -> anyhow::Result<Vec<f64>> {
        let p = parse_vec(bytes)?;
        if p.len() != self.dims {
            bail!("point has {} coordinates, expected {}", p.len(), self.dims);
        }
        Ok(p)
    }

    fn centroids(&self, bytes: &[u8]) -> anyhow::Result<Centroids> {
        let c = decode_centroids(bytes)?;
        if c.len() != self.k() || c.iter().any(|c| c.len() != self.dims) {
            bail!("centroid set does not hold {} centroids of dimension {}", self.k(), self.dims);
        }
        Ok(c)
    }
}

impl IterativeApp for KMeans {
    fn name(&self) -> &str {
        "kmeans"
    }

    fn projection(&self) -> Projection {
        Projection::AllToOne
    }

    fn project(&self, _sk: &[u8]) -> anyhow::Result<Vec<u8>> {
        Ok(CENTROIDS_KEY.to_vec())
    }

    fn init(&self, _dk: &[u8]) -> Vec<u8> {
        encode_centroids(&self.initial)
    }

    fn check_structure(&self, _sk: &[u8], sv: &[u8]) -> anyhow::Result<()> {
        self.point(sv).map(|_| ())
    }

    fn map(&self, _sk: &[u8], sv: &[u8], _dk: &[u8], dv: &[u8]) -> anyhow::Result<Vec<Pair>> {
        let centroids = self.centroids(dv)?;
        let point = self.point(sv)?;
        let cid = nearest(&centroids, &point);
        Ok(vec![(cid.to_string().into_bytes(), sv.to_vec())])
    }

    fn reduce(&self, _k2: &[u8], values: &[&[u8]]) -> anyhow::Result<Vec<u8>> {
        let mut sum = vec![0.0; self.dims];
        for v in values {
            for (s, x) in sum.iter_mut().zip(self.point(v)?) {
                *s += x;
            }
        }
        let n = values.len() as f64;
        Ok(fmt_vec(&sum.iter().map(|s| s / n).collect::<Vec<_>>()))
    }

    fn difference(&self, prev: &[u8], curr: &[u8]) -> anyhow::Result<f64> {
        let (a, b) = (self.centroids(prev)?, self.centroids(curr)?);
        Ok(a.iter()
            .zip(&b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .sum())
    }

    /// Clusters without points keep their previous centroid.
    fn gather(&self, state: &StateMap, reduced: Vec<Pair>) -> anyhow::Result<StateMap> {
        let mut centroids = match state.get(CENTROIDS_KEY) {
            Some(v) => self.centroids(v)?,
            None => self.initial.clone(),
        };
        for (cid, value) in reduced {
            let i: usize = utf8(&cid)?.parse().context("cluster id")?;
            if i >= centroids.len() {
                bail!("cluster id {i} out of range");
            }
            centroids[i] = self.point(&value)?;
        }
        Ok([(CENTROIDS_KEY.to_vec(), encode_centroids(&centroids))].into())
    }
}
