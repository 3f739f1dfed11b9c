//! Generalized iterated matrix-vector multiplication over a blocked
//! matrix. Structure records are blocks `("i,j", row-major b*b values)`;
//! state is vector blocks `(j, b values)`. Block `(i, j)` depends on
//! vector block `j`, and contributes to the new vector block `i`.

use std::sync::Arc;

use anyhow::{bail, Context};
use imr_core::iterative::{IterativeApp, Pair, Projection};

use crate::codec::{fmt_vec, parse_vec, utf8};

/// The three operators that specialize GIM-V.
pub trait GimvOps: Send + Sync {
    fn combine2(&self, m: f64, v: f64) -> f64;
    fn combine_all_identity(&self) -> f64;
    /// Associative and commutative.
    fn combine_all(&self, acc: f64, x: f64) -> f64;
    /// `old` is present when the block's diagonal matrix block exists.
    fn assign(&self, old: Option<f64>, combined: f64) -> f64;
}

/// Plain matrix-vector multiplication: multiply, sum, replace.
#[derive(Debug, Clone, Copy, Default)]
pub struct MatVec;

impl GimvOps for MatVec {
    fn combine2(&self, m: f64, v: f64) -> f64 {
        m * v
    }

    fn combine_all_identity(&self) -> f64 {
        0.0
    }

    fn combine_all(&self, acc: f64, x: f64) -> f64 {
        acc + x
    }

    fn assign(&self, _old: Option<f64>, combined: f64) -> f64 {
        combined
    }
}

pub fn block_key(i: usize, j: usize) -> Vec<u8> {
    format!("{i},{j}").into_bytes()
}

pub fn parse_block_key(sk: &[u8]) -> anyhow::Result<(usize, usize)> {
    let text = utf8(sk)?;
    let (i, j) = text
        .split_once(',')
        .with_context(|| format!("block key '{text}' is not 'i,j'"))?;
    Ok((i.parse().context("block row")?, j.parse().context("block column")?))
}

#[derive(Clone)]
pub struct Gimv {
    block: usize,
    ops: Arc<dyn GimvOps>,
    initial: f64,
}

impl std::fmt::Debug for Gimv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gimv").field("block", &self.block).finish()
    }
}

impl Gimv {
    /// `block` is the side length of every matrix block; vector elements
    /// without state start at `initial`.
    pub fn new(block: usize, initial: f64, ops: Arc<dyn GimvOps>) -> anyhow::Result<Self> {
        if block == 0 {
            bail!("block size must be positive");
        }
        Ok(Gimv { block, ops, initial })
    }

    pub fn matvec(block: usize, initial: f64) -> anyhow::Result<Self> {
        Self::new(block, initial, Arc::new(MatVec))
    }

    fn sized(&self, what: &str, bytes: &[u8], len: usize) -> anyhow::Result<Vec<f64>> {
        let v = parse_vec(bytes)?;
        if v.len() != len {
            bail!("{what} has {} values, expected {len}", v.len());
        }
        Ok(v)
    }
}

/// A partial product for row block `i`, plus the old `v_i` when the
/// contributing matrix block is on the diagonal.
fn encode_partial(partial: &[f64], old: Option<&[f64]>) -> Vec<u8> {
    let mut out = fmt_vec(partial);
    if let Some(old) = old {
        out.push(b'|');
        out.extend(fmt_vec(old));
    }
    out
}

impl IterativeApp for Gimv {
    fn name(&self) -> &str {
        "gimv"
    }

    fn projection(&self) -> Projection {
        Projection::ManyToOne
    }

    fn project(&self, sk: &[u8]) -> anyhow::Result<Vec<u8>> {
        let (_, j) = parse_block_key(sk)?;
        Ok(j.to_string().into_bytes())
    }

    fn init(&self, _dk: &[u8]) -> Vec<u8> {
        fmt_vec(&vec![self.initial; self.block])
    }

    fn check_structure(&self, sk: &[u8], sv: &[u8]) -> anyhow::Result<()> {
        parse_block_key(sk)?;
        self.sized("matrix block", sv, self.block * self.block).map(|_| ())
    }

    fn map(&self, sk: &[u8], sv: &[u8], _dk: &[u8], dv: &[u8]) -> anyhow::Result<Vec<Pair>> {
        let (i, j) = parse_block_key(sk)?;
        let b = self.block;
        let m = self.sized("matrix block", sv, b * b)?;
        let v = self.sized("vector block", dv, b)?;
        let partial: Vec<f64> = (0..b)
            .map(|r| {
                (0..b).fold(self.ops.combine_all_identity(), |acc, c| {
                    self.ops.combine_all(acc, self.ops.combine2(m[r * b + c], v[c]))
                })
            })
            .collect();
        let old = (i == j).then_some(v.as_slice());
        Ok(vec![(i.to_string().into_bytes(), encode_partial(&partial, old))])
    }

    fn reduce(&self, _k2: &[u8], values: &[&[u8]]) -> anyhow::Result<Vec<u8>> {
        let b = self.block;
        let mut combined = vec![self.ops.combine_all_identity(); b];
        let mut old = None;
        for v in values {
            let (partial, prev) = match v.iter().position(|&c| c == b'|') {
                Some(at) => (&v[..at], Some(&v[at + 1..])),
                None => (*v, None),
            };
            for (acc, x) in combined.iter_mut().zip(self.sized("partial product", partial, b)?) {
                *acc = self.ops.combine_all(*acc, x);
            }
            if let Some(prev) = prev {
                old = Some(self.sized("vector block", prev, b)?);
            }
        }
        let next: Vec<f64> = (0..b)
            .map(|r| self.ops.assign(old.as_ref().map(|o| o[r]), combined[r]))
            .collect();
        Ok(fmt_vec(&next))
    }

    fn difference(&self, prev: &[u8], curr: &[u8]) -> anyhow::Result<f64> {
        let (a, b) = (parse_vec(prev)?, parse_vec(curr)?);
        if a.len() != b.len() {
            bail!("vector blocks differ in length");
        }
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum())
    }
}
