//! Brute-force reference attention in double precision.
//!
//! These routines are the correctness oracle for the tiled engine: they
//! materialize every score row, subtract the row maximum, and normalize in
//! `f64`. Gated runs are checked against [`masked_dense_attention`] using the
//! block mask reconstructed from the run's own trace.

use serde::{Deserialize, Serialize};

use crate::engine::tiles::{BlockKind, TileConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One attention head's projections. Row `i` of `q` attends to rows `0..=i`
/// of `k`/`v` when `causal` is set, and to every row otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInput {
    pub q: Matrix<f32>,
    pub k: Matrix<f32>,
    pub v: Matrix<f32>,
    pub causal: bool,
}

impl HeadInput {
    pub fn new(q: Matrix<f32>, k: Matrix<f32>, v: Matrix<f32>, causal: bool) -> Result<Self> {
        let input = Self { q, k, v, causal };
        input.validate()?;
        Ok(input)
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.q.rows(), self.q.cols());
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!("empty head input ({n}x{d})")));
        }
        for (name, m) in [("k", &self.k), ("v", &self.v)] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::InvalidInput(format!(
                    "{name} is {}x{}, expected {n}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, m) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if let Some(pos) = m.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite entry in {name} at row {}, col {}",
                    pos / d,
                    pos % d
                )));
            }
        }
        Ok(())
    }
}

/// Attention output rows and the per-row log-sum-exp of the scaled scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub o: Matrix<T>,
    pub logsumexp: Vec<T>,
}

impl AttentionOutput<f32> {
    pub fn to_f64(&self) -> AttentionOutput<f64> {
        AttentionOutput { o: self.o.map(|&x| x as f64), logsumexp: self.logsumexp.iter().map(|&x| x as f64).collect() }
    }
}

/// Which (query block, kv block) pairs a run was allowed to use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    m_q: usize,
    m_kv: usize,
    allowed: Vec<bool>,
}

impl BlockMask {
    pub fn new(m_q: usize, m_kv: usize, fill: bool) -> Self {
        Self { m_q, m_kv, allowed: vec![fill; m_q * m_kv] }
    }

    /// Mask that admits only the frontier blocks of every query block.
    pub fn frontier_only(n: usize, tiles: TileConfig, causal: bool) -> Self {
        let grid = tiles.grid(n, causal);
        let mut mask = Self::new(grid.m_q(), grid.m_kv(), false);
        for i in 0..grid.m_q() {
            for j in grid.frontier(i) {
                mask.set(i, j, true);
            }
        }
        mask
    }

    #[inline]
    pub fn m_q(&self) -> usize {
        self.m_q
    }

    #[inline]
    pub fn m_kv(&self) -> usize {
        self.m_kv
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.m_kv + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allowed[i * self.m_kv + j] = allowed;
    }

    /// Checks the mask invariants against a grid: frontier blocks on,
    /// unreachable blocks off.
    pub fn check(&self, n: usize, tiles: TileConfig, causal: bool) -> Result<()> {
        let grid = tiles.grid(n, causal);
        if grid.m_q() != self.m_q || grid.m_kv() != self.m_kv {
            return Err(Error::Config(format!(
                "mask is {}x{} blocks but the input grid is {}x{}",
                self.m_q,
                self.m_kv,
                grid.m_q(),
                grid.m_kv()
            )));
        }
        for i in 0..self.m_q {
            for j in 0..self.m_kv {
                match (grid.classify(i, j), self.allowed(i, j)) {
                    (BlockKind::Frontier, false) => {
                        return Err(Error::Config(format!("frontier block ({i},{j}) is masked out")))
                    }
                    (BlockKind::Unreachable, true) => {
                        return Err(Error::Config(format!("unreachable block ({i},{j}) is marked allowed")))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// `softmax(Q K^T / sqrt(d)) V` with the causal mask when requested.
pub fn dense_attention(input: &HeadInput) -> Result<AttentionOutput<f64>> {
    input.validate()?;
    restricted_attention(input, |_, _| true)
}

/// Dense attention where each query row only sees keys inside allowed blocks
/// (intersected with its causal range), renormalized over that set.
pub fn masked_dense_attention(
    input: &HeadInput,
    mask: &BlockMask,
    tiles: TileConfig,
) -> Result<AttentionOutput<f64>> {
    input.validate()?;
    let grid = tiles.grid(input.seq_len(), input.causal);
    if grid.m_q() != mask.m_q() || grid.m_kv() != mask.m_kv() {
        return Err(Error::Config(format!(
            "mask is {}x{} blocks but the input grid is {}x{}",
            mask.m_q(),
            mask.m_kv(),
            grid.m_q(),
            grid.m_kv()
        )));
    }
    let (b_m, b_n) = (tiles.b_m(), tiles.b_n());
    restricted_attention(input, |row, key| mask.allowed(row / b_m, key / b_n))
}

/// Softmax probabilities of one query row over all keys (zero where masked),
/// in double precision.
pub fn attention_probabilities(input: &HeadInput, row: usize) -> Vec<f64> {
    let scores = score_row(input, row);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn score_row(input: &HeadInput, row: usize) -> Vec<f64> {
    let n = input.seq_len();
    let scale = 1.0 / (input.head_dim() as f64).sqrt();
    let q = input.q.row(row);
    (0..n)
        .map(|key| {
            if input.causal && key > row {
                f64::NEG_INFINITY
            } else {
                dot64(q, input.k.row(key)) * scale
            }
        })
        .collect()
}

fn restricted_attention(
    input: &HeadInput,
    visible: impl Fn(usize, usize) -> bool,
) -> Result<AttentionOutput<f64>> {
    let n = input.seq_len();
    let d = input.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut o = Matrix::<f64>::zeros(n, d);
    let mut logsumexp = Vec::with_capacity(n);
    let mut scores = vec![f64::NEG_INFINITY; n];

    for row in 0..n {
        let q = input.q.row(row);
        let last_key = if input.causal { row } else { n - 1 };
        let mut max = f64::NEG_INFINITY;
        for (key, s) in scores.iter_mut().enumerate() {
            *s = if key <= last_key && visible(row, key) {
                dot64(q, input.k.row(key)) * scale
            } else {
                f64::NEG_INFINITY
            };
            max = max.max(*s);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row });
        }
        let mut total = 0.0;
        let out = o.row_mut(row);
        for (key, &s) in scores.iter().enumerate() {
            if s == f64::NEG_INFINITY {
                continue;
            }
            let w = (s - max).exp();
            total += w;
            for (acc, &x) in out.iter_mut().zip(input.v.row(key)) {
                *acc += w * x as f64;
            }
        }
        for acc in out.iter_mut() {
            *acc /= total;
        }
        logsumexp.push(max + total.ln());
    }
    Ok(AttentionOutput { o, logsumexp })
}

#[inline]
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `max |engine - oracle| / (1 + max |oracle|)` over the given output rows.
pub fn relative_error(engine: &AttentionOutput<f32>, oracle: &AttentionOutput<f64>, rows: std::ops::Range<usize>) -> f64 {
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for r in rows {
        for (&e, &o) in engine.o.row(r).iter().zip(oracle.o.row(r)) {
            max_diff = max_diff.max((e as f64 - o).abs());
            max_ref = max_ref.max(o.abs());
        }
    }
    max_diff / (1.0 + max_ref)
}
