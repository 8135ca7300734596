//! Tiled streaming attention with per-block gating.
//!
//! Each query block keeps private running statistics (row maxima `m`,
//! normalizers `l`, un-scaled accumulator `o_tilde`) and visits kv blocks in
//! ascending order. Off-frontier tiles are scored, shown to the gate, and
//! either merged with the online-softmax update or dropped without touching
//! the statistics. Frontier tiles are always merged with per-element causal
//! masking. Query blocks are independent, so they run in parallel when the
//! `parallel` feature is enabled; results are gathered in block order, so
//! output and trace do not depend on the thread count.

pub mod padding;
pub mod tiles;
pub mod trace;

use crate::attention::{AttentionOutput, HeadInput};
use crate::calibration::{CalibrationDump, Sample};
use crate::error::{Error, Result};
use crate::gating::{Decision, GateContext, GatePolicy, PreparedGate};
use crate::matrix::Matrix;

pub use padding::pad_to_blocks;
pub use tiles::{BlockGrid, BlockKind, TileConfig};
pub use trace::{BlockDecision, GateTrace, SampleTrace};

/// Scaled scores for one (query block, kv block) tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major scores; masked entries are `-inf`.
    pub s: Vec<f32>,
    pub s_max: f32,
}

impl ScoreTile {
    pub fn from_scores(rows: usize, cols: usize, s: Vec<f32>) -> Self {
        assert_eq!(s.len(), rows * cols);
        let s_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Self { rows, cols, s, s_max }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.s[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_max(&self, r: usize) -> f32 {
        self.row(r).iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// `Q_i K_j^T / sqrt(d)` for query rows `q_rows` and key rows `k_rows`.
/// With `causal`, entries whose key index exceeds the query index are `-inf`.
///
/// Calibration and the engine both score tiles through this function, so the
/// block maxima they see are bit-identical.
pub fn score_tile(
    q: &Matrix<f32>,
    k: &Matrix<f32>,
    q_rows: std::ops::Range<usize>,
    k_rows: std::ops::Range<usize>,
    causal: bool,
) -> ScoreTile {
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let (rows, cols) = (q_rows.len(), k_rows.len());
    let mut s = Vec::with_capacity(rows * cols);
    for qi in q_rows.clone() {
        let q_row = q.row(qi);
        for kj in k_rows.clone() {
            if causal && kj > qi {
                s.push(f32::NEG_INFINITY);
            } else {
                s.push(dot(q_row, k.row(kj)) * scale);
            }
        }
    }
    ScoreTile::from_scores(rows, cols, s)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Online-softmax state for one query block.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub m: Vec<f32>,
    pub l: Vec<f32>,
    pub o_tilde: Matrix<f32>,
}

impl RunningStats {
    pub fn new(rows: usize, d: usize) -> Self {
        Self { m: vec![f32::NEG_INFINITY; rows], l: vec![0.0; rows], o_tilde: Matrix::zeros(rows, d) }
    }

    /// Merges a tile whose value rows are `v_rows` of `v`: rescale the
    /// accumulator, add `P V`, update `l`, then commit the new maxima.
    pub fn merge(&mut self, tile: &ScoreTile, v: &Matrix<f32>, v_rows: std::ops::Range<usize>) {
        let mut p = vec![0.0f32; tile.cols];
        for r in 0..tile.rows {
            let m_new = self.m[r].max(tile.row_max(r));
            if m_new == f32::NEG_INFINITY {
                continue;
            }
            let alpha = (self.m[r] - m_new).exp();
            let mut row_sum = 0.0f32;
            for (pc, &s) in p.iter_mut().zip(tile.row(r)) {
                *pc = (s - m_new).exp();
                row_sum += *pc;
            }
            let acc = self.o_tilde.row_mut(r);
            for x in acc.iter_mut() {
                *x *= alpha;
            }
            for (&pc, vi) in p.iter().zip(v_rows.clone()) {
                if pc == 0.0 {
                    continue;
                }
                for (x, &vv) in acc.iter_mut().zip(v.row(vi)) {
                    *x += pc * vv;
                }
            }
            self.l[r] = self.l[r] * alpha + row_sum;
            self.m[r] = m_new;
        }
    }
}

/// How the engine distributes query blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Data-parallel over query blocks (sequential when built without `parallel`).
    #[default]
    Parallel,
}

struct BlockResult {
    o: Matrix<f32>,
    logsumexp: Vec<f32>,
    decisions: Vec<BlockDecision>,
    ties: usize,
}

/// Runs gated tiled attention for one head. `ctx` supplies layer, head and
/// sparsity level; the query-block position is filled in per block.
pub fn flash_forward(
    input: &HeadInput,
    tiles: TileConfig,
    gate: &GatePolicy<'_>,
    ctx: GateContext,
) -> Result<(AttentionOutput<f32>, GateTrace)> {
    flash_forward_with(input, tiles, gate, ctx, Execution::default())
}

pub fn flash_forward_with(
    input: &HeadInput,
    tiles: TileConfig,
    gate: &GatePolicy<'_>,
    ctx: GateContext,
    exec: Execution,
) -> Result<(AttentionOutput<f32>, GateTrace)> {
    input.validate()?;
    let n = input.seq_len();
    let d = input.head_dim();
    let grid = tiles.grid(n, input.causal);
    let prepared = gate.prepare(ctx, tiles, grid.m_q(), grid.m_kv())?;

    let run = |i: usize| process_query_block(input, &grid, i, &prepared);
    let blocks: Vec<BlockResult> = match exec {
        Execution::Sequential => (0..grid.m_q()).map(run).collect::<Result<_>>()?,
        Execution::Parallel => parallel_map(grid.m_q(), run)?,
    };

    let mut o = Matrix::zeros(n, d);
    let mut logsumexp = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(blocks.len());
    let mut ties = 0;
    for (i, block) in blocks.into_iter().enumerate() {
        for (local, r) in grid.query_rows(i).enumerate() {
            o.row_mut(r).copy_from_slice(block.o.row(local));
        }
        logsumexp.extend(block.logsumexp);
        rows.push(block.decisions);
        ties += block.ties;
    }

    #[cfg(feature = "fault-injection")]
    if std::env::var_os("BSFA_INJECT_FAULT").is_some() {
        *o.get_mut(0, 0) += 1.0;
    }

    let trace = GateTrace::assemble(ctx.layer, ctx.head, n, tiles, input.causal, rows, ties);
    Ok((AttentionOutput { o, logsumexp }, trace))
}

/// Runs every (layer, head) of a dump sample under one gate and level.
pub fn run_sample(
    dump: &CalibrationDump,
    sample: &Sample,
    tiles: TileConfig,
    gate: &GatePolicy<'_>,
    k_level: usize,
    exec: Execution,
) -> Result<(Vec<AttentionOutput<f32>>, SampleTrace)> {
    let mut outputs = Vec::with_capacity(dump.num_layers * dump.num_heads);
    let mut heads = Vec::with_capacity(dump.num_layers * dump.num_heads);
    for layer in 0..dump.num_layers {
        for head in 0..dump.num_heads {
            let input = dump.head_input(sample, layer, head)?;
            let (out, trace) = flash_forward_with(&input, tiles, gate, GateContext::new(layer, head, k_level), exec)?;
            outputs.push(out);
            heads.push(trace);
        }
    }
    Ok((outputs, SampleTrace { sample: sample.id.clone(), heads }))
}

#[cfg(feature = "parallel")]
pub(crate) fn parallel_map<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn parallel_map<T>(count: usize, f: impl Fn(usize) -> Result<T>) -> Result<Vec<T>> {
    (0..count).map(f).collect()
}

fn process_query_block(input: &HeadInput, grid: &BlockGrid, i: usize, gate: &PreparedGate<'_>) -> Result<BlockResult> {
    let q_rows = grid.query_rows(i);
    let d = input.head_dim();
    let mut stats = RunningStats::new(q_rows.len(), d);
    let mut decisions = Vec::with_capacity(grid.m_kv());
    let mut ties = 0;
    let threshold = gate.threshold(i);

    for j in 0..grid.m_kv() {
        let k_rows = grid.key_rows(j);
        let decision = match grid.classify(i, j) {
            BlockKind::Unreachable => BlockDecision::Unreachable,
            BlockKind::Frontier => {
                let tile = score_tile(&input.q, &input.k, q_rows.clone(), k_rows.clone(), input.causal);
                stats.merge(&tile, &input.v, k_rows);
                BlockDecision::Frontier
            }
            BlockKind::OffFrontier => {
                let tile = score_tile(&input.q, &input.k, q_rows.clone(), k_rows.clone(), false);
                if threshold == Some(tile.s_max) {
                    ties += 1;
                }
                match gate.decide(i, j, &tile, &stats) {
                    Decision::Keep => {
                        stats.merge(&tile, &input.v, k_rows);
                        BlockDecision::Kept
                    }
                    Decision::Skip => BlockDecision::Skipped,
                }
            }
        };
        decisions.push(decision);
    }

    let mut o = stats.o_tilde;
    let mut logsumexp = Vec::with_capacity(q_rows.len());
    for (r, row) in q_rows.clone().enumerate() {
        let l = stats.l[r];
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Numeric(format!("normalizer for query row {row} is {l}")));
        }
        for x in o.row_mut(r) {
            *x /= l;
        }
        if o.row(r).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite accumulator in query row {row}")));
        }
        logsumexp.push(stats.m[r] + l.ln());
    }
    Ok(BlockResult { o, logsumexp, decisions, ties })
}
