//! Block gate policies.
//!
//! A gate sees each off-frontier score tile after `Q K^T` has been computed
//! and before the value block is touched. Frontier blocks never reach a gate.

pub mod thresholds;

use crate::attention::BlockMask;
use crate::engine::tiles::TileConfig;
use crate::engine::{RunningStats, ScoreTile};
use crate::error::{Error, Result};

pub use thresholds::{load_thresholds, save_thresholds, ThresholdTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Skip,
}

impl Decision {
    #[inline]
    pub fn from_keep(keep: bool) -> Self {
        if keep {
            Decision::Keep
        } else {
            Decision::Skip
        }
    }
}

/// Where a gating decision is being made: (layer, head, sparsity level,
/// query-block position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GateContext {
    pub layer: usize,
    pub head: usize,
    pub k_level: usize,
    pub query_block: usize,
}

impl GateContext {
    pub fn new(layer: usize, head: usize, k_level: usize) -> Self {
        Self { layer, head, k_level, query_block: 0 }
    }

    pub fn at_block(self, query_block: usize) -> Self {
        Self { query_block, ..self }
    }
}

/// Gate selection for a run. All variants are read-only during the run.
#[derive(Debug, Clone, Copy)]
pub enum GatePolicy<'a> {
    /// Keep every reachable block.
    Dense,
    /// Skip every off-frontier block.
    FrontierOnly,
    /// Keep iff the tile maximum strictly exceeds the calibrated threshold.
    Threshold(&'a ThresholdTensor),
    /// Keep blocks within the trailing `window` tokens of the query block.
    SlidingWindow { window: usize },
    /// Skip when no row's local maximum rises at least `lambda` above its running maximum.
    RunningMax { lambda: f32 },
    /// Replay a fixed block mask.
    Mask(&'a BlockMask),
}

impl GatePolicy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            GatePolicy::Dense => "dense",
            GatePolicy::FrontierOnly => "frontier",
            GatePolicy::Threshold(_) => "threshold",
            GatePolicy::SlidingWindow { .. } => "window",
            GatePolicy::RunningMax { .. } => "running-max",
            GatePolicy::Mask(_) => "mask",
        }
    }

    /// Resolves configuration-dependent state (threshold slice, mask shape)
    /// once per head so per-block decisions cannot fail.
    pub fn prepare(&self, ctx: GateContext, tiles: TileConfig, m_q: usize, m_kv: usize) -> Result<PreparedGate<'_>> {
        let kind = match *self {
            GatePolicy::Dense => Prepared::Dense,
            GatePolicy::FrontierOnly => Prepared::FrontierOnly,
            GatePolicy::SlidingWindow { window } => Prepared::SlidingWindow { window, tiles },
            GatePolicy::RunningMax { lambda } => {
                if lambda.is_nan() {
                    return Err(Error::Config("running-max lambda is NaN".into()));
                }
                Prepared::RunningMax { lambda }
            }
            GatePolicy::Threshold(t) => {
                if t.tiles() != tiles {
                    return Err(Error::Config(format!(
                        "thresholds were calibrated with b_m={}, b_n={} but the run uses b_m={}, b_n={}",
                        t.tiles().b_m(),
                        t.tiles().b_n(),
                        tiles.b_m(),
                        tiles.b_n()
                    )));
                }
                check_bounds(t, ctx)?;
                let s = t.level_index(ctx.k_level)?;
                Prepared::Threshold { values: t.slice(s, ctx.layer, ctx.head) }
            }
            GatePolicy::Mask(mask) => {
                if mask.m_q() != m_q || mask.m_kv() != m_kv {
                    return Err(Error::Config(format!(
                        "replay mask is {}x{} blocks, run grid is {m_q}x{m_kv}",
                        mask.m_q(),
                        mask.m_kv()
                    )));
                }
                Prepared::Mask(mask)
            }
        };
        Ok(PreparedGate { kind })
    }
}

fn check_bounds(t: &ThresholdTensor, ctx: GateContext) -> Result<()> {
    if ctx.layer >= t.layers() || ctx.head >= t.heads() {
        return Err(Error::Config(format!(
            "no thresholds for layer {}, head {} (tensor has {} layers, {} heads)",
            ctx.layer,
            ctx.head,
            t.layers(),
            t.heads()
        )));
    }
    Ok(())
}

/// Threshold for `ctx`, clamping positions past the calibrated range to the
/// last calibrated position.
pub fn threshold_lookup(t: &ThresholdTensor, ctx: GateContext) -> Result<f32> {
    check_bounds(t, ctx)?;
    let s = t.level_index(ctx.k_level)?;
    let p = ctx.query_block.min(t.positions() - 1);
    Ok(t.get(s, ctx.layer, ctx.head, p))
}

pub fn threshold_gate(tile: &ScoreTile, t: &ThresholdTensor, ctx: GateContext) -> Result<Decision> {
    Ok(Decision::from_keep(tile.s_max > threshold_lookup(t, ctx)?))
}

/// Keep iff kv block `j` intersects `[max(0, i*b_m - w), (i+1)*b_m)`.
pub fn sliding_window_gate(i: usize, j: usize, window: usize, tiles: TileConfig) -> Decision {
    let q_start = i * tiles.b_m();
    let lo = q_start.saturating_sub(window);
    let hi = q_start + tiles.b_m();
    let (k_lo, k_hi) = (j * tiles.b_n(), (j + 1) * tiles.b_n());
    Decision::from_keep(k_hi > lo && k_lo < hi)
}

/// Skip iff `max_rows(rowmax(tile) - m) < lambda`, evaluated before the tile
/// is merged into `stats`. Rows with no running maximum yet count as `+inf`.
pub fn running_max_gate(tile: &ScoreTile, stats: &RunningStats, lambda: f32) -> Decision {
    let mut best = f32::NEG_INFINITY;
    for r in 0..tile.rows {
        let local = tile.row_max(r);
        if local == f32::NEG_INFINITY {
            continue;
        }
        let running = stats.m[r];
        let diff = if running == f32::NEG_INFINITY { f32::INFINITY } else { local - running };
        best = best.max(diff);
    }
    Decision::from_keep(best >= lambda)
}

pub fn dense_gate() -> Decision {
    Decision::Keep
}

pub fn frontier_only_gate() -> Decision {
    Decision::Skip
}

#[derive(Debug, Clone, Copy)]
enum Prepared<'a> {
    Dense,
    FrontierOnly,
    Threshold { values: &'a [f32] },
    SlidingWindow { window: usize, tiles: TileConfig },
    RunningMax { lambda: f32 },
    Mask(&'a BlockMask),
}

/// A gate bound to one (layer, head, level).
#[derive(Debug, Clone, Copy)]
pub struct PreparedGate<'a> {
    kind: Prepared<'a>,
}

impl PreparedGate<'_> {
    /// Threshold in effect at query block `i`, for threshold gates.
    pub fn threshold(&self, i: usize) -> Option<f32> {
        match self.kind {
            Prepared::Threshold { values } => Some(values[i.min(values.len() - 1)]),
            _ => None,
        }
    }

    pub fn decide(&self, i: usize, j: usize, tile: &ScoreTile, stats: &RunningStats) -> Decision {
        match self.kind {
            Prepared::Dense => dense_gate(),
            Prepared::FrontierOnly => frontier_only_gate(),
            Prepared::Threshold { values } => Decision::from_keep(tile.s_max > values[i.min(values.len() - 1)]),
            Prepared::SlidingWindow { window, tiles } => sliding_window_gate(i, j, window, tiles),
            Prepared::RunningMax { lambda } => running_max_gate(tile, stats, lambda),
            Prepared::Mask(mask) => Decision::from_keep(mask.allowed(i, j)),
        }
    }
}
