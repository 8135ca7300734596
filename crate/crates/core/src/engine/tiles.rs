//! Tile sizes and the block-grid geometry derived from them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query block size `b_m` and key/value block size `b_n`, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    b_m: usize,
    b_n: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { b_m: 128, b_n: 64 }
    }
}

impl TileConfig {
    /// One block size must divide the other so the frontier set of every
    /// query block is a contiguous run of whole kv blocks.
    pub fn new(b_m: usize, b_n: usize) -> Result<Self> {
        if b_m == 0 || b_n == 0 {
            return Err(Error::Config(format!("block sizes must be positive (b_m={b_m}, b_n={b_n})")));
        }
        if !b_m.is_multiple_of(b_n) && !b_n.is_multiple_of(b_m) {
            return Err(Error::Config(format!(
                "b_m={b_m} and b_n={b_n}: one block size must be a multiple of the other"
            )));
        }
        Ok(Self { b_m, b_n })
    }

    #[inline]
    pub fn b_m(&self) -> usize {
        self.b_m
    }

    #[inline]
    pub fn b_n(&self) -> usize {
        self.b_n
    }

    /// Padding granularity: `lcm(b_m, b_n)`, which is the larger block size here.
    pub fn alignment(&self) -> usize {
        self.b_m.max(self.b_n)
    }

    /// kv blocks whose key range intersects query rows `[i*b_m, (i+1)*b_m)`,
    /// without clamping to a sequence length.
    pub fn frontier_blocks(&self, i: usize) -> Range<usize> {
        let lo = i * self.b_m / self.b_n;
        let hi = ((i + 1) * self.b_m).div_ceil(self.b_n);
        lo..hi
    }

    pub fn grid(&self, n: usize, causal: bool) -> BlockGrid {
        BlockGrid { tiles: *self, n, causal }
    }
}

/// How a (query block, kv block) pair is treated by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Intersects the query block's own token range; always processed with
    /// per-element causal masking.
    Frontier,
    /// Reachable and subject to the gate.
    OffFrontier,
    /// Entirely beyond the causal frontier.
    Unreachable,
}

/// Block grid for a sequence of `n` tokens under a tile configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub tiles: TileConfig,
    pub n: usize,
    pub causal: bool,
}

impl BlockGrid {
    /// Number of query blocks, `ceil(n / b_m)`.
    pub fn m_q(&self) -> usize {
        self.n.div_ceil(self.tiles.b_m)
    }

    /// Number of kv blocks, `ceil(n / b_n)`.
    pub fn m_kv(&self) -> usize {
        self.n.div_ceil(self.tiles.b_n)
    }

    pub fn query_rows(&self, i: usize) -> Range<usize> {
        let start = i * self.tiles.b_m;
        start..(start + self.tiles.b_m).min(self.n)
    }

    pub fn key_rows(&self, j: usize) -> Range<usize> {
        let start = j * self.tiles.b_n;
        start..(start + self.tiles.b_n).min(self.n)
    }

    /// Frontier kv blocks of query block `i`, clamped to the grid.
    pub fn frontier(&self, i: usize) -> Range<usize> {
        let r = self.tiles.frontier_blocks(i);
        r.start.min(self.m_kv())..r.end.min(self.m_kv())
    }

    pub fn classify(&self, i: usize, j: usize) -> BlockKind {
        let f = self.frontier(i);
        if f.contains(&j) {
            BlockKind::Frontier
        } else if self.causal && j >= f.end {
            BlockKind::Unreachable
        } else {
            BlockKind::OffFrontier
        }
    }

    /// Reachable off-frontier kv blocks of query block `i` (the gate's candidate count).
    pub fn off_frontier_count(&self, i: usize) -> usize {
        let f = self.frontier(i);
        if self.causal {
            f.start
        } else {
            self.m_kv() - f.len()
        }
    }

    pub fn frontier_count(&self, i: usize) -> usize {
        self.frontier(i).len()
    }

    /// All reachable blocks (frontier plus off-frontier) over the grid.
    pub fn reachable_blocks(&self) -> usize {
        (0..self.m_q()).map(|i| self.off_frontier_count(i) + self.frontier_count(i)).sum()
    }

    pub fn total_frontier_blocks(&self) -> usize {
        (0..self.m_q()).map(|i| self.frontier_count(i)).sum()
    }

    pub fn total_off_frontier_blocks(&self) -> usize {
        (0..self.m_q()).map(|i| self.off_frontier_count(i)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frontier_square_tiles_is_diagonal() {
        let t = TileConfig::new(64, 64).unwrap();
        assert_eq!(t.frontier_blocks(3), 3..4);
    }

    #[test]
    fn frontier_default_tiles() {
        let t = TileConfig::default();
        assert_eq!(t.frontier_blocks(0), 0..2);
        assert_eq!(t.frontier_blocks(5), 10..12);
    }

    #[test]
    fn frontier_when_kv_blocks_are_larger() {
        let t = TileConfig::new(64, 128).unwrap();
        assert_eq!(t.frontier_blocks(0), 0..1);
        assert_eq!(t.frontier_blocks(1), 0..1);
        assert_eq!(t.frontier_blocks(2), 1..2);
    }

    #[test]
    fn rejects_incommensurate_tiles() {
        assert!(TileConfig::new(96, 64).is_err());
        assert!(TileConfig::new(0, 64).is_err());
        assert!(TileConfig::new(128, 64).is_ok());
    }

    #[test]
    fn off_frontier_counts_at_default_tiles() {
        let g = TileConfig::default().grid(32768, true);
        assert_eq!(g.m_q(), 256);
        assert_eq!(g.m_kv(), 512);
        assert_eq!(g.off_frontier_count(0), 0);
        assert_eq!(g.off_frontier_count(2), 4);
        assert_eq!(g.frontier_count(255), 2);
        assert_eq!(g.classify(2, 3), BlockKind::OffFrontier);
        assert_eq!(g.classify(2, 4), BlockKind::Frontier);
        assert_eq!(g.classify(2, 6), BlockKind::Unreachable);
    }

    #[test]
    fn ragged_grid_clamps_frontier() {
        let g = TileConfig::default().grid(130, true);
        assert_eq!(g.m_q(), 2);
        assert_eq!(g.m_kv(), 3);
        assert_eq!(g.frontier(1), 2..3);
        assert_eq!(g.query_rows(1), 128..130);
        assert_eq!(g.key_rows(2), 128..130);
    }

    #[test]
    fn non_causal_grid_reaches_everything() {
        let g = TileConfig::new(64, 64).unwrap().grid(256, false);
        assert_eq!(g.off_frontier_count(0), 3);
        assert_eq!(g.classify(0, 3), BlockKind::OffFrontier);
        assert_eq!(g.reachable_blocks(), 16);
    }
}
