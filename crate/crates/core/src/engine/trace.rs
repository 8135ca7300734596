//! Per-block record of a gated run.

use serde::{Deserialize, Serialize};

use crate::attention::BlockMask;
use crate::engine::tiles::{BlockKind, TileConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockDecision {
    Kept,
    Skipped,
    Frontier,
    Unreachable,
}

impl BlockDecision {
    fn code(self) -> char {
        match self {
            BlockDecision::Kept => 'K',
            BlockDecision::Skipped => 'S',
            BlockDecision::Frontier => 'F',
            BlockDecision::Unreachable => '.',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'K' => BlockDecision::Kept,
            'S' => BlockDecision::Skipped,
            'F' => BlockDecision::Frontier,
            '.' => BlockDecision::Unreachable,
            _ => return None,
        })
    }

    pub fn is_processed(self) -> bool {
        matches!(self, BlockDecision::Kept | BlockDecision::Frontier)
    }
}

/// Decisions for one (layer, head) over its `m_q x m_kv` block grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateTrace {
    pub layer: usize,
    pub head: usize,
    pub n: usize,
    pub tiles: TileConfig,
    pub causal: bool,
    pub m_q: usize,
    pub m_kv: usize,
    /// One row of decision codes per query block.
    #[serde(with = "decision_rows")]
    pub decisions: Vec<BlockDecision>,
    /// Off-frontier blocks whose maximum equalled their threshold exactly.
    pub ties: usize,
}

impl GateTrace {
    pub(crate) fn assemble(
        layer: usize,
        head: usize,
        n: usize,
        tiles: TileConfig,
        causal: bool,
        rows: Vec<Vec<BlockDecision>>,
        ties: usize,
    ) -> Self {
        let grid = tiles.grid(n, causal);
        let decisions: Vec<BlockDecision> = rows.into_iter().flatten().collect();
        debug_assert_eq!(decisions.len(), grid.m_q() * grid.m_kv());
        Self { layer, head, n, tiles, causal, m_q: grid.m_q(), m_kv: grid.m_kv(), decisions, ties }
    }

    #[inline]
    pub fn decision(&self, i: usize, j: usize) -> BlockDecision {
        self.decisions[i * self.m_kv + j]
    }

    pub fn row(&self, i: usize) -> &[BlockDecision] {
        &self.decisions[i * self.m_kv..(i + 1) * self.m_kv]
    }

    /// The block mask this run actually used: kept and frontier blocks.
    pub fn mask(&self) -> BlockMask {
        let mut mask = BlockMask::new(self.m_q, self.m_kv, false);
        for i in 0..self.m_q {
            for j in 0..self.m_kv {
                mask.set(i, j, self.decision(i, j).is_processed());
            }
        }
        mask
    }

    pub fn kept_off_frontier(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&d| d == BlockDecision::Kept).count()
    }

    pub fn processed(&self, i: usize) -> usize {
        self.row(i).iter().filter(|d| d.is_processed()).count()
    }

    pub fn reachable(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&d| d != BlockDecision::Unreachable).count()
    }

    pub fn total_processed(&self) -> usize {
        (0..self.m_q).map(|i| self.processed(i)).sum()
    }

    pub fn total_reachable(&self) -> usize {
        (0..self.m_q).map(|i| self.reachable(i)).sum()
    }

    pub fn total_kept_off_frontier(&self) -> usize {
        (0..self.m_q).map(|i| self.kept_off_frontier(i)).sum()
    }

    /// Fraction of reachable blocks the run processed.
    pub fn density(&self) -> f64 {
        self.total_processed() as f64 / self.total_reachable() as f64
    }

    /// Checks the trace invariants against its grid geometry.
    pub fn check(&self) -> Result<()> {
        let grid = self.tiles.grid(self.n, self.causal);
        for i in 0..self.m_q {
            for j in 0..self.m_kv {
                let ok = matches!(
                    (grid.classify(i, j), self.decision(i, j)),
                    (BlockKind::Frontier, BlockDecision::Frontier)
                        | (BlockKind::Unreachable, BlockDecision::Unreachable)
                        | (BlockKind::OffFrontier, BlockDecision::Kept | BlockDecision::Skipped)
                );
                if !ok {
                    return Err(Error::Numeric(format!(
                        "trace decision {:?} at ({i},{j}) contradicts block kind {:?}",
                        self.decision(i, j),
                        grid.classify(i, j)
                    )));
                }
            }
        }
        Ok(())
    }
}

mod decision_rows {
    use super::BlockDecision;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &[BlockDecision], s: S) -> Result<S::Ok, S::Error> {
        let code: String = d.iter().map(|x| x.code()).collect();
        code.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BlockDecision>, D::Error> {
        let code = String::deserialize(d)?;
        code.chars()
            .map(|c| BlockDecision::from_code(c).ok_or_else(|| D::Error::custom(format!("bad decision code {c:?}"))))
            .collect()
    }
}

/// Traces of every (layer, head) in one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample: String,
    pub heads: Vec<GateTrace>,
}

impl SampleTrace {
    /// Processed / reachable blocks pooled over all heads.
    pub fn density(&self) -> f64 {
        let processed: usize = self.heads.iter().map(GateTrace::total_processed).sum();
        let reachable: usize = self.heads.iter().map(GateTrace::total_reachable).sum();
        processed as f64 / reachable as f64
    }

    pub fn ties(&self) -> usize {
        self.heads.iter().map(|h| h.ties).sum()
    }
}
