//! Analytic FLOP, memory-traffic and density accounting.
//!
//! Scores are computed for every causally reachable tile whatever the gate
//! decides; only the `P V` product, the softmax exponentials and the value
//! loads scale with the retained fraction.

use serde::{Deserialize, Serialize};

use crate::engine::{SampleTrace, TileConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub tiles: TileConfig,
}

impl CostConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d
    }

    /// Reachable tiles of one head, on the block-aligned (padded) length.
    pub fn reachable_tiles(&self) -> usize {
        self.tiles.grid(aligned_len(self.n, self.tiles), true).reachable_blocks()
    }

    pub fn off_frontier_tiles(&self) -> usize {
        self.tiles.grid(aligned_len(self.n, self.tiles), true).total_off_frontier_blocks()
    }

    /// FLOPs of one `B_M x B_N x d` tile product (`Q K^T` or `P V`).
    pub fn tile_flops(&self) -> f64 {
        2.0 * (self.tiles.b_m() * self.tiles.b_n() * self.d) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub qk_flops: f64,
    pub pv_flops: f64,
    pub softmax_ops: f64,
    /// `N * d_model^2`, the projection count the long-context ratio is stated against.
    pub projection_flops: f64,
    pub v_traffic: f64,
    pub k_traffic: f64,
    /// Block maximum plus one comparison per gated tile.
    pub gate_overhead_ops: f64,
}

impl CostReport {
    pub fn attention_flops(&self) -> f64 {
        self.qk_flops + self.pv_flops
    }

    pub fn kv_traffic(&self) -> f64 {
        self.k_traffic + self.v_traffic
    }
}

fn aligned_len(n: usize, tiles: TileConfig) -> usize {
    n.div_ceil(tiles.alignment()) * tiles.alignment()
}

/// `sum_i (min(k, A_i) + F_i) / sum_i (A_i + F_i)` over all query blocks of
/// the padded causal grid (pooled, not a mean of per-block fractions).
pub fn predicted_density(n: usize, tiles: TileConfig, k: usize) -> f64 {
    let grid = tiles.grid(aligned_len(n, tiles), true);
    let (mut retained, mut reachable) = (0usize, 0usize);
    for i in 0..grid.m_q() {
        let (a, f) = (grid.off_frontier_count(i), grid.frontier_count(i));
        retained += a.min(k) + f;
        reachable += a + f;
    }
    retained as f64 / reachable as f64
}

/// Mean and population standard deviation of per-sample densities.
pub fn measured_density(samples: &[SampleTrace]) -> Result<(f64, f64)> {
    if samples.is_empty() || samples.iter().any(|s| s.heads.is_empty()) {
        return Err(Error::InvalidInput("measured density needs at least one non-empty trace".into()));
    }
    let values: Vec<f64> = samples.iter().map(SampleTrace::density).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

/// FLOP and traffic accounting for all heads of one layer at a retained
/// fraction `density` of reachable tiles.
pub fn attention_flops(cfg: &CostConfig, density: f64) -> CostReport {
    let reachable = cfg.reachable_tiles() as f64;
    let retained = density * reachable;
    let heads = cfg.heads as f64;
    let (k_traffic, v_traffic) = hbm_traffic(cfg, density);
    CostReport {
        qk_flops: cfg.tile_flops() * reachable * heads,
        pv_flops: cfg.tile_flops() * retained * heads,
        softmax_ops: (cfg.tiles.b_m() * cfg.tiles.b_n()) as f64 * retained * heads,
        projection_flops: cfg.n as f64 * (cfg.d_model() as f64).powi(2),
        v_traffic,
        k_traffic,
        gate_overhead_ops: ((cfg.tiles.b_m() * cfg.tiles.b_n() + 1) * cfg.off_frontier_tiles()) as f64 * heads,
    }
}

/// `(k_elements, v_elements)` loaded from memory: keys for every reachable
/// tile, values only for retained ones.
pub fn hbm_traffic(cfg: &CostConfig, density: f64) -> (f64, f64) {
    let per_block = (cfg.tiles.b_n() * cfg.d) as f64;
    let reachable = cfg.reachable_tiles() as f64;
    let heads = cfg.heads as f64;
    (per_block * reachable * heads, per_block * density * reachable * heads)
}

/// Fraction of dense attention FLOPs (`QK + PV`) saved at `density`.
pub fn attention_savings(cfg: &CostConfig, density: f64) -> f64 {
    let dense = attention_flops(cfg, 1.0).attention_flops();
    1.0 - attention_flops(cfg, density).attention_flops() / dense
}

/// `(PV FLOPs, V elements)` avoided by skipping one block.
pub fn skipped_block_savings(tiles: TileConfig, d: usize) -> (u64, u64) {
    ((2 * tiles.b_m() * tiles.b_n() * d) as u64, (tiles.b_n() * d) as u64)
}

/// `(n^2 d_model) / (n d_model^2) = n / d_model`.
pub fn projection_vs_attention_ratio(n: usize, d_model: usize) -> f64 {
    n as f64 / d_model as f64
}

pub fn threshold_tensor_size(levels: usize, layers: usize, heads: usize, n_max: usize, b_m: usize) -> u64 {
    (levels * layers * heads) as u64 * n_max.div_ceil(b_m) as u64
}

/// The predicted densities listed for the reference configurations, as
/// `(n, k, expected)` at `B_M = 128`, `B_N = 64`.
pub const TABLE1_PREDICTED: [(usize, usize, f64); 10] = [
    (32768, 64, 0.24),
    (32768, 96, 0.35),
    (32768, 128, 0.45),
    (32768, 192, 0.62),
    (65536, 192, 0.35),
    (65536, 256, 0.44),
    (65536, 384, 0.62),
    (131072, 512, 0.44),
    (131072, 768, 0.61),
    (131072, 1024, 0.76),
];

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct enumeration of block pairs, independent of the grid helpers.
    fn brute_density(n: usize, b_m: usize, b_n: usize, k: usize) -> f64 {
        let (mut kept, mut reach) = (0usize, 0usize);
        for i in 0..n / b_m {
            let (q_lo, q_hi) = (i * b_m, (i + 1) * b_m);
            let mut off = 0;
            let mut front = 0;
            for j in 0..n / b_n {
                let (k_lo, k_hi) = (j * b_n, (j + 1) * b_n);
                if k_lo >= q_hi {
                    continue;
                }
                if k_hi > q_lo {
                    front += 1;
                } else {
                    off += 1;
                }
            }
            kept += off.min(k) + front;
            reach += off + front;
        }
        kept as f64 / reach as f64
    }

    #[test]
    fn predicted_density_matches_enumeration() {
        for &(n, b_m, b_n) in &[(4096, 128, 64), (2048, 64, 64), (2048, 64, 128), (1024, 32, 16)] {
            let tiles = TileConfig::new(b_m, b_n).unwrap();
            for k in [0, 1, 3, 8, 17, 64, 1000] {
                assert_eq!(predicted_density(n, tiles, k), brute_density(n, b_m, b_n, k), "n={n} b_m={b_m} b_n={b_n} k={k}");
            }
        }
    }

    #[test]
    fn predicted_density_reference_points() {
        let tiles = TileConfig::default();
        assert!((predicted_density(32768, tiles, 64) - 0.2407).abs() < 1e-4);
        assert!((predicted_density(32768, tiles, 128) - 0.4426).abs() < 1e-4);
        assert_eq!(predicted_density(32768, tiles, 510), 1.0);
        assert!(predicted_density(32768, tiles, 509) < 1.0);
        let frontier_only = predicted_density(32768, tiles, 0);
        assert!((frontier_only - 512.0 / 65792.0).abs() < 1e-15);
    }

    #[test]
    fn predicted_density_is_monotone_in_k() {
        let tiles = TileConfig::default();
        let mut prev = 0.0;
        for k in 0..300 {
            let d = predicted_density(16384, tiles, k);
            assert!(d >= prev);
            prev = d;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn single_tile_flops() {
        let cfg = CostConfig { n: 128, d: 128, heads: 1, tiles: TileConfig::default() };
        assert_eq!(cfg.tile_flops(), 2_097_152.0);
        assert_eq!(skipped_block_savings(cfg.tiles, 128), (2_097_152, 8192));
    }

    #[test]
    fn dense_costs_balance_and_scale_quadratically() {
        let tiles = TileConfig::default();
        let small = attention_flops(&CostConfig { n: 8192, d: 128, heads: 32, tiles }, 1.0);
        let big = attention_flops(&CostConfig { n: 16384, d: 128, heads: 32, tiles }, 1.0);
        assert_eq!(small.qk_flops, small.pv_flops);
        assert_eq!(small.k_traffic, small.v_traffic);
        // reachable tiles are m(m+1) for m query blocks: 128*129 vs 64*65
        assert_eq!(big.qk_flops / small.qk_flops, (128.0 * 129.0) / (64.0 * 65.0));
        let huge = attention_flops(&CostConfig { n: 1 << 20, d: 128, heads: 32, tiles }, 1.0);
        let huger = attention_flops(&CostConfig { n: 1 << 21, d: 128, heads: 32, tiles }, 1.0);
        assert!((huger.pv_flops / huge.pv_flops - 4.0).abs() < 1e-3);
    }

    #[test]
    fn savings_and_traffic_fractions() {
        let cfg = CostConfig { n: 32768, d: 128, heads: 32, tiles: TileConfig::default() };
        for rho in [0.0, 0.25, 0.5, 1.0] {
            assert!((attention_savings(&cfg, rho) - (1.0 - rho) / 2.0).abs() < 1e-12);
        }
        let dense = hbm_traffic(&cfg, 1.0);
        let half = hbm_traffic(&cfg, 0.5);
        assert!(((half.0 + half.1) / (dense.0 + dense.1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn reference_ratios() {
        assert_eq!(projection_vs_attention_ratio(131072, 4096), 32.0);
        assert_eq!(projection_vs_attention_ratio(4096, 4096), 1.0);
        assert_eq!(threshold_tensor_size(1, 32, 32, 65536, 128), 524_288);
        assert_eq!(threshold_tensor_size(3, 32, 32, 65536, 128), 1_572_864);
        assert_eq!(threshold_tensor_size(1, 1, 1, 128, 128), 1);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(measured_density(&[]).is_err());
    }
}
