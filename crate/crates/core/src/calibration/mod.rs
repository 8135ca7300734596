//! Offline threshold calibration.
//!
//! For every (layer, head, query-block position) the off-frontier tile
//! maxima of a sample are sorted in descending order; the threshold for a
//! budget of `k` blocks is the `(k+1)`-th largest maximum, so that the strict
//! `s_max > T` test keeps exactly the top `k` when maxima are distinct.
//! Per-sample thresholds are then averaged across the dump.

pub mod dump;

use serde::Serialize;

use crate::attention::HeadInput;
use crate::engine::{pad_to_blocks, parallel_map, score_tile, TileConfig};
use crate::error::{Error, Result};
use crate::gating::ThresholdTensor;

pub use crate::gating::thresholds::{load_thresholds, save_thresholds};
pub use dump::{CalibrationDump, HeadTensors, Manifest, Sample, SampleEntry};

/// Descending off-frontier block maxima for every (layer, head, position) of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMaximaProfile {
    pub layers: usize,
    pub heads: usize,
    /// Query blocks containing at least one real (non-padding) row.
    pub positions: usize,
    lists: Vec<Vec<f32>>,
}

impl BlockMaximaProfile {
    pub fn maxima(&self, layer: usize, head: usize, p: usize) -> &[f32] {
        &self.lists[(layer * self.heads + head) * self.positions + p]
    }
}

/// Block maxima of one head's causal score grid, after padding to block alignment.
pub fn head_block_maxima(
    q: &crate::matrix::Matrix<f32>,
    k: &crate::matrix::Matrix<f32>,
    tiles: TileConfig,
) -> Result<Vec<Vec<f32>>> {
    let n = q.rows();
    // V is not needed for scores; K stands in so the padding helper can be shared.
    let input = HeadInput::new(q.clone(), k.clone(), k.clone(), true)?;
    let (padded, valid) = pad_to_blocks(&input, tiles);
    debug_assert_eq!(valid, n);
    let grid = tiles.grid(padded.seq_len(), true);
    let positions = valid.div_ceil(tiles.b_m());
    let mut lists = Vec::with_capacity(positions);
    for p in 0..positions {
        let q_rows = grid.query_rows(p);
        let mut maxima = Vec::with_capacity(grid.off_frontier_count(p));
        for j in 0..grid.off_frontier_count(p) {
            let tile = score_tile(&padded.q, &padded.k, q_rows.clone(), grid.key_rows(j), false);
            if !tile.s_max.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite block maximum at position {p}, kv block {j}")));
            }
            maxima.push(tile.s_max);
        }
        maxima.sort_by(|a, b| b.total_cmp(a));
        lists.push(maxima);
    }
    Ok(lists)
}

pub fn collect_block_maxima(dump: &CalibrationDump, sample: &Sample, tiles: TileConfig) -> Result<BlockMaximaProfile> {
    let (layers, heads) = (dump.num_layers, dump.num_heads);
    let per_head = parallel_map(layers * heads, |idx| {
        let t = &sample.heads[idx];
        head_block_maxima(&t.q, &t.k, tiles)
    })?;
    let positions = sample.seq_len.div_ceil(tiles.b_m());
    Ok(BlockMaximaProfile { layers, heads, positions, lists: per_head.into_iter().flatten().collect() })
}

/// Threshold keeping the top `k` of a descending list under strict `>`.
pub fn thresholds_from_maxima(sorted_desc: &[f32], k: usize) -> f32 {
    if k == 0 {
        f32::INFINITY
    } else if sorted_desc.len() <= k {
        f32::NEG_INFINITY
    } else {
        sorted_desc[k]
    }
}

/// True when the k-th and (k+1)-th largest maxima coincide, so strict
/// comparison retains fewer than `k` blocks.
pub fn is_tie(sorted_desc: &[f32], k: usize) -> bool {
    k > 0 && sorted_desc.len() > k && sorted_desc[k - 1] == sorted_desc[k]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub k: u32,
    pub finite: usize,
    pub min: Option<f32>,
    pub mean: Option<f64>,
    pub max: Option<f32>,
    pub retain_all: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub samples: usize,
    pub n_max: usize,
    pub levels: Vec<LevelSummary>,
}

pub fn calibrate(dump: &CalibrationDump, k_levels: &[u32], tiles: TileConfig) -> Result<ThresholdTensor> {
    calibrate_with_summary(dump, k_levels, tiles).map(|(t, _)| t)
}

/// Calibrates and also reports per-level statistics and tie counts.
///
/// Samples are reduced in ascending id order, so permuting the dump does not
/// change a single bit of the result.
pub fn calibrate_with_summary(
    dump: &CalibrationDump,
    k_levels: &[u32],
    tiles: TileConfig,
) -> Result<(ThresholdTensor, CalibrationSummary)> {
    dump.validate()?;
    if dump.samples.is_empty() {
        return Err(Error::Config("calibration dump has no samples".into()));
    }
    if k_levels.is_empty() || k_levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("k levels must be non-empty and strictly increasing, got {k_levels:?}")));
    }

    let mut order: Vec<&Sample> = dump.samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let profiles: Vec<BlockMaximaProfile> =
        order.iter().map(|s| collect_block_maxima(dump, s, tiles)).collect::<Result<_>>()?;

    let n_max = order.iter().map(|s| s.seq_len).max().unwrap_or(0);
    let positions = n_max.div_ceil(tiles.b_m());
    let (layers, heads) = (dump.num_layers, dump.num_heads);
    let mut values = Vec::with_capacity(k_levels.len() * layers * heads * positions);
    let mut ties = vec![0usize; k_levels.len()];

    for (s, &k) in k_levels.iter().enumerate() {
        let k = k as usize;
        for layer in 0..layers {
            for head in 0..heads {
                for p in 0..positions {
                    let mut finite_sum = 0.0f64;
                    let mut finite = 0usize;
                    let mut sentinel = None;
                    for profile in profiles.iter().filter(|pr| p < pr.positions) {
                        let maxima = profile.maxima(layer, head, p);
                        if is_tie(maxima, k) {
                            ties[s] += 1;
                        }
                        let t = thresholds_from_maxima(maxima, k);
                        if t.is_finite() {
                            finite_sum += t as f64;
                            finite += 1;
                        } else {
                            sentinel.get_or_insert(t);
                        }
                    }
                    let value = if finite > 0 {
                        (finite_sum / finite as f64) as f32
                    } else {
                        sentinel.expect("every position is covered by the longest sample")
                    };
                    values.push(value);
                }
            }
        }
    }

    let tensor = ThresholdTensor::new(k_levels.to_vec(), layers, heads, tiles, n_max, values)?;
    tensor.check_monotone()?;
    let levels = k_levels
        .iter()
        .enumerate()
        .map(|(s, &k)| level_summary(&tensor, s, k, ties[s]))
        .collect();
    Ok((tensor, CalibrationSummary { samples: order.len(), n_max, levels }))
}

fn level_summary(t: &ThresholdTensor, s: usize, k: u32, ties: usize) -> LevelSummary {
    let per_level = t.layers() * t.heads() * t.positions();
    let slice = &t.values()[s * per_level..(s + 1) * per_level];
    let finite: Vec<f32> = slice.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = (!finite.is_empty()).then(|| finite.iter().map(|&v| v as f64).sum::<f64>() / finite.len() as f64);
    LevelSummary {
        k,
        finite: finite.len(),
        min: finite.iter().copied().reduce(f32::min),
        mean,
        max: finite.iter().copied().reduce(f32::max),
        retain_all: slice.iter().filter(|&&v| v == f32::NEG_INFINITY).count(),
        ties,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn threshold_is_k_plus_first_largest() {
        let m = [5.0, 4.0, 3.0, 2.0, 1.0];
        let t = thresholds_from_maxima(&m, 2);
        assert_eq!(t, 3.0);
        let kept: Vec<f32> = m.iter().copied().filter(|&x| x > t).collect();
        assert_eq!(kept, vec![5.0, 4.0]);
    }

    #[test]
    fn threshold_sentinels() {
        assert_eq!(thresholds_from_maxima(&[5.0, 4.0], 5), f32::NEG_INFINITY);
        assert_eq!(thresholds_from_maxima(&[5.0, 4.0], 2), f32::NEG_INFINITY);
        assert_eq!(thresholds_from_maxima(&[5.0, 4.0], 0), f32::INFINITY);
        assert_eq!(thresholds_from_maxima(&[], 0), f32::INFINITY);
    }

    #[test]
    fn tie_keeps_nothing_and_is_flagged() {
        let m = [5.0, 5.0, 3.0];
        let t = thresholds_from_maxima(&m, 1);
        assert_eq!(t, 5.0);
        assert_eq!(m.iter().filter(|&&x| x > t).count(), 0);
        assert!(is_tie(&m, 1));
        assert!(!is_tie(&m, 2));
    }

    fn orthonormal_head(n: usize) -> HeadTensors {
        let q = Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
        HeadTensors { k: q.clone(), q, v: None }
    }

    #[test]
    fn maxima_list_lengths_follow_frontier_geometry() {
        let n = 384;
        let t = orthonormal_head(n);
        let lists = head_block_maxima(&t.q, &t.k, TileConfig::default()).unwrap();
        assert_eq!(lists.len(), 3);
        assert!(lists[0].is_empty());
        assert_eq!(lists[2].len(), 4);
        // orthonormal rows: every off-frontier score is exactly zero
        assert!(lists.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_of_two_samples() {
        // two single-head samples whose only off-frontier maximum differs
        let tiles = TileConfig::new(1, 1).unwrap();
        let sample = |id: &str, a: f32| Sample {
            id: id.into(),
            seq_len: 3,
            heads: vec![HeadTensors {
                q: Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]),
                k: Matrix::from_vec(3, 1, vec![a, 0.0, 0.0]),
                v: None,
            }],
        };
        let dump = CalibrationDump {
            num_layers: 1,
            num_heads: 1,
            head_dim: 1,
            samples: vec![sample("x", 2.0), sample("y", 4.0)],
        };
        let t = calibrate(&dump, &[1], tiles).unwrap();
        // position 2 sees blocks {0, 1}: maxima [a, 0] → T = 0 for both samples
        assert_eq!(t.get(0, 0, 0, 2), 0.0);
        let t0 = calibrate(&dump, &[0, 1], tiles).unwrap();
        assert_eq!(t0.get(0, 0, 0, 1), f32::INFINITY);
        // k=1 at position 1: one block available → retain all
        assert_eq!(t0.get(1, 0, 0, 1), f32::NEG_INFINITY);

        let single = CalibrationDump { samples: vec![sample("x", 2.0)], ..dump.clone() };
        let dump_mean = CalibrationDump {
            samples: vec![
                Sample { heads: vec![HeadTensors { k: Matrix::from_vec(3, 1, vec![2.0, 1.0, 0.0]), ..single.samples[0].heads[0].clone() }], ..sample("x", 0.0) },
                Sample { heads: vec![HeadTensors { k: Matrix::from_vec(3, 1, vec![5.0, 4.0, 0.0]), ..single.samples[0].heads[0].clone() }], ..sample("y", 0.0) },
            ],
            ..dump
        };
        // position 2 maxima: [2, 1] and [5, 4] → thresholds 1 and 4 → mean 2.5
        let t = calibrate(&dump_mean, &[1], tiles).unwrap();
        assert_eq!(t.get(0, 0, 0, 2), 2.5);
    }

    #[test]
    fn rejects_bad_levels_and_empty_dump() {
        let dump = CalibrationDump { num_layers: 1, num_heads: 1, head_dim: 1, samples: vec![] };
        assert!(matches!(calibrate(&dump, &[1], TileConfig::default()), Err(Error::Config(_))));
        let dump = CalibrationDump {
            samples: vec![Sample { id: "a".into(), seq_len: 1, heads: vec![HeadTensors { q: Matrix::zeros(1, 1), k: Matrix::zeros(1, 1), v: None }] }],
            ..dump
        };
        assert!(matches!(calibrate(&dump, &[8, 4], TileConfig::default()), Err(Error::Config(_))));
        assert!(matches!(calibrate(&dump, &[], TileConfig::default()), Err(Error::Config(_))));
    }
}
