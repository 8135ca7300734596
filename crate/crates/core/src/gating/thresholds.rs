//! Calibrated threshold tensor and its little-endian file format.
//!
//! Layout on disk: magic `BSFA`, then `u32` version, S, L, H, P, B_M, B_N,
//! N_max, then S `u32` k levels, then S*L*H*P `f32` values in
//! `[level][layer][head][position]` order. Infinities are stored as IEEE
//! infinities.

use std::fs;
use std::path::Path;

use crate::engine::tiles::TileConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BSFA";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 8 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTensor {
    k_levels: Vec<u32>,
    layers: usize,
    heads: usize,
    positions: usize,
    tiles: TileConfig,
    n_max: usize,
    values: Vec<f32>,
}

impl ThresholdTensor {
    /// Builds a tensor from `[level][layer][head][position]` values, with
    /// `positions = ceil(n_max / b_m)`.
    pub fn new(
        k_levels: Vec<u32>,
        layers: usize,
        heads: usize,
        tiles: TileConfig,
        n_max: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if k_levels.is_empty() {
            return Err(Error::Config("at least one sparsity level is required".into()));
        }
        if k_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("k levels must be strictly increasing, got {k_levels:?}")));
        }
        if layers == 0 || heads == 0 || n_max == 0 {
            return Err(Error::Config(format!(
                "empty threshold tensor (layers={layers}, heads={heads}, n_max={n_max})"
            )));
        }
        let positions = n_max.div_ceil(tiles.b_m());
        let expected = k_levels.len() * layers * heads * positions;
        if values.len() != expected {
            return Err(Error::Config(format!("expected {expected} threshold values, got {}", values.len())));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("threshold tensor contains NaN".into()));
        }
        Ok(Self { k_levels, layers, heads, positions, tiles, n_max, values })
    }

    pub fn k_levels(&self) -> &[u32] {
        &self.k_levels
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn tiles(&self) -> TileConfig {
        self.tiles
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of a sparsity level, or a configuration error naming the stored levels.
    pub fn level_index(&self, k: usize) -> Result<usize> {
        self.k_levels.iter().position(|&x| x as usize == k).ok_or_else(|| {
            Error::Config(format!("sparsity level k={k} not calibrated; available levels: {:?}", self.k_levels))
        })
    }

    #[inline]
    fn offset(&self, s: usize, layer: usize, head: usize, p: usize) -> usize {
        ((s * self.layers + layer) * self.heads + head) * self.positions + p
    }

    /// Raw value at (level index, layer, head, position) with no clamping.
    pub fn get(&self, s: usize, layer: usize, head: usize, p: usize) -> f32 {
        self.values[self.offset(s, layer, head, p)]
    }

    /// Thresholds for one (level index, layer, head) across all positions.
    pub fn slice(&self, s: usize, layer: usize, head: usize) -> &[f32] {
        let start = self.offset(s, layer, head, 0);
        &self.values[start..start + self.positions]
    }

    /// Larger k must never yield a larger threshold at any (layer, head, position).
    pub fn check_monotone(&self) -> Result<()> {
        for s in 1..self.k_levels.len() {
            for layer in 0..self.layers {
                for head in 0..self.heads {
                    for p in 0..self.positions {
                        let (lo_k, hi_k) = (self.get(s - 1, layer, head, p), self.get(s, layer, head, p));
                        if hi_k > lo_k {
                            return Err(Error::Numeric(format!(
                                "threshold increases from k={} to k={} at layer {layer}, head {head}, position {p}: {lo_k} -> {hi_k}",
                                self.k_levels[s - 1], self.k_levels[s]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.k_levels.len() + self.values.len()));
        out.extend_from_slice(MAGIC);
        let header = [
            VERSION,
            self.k_levels.len() as u32,
            self.layers as u32,
            self.heads as u32,
            self.positions as u32,
            self.tiles.b_m() as u32,
            self.tiles.b_n() as u32,
            self.n_max as u32,
        ];
        for x in header.iter().chain(&self.k_levels) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "bad magic, expected \"BSFA\""));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let (s, layers, heads, positions) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        let (b_m, b_n, n_max) = (word(5) as usize, word(6) as usize, word(7) as usize);
        let count = s
            .checked_mul(layers)
            .and_then(|x| x.checked_mul(heads))
            .and_then(|x| x.checked_mul(positions))
            .ok_or_else(|| Error::format(path, "shape overflows"))?;
        let expected = HEADER_LEN + 4 * (s + count);
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for the declared shape, found {}", bytes.len()),
            ));
        }
        let tiles = TileConfig::new(b_m, b_n).map_err(|e| Error::format(path, e.to_string()))?;
        if positions != n_max.div_ceil(b_m) {
            return Err(Error::format(path, format!("P={positions} inconsistent with N_max={n_max}, B_M={b_m}")));
        }
        let mut words = bytes[HEADER_LEN..].chunks_exact(4);
        let k_levels: Vec<u32> = words.by_ref().take(s).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let values: Vec<f32> = words.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(k_levels, layers, heads, tiles, n_max, values).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn save_thresholds(t: &ThresholdTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_thresholds(path: impl AsRef<Path>) -> Result<ThresholdTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ThresholdTensor::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_tensor() -> ThresholdTensor {
        let tiles = TileConfig::default();
        let values = vec![
            f32::INFINITY,
            3.5,
            -1.25,
            2.0,
            f32::NEG_INFINITY,
            0.0,
            // second level
            f32::INFINITY,
            1.5,
            -2.0,
            1.0,
            f32::NEG_INFINITY,
            -0.5,
        ];
        ThresholdTensor::new(vec![2, 8], 1, 2, tiles, 300, values).unwrap()
    }

    #[test]
    fn round_trip_keeps_infinities() {
        let t = sample_tensor();
        let path = Path::new("mem");
        let back = ThresholdTensor::from_bytes(&t.to_bytes(), path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get(0, 0, 0, 0), f32::INFINITY);
        assert_eq!(back.get(0, 0, 1, 1), f32::NEG_INFINITY);
        t.check_monotone().unwrap();
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = sample_tensor().to_bytes();
        assert_eq!(&bytes[..4], b"BSFA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes()); // S
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes()); // P = ceil(300/128)
        assert_eq!(&bytes[24..28], &128u32.to_le_bytes());
        assert_eq!(&bytes[32..36], &300u32.to_le_bytes());
        assert_eq!(&bytes[36..40], &2u32.to_le_bytes()); // k_levels[0]
        assert_eq!(&bytes[44..48], &f32::INFINITY.to_le_bytes());
        assert_eq!(bytes.len(), 36 + 4 * 2 + 4 * 12);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let good = sample_tensor().to_bytes();
        let path = Path::new("t.bsfa");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(ThresholdTensor::from_bytes(&bad, path), Err(Error::Format { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(ThresholdTensor::from_bytes(&bad, path), Err(Error::Format { .. })));

        assert!(matches!(ThresholdTensor::from_bytes(&good[..good.len() - 1], path), Err(Error::Format { .. })));
        assert!(matches!(ThresholdTensor::from_bytes(&good[..10], path), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_increasing_levels() {
        let tiles = TileConfig::default();
        assert!(ThresholdTensor::new(vec![8, 4], 1, 1, tiles, 128, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn unknown_level_lists_available() {
        let err = sample_tensor().level_index(5).unwrap_err().to_string();
        assert!(err.contains("[2, 8]"), "{err}");
    }

    #[test]
    fn monotonicity_violation_is_reported() {
        let tiles = TileConfig::new(64, 64).unwrap();
        let t = ThresholdTensor::new(vec![1, 2], 1, 1, tiles, 64, vec![1.0, 2.0]).unwrap();
        assert!(t.check_monotone().is_err());
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(
            raw in proptest::collection::vec(
                prop_oneof![any::<f32>().prop_filter("no NaN", |x| !x.is_nan()), Just(f32::INFINITY), Just(f32::NEG_INFINITY)],
                1..4usize * 3 * 2 * 5,
            ),
        ) {
            let tiles = TileConfig::new(64, 64).unwrap();
            let per_level = 3 * 2 * 5;
            let s = raw.len().div_ceil(per_level);
            let mut values = raw.clone();
            values.resize(s * per_level, 0.0);
            let levels: Vec<u32> = (1..=s as u32).collect();
            let t = ThresholdTensor::new(levels, 3, 2, tiles, 5 * 64, values).unwrap();
            let bytes = t.to_bytes();
            let back = ThresholdTensor::from_bytes(&bytes, Path::new("prop")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let same_bits = back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
