use crate::attention::HeadInput;
use crate::engine::tiles::TileConfig;
use crate::matrix::Matrix;

/// Pads Q, K and V to the next multiple of `lcm(b_m, b_n)` by repeating the
/// last row. Returns the padded input and the original length; output rows
/// at or past that length belong to padding.
pub fn pad_to_blocks(input: &HeadInput, tiles: TileConfig) -> (HeadInput, usize) {
    let n = input.seq_len();
    let target = n.div_ceil(tiles.alignment()) * tiles.alignment();
    if target == n {
        return (input.clone(), n);
    }
    let pad = |m: &Matrix<f32>| Matrix::from_fn(target, m.cols(), |r, c| *m.get(r.min(n - 1), c));
    let padded = HeadInput { q: pad(&input.q), k: pad(&input.k), v: pad(&input.v), causal: input.causal };
    (padded, n)
}
