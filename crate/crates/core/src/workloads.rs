//! Deterministic synthetic workloads.
//!
//! Every matrix is drawn from its own ChaCha stream keyed by
//! (seed, sample, layer, head, tensor), so generation order and thread count
//! never change the bytes produced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::HeadInput;
use crate::calibration::{CalibrationDump, HeadTensors, Sample};
use crate::engine::{parallel_map, score_tile, TileConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    Random,
    Needle,
    Structured,
    ModelDump,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleParams {
    /// Token index inside the planted kv block.
    pub position: usize,
    /// Norm of each planted key row; 0 disables planting.
    pub strength: f32,
    /// Query row the needle is aligned with; `None` means the last row.
    pub probe_row: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredParams {
    pub sink_width: usize,
    pub window_width: usize,
    pub heavy_hitter_count: usize,
    /// Extra score (in `QK^T / sqrt(d)` units) given to elevated keys.
    pub boost: f32,
}

impl Default for StructuredParams {
    fn default() -> Self {
        Self { sink_width: 0, window_width: 0, heavy_hitter_count: 0, boost: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub samples: usize,
    pub seed: u64,
    pub tiles: TileConfig,
    pub needle: NeedleParams,
    pub structured: StructuredParams,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, n: usize, d: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            d,
            layers: 1,
            heads: 1,
            samples: 1,
            seed,
            tiles: TileConfig::default(),
            needle: NeedleParams { position: 0, strength: 10.0, probe_row: None },
            structured: StructuredParams::default(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 || self.samples == 0 {
            return Err(Error::Config(format!(
                "workload dimensions must be positive (n={}, d={}, layers={}, heads={}, samples={})",
                self.n, self.d, self.layers, self.heads, self.samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Q = 0,
    K = 1,
    V = 2,
    Direction = 3,
    HeavyHitters = 4,
    Window = 5,
    Personality = 6,
}

fn rng(seed: u64, sample: usize, layer: usize, head: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 40) | ((layer as u64) << 28) | ((head as u64) << 16) | stream as u64);
    rng
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix<f32> {
    Matrix::from_fn(n, d, |_, _| rng.sample::<f32, _>(StandardNormal))
}

fn random_tensors(n: usize, d: usize, seed: u64, sample: usize, layer: usize, head: usize) -> HeadTensors {
    HeadTensors {
        q: normal_matrix(&mut rng(seed, sample, layer, head, Stream::Q), n, d),
        k: normal_matrix(&mut rng(seed, sample, layer, head, Stream::K), n, d),
        v: Some(normal_matrix(&mut rng(seed, sample, layer, head, Stream::V), n, d)),
    }
}

fn into_input(t: HeadTensors) -> Result<HeadInput> {
    HeadInput::new(t.q, t.k, t.v.expect("generators always emit V"), true)
}

/// I.i.d. standard-normal Q, K, V for sample 0, layer 0, head 0.
pub fn gen_random(spec: &WorkloadSpec) -> Result<HeadInput> {
    spec.check()?;
    into_input(random_tensors(spec.n, spec.d, spec.seed, 0, 0, 0))
}

/// Planted needle and where it sits.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSample {
    pub input: HeadInput,
    pub probe_row: usize,
    pub probe_block: usize,
    pub needle_block: usize,
    /// Needle block maximum minus the largest background off-frontier maximum
    /// at the probe block; `None` when nothing was planted.
    pub margin: Option<f32>,
}

/// Random background with the keys of one kv block replaced by
/// `strength * q_probe / |q_probe|`.
pub fn gen_needle(spec: &WorkloadSpec) -> Result<NeedleSample> {
    spec.check()?;
    needle_tensors(spec, 0, 0, 0).map(|(input, meta)| NeedleSample { input, ..meta })
}

fn needle_tensors(spec: &WorkloadSpec, sample: usize, layer: usize, head: usize) -> Result<(HeadInput, NeedleSample)> {
    let (n, tiles) = (spec.n, spec.tiles);
    let p = spec.needle;
    let probe_row = p.probe_row.unwrap_or(n - 1);
    if probe_row >= n || p.position >= n {
        return Err(Error::Config(format!(
            "needle position {} and probe row {probe_row} must lie inside 0..{n}",
            p.position
        )));
    }
    if !(p.strength >= 0.0) || !p.strength.is_finite() {
        return Err(Error::Config(format!("needle strength must be finite and non-negative, got {}", p.strength)));
    }
    let grid = tiles.grid(n, true);
    let probe_block = probe_row / tiles.b_m();
    let needle_block = p.position / tiles.b_n();
    if needle_block >= grid.frontier(probe_block).start {
        return Err(Error::Config(format!(
            "needle block {needle_block} (token {}) is not an off-frontier block of probe query block {probe_block}",
            p.position
        )));
    }

    let mut t = random_tensors(n, spec.d, spec.seed, sample, layer, head);
    let mut margin = None;
    if p.strength > 0.0 {
        let q = t.q.row(probe_row).to_vec();
        let norm = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        for r in grid.key_rows(needle_block) {
            for (dst, &x) in t.k.row_mut(r).iter_mut().zip(&q) {
                *dst = p.strength * x / norm;
            }
        }
        let q_rows = grid.query_rows(probe_block);
        let mut needle_max = f32::NEG_INFINITY;
        let mut background = f32::NEG_INFINITY;
        for j in 0..grid.off_frontier_count(probe_block) {
            let s = score_tile(&t.q, &t.k, q_rows.clone(), grid.key_rows(j), false).s_max;
            if j == needle_block {
                needle_max = s;
            } else {
                background = background.max(s);
            }
        }
        let m = needle_max - background;
        if !(m > 0.0) {
            return Err(Error::Numeric(format!(
                "planted block maximum {needle_max} does not dominate background {background}"
            )));
        }
        if p.strength >= 10.0 && n <= 8192 && !(m > 1.0) {
            return Err(Error::Numeric(format!("needle margin {m} is not above 1 at strength {}", p.strength)));
        }
        margin = Some(m);
    }
    let input = into_input(t)?;
    let meta = NeedleSample { input: input.clone(), probe_row, probe_block, needle_block, margin };
    Ok((input, meta))
}

fn structured_tensors(
    n: usize,
    d: usize,
    seed: u64,
    ids: (usize, usize, usize),
    params: &StructuredParams,
) -> Result<HeadTensors> {
    let (sample, layer, head) = ids;
    let StructuredParams { sink_width, window_width, heavy_hitter_count, boost } = *params;
    if sink_width + window_width >= n {
        return Err(Error::Config(format!("sink width {sink_width} plus window {window_width} must be below n={n}")));
    }
    let mut t = random_tensors(n, d, seed, sample, layer, head);
    let sqrt_d = (d as f32).sqrt();

    if sink_width > 0 || heavy_hitter_count > 0 {
        // shared direction g: every query carries c*g, elevated keys carry c*g too
        let mut r = rng(seed, 0, layer, head, Stream::Direction);
        let mut g: Vec<f32> = (0..d).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f32>().sqrt();
        let c = (boost * sqrt_d).sqrt();
        g.iter_mut().for_each(|x| *x *= c / norm);

        let mut hh = rng(seed, sample, layer, head, Stream::HeavyHitters);
        let mut elevated: Vec<usize> = (0..sink_width).collect();
        if sink_width < n {
            elevated.extend((0..heavy_hitter_count).map(|_| hh.random_range(sink_width..n)));
        }
        for i in 0..n {
            t.q.row_mut(i).iter_mut().zip(&g).for_each(|(x, gi)| *x += gi);
        }
        for &j in &elevated {
            t.k.row_mut(j).iter_mut().zip(&g).for_each(|(x, gi)| *x += gi);
        }
    }

    if window_width > 0 {
        // random Fourier positional code: r(i).r(j) = a^2 sum cos(w_m (i - j)),
        // which peaks at i = j and fades past roughly window_width tokens
        let pairs = (d / 2).max(1);
        let amp = (2.0 * boost / sqrt_d).sqrt();
        let mut r = rng(seed, 0, layer, head, Stream::Window);
        let freqs: Vec<(f64, f64)> = (0..pairs)
            .map(|m| {
                let w = (m as f64 + r.random::<f64>()) / pairs as f64 * std::f64::consts::PI / window_width as f64;
                (w, r.random::<f64>() * std::f64::consts::TAU)
            })
            .collect();
        for i in 0..n {
            let code: Vec<f32> = freqs
                .iter()
                .flat_map(|&(w, phase)| {
                    let a = w * i as f64 + phase;
                    [a.cos() as f32 * amp, a.sin() as f32 * amp]
                })
                .take(d)
                .collect();
            t.q.row_mut(i).iter_mut().zip(&code).for_each(|(x, c)| *x += c);
            t.k.row_mut(i).iter_mut().zip(&code).for_each(|(x, c)| *x += c);
        }
    }
    Ok(t)
}

/// Random background with attention sinks, a local window and heavy hitters.
pub fn gen_structured(spec: &WorkloadSpec) -> Result<HeadInput> {
    spec.check()?;
    into_input(structured_tensors(spec.n, spec.d, spec.seed, (0, 0, 0), &spec.structured)?)
}

/// Per-(layer, head) pattern shared by every sample of a model dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPersonality {
    pub structured: Option<StructuredParams>,
}

pub fn head_personality(seed: u64, layer: usize, head: usize, n: usize, tiles: TileConfig) -> HeadPersonality {
    let mut r = rng(seed, 0, layer, head, Stream::Personality);
    if r.random_bool(0.25) {
        return HeadPersonality { structured: None };
    }
    let sink_width = [0, tiles.b_n() / 2, tiles.b_n()][r.random_range(0..3)].min(n / 4);
    let window_width = if r.random_bool(0.6) { r.random_range(32..=512).min(n / 4) } else { 0 };
    let heavy_hitter_count = r.random_range(0..=8);
    let boost = r.random_range(2.0..6.0);
    HeadPersonality { structured: Some(StructuredParams { sink_width, window_width, heavy_hitter_count, boost }) }
}

/// Identifier of sample `i` in generated dumps; sorts in generation order.
pub fn sample_id(i: usize) -> String {
    format!("s{i:04}")
}

/// A multi-layer, multi-head dump whose heads mix random and structured patterns.
pub fn gen_model_dump(spec: &WorkloadSpec) -> Result<CalibrationDump> {
    spec.check()?;
    let (l, h) = (spec.layers, spec.heads);
    let personalities: Vec<HeadPersonality> =
        (0..l * h).map(|idx| head_personality(spec.seed, idx / h, idx % h, spec.n, spec.tiles)).collect();
    let samples = (0..spec.samples)
        .map(|s| {
            let heads = parallel_map(l * h, |idx| match &personalities[idx].structured {
                None => Ok(random_tensors(spec.n, spec.d, spec.seed, s, idx / h, idx % h)),
                Some(p) => structured_tensors(spec.n, spec.d, spec.seed, (s, idx / h, idx % h), p),
            })?;
            Ok(Sample { id: sample_id(s), seq_len: spec.n, heads })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationDump { num_layers: l, num_heads: h, head_dim: spec.d, samples })
}

/// Dump with `spec.samples` samples of the requested kind over `layers x heads`.
pub fn gen_dump(spec: &WorkloadSpec) -> Result<CalibrationDump> {
    spec.check()?;
    if spec.kind == WorkloadKind::ModelDump {
        return gen_model_dump(spec);
    }
    let (l, h) = (spec.layers, spec.heads);
    let samples = (0..spec.samples)
        .map(|s| {
            let heads = parallel_map(l * h, |idx| {
                let (layer, head) = (idx / h, idx % h);
                match spec.kind {
                    WorkloadKind::Random => Ok(random_tensors(spec.n, spec.d, spec.seed, s, layer, head)),
                    WorkloadKind::Structured => {
                        structured_tensors(spec.n, spec.d, spec.seed, (s, layer, head), &spec.structured)
                    }
                    WorkloadKind::Needle => needle_tensors(spec, s, layer, head).map(|(input, _)| HeadTensors {
                        q: input.q,
                        k: input.k,
                        v: Some(input.v),
                    }),
                    WorkloadKind::ModelDump => unreachable!(),
                }
            })?;
            Ok(Sample { id: sample_id(s), seq_len: spec.n, heads })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationDump { num_layers: l, num_heads: h, head_dim: spec.d, samples })
}
