//! On-disk calibration dumps.
//!
//! A dump directory holds `manifest.json` plus one raw little-endian `f32`
//! blob per sample, laid out `[layer][head][tensor: Q, K, V?][row][col]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::HeadInput;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub seq_len: usize,
    /// Blob path, relative to the manifest's directory.
    pub path: String,
    pub has_v: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: Matrix<f32>,
    pub k: Matrix<f32>,
    pub v: Option<Matrix<f32>>,
}

/// One calibration sample: Q/K (and optionally V) for every (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seq_len: usize,
    /// Indexed `layer * num_heads + head`.
    pub heads: Vec<HeadTensors>,
}

impl Sample {
    pub fn head(&self, num_heads: usize, layer: usize, head: usize) -> &HeadTensors {
        &self.heads[layer * num_heads + head]
    }

    pub fn has_v(&self) -> bool {
        self.heads.iter().all(|h| h.v.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDump {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub samples: Vec<Sample>,
}

impl CalibrationDump {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "dump shape must be positive (layers={}, heads={}, head_dim={})",
                self.num_layers, self.num_heads, self.head_dim
            )));
        }
        let per_sample = self.num_layers * self.num_heads;
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id {:?}", s.id)));
            }
            if s.seq_len == 0 {
                return Err(Error::Config(format!("sample {:?} is empty", s.id)));
            }
            if s.heads.len() != per_sample {
                return Err(Error::Config(format!(
                    "sample {:?} has {} heads, expected {per_sample}",
                    s.id,
                    s.heads.len()
                )));
            }
            for h in &s.heads {
                let mats = [Some(&h.q), Some(&h.k), h.v.as_ref()];
                for m in mats.into_iter().flatten() {
                    if m.rows() != s.seq_len || m.cols() != self.head_dim {
                        return Err(Error::Config(format!(
                            "sample {:?} holds a {}x{} tensor, expected {}x{}",
                            s.id,
                            m.rows(),
                            m.cols(),
                            s.seq_len,
                            self.head_dim
                        )));
                    }
                }
            }
            if s.heads.iter().any(|h| h.v.is_some()) && !s.has_v() {
                return Err(Error::Config(format!("sample {:?} has V for only some heads", s.id)));
            }
        }
        Ok(())
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Causal head input for (layer, head) of a sample; requires V.
    pub fn head_input(&self, sample: &Sample, layer: usize, head: usize) -> Result<HeadInput> {
        let t = sample.head(self.num_heads, layer, head);
        let v = t
            .v
            .clone()
            .ok_or_else(|| Error::Config(format!("sample {:?} carries no V tensors", sample.id)))?;
        HeadInput::new(t.q.clone(), t.k.clone(), v, true)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            samples: self
                .samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.id.clone(),
                    seq_len: s.seq_len,
                    path: format!("{}.bin", s.id),
                    has_v: s.has_v(),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and the sample blobs into `dir`, returning the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (sample, entry) in self.samples.iter().zip(&manifest.samples) {
            let path = dir.join(&entry.path);
            fs::write(&path, encode_sample(sample)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a dump from a manifest file or the directory containing one.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let blob = base.join(&entry.path);
            let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
            samples.push(decode_sample(&manifest, entry, &bytes, &blob)?);
        }
        let dump = Self {
            num_layers: manifest.num_layers,
            num_heads: manifest.num_heads,
            head_dim: manifest.head_dim,
            samples,
        };
        dump.validate()?;
        Ok(dump)
    }
}

fn encode_sample(sample: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    for h in &sample.heads {
        for m in [Some(&h.q), Some(&h.k), h.v.as_ref()].into_iter().flatten() {
            for x in m.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn decode_sample(manifest: &Manifest, entry: &SampleEntry, bytes: &[u8], path: &Path) -> Result<Sample> {
    let (n, d) = (entry.seq_len, manifest.head_dim);
    let tensors = if entry.has_v { 3 } else { 2 };
    let per_matrix = n * d;
    let expected = manifest.num_layers * manifest.num_heads * tensors * per_matrix * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for sample {:?}, found {}", entry.id, bytes.len()),
        ));
    }
    let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut take = || Matrix::from_vec(n, d, floats.by_ref().take(per_matrix).collect());
    let heads = (0..manifest.num_layers * manifest.num_heads)
        .map(|_| {
            let q = take();
            let k = take();
            let v = entry.has_v.then(&mut take);
            HeadTensors { q, k, v }
        })
        .collect();
    Ok(Sample { id: entry.id.clone(), seq_len: n, heads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dump(has_v: bool) -> CalibrationDump {
        let heads = |seed: f32, n: usize| {
            (0..4)
                .map(|h| HeadTensors {
                    q: Matrix::from_fn(n, 3, |r, c| seed + h as f32 + r as f32 * 0.5 - c as f32),
                    k: Matrix::from_fn(n, 3, |r, c| seed * 2.0 - h as f32 + (r * c) as f32),
                    v: has_v.then(|| Matrix::from_fn(n, 3, |r, c| (r + c) as f32)),
                })
                .collect()
        };
        CalibrationDump {
            num_layers: 2,
            num_heads: 2,
            head_dim: 3,
            samples: vec![
                Sample { id: "a".into(), seq_len: 5, heads: heads(1.0, 5) },
                Sample { id: "b".into(), seq_len: 7, heads: heads(-1.0, 7) },
            ],
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for has_v in [true, false] {
            let dump = tiny_dump(has_v);
            let sub = dir.path().join(format!("v{has_v}"));
            let manifest = dump.write(&sub).unwrap();
            assert_eq!(CalibrationDump::read(&manifest).unwrap(), dump);
            assert_eq!(CalibrationDump::read(&sub).unwrap(), dump);
        }
    }

    #[test]
    fn blob_layout_is_layer_head_tensor_row_col() {
        let dir = tempfile::tempdir().unwrap();
        let dump = tiny_dump(true);
        dump.write(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("a.bin")).unwrap();
        let f = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (n, d) = (5, 3);
        let s = &dump.samples[0];
        // layer 0 head 1, K tensor, row 2, col 1
        let idx = (3 + 1) * n * d + 2 * d + 1;
        assert_eq!(f(idx), *s.head(2, 0, 1).k.get(2, 1));
        assert_eq!(bytes.len(), 4 * 3 * n * d * 4);
    }

    #[test]
    fn truncated_blob_and_unknown_fields_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dump(false).write(dir.path()).unwrap();
        let blob = dir.path().join("b.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(CalibrationDump::read(&manifest), Err(Error::Format { .. })));

        let text = fs::read_to_string(&manifest).unwrap().replacen("{", "{\"extra\": 1,", 1);
        fs::write(&manifest, text).unwrap();
        assert!(matches!(CalibrationDump::read(&manifest), Err(Error::Format { .. })));
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut dump = tiny_dump(true);
        dump.samples[1].heads.pop();
        assert!(matches!(dump.validate(), Err(Error::Config(_))));
        let mut dump = tiny_dump(true);
        dump.samples[0].heads[0].k = Matrix::zeros(5, 2);
        assert!(matches!(dump.validate(), Err(Error::Config(_))));
    }
}
