//! JSON run reports and trace files written by the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::engine::SampleTrace;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: u32,
    /// UTC, RFC 3339.
    pub generated_at: String,
    /// Always "cpu": timings are for this engine, not a GPU kernel.
    pub engine: String,
    pub config: ReportConfig,
    pub timing: Option<Timing>,
    pub cost: CostReport,
    pub density: DensityReport,
    pub verify: Option<VerifyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub bm: usize,
    pub bn: usize,
    pub gate: String,
    pub params: GateParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    pub k: Option<usize>,
    pub window: Option<usize>,
    pub lambda: Option<f32>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub sample: String,
    pub thresholds: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
    pub warmup: usize,
    pub dense_mean_ms: f64,
    pub dense_std_ms: f64,
    /// Dense time divided by gated time.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityReport {
    pub predicted: Option<f64>,
    pub measured_mean: f64,
    pub measured_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyReport {
    pub max_rel_err: f64,
    pub rtol: f64,
    pub pass: bool,
}

impl RunReport {
    pub fn timestamp() -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if report.schema != SCHEMA_VERSION {
            return Err(Error::format(path, format!("unsupported report schema {}", report.schema)));
        }
        Ok(report)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub schema: u32,
    pub traces: Vec<SampleTrace>,
}

impl TraceFile {
    pub fn new(traces: Vec<SampleTrace>) -> Self {
        Self { schema: SCHEMA_VERSION, traces }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("trace serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TraceFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.schema != SCHEMA_VERSION {
            return Err(Error::format(path, format!("unsupported trace schema {}", file.schema)));
        }
        for t in file.traces.iter().flat_map(|s| &s.heads) {
            if t.decisions.len() != t.m_q * t.m_kv {
                return Err(Error::format(path, "trace decision grid does not match its shape"));
            }
            t.check().map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        RunReport {
            schema: SCHEMA_VERSION,
            generated_at: RunReport::timestamp(),
            engine: "cpu".into(),
            config: ReportConfig {
                n: 256,
                d: 16,
                layers: 1,
                heads: 1,
                bm: 128,
                bn: 64,
                gate: "dense".into(),
                params: GateParams::default(),
            },
            timing: None,
            cost: CostReport::default(),
            density: DensityReport { predicted: Some(1.0), measured_mean: 1.0, measured_std: 0.0 },
            verify: Some(VerifyReport { max_rel_err: 1e-7, rtol: 1e-4, pass: true }),
        }
    }

    #[test]
    fn round_trips_and_rejects_unknown_fields() {
        let r = report();
        let text = r.to_json();
        assert_eq!(RunReport::from_json(&text, Path::new("r.json")).unwrap(), r);
        let extra = text.replacen("{", "{\n  \"surprise\": 1,", 1);
        assert!(RunReport::from_json(&extra, Path::new("r.json")).is_err());
        let bumped = text.replace("\"schema\": 1", "\"schema\": 2");
        assert!(RunReport::from_json(&bumped, Path::new("r.json")).is_err());
    }

    #[test]
    fn timestamp_is_utc_iso8601() {
        let ts = RunReport::timestamp();
        assert!(ts.ends_with('Z'), "{ts}");
        assert!(chrono::DateTime::parse_from_rfc3339(&ts).is_ok());
    }
}
