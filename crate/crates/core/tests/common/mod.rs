#![allow(dead_code)]

use bsfa::attention::HeadInput;
use bsfa::calibration::{CalibrationDump, HeadTensors, Sample};
use bsfa::workloads::{gen_random, WorkloadKind, WorkloadSpec};

pub fn random_head(n: usize, d: usize, seed: u64, causal: bool) -> HeadInput {
    let mut input = gen_random(&WorkloadSpec::new(WorkloadKind::Random, n, d, seed)).unwrap();
    input.causal = causal;
    input
}

/// Wraps one head as a single-layer, single-head, single-sample dump.
pub fn single_head_dump(input: &HeadInput, id: &str) -> CalibrationDump {
    CalibrationDump {
        num_layers: 1,
        num_heads: 1,
        head_dim: input.head_dim(),
        samples: vec![Sample {
            id: id.into(),
            seq_len: input.seq_len(),
            heads: vec![HeadTensors { q: input.q.clone(), k: input.k.clone(), v: Some(input.v.clone()) }],
        }],
    }
}

/// Per-coordinate envelope check: every output row lies between the min and
/// max of the value rows it can see.
pub fn within_value_envelope(input: &HeadInput, o: &bsfa::Matrix<f64>, slack: f64) -> bool {
    let n = input.seq_len();
    for i in 0..n {
        let last = if input.causal { i } else { n - 1 };
        for c in 0..input.head_dim() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in 0..=last {
                let v = *input.v.get(r, c) as f64;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let x = *o.get(i, c);
            if x < lo - slack || x > hi + slack {
                return false;
            }
        }
    }
    true
}
