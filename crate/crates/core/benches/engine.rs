use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bsfa::calibration::calibrate;
use bsfa::engine::{flash_forward_with, Execution};
use bsfa::gating::{GateContext, GatePolicy};
use bsfa::workloads::{gen_model_dump, WorkloadKind, WorkloadSpec};
use bsfa::TileConfig;

fn engine(c: &mut Criterion) {
    let tiles = TileConfig::default();
    let mut spec = WorkloadSpec::new(WorkloadKind::ModelDump, 4096, 64, 11);
    spec.samples = 2;
    let dump = gen_model_dump(&spec).unwrap();
    let tensor = calibrate(&bsfa::CalibrationDump { samples: dump.samples[..1].to_vec(), ..dump.clone() }, &[8], tiles).unwrap();
    let input = dump.head_input(&dump.samples[1], 0, 0).unwrap();
    let ctx = GateContext::new(0, 0, 8);

    let mut group = c.benchmark_group("flash_forward_4096x64");
    group.sample_size(10);
    for (name, gate) in [("dense", GatePolicy::Dense), ("threshold_k8", GatePolicy::Threshold(&tensor))] {
        for (exec_name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, exec_name), &exec, |b, &exec| {
                b.iter(|| flash_forward_with(black_box(&input), tiles, &gate, ctx, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
