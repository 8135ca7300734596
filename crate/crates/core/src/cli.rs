//! `bsfa` command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 I/O or format error.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{masked_dense_attention, relative_error};
use crate::calibration::{calibrate_with_summary, save_thresholds, CalibrationDump, Sample};
use crate::cost::{attention_flops, measured_density, predicted_density, CostConfig, CostReport, TABLE1_PREDICTED};
use crate::engine::{run_sample, Execution, SampleTrace, TileConfig};
use crate::error::{Error, Result};
use crate::gating::{load_thresholds, GatePolicy, ThresholdTensor};
use crate::report::{DensityReport, GateParams, ReportConfig, RunReport, Timing, TraceFile, VerifyReport, SCHEMA_VERSION};
use crate::workloads::{gen_dump, NeedleParams, StructuredParams, WorkloadKind, WorkloadSpec};

#[derive(Debug, Parser)]
#[command(name = "bsfa", version, about = "Block-sparse tiled attention: generate, calibrate, verify, bench")]
pub struct Cli {
    /// Query block size.
    #[arg(long, global = true, default_value_t = 128)]
    pub bm: usize,
    /// Key/value block size.
    #[arg(long, global = true, default_value_t = 64)]
    pub bn: usize,
    /// Worker threads for query-block parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write a JSON report here.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload or calibration dump.
    Gen(GenArgs),
    /// Fit a threshold tensor from a calibration dump.
    Calibrate(CalibrateArgs),
    /// Check gated output against the masked dense oracle.
    Verify(RunArgs),
    /// Time a gated run against a dense run on the same sample.
    Bench(BenchArgs),
    /// Predicted or measured block density.
    Density(DensityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Random,
    Needle,
    Structured,
    ModelDump,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Random)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Sample count (defaults to 16 for model dumps, 1 otherwise).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub needle_pos: usize,
    #[arg(long, default_value_t = 10.0)]
    pub strength: f32,
    #[arg(long)]
    pub probe_row: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub sink: usize,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub heavy_hitters: usize,
    #[arg(long, default_value_t = 4.0)]
    pub boost: f32,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Dump directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Strictly increasing retained-block counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Dense,
    Frontier,
    Threshold,
    Window,
    RunningMax,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id (default: every sample in the dump).
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long, value_enum, default_value_t = GateArg::Dense)]
    pub gate: GateArg,
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Sparsity level for the threshold gate.
    #[arg(long)]
    pub k: Option<usize>,
    /// Trailing window in tokens for the sliding-window gate.
    #[arg(long)]
    pub window: Option<usize>,
    /// Score offset for the running-max gate.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f32>,
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
    /// Write the gate trace to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 10)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Measured density from a trace file written by `verify` or `bench`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Print the reference configurations next to computed values.
    #[arg(long)]
    pub table1: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let tiles = TileConfig::new(cli.bm, cli.bn)?;
    let exec = configure_threads(cli.threads)?;
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, tiles, args),
        Command::Calibrate(args) => cmd_calibrate(cli, tiles, args),
        Command::Verify(args) => cmd_verify(cli, tiles, exec, args),
        Command::Bench(args) => cmd_bench(cli, tiles, exec, args),
        Command::Density(args) => cmd_density(cli, tiles, args),
    }
}

fn configure_threads(threads: Option<usize>) -> Result<Execution> {
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    Ok(if threads == Some(1) { Execution::Sequential } else { Execution::Parallel })
}

fn cmd_gen(cli: &Cli, tiles: TileConfig, args: &GenArgs) -> Result<()> {
    let kind = match args.kind {
        KindArg::Random => WorkloadKind::Random,
        KindArg::Needle => WorkloadKind::Needle,
        KindArg::Structured => WorkloadKind::Structured,
        KindArg::ModelDump => WorkloadKind::ModelDump,
    };
    let default_samples = if kind == WorkloadKind::ModelDump { 16 } else { 1 };
    let spec = WorkloadSpec {
        layers: args.layers,
        heads: args.heads,
        samples: args.samples.unwrap_or(default_samples),
        tiles,
        needle: NeedleParams { position: args.needle_pos, strength: args.strength, probe_row: args.probe_row },
        structured: StructuredParams {
            sink_width: args.sink,
            window_width: args.window,
            heavy_hitter_count: args.heavy_hitters,
            boost: args.boost,
        },
        ..WorkloadSpec::new(kind, args.n, args.d, cli.seed)
    };
    let dump = gen_dump(&spec)?;
    let manifest = dump.write(&args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_calibrate(_cli: &Cli, tiles: TileConfig, args: &CalibrateArgs) -> Result<()> {
    let dump = CalibrationDump::read(&args.data)?;
    let (tensor, summary) = calibrate_with_summary(&dump, &args.k, tiles)?;
    save_thresholds(&tensor, &args.out)?;
    println!(
        "calibrated {} samples, n_max={}, S={} L={} H={} P={} -> {}",
        summary.samples,
        summary.n_max,
        tensor.k_levels().len(),
        tensor.layers(),
        tensor.heads(),
        tensor.positions(),
        args.out.display()
    );
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>6}", "k", "min", "mean", "max", "retain-all", "ties");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for l in &summary.levels {
        println!(
            "{:>6} {:>10} {:>10} {:>10} {:>10} {:>6}",
            l.k,
            fmt(l.min.map(f64::from)),
            fmt(l.mean),
            fmt(l.max.map(f64::from)),
            l.retain_all,
            l.ties
        );
    }
    Ok(())
}

struct Prepared {
    dump: CalibrationDump,
    thresholds: Option<ThresholdTensor>,
}

impl Prepared {
    fn load(args: &RunArgs) -> Result<Self> {
        let dump = CalibrationDump::read(&args.data)?;
        let thresholds = match args.gate {
            GateArg::Threshold => {
                let path = args
                    .thresholds
                    .as_ref()
                    .ok_or_else(|| Error::Config("--gate threshold needs --thresholds FILE".into()))?;
                if args.k.is_none() {
                    return Err(Error::Config("--gate threshold needs --k".into()));
                }
                Some(load_thresholds(path)?)
            }
            _ => None,
        };
        Ok(Self { dump, thresholds })
    }

    fn gate(&self, args: &RunArgs) -> Result<GatePolicy<'_>> {
        Ok(match args.gate {
            GateArg::Dense => GatePolicy::Dense,
            GateArg::Frontier => GatePolicy::FrontierOnly,
            GateArg::Threshold => GatePolicy::Threshold(self.thresholds.as_ref().expect("loaded with the dump")),
            GateArg::Window => GatePolicy::SlidingWindow {
                window: args.window.ok_or_else(|| Error::Config("--gate window needs --window W".into()))?,
            },
            GateArg::RunningMax => GatePolicy::RunningMax {
                lambda: args.lambda.ok_or_else(|| Error::Config("--gate running-max needs --lambda L".into()))?,
            },
        })
    }

    fn samples(&self, args: &RunArgs) -> Result<Vec<&Sample>> {
        let samples: Vec<&Sample> = match &args.sample {
            Some(id) => {
                vec![self.dump.sample(id).ok_or_else(|| Error::Config(format!("no sample {id:?} in the dump")))?]
            }
            None => self.dump.samples.iter().collect(),
        };
        if samples.is_empty() {
            return Err(Error::Config("the dump has no samples".into()));
        }
        if let Some(s) = samples.iter().find(|s| !s.has_v()) {
            return Err(Error::Config(format!("sample {:?} has no V tensors; gated runs need V", s.id)));
        }
        Ok(samples)
    }
}

fn predicted_for(args: &RunArgs, n: usize, tiles: TileConfig) -> Option<f64> {
    match args.gate {
        GateArg::Dense => Some(1.0),
        GateArg::Frontier => Some(predicted_density(n, tiles, 0)),
        GateArg::Threshold => args.k.map(|k| predicted_density(n, tiles, k)),
        GateArg::Window | GateArg::RunningMax => None,
    }
}

fn report_config(cli: &Cli, args: &RunArgs, dump: &CalibrationDump, n: usize, tiles: TileConfig) -> ReportConfig {
    ReportConfig {
        n,
        d: dump.head_dim,
        layers: dump.num_layers,
        heads: dump.num_heads,
        bm: tiles.b_m(),
        bn: tiles.b_n(),
        gate: format!("{:?}", args.gate).to_lowercase(),
        params: GateParams {
            k: args.k,
            window: args.window,
            lambda: args.lambda,
            seed: cli.seed,
            threads: cli.threads,
            sample: args.sample.clone().unwrap_or_else(|| "all".into()),
            thresholds: args.thresholds.as_ref().map(|p| p.display().to_string()),
        },
    }
}

/// Cost over every layer of the dump at the measured density.
fn cost_for(dump: &CalibrationDump, n: usize, tiles: TileConfig, density: f64) -> CostReport {
    let cfg = CostConfig { n, d: dump.head_dim, heads: dump.num_heads, tiles };
    let per_layer = attention_flops(&cfg, density);
    let layers = dump.num_layers as f64;
    CostReport {
        qk_flops: per_layer.qk_flops * layers,
        pv_flops: per_layer.pv_flops * layers,
        softmax_ops: per_layer.softmax_ops * layers,
        projection_flops: per_layer.projection_flops * layers,
        v_traffic: per_layer.v_traffic * layers,
        k_traffic: per_layer.k_traffic * layers,
        gate_overhead_ops: per_layer.gate_overhead_ops * layers,
    }
}

fn cmd_verify(cli: &Cli, tiles: TileConfig, exec: Execution, args: &RunArgs) -> Result<()> {
    let prepared = Prepared::load(args)?;
    let gate = prepared.gate(args)?;
    let samples = prepared.samples(args)?;
    let dump = &prepared.dump;
    let k_level = args.k.unwrap_or(0);

    let mut worst = 0.0f64;
    let mut traces = Vec::with_capacity(samples.len());
    for sample in &samples {
        let (outputs, trace) = run_sample(dump, sample, tiles, &gate, k_level, exec)?;
        for (out, head_trace) in outputs.iter().zip(&trace.heads) {
            head_trace.check()?;
            let input = dump.head_input(sample, head_trace.layer, head_trace.head)?;
            let mask = head_trace.mask();
            mask.check(input.seq_len(), tiles, input.causal)?;
            let oracle = masked_dense_attention(&input, &mask, tiles)?;
            worst = worst.max(relative_error(out, &oracle, 0..input.seq_len()));
        }
        if args.gate == GateArg::Threshold {
            print_retained_table(sample, &trace, k_level);
        }
        traces.push(trace);
    }
    let pass = worst <= args.rtol;
    let (mean, std) = measured_density(&traces)?;
    let n = samples.iter().map(|s| s.seq_len).max().unwrap_or(0);
    println!(
        "gate={} samples={} max_rel_err={worst:.3e} rtol={:.1e} density={mean:.4}±{std:.4} {}",
        gate.name(),
        traces.len(),
        args.rtol,
        if pass { "PASS" } else { "FAIL" }
    );

    if let Some(path) = &args.trace {
        TraceFile::new(traces).write(path)?;
    }
    if let Some(path) = &cli.json {
        let report = RunReport {
            schema: SCHEMA_VERSION,
            generated_at: RunReport::timestamp(),
            engine: "cpu".into(),
            config: report_config(cli, args, dump, n, tiles),
            timing: None,
            cost: cost_for(dump, n, tiles, mean),
            density: DensityReport { predicted: predicted_for(args, n, tiles), measured_mean: mean, measured_std: std },
            verify: Some(VerifyReport { max_rel_err: worst, rtol: args.rtol, pass }),
        };
        report.write(path)?;
    }
    if pass {
        Ok(())
    } else {
        Err(Error::Verification(format!("max relative error {worst:.3e} exceeds rtol {:.1e}", args.rtol)))
    }
}

fn print_retained_table(sample: &Sample, trace: &SampleTrace, k: usize) {
    println!("sample {}: retained off-frontier blocks per position (target = min(k, A_p), k = {k})", sample.id);
    let Some(first) = trace.heads.first() else { return };
    let grid = first.tiles.grid(first.n, first.causal);
    let headers: Vec<String> = trace.heads.iter().map(|t| format!("L{}H{}", t.layer, t.head)).collect();
    println!("{:>5} {:>5} {:>6}  {}", "p", "A_p", "target", headers.join(" "));
    let mut mismatches = 0;
    for p in 0..first.m_q {
        let a = grid.off_frontier_count(p);
        let target = a.min(k);
        let counts: Vec<String> = trace
            .heads
            .iter()
            .map(|t| {
                let kept = t.kept_off_frontier(p);
                if kept != target {
                    mismatches += 1;
                }
                format!("{kept:>width$}", width = 4)
            })
            .collect();
        println!("{p:>5} {a:>5} {target:>6}  {}", counts.join(" "));
    }
    println!("positions off target: {mismatches}, ties: {}", trace.ties());
}

fn time_runs(
    dump: &CalibrationDump,
    samples: &[&Sample],
    tiles: TileConfig,
    gate: &GatePolicy<'_>,
    k_level: usize,
    exec: Execution,
    warmup: usize,
    repeat: usize,
) -> Result<(f64, f64, Vec<SampleTrace>)> {
    let once = || -> Result<Vec<SampleTrace>> {
        samples
            .iter()
            .map(|s| run_sample(dump, s, tiles, gate, k_level, exec).map(|(_, trace)| trace))
            .collect()
    };
    let mut traces = once()?;
    for _ in 1..warmup {
        once()?;
    }
    let mut ms = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let start = Instant::now();
        traces = once()?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / ms.len() as f64;
    let std = (ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ms.len() as f64).sqrt();
    Ok((mean, std, traces))
}

fn cmd_bench(cli: &Cli, tiles: TileConfig, exec: Execution, args: &BenchArgs) -> Result<()> {
    if args.repeat == 0 {
        return Err(Error::Config("--repeat must be at least 1".into()));
    }
    let run = &args.run;
    let prepared = Prepared::load(run)?;
    let gate = prepared.gate(run)?;
    let samples = prepared.samples(run)?;
    let dump = &prepared.dump;
    let k_level = run.k.unwrap_or(0);

    let (mean_ms, std_ms, traces) = time_runs(dump, &samples, tiles, &gate, k_level, exec, args.warmup, args.repeat)?;
    let (dense_mean_ms, dense_std_ms, _) =
        time_runs(dump, &samples, tiles, &GatePolicy::Dense, 0, exec, args.warmup, args.repeat)?;
    let (measured_mean, measured_std) = measured_density(&traces)?;
    let n = samples.iter().map(|s| s.seq_len).max().unwrap_or(0);
    let speedup = dense_mean_ms / mean_ms;
    println!(
        "gate={} cpu engine: {mean_ms:.2}±{std_ms:.2} ms, dense {dense_mean_ms:.2}±{dense_std_ms:.2} ms, speedup {speedup:.3}x, density {measured_mean:.4}±{measured_std:.4}",
        gate.name()
    );
    let report = RunReport {
        schema: SCHEMA_VERSION,
        generated_at: RunReport::timestamp(),
        engine: "cpu".into(),
        config: report_config(cli, run, dump, n, tiles),
        timing: Some(Timing {
            mean_ms,
            std_ms,
            repeats: args.repeat,
            warmup: args.warmup,
            dense_mean_ms,
            dense_std_ms,
            speedup,
        }),
        cost: cost_for(dump, n, tiles, measured_mean),
        density: DensityReport { predicted: predicted_for(run, n, tiles), measured_mean, measured_std },
        verify: None,
    };
    if let Some(path) = &run.trace {
        TraceFile::new(traces).write(path)?;
    }
    match &cli.json {
        Some(path) => report.write(path)?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_density(cli: &Cli, tiles: TileConfig, args: &DensityArgs) -> Result<()> {
    let mut rows = Vec::new();
    if args.table1 {
        let reference = TileConfig::default();
        println!("{:>7} {:>5} {:>9} {:>9} {:>7}", "n", "k", "reference", "computed", "|diff|");
        for &(n, k, expected) in TABLE1_PREDICTED.iter() {
            let computed = predicted_density(n, reference, k);
            println!("{n:>7} {k:>5} {expected:>9.2} {computed:>9.4} {:>7.4}", (computed - expected).abs());
            rows.push(serde_json::json!({"n": n, "k": k, "reference": expected, "computed": computed}));
        }
    }
    if let Some(path) = &args.trace {
        let file = TraceFile::read(path)?;
        let (mean, std) = measured_density(&file.traces)?;
        println!("measured density {mean:.4} ± {std:.4} over {} samples", file.traces.len());
        rows.push(serde_json::json!({"trace": path.display().to_string(), "measured_mean": mean, "measured_std": std}));
    }
    match (args.n, args.k) {
        (Some(n), Some(k)) => {
            let density = predicted_density(n, tiles, k);
            println!("{density:.2} (n={n}, b_m={}, b_n={}, k={k}, exact {density:.6})", tiles.b_m(), tiles.b_n());
            rows.push(serde_json::json!({"n": n, "k": k, "bm": tiles.b_m(), "bn": tiles.b_n(), "predicted": density}));
        }
        (None, None) => {}
        _ => return Err(Error::Config("analytic density needs both --n and --k".into())),
    }
    if rows.is_empty() {
        return Err(Error::Config("density needs --n/--k, --trace or --table1".into()));
    }
    if let Some(path) = &cli.json {
        let text = serde_json::to_string_pretty(&serde_json::json!({"schema": SCHEMA_VERSION, "rows": rows}))
            .expect("density rows serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

