//! Experiment harness: simulation, merging, calibration and timing runs
//! that write CSV and graph files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use constellation::compatibility::GateConfig;
use constellation::experiments::{
    bench_row, calibration_csv, calibration_samples, gc_microbench, merge_accuracy, microbench_csv, replay_timing,
    summary_csv, tail_summary, CalibrationSample, BENCH_HEADER,
};
use constellation::factor_graph::io::{read_graph_file, write_graph_file};
use constellation::factor_graph::{optimize, FactorGraph, LocalConfig, OptimizeConfig};
use constellation::pipeline::{
    growth_events, merge_log_csv, run_batch_rounds, run_incremental, CycleLog, Method, PipelineConfig,
    VerificationMode,
};
use constellation::simulator::{simulate, GroundTruth, MatchSampling, NoisePreset, SimConfig};
use constellation::stats::linear_fit;
use constellation::{Error, Result};

pub const GRAPH_FILE: &str = "graph.txt";
pub const TRUTH_FILE: &str = "ground_truth.txt";

#[derive(Parser)]
#[command(name = "constellation", version, about = "Constellation merging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a looped run and write the graph and its ground truth.
    Simulate(SimulateArgs),
    /// Find and merge duplicate landmarks in a graph file.
    Merge(MergeArgs),
    /// Distances of ground-truth matches against their reference distributions.
    Eval(EvalArgs),
    /// Phase timings by graph size and a GC micro-benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = NoisePreset::Low)]
    noise: NoisePreset,
    #[arg(long, default_value_t = 3)]
    loops: usize,
    #[arg(long, default_value_t = 120)]
    landmarks: usize,
}

impl SimArgs {
    fn config(&self, seed: u64) -> SimConfig {
        SimConfig {
            loops: self.loops,
            num_landmarks: self.landmarks,
            ..SimConfig::with_preset(seed, self.noise)
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Mode {
    /// Replay the graph pose by pose with periodic merge cycles.
    Incremental,
    /// Merge on the complete graph, repeating until nothing changes.
    Batch,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Ground-truth sidecar; when given, merge accuracy is reported.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = Method::Gc)]
    method: Method,
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    #[arg(long, default_value_t = 3)]
    min_cardinality: usize,
    #[arg(long, default_value = "jc", value_parser = ["none", "jc"])]
    verify: String,
    #[arg(long, value_enum, default_value_t = Mode::Incremental)]
    mode: Mode,
    #[arg(long, default_value_t = 10)]
    cadence: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate this graph (requires --truth) instead of simulating.
    #[arg(long, requires = "truth")]
    graph: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Seeds to simulate, as `a..b`, `a,b,c` or a single seed.
    #[arg(long, default_value = "1..20")]
    seeds: String,
    #[command(flatten)]
    sim: SimArgs,
    /// Ground-truth sets sampled per cardinality and graph.
    #[arg(long, default_value_t = 30)]
    per_graph: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = NoisePreset::Low)]
    noise: NoisePreset,
    /// Graph sizes, as loop counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    loops: Vec<usize>,
    #[arg(long, default_value_t = 120)]
    landmarks: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

const CARDINALITIES: [usize; 4] = [3, 4, 5, 6];
const QUANTILES: [f64; 3] = [0.90, 0.95, 0.99];

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidArgument(format!("bad seed list '{text}'"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return if a <= b { Ok((a..=b).collect()) } else { Err(bad()) };
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn read_graph(path: &Path) -> Result<FactorGraph> {
    read_graph_file(path).map_err(|e| with_path(path, e))
}

fn read_truth(path: &Path) -> Result<GroundTruth> {
    GroundTruth::read_file(path).map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { .. } | Error::Io(_) => Error::InvalidArgument(format!("{}: {e}", path.display())),
        other => other,
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (graph, truth) = simulate(&args.sim.config(args.seed))?;
    fs::create_dir_all(&args.out)?;
    write_graph_file(&args.out.join(GRAPH_FILE), &graph)?;
    truth.write_file(&args.out.join(TRUTH_FILE))?;
    println!(
        "{} poses, {} landmarks ({} true), written to {}",
        graph.num_poses(),
        graph.num_landmarks(),
        truth.num_observed_landmarks(),
        args.out.display()
    );
    Ok(())
}

fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let graph = read_graph(&args.graph)?;
    let truth = args.truth.as_deref().map(read_truth).transpose()?;
    if !(args.quantile > 0.0 && args.quantile < 1.0) {
        return Err(Error::InvalidArgument("quantile must lie in (0, 1)".into()));
    }
    let mut config = PipelineConfig {
        method: args.method,
        verification: args.verify.parse::<VerificationMode>()?,
        m_min: args.min_cardinality,
        cadence: args.cadence,
        ..PipelineConfig::default()
    };
    config.gate = GateConfig {
        quantile: args.quantile,
        ..config.gate
    };
    let (cycles, merged): (Vec<CycleLog>, FactorGraph) = match args.mode {
        Mode::Incremental => {
            let log = run_incremental(graph.camera, &growth_events(&graph), &config)?;
            (log.cycles, log.graph)
        }
        Mode::Batch => {
            let mut g = graph;
            (run_batch_rounds(&mut g, &config, 10)?, g)
        }
    };
    fs::create_dir_all(&args.out)?;
    write(&args.out, "merge_log.csv", &merge_log_csv(&cycles))?;
    write_graph_file(&args.out.join("merged_graph.txt"), &merged)?;
    let pairs: Vec<_> = cycles.iter().flat_map(|c| c.report.merged.iter()).collect();
    print!("{} pairs merged, {} landmarks left", pairs.len(), merged.num_landmarks());
    if let Some(truth) = truth {
        let (correct, total) = merge_accuracy(pairs.iter().copied(), &truth);
        let precision = if total == 0 { 1.0 } else { correct as f64 / total as f64 };
        print!(
            ", precision {precision:.4} ({correct}/{total}), {} true landmarks",
            truth.num_observed_landmarks()
        );
    }
    println!();
    Ok(())
}

fn eval_graph(graph: &mut FactorGraph, truth: &GroundTruth, per_graph: usize, seed: u64) -> Result<Vec<CalibrationSample>> {
    optimize(graph, &OptimizeConfig::default())?;
    let sampling = MatchSampling {
        max_sets: per_graph,
        seed,
        ..MatchSampling::default()
    };
    calibration_samples(graph, truth, &CARDINALITIES, &sampling, &LocalConfig::default(), &GateConfig::default())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut samples = Vec::new();
    match (&args.graph, &args.truth) {
        (Some(g), Some(t)) => {
            let mut graph = read_graph(g)?;
            samples = eval_graph(&mut graph, &read_truth(t)?, args.per_graph, 0)?;
        }
        _ => {
            for seed in parse_seeds(&args.seeds)? {
                let (mut graph, truth) = simulate(&args.sim.config(seed))?;
                samples.extend(eval_graph(&mut graph, &truth, args.per_graph, seed)?);
            }
        }
    }
    let summary = tail_summary(&samples, &CARDINALITIES, &QUANTILES)?;
    for m in CARDINALITIES {
        if summary.iter().any(|r| r.m == m && r.count == 0) {
            log::warn!("no ground-truth matches of cardinality {m}");
        }
    }
    fs::create_dir_all(&args.out)?;
    write(&args.out, "calibration.csv", &calibration_csv(&samples))?;
    let summary_text = summary_csv(&summary);
    write(&args.out, "calibration_summary.csv", &summary_text)?;
    print!("{summary_text}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut rows = vec![BENCH_HEADER.to_string()];
    for &loops in &args.loops {
        let sim = SimConfig {
            loops,
            num_landmarks: args.landmarks,
            ..SimConfig::with_preset(args.seed, args.noise)
        };
        let (graph, _) = simulate(&sim)?;
        for method in [Method::Gc, Method::Jc] {
            let config = PipelineConfig {
                method,
                ..PipelineConfig::default()
            };
            let t = replay_timing(&graph, &config, args.repetitions)?;
            rows.push(bench_row(graph.num_poses(), &method.to_string(), &t));
            log::info!("{}", rows.last().expect("row"));
        }
    }
    let ms: Vec<usize> = (3..=50).collect();
    let micro = gc_microbench(&ms, args.repetitions, 200, args.seed)?;
    let (slope, intercept, r2) = linear_fit(
        &micro.iter().map(|r| r.0 as f64).collect::<Vec<_>>(),
        &micro.iter().map(|r| r.1).collect::<Vec<_>>(),
    );
    fs::create_dir_all(&args.out)?;
    let timing = rows.join("\n") + "\n";
    write(&args.out, "timing.csv", &timing)?;
    write(&args.out, "gc_microbench.csv", &microbench_csv(&micro))?;
    print!("{timing}");
    println!("gc microbench: t(m) = {slope:.3} m + {intercept:.3} us, r2 = {r2:.4}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONSTELLATION_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
