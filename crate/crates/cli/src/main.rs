//! `rankswitch`: train with automatic low-rank switching, analyze snapshot
//! directories offline, profile layer stacks and apply factorization plans.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankswitch_core::data::load_dataset;
use rankswitch_core::profiler::{default_stacks, select_k, workloads, ClockKind};
use rankswitch_core::snapshot::{
    analyze_snapshots, factorize_snapshot, network_records, read_snapshot, write_snapshot, AnalysisStatus,
};
use rankswitch_core::train::TrainOutput;
use rankswitch_core::{
    cuttlefish_train, EstimatorMode, Error, Execution, FactorizationPlan, Network, RankEstimatorConfig, Result,
    StabilizationConfig, TrainOptions, TrainReport,
};
use serde::Serialize;

use crate::config::RunConfig;

const REPORT: &str = "report.json";
const PLAN: &str = "plan.json";
const TRAJECTORIES: &str = "trajectories.csv";
const TIMING: &str = "timing.json";
const FINAL_SNAPSHOT: &str = "final.cfsnap";
const SNAPSHOT_DIR: &str = "snapshots";
const ANALYSIS: &str = "analysis.json";

#[derive(Parser)]
#[command(name = "rankswitch", version, about = "Full-rank to low-rank training with automatic rank selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, switching to low rank once stable ranks settle.
    Train(TrainArgs),
    /// Replay rank tracking and the switch decision over a snapshot directory.
    Analyze(AnalyzeArgs),
    /// Benchmark layer stacks and choose the unfactorized prefix K.
    Profile(ProfileArgs),
    /// Apply a factorization plan to one snapshot.
    Factorize(FactorizeArgs),
    /// Print a summary of a training output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Builtin dataset (synthetic-rank2, two-gaussians) or IMAGES.idx,LABELS.idx.
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides CF_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "scaled_stable")]
    estimator: EstimatorMode,
    #[arg(long, default_value_t = StabilizationConfig::default().epsilon)]
    epsilon: f64,
    /// Layers `1..=K` are neither tracked for switching nor factorized.
    #[arg(long, default_value_t = 1)]
    prefix: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "wall")]
    clock: ClockKind,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Profile(a) => profile(a),
        Command::Factorize(a) => factorize(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.resolve_seed(args.seed)?;
    let data = load_dataset(&args.data, cfg.train.seed)?;
    let spec = cfg.model_for(&data);
    let split = data.split(cfg.eval_fraction)?;
    create_dir(&args.out)?;
    let snapshots = args.out.join(SNAPSHOT_DIR);
    // A rerun into the same directory must not mix in stale epochs.
    if snapshots.exists() {
        std::fs::remove_dir_all(&snapshots).map_err(|e| Error::io(&snapshots, e))?;
    }
    let options = TrainOptions {
        prefix: cfg.prefix_selection(),
        exec: if args.sequential { Execution::Sequential } else { Execution::Parallel },
        snapshot_dir: Some(snapshots),
    };
    let out = match cuttlefish_train(&spec, &split, &cfg.train, &options) {
        Ok(out) => out,
        Err(Error::Divergence { epoch, loss, partial }) => {
            if let Some(report) = &partial {
                write(&args.out.join(REPORT), to_json(report)?)?;
            }
            return Err(Error::Divergence { epoch, loss, partial });
        }
        Err(e) => return Err(e),
    };
    write_train_outputs(&args.out, &out)
}

fn write_train_outputs(dir: &Path, out: &TrainOutput) -> Result<()> {
    write(&dir.join(REPORT), to_json(&out.report)?)?;
    write(&dir.join(PLAN), to_json(&out.report.plan)?)?;
    write(&dir.join(TRAJECTORIES), out.trajectories.to_csv())?;
    write(&dir.join(TIMING), to_json(&out.report.timing)?)?;
    let epoch = out.report.epochs.len() as u64;
    write_snapshot(dir.join(FINAL_SNAPSHOT), epoch, &network_records(&out.model))
}

#[derive(Serialize)]
struct AnalysisOutput<'a> {
    #[serde(flatten)]
    status: AnalysisStatus,
    prefix: usize,
    epsilon: f64,
    plan: &'a Option<FactorizationPlan>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let estimator = RankEstimatorConfig {
        mode: args.estimator,
        ..Default::default()
    };
    estimator.validate()?;
    let stabilization = StabilizationConfig {
        epsilon: args.epsilon,
        ..Default::default()
    };
    stabilization.validate()?;
    let analysis = analyze_snapshots(&args.snapshots, args.prefix, &estimator, &stabilization, Execution::Parallel)?;
    create_dir(&args.out)?;
    let summary = AnalysisOutput {
        status: analysis.status,
        prefix: args.prefix,
        epsilon: args.epsilon,
        plan: &analysis.plan,
    };
    write(&args.out.join(ANALYSIS), to_json(&summary)?)?;
    write(&args.out.join(TRAJECTORIES), analysis.trajectories.to_csv())?;
    write(&args.out.join(PLAN), to_json(&analysis.plan)?)
}

fn profile(args: ProfileArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.resolve_seed(args.seed)?;
    let spec = cfg.model_or_default();
    let model = Network::init(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let shapes = workloads(&model, cfg.train.batch_size);
    let stacks = default_stacks(&shapes);
    let mut clock = args.clock.build();
    let report = select_k(&shapes, &stacks, &cfg.profiler, clock.as_mut())?;
    write(&args.out, to_json(&report)?)
}

fn factorize(args: FactorizeArgs) -> Result<()> {
    let snap = read_snapshot(&args.snapshot)?;
    let plan = FactorizationPlan::from_json(&read_text(&args.plan)?)
        .map_err(|e| Error::Config(format!("{}: {e}", args.plan.display())))?;
    let factored = factorize_snapshot(&snap, &plan)?;
    write_snapshot(&args.out, factored.epoch, &factored.records)
}

fn report(args: ReportArgs) -> Result<()> {
    let path = args.input.join(REPORT);
    let r: TrainReport = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    print!("{}", summary_table(&r));
    Ok(())
}

fn summary_table(r: &TrainReport) -> String {
    let mut s = String::new();
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |e| e.to_string());
    let reason = r.switch_reason.map_or_else(|| "none".to_string(), |x| format!("{x:?}").to_lowercase());
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let _ = writeln!(s, "{:<26}{}", "seed", r.seed);
    let _ = writeln!(s, "{:<26}{}", "K", r.prefix);
    let _ = writeln!(s, "{:<26}{} ({reason})", "switch epoch", opt(r.switch_epoch));
    let _ = writeln!(s, "{:<26}{}", "epochs", r.epochs.len());
    let _ = writeln!(
        s,
        "{:<26}{} -> {} ({:.2}x)",
        "parameters",
        r.params_before,
        r.params_after,
        ratio(r.params_before, r.params_after)
    );
    let _ = writeln!(
        s,
        "{:<26}{} -> {} ({:.2}x)",
        "factorized-layer params",
        r.factorized_params_before,
        r.factorized_params_after,
        ratio(r.factorized_params_before, r.factorized_params_after)
    );
    let _ = writeln!(s, "{:<26}{:.4}", "final accuracy", r.final_accuracy);
    if let Some(plan) = &r.plan {
        let _ = writeln!(s, "\n{:<8}{:>8}  status", "layer", "rank");
        for e in &plan.ranks {
            let status = if e.skip { "kept full rank" } else { "factorized" };
            let _ = writeln!(s, "{:<8}{:>8}  {status}", e.layer, e.rank);
        }
    }
    s
}
