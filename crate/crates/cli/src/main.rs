//! Command line front end for the cascade policy toolkit.
//!
//! Subcommands cover the whole workflow: generate or validate trace files,
//! train a routing policy at one trade-off setting, replay a policy over a
//! trace, sweep the trade-off knob, and render report files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_core::{
    emit_report, evaluate_dataset, run_sweep, train_bottom_up, Error, LossSpec, OverheadSpec,
    Policy, Result, SweepConfig, SweepResult, SynthConfig, Topology, TraceDataset, TraceEvaluator,
    TrainConfig,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cascade",
    version,
    about = "Train and evaluate early-exit routing policies over recorded stage traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a trace file and a topology file are well formed and agree
    Validate {
        /// Trace file (JSON lines, one example per line)
        traces: PathBuf,
        /// Topology file (stages, costs, edges)
        topology: PathBuf,
    },
    /// Generate a synthetic trace dataset from a generator config
    Synth {
        /// Generator config (JSON)
        config: PathBuf,
        /// Where to write the trace file
        #[arg(short, long)]
        out: PathBuf,
        /// Where to write the matching topology
        /// (default: trace path with a .topology.json extension)
        #[arg(long)]
        topology_out: Option<PathBuf>,
        /// Override the config's random seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a routing policy at a fixed accuracy-pressure lambda
    Train {
        traces: PathBuf,
        topology: PathBuf,
        /// Accuracy pressure: price of one unit of extra loss in time units
        #[arg(long)]
        lambda: f64,
        /// Where to write the trained policy
        #[arg(short, long)]
        out: PathBuf,
        /// Fraction of examples used for training; the rest are held out
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        /// Seed for the train/held-out shuffle
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Count a prediction correct if the label is in the first K entries
        #[arg(long, default_value_t = 1)]
        loss_topk: usize,
        /// Per-decision overhead of learned gates, in time units
        /// (default: 8% of the cheapest stage cost)
        #[arg(long)]
        overhead_linear: Option<f64>,
    },
    /// Replay a saved policy over a trace file and print the metrics
    Eval {
        traces: PathBuf,
        topology: PathBuf,
        /// Trained policy file
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1)]
        loss_topk: usize,
        /// Write metrics JSON here instead of stdout
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train across a lambda grid and evaluate policies plus baselines
    Sweep {
        traces: PathBuf,
        topology: PathBuf,
        /// Sweep config (JSON); omitted means the default grid and split
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the sweep result (JSON)
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        loss_topk: usize,
        #[arg(long)]
        overhead_linear: Option<f64>,
        /// Override the config's shuffle seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's training fraction
        #[arg(long)]
        split: Option<f64>,
    },
    /// Render a sweep result into curve.csv, usage.csv, and summary.json
    Report {
        traces: PathBuf,
        topology: PathBuf,
        /// Sweep result file produced by `cascade sweep`
        #[arg(long)]
        sweep: PathBuf,
        /// Directory for the report files (created if missing)
        #[arg(short, long)]
        out: PathBuf,
        /// Sweep config with budget/tolerance targets for operating points
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        loss_topk: usize,
    },
}

fn load_pair(traces: &Path, topology: &Path) -> Result<(Topology, TraceDataset)> {
    let topo = Topology::load(topology)?;
    let data = TraceDataset::load_jsonl(traces, &topo)?;
    Ok((topo, data))
}

fn overheads_for(topo: &Topology, linear: Option<f64>) -> OverheadSpec {
    match linear {
        Some(v) => OverheadSpec::uniform(v),
        None => OverheadSpec::default_for(topo),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { traces, topology } => {
            let (topo, data) = load_pair(&traces, &topology)?;
            let loss = LossSpec::top1();
            println!(
                "ok: {} examples over {} stages (terminal `{}`)",
                data.len(),
                topo.len(),
                topo.name(topo.terminal()),
            );
            for s in topo.stage_ids() {
                println!(
                    "  stage {:<12} cost {:<8} features {:<3} top-1 accuracy {:.4}",
                    topo.name(s),
                    topo.stage_cost(s),
                    data.feature_dim(s),
                    data.stage_accuracy(s, &loss),
                );
            }
        }
        Command::Synth {
            config,
            out,
            topology_out,
            seed,
        } => {
            let mut cfg = SynthConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (topo, data) = cascade_core::generate(&cfg)?;
            let topo_path =
                topology_out.unwrap_or_else(|| out.with_extension("topology.json"));
            data.save_jsonl(&out, &topo)?;
            topo.save(&topo_path)?;
            println!("wrote {} examples to {}", data.len(), out.display());
            println!("wrote topology to {}", topo_path.display());
        }
        Command::Train {
            traces,
            topology,
            lambda,
            out,
            split,
            seed,
            loss_topk,
            overhead_linear,
        } => {
            let (topo, data) = load_pair(&traces, &topology)?;
            let loss = LossSpec::topk(loss_topk)?;
            let overheads = overheads_for(&topo, overhead_linear);
            let (train_half, test_half) = data.split(split, seed)?;
            let mut policy = train_bottom_up(
                &topo,
                &train_half,
                &loss,
                lambda,
                &overheads,
                &TrainConfig::default(),
            )?;
            policy.prune(&topo);
            policy.save(&out, &topo)?;
            let eval = TraceEvaluator::new(&topo, &test_half);
            let metrics = evaluate_dataset(&policy, &topo, &eval, &loss)?;
            println!(
                "lambda {}: held-out mean time {:.4}, top-{} error {:.4}, excess {:.4}",
                lambda, metrics.mean_time, loss_topk, metrics.topk_error, metrics.excess_error,
            );
            println!("wrote policy to {}", out.display());
        }
        Command::Eval {
            traces,
            topology,
            policy,
            loss_topk,
            out,
        } => {
            let (topo, data) = load_pair(&traces, &topology)?;
            let loss = LossSpec::topk(loss_topk)?;
            let policy = Policy::load(&policy, &topo)?;
            let eval = TraceEvaluator::new(&topo, &data);
            let metrics = evaluate_dataset(&policy, &topo, &eval, &loss)?;
            let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            match out {
                Some(path) => {
                    std::fs::write(&path, json).map_err(|e| Error::IoFailure {
                        path: path.display().to_string(),
                        source: e,
                    })?;
                    println!("wrote metrics to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
        Command::Sweep {
            traces,
            topology,
            config,
            out,
            loss_topk,
            overhead_linear,
            seed,
            split,
        } => {
            let (topo, data) = load_pair(&traces, &topology)?;
            let loss = LossSpec::topk(loss_topk)?;
            let mut cfg = match config {
                Some(path) => SweepConfig::load(&path)?,
                None => SweepConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = split {
                cfg.split = f;
            }
            let overheads = overheads_for(&topo, overhead_linear);
            let result = run_sweep(
                &topo,
                &data,
                &cfg,
                &loss,
                &overheads,
                &TrainConfig::default(),
            )?;
            result.save(&out)?;
            println!(
                "swept {} lambda values over {} train / {} held-out examples",
                result.lambda_points.len(),
                result.terminal_train.n,
                result.terminal_test.n,
            );
            println!("wrote sweep result to {}", out.display());
        }
        Command::Report {
            traces,
            topology,
            sweep,
            out,
            config,
            loss_topk,
        } => {
            let (topo, data) = load_pair(&traces, &topology)?;
            let loss = LossSpec::topk(loss_topk)?;
            let result = SweepResult::load(&sweep)?;
            let cfg = match config {
                Some(path) => SweepConfig::load(&path)?,
                None => SweepConfig::default(),
            };
            let files = emit_report(&result, &topo, &data, &loss, &cfg, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

/// Die quietly when the output pipe closes (`cascade eval ... | head`)
/// instead of panicking mid-print; Rust ignores SIGPIPE by default.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
