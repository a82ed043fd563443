//! `dvbsim`: generate networks and data, run the distributed VB schedulers and
//! evaluate saved states.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvb_core::algorithms::{AlgoConfig, AlgoKind};
use dvb_core::error::Result;
use dvb_core::harness::config::{CsvConfig, DataSpec, ExperimentConfig};
use dvb_core::harness::experiment::{build_dataset, build_network, evaluate, prepare, run_experiment, StageSeeds};
use dvb_core::harness::io::{atomic_write, dataset_to_csv, parse_final_state, read_to_string};
use dvb_core::network::WeightRule;

const DEFAULT_CONFIG: &str = include_str!("../../../configs/synthetic_50.toml");

#[derive(Debug, Parser)]
#[command(name = "dvbsim", version, about = "Distributed variational Bayes over simulated sensor networks")]
struct Cli {
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (TOML). Without it the built-in 50-node setup is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random geometric network as an edge list.
    GenNet {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        side: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Write the experiment's dataset (points, labels, node) as CSV.
    GenData {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Run a single algorithm.
    Run {
        /// One of cvb, noncoop, nsg_dvb, dsvb, dvb_admm.
        #[arg(long)]
        algo: AlgoKind,
        #[command(flatten)]
        params: AlgoParams,
        #[command(flatten)]
        exec: Exec,
    },
    /// Run several algorithms on the same network, data and initial values.
    Compare {
        /// Comma-separated subset of the config's algorithms (default: all of them).
        #[arg(long, value_delimiter = ',')]
        algos: Vec<AlgoKind>,
        #[command(flatten)]
        exec: Exec,
    },
    /// Score a saved final-state CSV against the experiment's ground truth.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
    },
}

/// Replacements for the config's network and data sources.
#[derive(Debug, Args)]
struct Inputs {
    /// Edge-list file to use instead of a generated network.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Dataset CSV to use instead of synthetic data (needs a `node` column).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Exec {
    #[command(flatten)]
    inputs: Inputs,
    /// Iteration count for every algorithm.
    #[arg(long)]
    iters: Option<usize>,
    /// Independent repetitions with seeds `seed`, `seed + 1`, ...
    #[arg(long)]
    trials: Option<usize>,
    /// Record every n-th iteration in the trace.
    #[arg(long)]
    eval_stride: Option<usize>,
    /// Write measured wall time to `elapsed_ms` (otherwise 0, so reruns are byte-identical).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct AlgoParams {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    /// Combination weights for dsvb: nearest_neighbor or metropolis.
    #[arg(long, value_parser = parse_rule)]
    weights: Option<WeightRule>,
}

fn parse_rule(s: &str) -> std::result::Result<WeightRule, String> {
    match s {
        "nearest_neighbor" => Ok(WeightRule::NearestNeighbor),
        "metropolis" => Ok(WeightRule::Metropolis),
        _ => Err(format!("unknown weight rule `{s}` (expected nearest_neighbor or metropolis)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml(DEFAULT_CONFIG, "<built-in>")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cli.command {
        Command::GenNet { nodes, side, radius } => {
            let net = &mut cfg.network;
            if nodes.is_some() || side.is_some() || radius.is_some() {
                net.edge_list = None;
            }
            net.nodes = nodes.or(net.nodes);
            net.side = side.or(net.side);
            net.radius = radius.or(net.radius);
            let net = build_network(&cfg.network, StageSeeds::derive(cfg.seed).network)?;
            let path = out.join("network.txt");
            atomic_write(&path, net.to_edge_list().as_bytes())?;
            println!("{} nodes, {} edges -> {}", net.len(), net.edge_count(), path.display());
        }
        Command::GenData { inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            let seeds = StageSeeds::derive(cfg.seed);
            let net = build_network(&cfg.network, seeds.network)?;
            let data = build_dataset(&cfg.data, net.len(), seeds)?;
            let path = out.join("data.csv");
            atomic_write(&path, dataset_to_csv(&data).as_bytes())?;
            println!("{} points over {} nodes -> {}", data.len(), net.len(), path.display());
        }
        Command::Run { algo, params, exec } => {
            let mut chosen = cfg
                .algorithms
                .iter()
                .find(|a| a.kind == algo)
                .cloned()
                .unwrap_or_else(|| default_algo(algo, 3000));
            override_params(&mut chosen, &params);
            cfg.algorithms = vec![chosen];
            apply_exec(&mut cfg, &exec)?;
            run_and_report(&cfg, &out, exec.timing)?;
        }
        Command::Compare { algos, exec } => {
            if !algos.is_empty() {
                cfg.algorithms = algos
                    .iter()
                    .map(|&k| {
                        let max_iters = cfg.algorithms.first().map_or(3000, |a| a.max_iters);
                        cfg.algorithms.iter().find(|a| a.kind == k).cloned().unwrap_or_else(|| default_algo(k, max_iters))
                    })
                    .collect();
            }
            apply_exec(&mut cfg, &exec)?;
            run_and_report(&cfg, &out, exec.timing)?;
        }
        Command::Eval { state, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            let prep = prepare(&cfg, 0)?;
            let phis = parse_final_state(&read_to_string(&state)?, &state.display().to_string(), prep.model.layout())?;
            let refs: Vec<_> = phis.iter().collect();
            let ev = evaluate(&prep, &refs)?;
            let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
            println!("mean_kl,std_kl,accuracy");
            println!("{},{},{}", fmt(ev.mean_kl), fmt(ev.std_kl), fmt(ev.accuracy));
        }
    }
    Ok(())
}

/// Parameters from the reference experiments for kinds the config does not list.
fn default_algo(kind: AlgoKind, max_iters: usize) -> AlgoConfig {
    match kind {
        AlgoKind::Dsvb => AlgoConfig::dsvb(0.2, 1.0, max_iters),
        AlgoKind::DvbAdmm => AlgoConfig::dvb_admm(0.5, 0.05, max_iters),
        other => AlgoConfig::baseline(other, max_iters),
    }
}

fn override_params(a: &mut AlgoConfig, p: &AlgoParams) {
    a.tau = p.tau.or(a.tau);
    a.d0 = p.d0.or(a.d0);
    a.rho = p.rho.or(a.rho);
    a.xi = p.xi.or(a.xi);
    if let Some(rule) = p.weights {
        a.weight_rule = rule;
    }
}

fn apply_inputs(cfg: &mut ExperimentConfig, inputs: &Inputs) -> Result<()> {
    if let Some(path) = &inputs.network {
        cfg.network.edge_list = Some(path.clone());
        cfg.network.nodes = None;
        cfg.network.side = None;
        cfg.network.radius = None;
    }
    if let Some(path) = &inputs.data {
        cfg.data = DataSpec::Csv(CsvConfig { path: path.clone(), has_labels: true, partition: None });
    }
    cfg.check_paths()?;
    cfg.validate()
}

fn apply_exec(cfg: &mut ExperimentConfig, exec: &Exec) -> Result<()> {
    if let Some(iters) = exec.iters {
        for a in &mut cfg.algorithms {
            a.max_iters = iters;
        }
    }
    if let Some(trials) = exec.trials {
        cfg.trials = trials;
    }
    if let Some(stride) = exec.eval_stride {
        cfg.eval_stride = stride;
    }
    apply_inputs(cfg, &exec.inputs)
}

fn run_and_report(cfg: &ExperimentConfig, out: &Path, timing: bool) -> Result<()> {
    let trials = run_experiment(cfg, out, timing)?;
    for (t, results) in trials.iter().enumerate() {
        for r in results {
            let last = r.output.trace.last();
            let kl = last.and_then(|l| l.mean_kl).map_or_else(|| "-".into(), |v| format!("{v:.4}"));
            let acc = r.accuracy.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
            println!("trial {t} {:>9} iters {:>5} mean_kl {kl} accuracy {acc}", r.config.kind.as_str(), r.config.max_iters);
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}
