//! Experiment orchestration: builds topology, data, model, initial values and
//! ground truth from a config, runs the requested schedulers on shared
//! inputs and writes CSV outputs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::algorithms::{mean_std, run, AlgoConfig, RunOutput};
use crate::error::{Error, Result};
use crate::expfam::{hyper_to_natural, GlobalNaturalParams};
use crate::gmm::{vbe_step, GmmModelConfig, NodeDataset, Prior, Responsibilities};
use crate::harness::config::{DataSpec, ExperimentConfig, NetworkSpec, SyntheticConfig};
use crate::harness::data::{generate_synthetic, ground_truth_posterior, partition_to_nodes, LabeledDataset, SyntheticSpec};
use crate::harness::io::{atomic_write, final_state_csv, load_csv_dataset, read_to_string, trace_csv};
use crate::harness::metrics::{clustering_accuracy, node_costs};
use crate::network::{generate_geometric_graph, Network};

/// Independent seeds for each random stage, derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub network: u64,
    pub data: u64,
    pub partition: u64,
    pub init: u64,
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        StageSeeds { network: rng.next_u64(), data: rng.next_u64(), partition: rng.next_u64(), init: rng.next_u64() }
    }
}

/// Everything a run needs, shared by all algorithms of one trial.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub net: Network,
    pub dataset: LabeledDataset,
    pub node_data: Vec<NodeDataset>,
    pub model: GmmModelConfig,
    pub init: Vec<GlobalNaturalParams>,
    pub truth: Option<GlobalNaturalParams>,
}

pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    match (&spec.edge_list, spec.nodes, spec.side, spec.radius) {
        (Some(path), ..) => Network::parse_edge_list(&read_to_string(path)?, &path.display().to_string()),
        (None, Some(n), Some(side), Some(radius)) => generate_geometric_graph(n, side, radius, seed),
        _ => Err(Error::Config("network needs either `edge_list` or all of `nodes`, `side`, `radius`".into())),
    }
}

/// Expands a synthetic data section into a generator spec for `n` nodes.
pub fn synthetic_spec(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<SyntheticSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_counts = match (cfg.points_per_node, cfg.points_range) {
        (Some(c), None) => vec![c; n],
        (None, Some([lo, hi])) => (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
        _ => return Err(Error::Config("synthetic data needs exactly one of `points_per_node`, `points_range`".into())),
    };
    let proportions = if cfg.groups.is_empty() {
        None
    } else {
        let covered: usize = cfg.groups.iter().map(|g| g.nodes).sum();
        if covered != n {
            return Err(Error::Config(format!("data groups cover {covered} nodes, network has {n}")));
        }
        Some(cfg.groups.iter().flat_map(|g| std::iter::repeat_n(g.proportions.clone(), g.nodes)).collect())
    };
    Ok(SyntheticSpec {
        weights: cfg.weights.clone(),
        means: cfg.means.clone(),
        covariances: cfg.covariances.clone(),
        node_counts,
        proportions,
        seed: rng.next_u64(),
    })
}

pub fn build_dataset(spec: &DataSpec, n: usize, seeds: StageSeeds) -> Result<LabeledDataset> {
    let data = match spec {
        DataSpec::Synthetic(s) => generate_synthetic(&synthetic_spec(s, n, seeds.data)?).map_err(|e| Error::Config(e.to_string()))?,
        DataSpec::Csv(c) => {
            let raw = load_csv_dataset(&c.path, c.has_labels)?;
            match c.partition {
                Some(policy) => partition_to_nodes(&raw, n, policy, seeds.partition)?,
                None => LabeledDataset { n_nodes: n, ..raw },
            }
        }
    };
    if let Some(&bad) = data.node_of.iter().find(|&&i| i >= n) {
        return Err(Error::Config(format!("data assigns points to node {bad}, network has {n} nodes")));
    }
    Ok(data)
}

fn model_from(cfg: &ExperimentConfig, d: usize, n: usize) -> Result<GmmModelConfig> {
    let spec = &cfg.model;
    let mut prior = Prior::weak(d);
    if let Some(a) = spec.alpha0 {
        prior.alpha0 = a;
    }
    if let Some(b) = spec.beta0 {
        prior.beta0 = b;
    }
    if let Some(nu) = spec.nu0 {
        prior.nu0 = nu;
    }
    if let Some(m) = &spec.m0 {
        prior.m0 = DVector::from_column_slice(m);
    }
    if let Some(w) = &spec.w0 {
        if w.len() != d || w.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("model.w0 must be {d}x{d}")));
        }
        prior.w0 = DMatrix::from_fn(d, d, |i, j| w[i][j]);
    }
    GmmModelConfig::new(spec.k, d, prior, n).map_err(|e| Error::Config(e.to_string()))
}

/// Starting values: the prior with every component mean replaced by
/// `data_mean + N(0, (noise * std_c)^2)` draws per coordinate `c`. With
/// `per_node` each node gets its own draw, otherwise all nodes share one.
pub fn initial_params(
    model: &GmmModelConfig,
    data_mean: &DVector<f64>,
    data_std: &DVector<f64>,
    n: usize,
    noise: f64,
    per_node: bool,
    seed: u64,
) -> Result<Vec<GlobalNaturalParams>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let mut h = model.prior_hyper();
        for c in &mut h.components {
            for ((x, mu), s) in c.m.iter_mut().zip(data_mean.iter()).zip(data_std.iter()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = mu + noise * s * z;
            }
        }
        hyper_to_natural(&h)
    };
    if per_node {
        (0..n).map(|_| draw()).collect()
    } else {
        Ok(vec![draw()?; n])
    }
}

/// Builds the shared inputs for trial `trial`; trial `t` uses master seed `seed + t`.
pub fn prepare(cfg: &ExperimentConfig, trial: usize) -> Result<Prepared> {
    let seeds = StageSeeds::derive(cfg.seed.wrapping_add(trial as u64));
    let net = build_network(&cfg.network, seeds.network)?;
    let n = net.len();
    let dataset = build_dataset(&cfg.data, n, seeds)?;
    let model = model_from(cfg, dataset.dim(), n)?;
    let node_data = dataset.node_datasets();
    let init = initial_params(
        &model,
        &dataset.coordinate_mean(),
        &dataset.coordinate_std(),
        n,
        cfg.model.init_noise,
        cfg.model.init_per_node,
        seeds.init,
    )?;
    let truth = match dataset.labels {
        Some(_) => Some(ground_truth_posterior(&dataset, &model).map_err(|e| Error::Config(e.to_string()))?),
        None => None,
    };
    Ok(Prepared { net, dataset, node_data, model, init, truth })
}

#[derive(Debug, Clone)]
pub struct AlgoResult {
    pub config: AlgoConfig,
    pub output: RunOutput,
    /// Best-permutation accuracy of the final parameters, when labels are known.
    pub accuracy: Option<f64>,
}

/// Hard-assignment accuracy of each node's final parameters on its own data.
pub fn final_accuracy(prep: &Prepared, phis: &[&GlobalNaturalParams]) -> Result<Option<f64>> {
    let Some(labels) = prep.dataset.node_labels() else { return Ok(None) };
    let rs = prep
        .node_data
        .iter()
        .zip(phis)
        .map(|(d, phi)| vbe_step(d, phi, &prep.model))
        .collect::<Result<Vec<Responsibilities>>>()?;
    clustering_accuracy(&rs, &labels).map(Some)
}

/// Mean and population std of the per-node KL cost plus accuracy, each when
/// the dataset carries labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mean_kl: Option<f64>,
    pub std_kl: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn evaluate(prep: &Prepared, phis: &[&GlobalNaturalParams]) -> Result<Evaluation> {
    if phis.len() != prep.net.len() {
        return Err(Error::Config(format!("state has {} nodes, network has {}", phis.len(), prep.net.len())));
    }
    let (mean_kl, std_kl) = match &prep.truth {
        Some(truth) => {
            let (m, s) = mean_std(&node_costs(phis, truth)?);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    Ok(Evaluation { mean_kl, std_kl, accuracy: final_accuracy(prep, phis)? })
}

pub fn run_algorithms(prep: &Prepared, algos: &[AlgoConfig]) -> Result<Vec<AlgoResult>> {
    algos
        .iter()
        .map(|cfg| {
            let output = run(cfg, &prep.model, &prep.net, &prep.node_data, &prep.init, prep.truth.as_ref())?;
            let phis: Vec<&GlobalNaturalParams> = output.states.iter().map(|s| &s.phi).collect();
            let accuracy = final_accuracy(prep, &phis)?;
            Ok(AlgoResult { config: cfg.clone(), output, accuracy })
        })
        .collect()
}

/// `algo,iters,mean_kl,std_kl,consensus_disagreement,accuracy` per algorithm.
pub fn summary_csv(results: &[AlgoResult]) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:?}"));
    let mut out = String::from("algo,iters,mean_kl,std_kl,consensus_disagreement,accuracy\n");
    for r in results {
        let last = r.output.trace.last();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.config.kind,
            r.config.max_iters,
            fmt(last.and_then(|l| l.mean_kl)),
            fmt(last.and_then(|l| l.std_kl)),
            fmt(last.map(|l| l.consensus_disagreement)),
            fmt(r.accuracy)
        )
        .unwrap();
    }
    out
}

/// Writes `trace.csv`, `summary.csv` and one `final_<algo>.csv` per algorithm into `dir`.
pub fn write_outputs(dir: &Path, results: &[AlgoResult], timing: bool) -> Result<()> {
    let traces: Vec<_> = results.iter().map(|r| r.output.trace.clone()).collect();
    atomic_write(&dir.join("trace.csv"), trace_csv(&traces, timing).as_bytes())?;
    atomic_write(&dir.join("summary.csv"), summary_csv(results).as_bytes())?;
    for r in results {
        let phis: Vec<&GlobalNaturalParams> = r.output.states.iter().map(|s| &s.phi).collect();
        atomic_write(&dir.join(format!("final_{}.csv", r.config.kind)), final_state_csv(&phis).as_bytes())?;
    }
    Ok(())
}

/// Runs every trial of `cfg` and writes outputs under `out` (`trial_<t>/`
/// subdirectories when there is more than one trial).
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, timing: bool) -> Result<Vec<Vec<AlgoResult>>> {
    let algos: Vec<AlgoConfig> =
        cfg.algorithms.iter().map(|a| AlgoConfig { eval_stride: cfg.eval_stride, ..a.clone() }).collect();
    (0..cfg.trials)
        .map(|t| {
            let prep = prepare(cfg, t)?;
            let results = run_algorithms(&prep, &algos)?;
            let dir = if cfg.trials == 1 { out.to_path_buf() } else { out.join(format!("trial_{t}")) };
            write_outputs(&dir, &results, timing)?;
            Ok(results)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::AlgoKind;
    use crate::expfam::in_domain;
    use crate::harness::config::ModelSpec;

    fn small_config() -> ExperimentConfig {
        let text = r#"
seed = 5
[network]
nodes = 5
side = 1.2
radius = 0.9
[data]
source = "synthetic"
weights = [0.5, 0.5]
means = [[-2.0, 0.0], [2.0, 1.0]]
covariances = [[[0.3, 0.0], [0.0, 0.3]], [[0.3, 0.1], [0.1, 0.3]]]
points_per_node = 20
[[data.groups]]
nodes = 2
proportions = [0.9, 0.1]
[[data.groups]]
nodes = 3
proportions = [0.2, 0.8]
[model]
k = 2
[[algorithms]]
kind = "cvb"
max_iters = 300
[[algorithms]]
kind = "dsvb"
tau = 0.2
d0 = 1.0
max_iters = 300
[[algorithms]]
kind = "dvb_admm"
rho = 0.5
xi = 0.05
max_iters = 300
"#;
        ExperimentConfig::from_toml(text, "small").unwrap()
    }

    #[test]
    fn stage_seeds_differ() {
        let s = StageSeeds::derive(1);
        assert_ne!(s.network, s.data);
        assert_ne!(s.data, s.init);
        assert_eq!(s, StageSeeds::derive(1));
    }

    #[test]
    fn prepare_is_deterministic_and_consistent() {
        let cfg = small_config();
        let a = prepare(&cfg, 0).unwrap();
        let b = prepare(&cfg, 0).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.net, b.net);
        assert_eq!(a.init, b.init);
        assert_eq!(a.node_data.len(), 5);
        assert_eq!(a.model.n_nodes, 5);
        assert!(a.init.iter().all(in_domain));
        assert_eq!(a.init[0], a.init[4]);
        let per_node = ExperimentConfig { model: ModelSpec { init_per_node: true, ..cfg.model.clone() }, ..cfg.clone() };
        let c = prepare(&per_node, 0).unwrap();
        assert_ne!(c.init[0], c.init[1]);
        assert_ne!(prepare(&cfg, 1).unwrap().dataset, a.dataset);
    }

    #[test]
    fn unequal_counts_fall_in_range() {
        let mut cfg = small_config();
        let DataSpec::Synthetic(s) = &mut cfg.data else { unreachable!() };
        s.points_per_node = None;
        s.points_range = Some([40, 160]);
        let prep = prepare(&cfg, 0).unwrap();
        assert!(prep.node_data.iter().all(|d| (40..=160).contains(&d.len())));
    }

    #[test]
    fn run_experiment_writes_outputs_for_every_algorithm() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let results = run_experiment(&cfg, dir.path(), false).unwrap();
        assert_eq!(results[0].len(), 3);
        for r in &results[0] {
            assert!(r.accuracy.unwrap() > 0.9, "{:?}: {:?}", r.config.kind, r.accuracy);
        }
        let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 900);
        for kind in [AlgoKind::Cvb, AlgoKind::Dsvb, AlgoKind::DvbAdmm] {
            assert!(dir.path().join(format!("final_{kind}.csv")).exists());
        }
        let again = tempfile::tempdir().unwrap();
        run_experiment(&cfg, again.path(), false).unwrap();
        assert_eq!(trace, std::fs::read_to_string(again.path().join("trace.csv")).unwrap());
    }

    #[test]
    fn trials_get_their_own_directories() {
        let mut cfg = small_config();
        cfg.trials = 2;
        cfg.algorithms.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path(), false).unwrap();
        assert!(dir.path().join("trial_0/trace.csv").exists());
        assert!(dir.path().join("trial_1/summary.csv").exists());
    }

    #[test]
    fn evaluate_matches_the_run_summary() {
        let cfg = small_config();
        let prep = prepare(&cfg, 0).unwrap();
        let results = run_algorithms(&prep, &cfg.algorithms[..1]).unwrap();
        let phis: Vec<&GlobalNaturalParams> = results[0].output.states.iter().map(|s| &s.phi).collect();
        let ev = evaluate(&prep, &phis).unwrap();
        let last = results[0].output.trace.last().unwrap();
        assert_eq!(ev.mean_kl, last.mean_kl);
        assert_eq!(ev.accuracy, results[0].accuracy);
        assert!(evaluate(&prep, &phis[..2]).unwrap_err().is_usage());
    }
}
