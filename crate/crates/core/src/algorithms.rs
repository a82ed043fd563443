//! Inference schedulers executing synchronized rounds over a network.
//!
//! Every round runs VBE and the local VBM optimum at each node, then a
//! kind-specific exchange. Combination and dual phases read an immutable
//! snapshot of the previous phase, so results do not depend on thread
//! scheduling.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{in_domain, project_to_domain, GlobalNaturalParams, Layout, ProjectionMargins};
use crate::gmm::{local_vbm_optimum, vbe_step, GmmModelConfig, NodeDataset, Responsibilities};
use crate::harness::metrics::node_costs;
use crate::network::{is_connected, CombinationWeights, Network, WeightRule};

/// `eta_t = 1 / (d0 + tau t)`.
pub fn step_size(t: usize, d0: f64, tau: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::param("iteration index starts at 1"));
    }
    if !(d0 >= 1.0 && d0.is_finite()) {
        return Err(Error::param(format!("d0 = {d0} must be >= 1")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("tau = {tau} must lie in (0, 1)")));
    }
    Ok(1.0 / (d0 + tau * t as f64))
}

/// `kappa_t = 1 - 1 / (1 + xi t)^2`.
pub fn kappa(t: usize, xi: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::param("iteration index starts at 1"));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::param(format!("xi = {xi} must lie in (0, 1)")));
    }
    let s = 1.0 + xi * t as f64;
    Ok(1.0 - 1.0 / (s * s))
}

fn flat_of(layout: Layout, phi: &GlobalNaturalParams) -> Result<DVector<f64>> {
    if phi.layout() != layout || phi.components.len() != layout.k {
        return Err(Error::shape(format!(
            "expected layout (K={}, D={}), got (K={}, D={})",
            layout.k,
            layout.d,
            phi.layout().k,
            phi.layout().d
        )));
    }
    Ok(phi.to_flat())
}

fn unflatten(layout: Layout, flat: &DVector<f64>) -> GlobalNaturalParams {
    GlobalNaturalParams::from_flat(layout, flat.as_slice()).expect("length fixed by layout")
}

/// `psi = phi_prev + eta (phi_star - phi_prev)`.
pub fn dsvb_adapt(phi_prev: &GlobalNaturalParams, phi_star: &GlobalNaturalParams, eta: f64) -> Result<GlobalNaturalParams> {
    let layout = phi_prev.layout();
    let prev = flat_of(layout, phi_prev)?;
    let star = flat_of(layout, phi_star)?;
    Ok(unflatten(layout, &(prev * (1.0 - eta) + star * eta)))
}

/// Weighted average of neighbour messages in flattened coordinates.
pub fn dsvb_combine(messages: &[(&GlobalNaturalParams, f64)]) -> Result<GlobalNaturalParams> {
    let (first, _) = messages.first().ok_or_else(|| Error::param("no messages to combine"))?;
    let layout = first.layout();
    let total: f64 = messages.iter().map(|(_, w)| w).sum();
    if messages.iter().any(|(_, w)| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("combination weights must be non-negative and sum to 1, got sum {total}")));
    }
    let mut acc = DVector::zeros(layout.len());
    for (phi, w) in messages {
        acc.axpy(*w, &flat_of(layout, phi)?, 1.0);
    }
    Ok(unflatten(layout, &acc))
}

/// Primal ADMM update in flattened coordinates, without projection.
pub fn admm_primal_flat(
    phi_star: &DVector<f64>,
    lambda: &DVector<f64>,
    prev_self: &DVector<f64>,
    prev_neighbors: &[&DVector<f64>],
    rho: f64,
) -> Result<DVector<f64>> {
    let len = phi_star.len();
    if lambda.len() != len || prev_self.len() != len || prev_neighbors.iter().any(|v| v.len() != len) {
        return Err(Error::shape("admm primal inputs have different lengths"));
    }
    let mut num = phi_star - lambda * 2.0;
    for nbr in prev_neighbors {
        num.axpy(rho, prev_self, 1.0);
        num.axpy(rho, nbr, 1.0);
    }
    Ok(num / (1.0 + 2.0 * rho * prev_neighbors.len() as f64))
}

/// Primal ADMM update followed by projection onto the domain.
pub fn admm_primal(
    phi_star: &GlobalNaturalParams,
    lambda: &DVector<f64>,
    prev_self: &GlobalNaturalParams,
    prev_neighbors: &[&GlobalNaturalParams],
    rho: f64,
    margins: &ProjectionMargins,
) -> Result<GlobalNaturalParams> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::param(format!("rho = {rho} must be positive")));
    }
    let layout = phi_star.layout();
    let nbrs = prev_neighbors.iter().map(|p| flat_of(layout, p)).collect::<Result<Vec<_>>>()?;
    let nbr_refs: Vec<&DVector<f64>> = nbrs.iter().collect();
    let raw = admm_primal_flat(&phi_star.to_flat(), lambda, &flat_of(layout, prev_self)?, &nbr_refs, rho)?;
    Ok(project_to_domain(&unflatten(layout, &raw), margins))
}

/// Dual ADMM update in flattened coordinates.
pub fn admm_dual_flat(
    lambda_prev: &DVector<f64>,
    phi_self: &DVector<f64>,
    phi_neighbors: &[&DVector<f64>],
    rho: f64,
    kappa_t: f64,
) -> Result<DVector<f64>> {
    let len = lambda_prev.len();
    if phi_self.len() != len || phi_neighbors.iter().any(|v| v.len() != len) {
        return Err(Error::shape("admm dual inputs have different lengths"));
    }
    let mut residual = DVector::zeros(len);
    for nbr in phi_neighbors {
        residual += phi_self - *nbr;
    }
    Ok(lambda_prev + residual * (kappa_t * rho / 2.0))
}

pub fn admm_dual(
    lambda_prev: &DVector<f64>,
    phi_self: &GlobalNaturalParams,
    phi_neighbors: &[&GlobalNaturalParams],
    rho: f64,
    kappa_t: f64,
) -> Result<DVector<f64>> {
    let layout = phi_self.layout();
    let nbrs = phi_neighbors.iter().map(|p| flat_of(layout, p)).collect::<Result<Vec<_>>>()?;
    let nbr_refs: Vec<&DVector<f64>> = nbrs.iter().collect();
    admm_dual_flat(lambda_prev, &phi_self.to_flat(), &nbr_refs, rho, kappa_t)
}

fn uniform_mean(items: &[&GlobalNaturalParams]) -> Result<GlobalNaturalParams> {
    let first = items.first().ok_or_else(|| Error::param("cannot average an empty list"))?;
    let layout = first.layout();
    let mut acc = DVector::zeros(layout.len());
    for phi in items {
        acc += flat_of(layout, phi)?;
    }
    Ok(unflatten(layout, &(acc / items.len() as f64)))
}

/// Unweighted mean of all local optima.
pub fn centralized_vbm(local_optima: &[GlobalNaturalParams]) -> Result<GlobalNaturalParams> {
    uniform_mean(&local_optima.iter().collect::<Vec<_>>())
}

/// Uniform mean over a closed neighbourhood's local optima.
pub fn nsg_combine(local_optima_neighborhood: &[&GlobalNaturalParams]) -> Result<GlobalNaturalParams> {
    uniform_mean(local_optima_neighborhood)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoKind {
    Cvb,
    Noncoop,
    NsgDvb,
    Dsvb,
    DvbAdmm,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 5] = [AlgoKind::Cvb, AlgoKind::Noncoop, AlgoKind::NsgDvb, AlgoKind::Dsvb, AlgoKind::DvbAdmm];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgoKind::Cvb => "cvb",
            AlgoKind::Noncoop => "noncoop",
            AlgoKind::NsgDvb => "nsg_dvb",
            AlgoKind::Dsvb => "dsvb",
            AlgoKind::DvbAdmm => "dvb_admm",
        }
    }

    fn is_distributed(self) -> bool {
        matches!(self, AlgoKind::NsgDvb | AlgoKind::Dsvb | AlgoKind::DvbAdmm)
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}` (expected cvb, noncoop, nsg_dvb, dsvb or dvb_admm)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub kind: AlgoKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    pub max_iters: usize,
    #[serde(default)]
    pub weight_rule: WeightRule,
    /// Cost and disagreement are recorded every `eval_stride` rounds and at the last round.
    #[serde(default = "default_stride")]
    pub eval_stride: usize,
}

fn default_stride() -> usize {
    1
}

impl AlgoConfig {
    /// Configuration for a kind without tuning parameters.
    pub fn baseline(kind: AlgoKind, max_iters: usize) -> Self {
        AlgoConfig { kind, tau: None, d0: None, rho: None, xi: None, max_iters, weight_rule: WeightRule::default(), eval_stride: 1 }
    }

    pub fn dsvb(tau: f64, d0: f64, max_iters: usize) -> Self {
        AlgoConfig { tau: Some(tau), d0: Some(d0), ..Self::baseline(AlgoKind::Dsvb, max_iters) }
    }

    pub fn dvb_admm(rho: f64, xi: f64, max_iters: usize) -> Self {
        AlgoConfig { rho: Some(rho), xi: Some(xi), ..Self::baseline(AlgoKind::DvbAdmm, max_iters) }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("{} requires `{name}`", self.kind)))
        };
        match self.kind {
            AlgoKind::Dsvb => {
                step_size(1, need(self.d0, "d0")?, need(self.tau, "tau")?).map_err(|e| Error::Config(e.to_string()))?;
            }
            AlgoKind::DvbAdmm => {
                let rho = need(self.rho, "rho")?;
                if !(rho > 0.0 && rho.is_finite()) {
                    return Err(Error::Config(format!("rho = {rho} must be positive")));
                }
                kappa(1, need(self.xi, "xi")?).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval_stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub phi: GlobalNaturalParams,
    /// Aggregate multiplier in flattened coordinates; zero for kinds other than ADMM.
    pub lambda: DVector<f64>,
    pub r: Responsibilities,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub node_kl: Option<Vec<f64>>,
    pub mean_kl: Option<f64>,
    pub std_kl: Option<f64>,
    /// `max_{i,j} ||phi_i - phi_j||_F`.
    pub consensus_disagreement: f64,
    /// `max_i ||sum_{j in N_i} (phi_i - phi_j)||_F`.
    pub primal_residual: f64,
    /// Wall time since the start of the run.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub algo: AlgoKind,
    pub records: Vec<IterRecord>,
}

impl RunTrace {
    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: RunTrace,
    pub states: Vec<NodeState>,
}

/// Observer invoked after every round with the round index and node states.
pub type RoundHook<'a> = dyn FnMut(usize, &[NodeState]) + 'a;

/// Runs `cfg.max_iters` synchronized rounds.
///
/// `init` holds one starting value per node, or a single value shared by all.
pub fn run(
    cfg: &AlgoConfig,
    model: &GmmModelConfig,
    net: &Network,
    data: &[NodeDataset],
    init: &[GlobalNaturalParams],
    truth: Option<&GlobalNaturalParams>,
) -> Result<RunOutput> {
    run_with_hook(cfg, model, net, data, init, truth, &mut |_, _| {})
}

pub fn run_with_hook(
    cfg: &AlgoConfig,
    model: &GmmModelConfig,
    net: &Network,
    data: &[NodeDataset],
    init: &[GlobalNaturalParams],
    truth: Option<&GlobalNaturalParams>,
    hook: &mut RoundHook<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n = net.len();
    let layout = model.layout();
    if n == 0 {
        return Err(Error::param("network has no nodes"));
    }
    if data.len() != n {
        return Err(Error::shape(format!("{} node datasets for {n} nodes", data.len())));
    }
    if model.n_nodes != n {
        return Err(Error::param(format!("replication factor N = {} differs from network size {n}", model.n_nodes)));
    }
    if init.len() != n && init.len() != 1 {
        return Err(Error::shape(format!("{} initial values for {n} nodes", init.len())));
    }
    for (i, phi) in init.iter().enumerate() {
        flat_of(layout, phi)?;
        if !in_domain(phi) {
            return Err(Error::domain(format!("initial value {i} lies outside the domain")));
        }
    }
    if let Some(t) = truth {
        flat_of(layout, t)?;
    }
    if cfg.kind.is_distributed() && !is_connected(net) {
        return Err(Error::param(format!("{} needs a connected network", cfg.kind)));
    }

    let weights = CombinationWeights::new(net, cfg.weight_rule);
    let margins = ProjectionMargins::default();
    let mut states: Vec<NodeState> = (0..n)
        .map(|i| NodeState {
            phi: init[if init.len() == 1 { 0 } else { i }].clone(),
            lambda: DVector::zeros(layout.len()),
            r: Responsibilities { r: DMatrix::from_element(data[i].len(), model.k, 1.0 / model.k as f64) },
        })
        .collect();
    let mut records = Vec::new();
    let start = Instant::now();
    let algo = cfg.kind.as_str();
    let ctx = |iter: usize, node: usize| move |e: Error| Error::Round { algo: algo.to_string(), iter, node, source: Box::new(e) };

    for t in 1..=cfg.max_iters {
        let local: Vec<(Responsibilities, GlobalNaturalParams)> = states
            .par_iter()
            .zip(data.par_iter())
            .enumerate()
            .map(|(i, (st, d))| {
                let r = vbe_step(d, &st.phi, model).map_err(ctx(t, i))?;
                let star = local_vbm_optimum(d, &r, model).map_err(ctx(t, i))?;
                Ok((r, star))
            })
            .collect::<Result<_>>()?;
        let (rs, stars): (Vec<_>, Vec<_>) = local.into_iter().unzip();

        let new_phi: Vec<GlobalNaturalParams> = match cfg.kind {
            AlgoKind::Cvb => {
                let mean = centralized_vbm(&stars).map_err(ctx(t, 0))?;
                vec![mean; n]
            }
            AlgoKind::Noncoop => stars,
            AlgoKind::NsgDvb => (0..n)
                .into_par_iter()
                .map(|i| {
                    let hood: Vec<&GlobalNaturalParams> = weights.row(i).iter().map(|&(j, _)| &stars[j]).collect();
                    nsg_combine(&hood).map_err(ctx(t, i))
                })
                .collect::<Result<_>>()?,
            AlgoKind::Dsvb => {
                let eta = step_size(t, cfg.d0.unwrap(), cfg.tau.unwrap())?;
                let psi: Vec<GlobalNaturalParams> = (0..n)
                    .into_par_iter()
                    .map(|i| dsvb_adapt(&states[i].phi, &stars[i], eta).map_err(ctx(t, i)))
                    .collect::<Result<_>>()?;
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let msgs: Vec<(&GlobalNaturalParams, f64)> = weights.row(i).iter().map(|&(j, w)| (&psi[j], w)).collect();
                        dsvb_combine(&msgs).map_err(ctx(t, i))
                    })
                    .collect::<Result<_>>()?
            }
            AlgoKind::DvbAdmm => {
                let rho = cfg.rho.unwrap();
                let k_t = kappa(t, cfg.xi.unwrap())?;
                let prev: Vec<DVector<f64>> = states.iter().map(|s| s.phi.to_flat()).collect();
                let primal: Vec<GlobalNaturalParams> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let nbrs: Vec<&DVector<f64>> = net.neighbors(i).iter().map(|&j| &prev[j]).collect();
                        let raw = admm_primal_flat(&stars[i].to_flat(), &states[i].lambda, &prev[i], &nbrs, rho)
                            .map_err(ctx(t, i))?;
                        Ok(project_to_domain(&unflatten(layout, &raw), &margins))
                    })
                    .collect::<Result<_>>()?;
                let cur: Vec<DVector<f64>> = primal.iter().map(GlobalNaturalParams::to_flat).collect();
                let lambdas: Vec<DVector<f64>> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let nbrs: Vec<&DVector<f64>> = net.neighbors(i).iter().map(|&j| &cur[j]).collect();
                        admm_dual_flat(&states[i].lambda, &cur[i], &nbrs, rho, k_t).map_err(ctx(t, i))
                    })
                    .collect::<Result<_>>()?;
                for (st, l) in states.iter_mut().zip(lambdas) {
                    st.lambda = l;
                }
                primal
            }
        };

        for (i, ((st, phi), r)) in states.iter_mut().zip(new_phi).zip(rs).enumerate() {
            if !in_domain(&phi) {
                return Err(ctx(t, i)(Error::domain("updated parameters left the domain")));
            }
            if st.lambda.iter().any(|x| !x.is_finite()) {
                return Err(ctx(t, i)(Error::domain("multiplier is not finite")));
            }
            st.phi = phi;
            st.r = r;
        }

        if t % cfg.eval_stride == 0 || t == cfg.max_iters {
            records.push(evaluate(t, &states, net, truth, start).map_err(ctx(t, 0))?);
        }
        hook(t, &states);
    }
    Ok(RunOutput { trace: RunTrace { algo: cfg.kind, records }, states })
}

fn evaluate(
    iter: usize,
    states: &[NodeState],
    net: &Network,
    truth: Option<&GlobalNaturalParams>,
    start: Instant,
) -> Result<IterRecord> {
    let layout = states[0].phi.layout();
    let flats: Vec<DVector<f64>> = states.iter().map(|s| s.phi.to_flat()).collect();
    let mut disagreement = 0.0f64;
    for i in 0..flats.len() {
        for j in (i + 1)..flats.len() {
            disagreement = disagreement.max(layout.frobenius_norm((&flats[i] - &flats[j]).as_slice()));
        }
    }
    let mut residual = 0.0f64;
    for (i, fi) in flats.iter().enumerate() {
        let mut acc = DVector::zeros(layout.len());
        for &j in net.neighbors(i) {
            acc += fi - &flats[j];
        }
        residual = residual.max(layout.frobenius_norm(acc.as_slice()));
    }
    let (node_kl, mean_kl, std_kl) = match truth {
        Some(truth) => {
            let phis: Vec<&GlobalNaturalParams> = states.iter().map(|s| &s.phi).collect();
            let costs = node_costs(&phis, truth)?;
            let (mean, std) = mean_std(&costs);
            (Some(costs), Some(mean), Some(std))
        }
        None => (None, None, None),
    };
    Ok(IterRecord {
        iter,
        node_kl,
        mean_kl,
        std_kl,
        consensus_disagreement: disagreement,
        primal_residual: residual,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
