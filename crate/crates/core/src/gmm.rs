//! Per-node Gaussian-mixture computations: the VBE step (responsibilities)
//! and the local VBM optimum, which scales local sufficient statistics by the
//! node count `N` so that every local bound targets the full-data evidence.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::{
    self, natural_to_hyper, spd_cholesky, symmetrize, DirichletNat, GlobalNaturalParams, GmmHyperParams, Layout,
    NormalWishartNat, NwHyper,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conjugate prior shared by all components.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub alpha0: f64,
    pub m0: DVector<f64>,
    pub beta0: f64,
    pub w0: DMatrix<f64>,
    pub nu0: f64,
}

impl Prior {
    /// `alpha0 = 1`, `m0 = 0`, `beta0 = 1`, `W0 = I/D`, `nu0 = D`.
    pub fn weak(d: usize) -> Self {
        Prior {
            alpha0: 1.0,
            m0: DVector::zeros(d),
            beta0: 1.0,
            w0: DMatrix::identity(d, d) / d as f64,
            nu0: d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModelConfig {
    pub k: usize,
    pub d: usize,
    pub prior: Prior,
    /// Replication factor applied to local statistics; the total node count.
    pub n_nodes: usize,
    w0_inv: DMatrix<f64>,
}

impl GmmModelConfig {
    pub fn new(k: usize, d: usize, prior: Prior, n_nodes: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::param(format!("need K >= 1 and D >= 1, got K={k}, D={d}")));
        }
        if n_nodes == 0 {
            return Err(Error::param("replication factor N must be at least 1"));
        }
        if prior.m0.len() != d {
            return Err(Error::shape(format!("prior mean has length {}, expected {d}", prior.m0.len())));
        }
        let nw = NwHyper { m: prior.m0.clone(), beta: prior.beta0, w: prior.w0.clone(), nu: prior.nu0 };
        nw.validate().map_err(|e| Error::param(format!("prior: {e}")))?;
        if !(prior.alpha0.is_finite() && prior.alpha0 > 0.0) {
            return Err(Error::param(format!("prior: alpha0 = {} must be positive", prior.alpha0)));
        }
        let mut w0_inv = spd_cholesky(&prior.w0).expect("validated").inverse();
        symmetrize(&mut w0_inv);
        Ok(GmmModelConfig { k, d, prior, n_nodes, w0_inv })
    }

    /// Weak default prior ([`Prior::weak`]).
    pub fn with_defaults(k: usize, d: usize, n_nodes: usize) -> Result<Self> {
        Self::new(k, d, Prior::weak(d), n_nodes)
    }

    /// Same model with a different replication factor.
    pub fn with_replication(&self, n_nodes: usize) -> Result<Self> {
        Self::new(self.k, self.d, self.prior.clone(), n_nodes)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.k, self.d)
    }

    pub fn prior_hyper(&self) -> GmmHyperParams {
        let nw = NwHyper { m: self.prior.m0.clone(), beta: self.prior.beta0, w: self.prior.w0.clone(), nu: self.prior.nu0 };
        GmmHyperParams { alpha: vec![self.prior.alpha0; self.k], components: vec![nw; self.k] }
    }

    pub fn prior_natural(&self) -> GlobalNaturalParams {
        expfam::hyper_to_natural(&self.prior_hyper()).expect("prior validated at construction")
    }
}

/// Local measurements of one node, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub node_id: usize,
    pub points: DMatrix<f64>,
}

impl NodeDataset {
    pub fn new(node_id: usize, points: DMatrix<f64>) -> Self {
        NodeDataset { node_id, points }
    }

    pub fn empty(node_id: usize, d: usize) -> Self {
        NodeDataset { node_id, points: DMatrix::zeros(0, d) }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Row-stochastic `N_i x K` matrix of component memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub r: DMatrix<f64>,
}

impl Responsibilities {
    /// Index of the most responsible component per row; ties go to the lowest index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        (0..self.r.nrows())
            .map(|j| {
                let row = self.r.row(j);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// One-hot responsibilities from hard labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut r = DMatrix::zeros(labels.len(), k);
        for (j, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::shape(format!("label {l} at row {j} is outside [0, {k})")));
            }
            r[(j, l)] = 1.0;
        }
        Ok(Responsibilities { r })
    }
}

fn check_data(data: &NodeDataset, cfg: &GmmModelConfig) -> Result<()> {
    if data.points.ncols() != cfg.d {
        return Err(Error::shape(format!(
            "node {} has {}-dimensional points, model expects {}",
            data.node_id,
            data.points.ncols(),
            cfg.d
        )));
    }
    if let Some(pos) = data.points.iter().position(|x| !x.is_finite()) {
        let row = pos % data.points.nrows().max(1);
        return Err(Error::domain(format!("node {} has a non-finite value in row {row}", data.node_id)));
    }
    Ok(())
}

/// Per-component quantities that the VBE step needs for every point.
struct ComponentTerms {
    offset: f64,
    m: DVector<f64>,
    nu_w: DMatrix<f64>,
}

/// VBE step: `ln rho_jk = E[ln pi_k] + E[ln|Lambda_k|]/2 - (D/2) ln 2 pi
/// - (D/beta_k + nu_k (x_j - m_k)^T W_k (x_j - m_k))/2`, normalized per row.
pub fn vbe_step(data: &NodeDataset, phi: &GlobalNaturalParams, cfg: &GmmModelConfig) -> Result<Responsibilities> {
    check_data(data, cfg)?;
    if phi.layout() != cfg.layout() || phi.components.len() != cfg.k {
        return Err(Error::shape(format!(
            "natural parameters have K={}, D={}; model has K={}, D={}",
            phi.layout().k,
            phi.layout().d,
            cfg.k,
            cfg.d
        )));
    }
    let hyper = natural_to_hyper(phi)?;
    let e_log_pi = expfam::dirichlet_expected_log_pi(&DirichletNat::from_alpha(&hyper.alpha))?;
    let d = cfg.d as f64;
    let terms: Vec<ComponentTerms> = hyper
        .components
        .iter()
        .zip(e_log_pi.iter())
        .map(|(h, elp)| {
            let e_logdet = expfam::expected_logdet_lambda(h, h.log_det_w());
            ComponentTerms {
                offset: elp + 0.5 * e_logdet - 0.5 * d * LN_2PI - 0.5 * d / h.beta,
                m: h.m.clone(),
                nu_w: &h.w * h.nu,
            }
        })
        .collect();

    let n = data.len();
    let mut r = DMatrix::zeros(n, cfg.k);
    let mut diff = vec![0.0; cfg.d];
    let mut log_rho = vec![0.0; cfg.k];
    for j in 0..n {
        for (k, t) in terms.iter().enumerate() {
            for (i, slot) in diff.iter_mut().enumerate() {
                *slot = data.points[(j, i)] - t.m[i];
            }
            let mut quad = 0.0;
            for a in 0..cfg.d {
                let mut row = 0.0;
                for b in 0..cfg.d {
                    row += t.nu_w[(a, b)] * diff[b];
                }
                quad += diff[a] * row;
            }
            log_rho[k] = t.offset - 0.5 * quad;
        }
        let max = log_rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::domain(format!("node {}: row {j} has no finite log-responsibility", data.node_id)));
        }
        let mut total = 0.0;
        for (k, lr) in log_rho.iter().enumerate() {
            let e = (lr - max).exp();
            r[(j, k)] = e;
            total += e;
        }
        for k in 0..cfg.k {
            r[(j, k)] /= total;
        }
    }
    Ok(Responsibilities { r })
}

/// Updated hyperparameters of one component, with `W^{-1}` rather than `W`.
struct ComponentUpdate {
    alpha: f64,
    m: DVector<f64>,
    beta: f64,
    w_inv: DMatrix<f64>,
    nu: f64,
}

fn component_updates(data: &NodeDataset, r: &Responsibilities, cfg: &GmmModelConfig) -> Result<Vec<ComponentUpdate>> {
    check_data(data, cfg)?;
    if r.r.nrows() != data.len() || r.r.ncols() != cfg.k {
        return Err(Error::shape(format!(
            "responsibilities are {}x{}, expected {}x{}",
            r.r.nrows(),
            r.r.ncols(),
            data.len(),
            cfg.k
        )));
    }
    let p = &cfg.prior;
    let big_n = cfg.n_nodes as f64;
    let d = cfg.d;
    let mut out = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let col = r.r.column(k);
        let weight: f64 = col.sum();
        let resp = big_n * weight;
        let mut w_inv = cfg.w0_inv.clone();
        let mut m = p.m0.clone();
        if weight > 0.0 {
            let mut mean = DVector::zeros(d);
            for j in 0..data.len() {
                for i in 0..d {
                    mean[i] += col[j] * data.points[(j, i)];
                }
            }
            mean /= weight;
            // N * sum_j r_jk (x_j - xbar)(x_j - xbar)^T, i.e. R_k S_k
            let mut scatter = DMatrix::zeros(d, d);
            let mut diff = DVector::zeros(d);
            for j in 0..data.len() {
                for i in 0..d {
                    diff[i] = data.points[(j, i)] - mean[i];
                }
                scatter.ger(col[j], &diff, &diff, 1.0);
            }
            let dm = &mean - &p.m0;
            w_inv += scatter * big_n;
            w_inv.ger(p.beta0 * resp / (p.beta0 + resp), &dm, &dm, 1.0);
            symmetrize(&mut w_inv);
            m = (&p.m0 * p.beta0 + mean * resp) / (p.beta0 + resp);
        }
        out.push(ComponentUpdate { alpha: p.alpha0 + resp, m, beta: p.beta0 + resp, w_inv, nu: p.nu0 + resp });
    }
    Ok(out)
}

/// Local VBM optimum at a node as hyperparameters.
pub fn local_vbm_hyper(data: &NodeDataset, r: &Responsibilities, cfg: &GmmModelConfig) -> Result<GmmHyperParams> {
    let updates = component_updates(data, r, cfg)?;
    let mut components = Vec::with_capacity(cfg.k);
    for u in &updates {
        let chol = spd_cholesky(&u.w_inv).ok_or_else(|| Error::domain("updated W^-1 is not positive definite"))?;
        let mut w = chol.inverse();
        symmetrize(&mut w);
        components.push(NwHyper { m: u.m.clone(), beta: u.beta, w, nu: u.nu });
    }
    Ok(GmmHyperParams { alpha: updates.iter().map(|u| u.alpha).collect(), components })
}

/// Local VBM optimum at a node in natural parameters.
pub fn local_vbm_optimum(
    data: &NodeDataset,
    r: &Responsibilities,
    cfg: &GmmModelConfig,
) -> Result<GlobalNaturalParams> {
    let updates = component_updates(data, r, cfg)?;
    let d = cfg.d as f64;
    let components = updates
        .iter()
        .map(|u| {
            let mut b = &u.w_inv * -0.5 - (&u.m * u.m.transpose()) * (0.5 * u.beta);
            symmetrize(&mut b);
            NormalWishartNat { a: 0.5 * (u.nu - d), b, c: &u.m * u.beta, d: -0.5 * u.beta }
        })
        .collect();
    let alpha: Vec<f64> = updates.iter().map(|u| u.alpha).collect();
    Ok(GlobalNaturalParams { dirichlet: DirichletNat::from_alpha(&alpha), components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{hyper_to_natural, in_domain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, d: usize, n: usize) -> GmmModelConfig {
        GmmModelConfig::with_defaults(k, d, n).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> NodeDataset {
        NodeDataset::new(0, DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0)))
    }

    fn random_resp(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Responsibilities {
        let mut r = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.01..1.0));
        for j in 0..n {
            let s: f64 = r.row(j).sum();
            for c in 0..k {
                r[(j, c)] /= s;
            }
        }
        Responsibilities { r }
    }

    fn nw1(m: f64) -> NwHyper {
        NwHyper { m: DVector::from_element(1, m), beta: 1.0, w: DMatrix::from_element(1, 1, 1.0), nu: 1.0 }
    }

    // Natural parameters are the prior's plus N * sum_j r_jk [1/2, -x x^T/2, x, -1/2].
    fn natural_accumulation_oracle(data: &NodeDataset, r: &Responsibilities, cfg: &GmmModelConfig) -> GlobalNaturalParams {
        let mut phi = cfg.prior_natural();
        let n = cfg.n_nodes as f64;
        for k in 0..cfg.k {
            for j in 0..data.len() {
                let w = n * r.r[(j, k)];
                let x = data.points.row(j).transpose();
                phi.dirichlet.eta[k] += w;
                let c = &mut phi.components[k];
                c.a += 0.5 * w;
                c.b -= (&x * x.transpose()) * (0.5 * w);
                c.c += &x * w;
                c.d -= 0.5 * w;
            }
        }
        phi
    }

    fn max_rel_diff(a: &GlobalNaturalParams, b: &GlobalNaturalParams) -> f64 {
        a.to_flat().iter().zip(b.to_flat().iter()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
    }

    #[test]
    fn single_component_takes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(1, 2, 1);
        let r = vbe_step(&random_data(&mut rng, 20, 2), &c.prior_natural(), &c).unwrap();
        assert!(r.r.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(2, 2, 1);
        let r = vbe_step(&random_data(&mut rng, 20, 2), &c.prior_natural(), &c).unwrap();
        assert!(r.r.iter().all(|x| (*x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn two_means_in_one_dimension() {
        let c = cfg(2, 1, 1);
        let h = GmmHyperParams { alpha: vec![1.0, 1.0], components: vec![nw1(-1.0), nw1(1.0)] };
        let phi = hyper_to_natural(&h).unwrap();
        let at = |x: f64| vbe_step(&NodeDataset::new(0, DMatrix::from_element(1, 1, x)), &phi, &c).unwrap().r;
        let r0 = at(0.0);
        assert!((r0[(0, 0)] - 0.5).abs() < 1e-15);
        // Oracle: with equal alpha, beta, nu and W, ln rho differs only through the
        // quadratic term, so r_2 = 1 / (1 + exp(-(q_1 - q_2)/2)) with q_k = (x - m_k)^2.
        let r1 = at(1.0);
        let want = 1.0 / (1.0 + (-(4.0f64 - 0.0) / 2.0).exp());
        assert!((r1[(0, 1)] - want).abs() < 1e-14 && r1[(0, 1)] > 0.5);
    }

    #[test]
    fn vbe_rejects_bad_inputs() {
        let c = cfg(2, 2, 1);
        let bad = NodeDataset::new(0, DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]));
        assert!(vbe_step(&bad, &c.prior_natural(), &c).is_err());
        let wrong_dim = NodeDataset::new(0, DMatrix::zeros(3, 3));
        assert!(vbe_step(&wrong_dim, &c.prior_natural(), &c).is_err());
        let mut phi = c.prior_natural();
        phi.components[1].d = 1.0;
        assert!(vbe_step(&NodeDataset::empty(0, 2), &phi, &c).is_err());
    }

    #[test]
    fn vbm_all_mass_on_first_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(3, 2, 50);
        let data = random_data(&mut rng, 100, 2);
        let r = Responsibilities::one_hot(&[0; 100], 3).unwrap();
        let h = local_vbm_hyper(&data, &r, &c).unwrap();
        assert_eq!(h.alpha, vec![5001.0, 1.0, 1.0]);
        let phi = local_vbm_optimum(&data, &r, &c).unwrap();
        let prior = c.prior_natural();
        assert_eq!(phi.components[1], prior.components[1]);
        assert_eq!(phi.components[2], prior.components[2]);
    }

    #[test]
    fn vbm_single_point_matches_conjugate_update() {
        let c = cfg(1, 2, 1);
        let x = DVector::from_vec(vec![1.5, -0.5]);
        let data = NodeDataset::new(0, DMatrix::from_row_slice(1, 2, x.as_slice()));
        let h = local_vbm_hyper(&data, &Responsibilities::one_hot(&[0], 1).unwrap(), &c).unwrap();
        let nw = &h.components[0];
        assert_eq!(nw.beta, 2.0);
        assert_eq!(nw.nu, 3.0);
        assert!((&nw.m - &x / 2.0).norm() < 1e-15);
        // one observation: W^-1 = W0^-1 + (beta0 / (beta0 + 1)) (x - m0)(x - m0)^T
        let want_w_inv = DMatrix::identity(2, 2) * 2.0 + (&x * x.transpose()) * 0.5;
        let got_w_inv = nw.w.clone().try_inverse().unwrap();
        assert!((got_w_inv - want_w_inv).norm() < 1e-13);
    }

    #[test]
    fn vbm_matches_natural_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let (k, d) = (1 + trial % 3, 1 + trial % 2);
            let c = cfg(k, d, 1 + trial);
            let data = random_data(&mut rng, 30, d);
            let r = random_resp(&mut rng, 30, k);
            let got = local_vbm_optimum(&data, &r, &c).unwrap();
            let want = natural_accumulation_oracle(&data, &r, &c);
            assert!(max_rel_diff(&got, &want) < 1e-10, "trial {trial}");
            assert!(in_domain(&got));
            let via_hyper = hyper_to_natural(&local_vbm_hyper(&data, &r, &c).unwrap()).unwrap();
            assert!(max_rel_diff(&got, &via_hyper) < 1e-10);
        }
    }

    #[test]
    fn empty_node_returns_prior() {
        let c = cfg(3, 2, 10);
        let data = NodeDataset::empty(4, 2);
        let r = Responsibilities { r: DMatrix::zeros(0, 3) };
        assert_eq!(vbe_step(&data, &c.prior_natural(), &c).unwrap(), r);
        assert_eq!(local_vbm_optimum(&data, &r, &c).unwrap(), c.prior_natural());
    }

    #[test]
    fn vbm_shape_mismatch() {
        let c = cfg(2, 2, 1);
        let data = NodeDataset::new(0, DMatrix::zeros(3, 2));
        let r = Responsibilities { r: DMatrix::from_element(2, 2, 0.5) };
        assert!(local_vbm_optimum(&data, &r, &c).is_err());
    }

    #[test]
    fn replication_scales_increments_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_data(&mut rng, 25, 2);
        let r = random_resp(&mut rng, 25, 3);
        let h1 = local_vbm_hyper(&data, &r, &cfg(3, 2, 1)).unwrap();
        let h7 = local_vbm_hyper(&data, &r, &cfg(3, 2, 7)).unwrap();
        let p = cfg(3, 2, 1).prior;
        for k in 0..3 {
            let inc1 = h1.alpha[k] - p.alpha0;
            assert!((h7.alpha[k] - p.alpha0 - 7.0 * inc1).abs() < 1e-10);
            assert!((h7.components[k].beta - p.beta0 - 7.0 * (h1.components[k].beta - p.beta0)).abs() < 1e-10);
            assert!((h7.components[k].nu - p.nu0 - 7.0 * (h1.components[k].nu - p.nu0)).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg(3, 2, 4);
        let data = random_data(&mut rng, 40, 2);
        let phi = hyper_to_natural(&crate::testutil::random_hyper(&mut rng, 3, 2)).unwrap();
        let perm = [2, 0, 1];
        let r = vbe_step(&data, &phi, &c).unwrap();
        let rp = vbe_step(&data, &phi.permuted(&perm), &c).unwrap();
        for j in 0..40 {
            for (k, &p) in perm.iter().enumerate() {
                assert!((rp.r[(j, k)] - r.r[(j, p)]).abs() < 1e-14);
            }
        }
        let opt = local_vbm_optimum(&data, &r, &c).unwrap();
        let opt_p = local_vbm_optimum(&data, &rp, &c).unwrap();
        assert!(max_rel_diff(&opt.permuted(&perm), &opt_p) < 1e-12);
    }

    #[test]
    fn alternating_updates_converge_on_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
        let mut pts = Vec::new();
        for j in 0..200 {
            let center = if j % 2 == 0 { [-2.0, 0.0] } else { [2.0, 1.0] };
            pts.push(center[0] + rng.sample(normal));
            pts.push(center[1] + rng.sample(normal));
        }
        let data = NodeDataset::new(0, DMatrix::from_row_slice(200, 2, &pts));
        let c = cfg(2, 2, 1);
        let mut h = c.prior_hyper();
        h.components[0].m = DVector::from_vec(vec![-0.1, 0.0]);
        h.components[1].m = DVector::from_vec(vec![0.1, 0.0]);
        let mut phi = hyper_to_natural(&h).unwrap();
        let mut prev = vbe_step(&data, &phi, &c).unwrap();
        let mut converged = None;
        for it in 0..200 {
            phi = local_vbm_optimum(&data, &prev, &c).unwrap();
            let r = vbe_step(&data, &phi, &c).unwrap();
            let change = (&r.r - &prev.r).abs().max();
            prev = r;
            if change < 1e-8 {
                converged = Some(it);
                break;
            }
        }
        assert!(converged.is_some());
        let labels = prev.hard_assignments();
        let agree = labels.iter().enumerate().filter(|(j, l)| **l == j % 2).count();
        assert!(agree == 200 || agree == 0, "{agree}");
    }

    proptest::proptest! {
        #[test]
        fn responsibilities_are_row_stochastic(seed in 0u64..5000, n in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cfg(3, 2, 1);
            let phi = hyper_to_natural(&crate::testutil::random_hyper(&mut rng, 3, 2)).unwrap();
            let data = NodeDataset::new(0, DMatrix::from_fn(n, 2, |_, _| rng.random_range(-50.0..50.0)));
            let r = vbe_step(&data, &phi, &c).unwrap();
            for j in 0..n {
                let s: f64 = r.r.row(j).sum();
                proptest::prop_assert!((s - 1.0).abs() <= 1e-12);
                proptest::prop_assert!(r.r.row(j).iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
