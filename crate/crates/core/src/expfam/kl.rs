use nalgebra::{DMatrix, DVector};

use super::{DirichletNat, GlobalNaturalParams, NormalWishartNat, NwHyper};
use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};

const LN_2: f64 = std::f64::consts::LN_2;

/// Expected natural sufficient statistics of a normal-Wishart distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NwExpectedStats {
    /// `E[ln |Lambda|]`
    pub e_logdet_lambda: f64,
    /// `E[Lambda]`
    pub e_lambda: DMatrix<f64>,
    /// `E[Lambda mu]`
    pub e_lambda_mu: DVector<f64>,
    /// `E[mu^T Lambda mu]`
    pub e_mu_lambda_mu: f64,
}

/// `ln B(alpha) = sum_k ln Gamma(alpha_k) - ln Gamma(sum_k alpha_k)` with `alpha = eta + 1`.
pub fn dirichlet_log_partition(dn: &DirichletNat) -> Result<f64> {
    let alpha = dn.checked_alpha()?;
    Ok(log_beta(&alpha))
}

fn log_beta(alpha: &DVector<f64>) -> f64 {
    alpha.iter().map(|a| log_gamma_unchecked(*a)).sum::<f64>() - log_gamma_unchecked(alpha.sum())
}

/// `E[ln pi_k] = psi(alpha_k) - psi(sum alpha)`.
pub fn dirichlet_expected_log_pi(dn: &DirichletNat) -> Result<DVector<f64>> {
    let alpha = dn.checked_alpha()?;
    Ok(expected_log_pi(&alpha))
}

fn expected_log_pi(alpha: &DVector<f64>) -> DVector<f64> {
    let total = digamma_unchecked(alpha.sum());
    alpha.map(|a| digamma_unchecked(a) - total)
}

/// Hessian of the Dirichlet log-partition in natural coordinates (its Fisher information):
/// `diag(psi'(alpha)) - psi'(sum alpha) 1 1^T`.
pub fn dirichlet_log_partition_hessian(dn: &DirichletNat) -> Result<DMatrix<f64>> {
    let alpha = dn.checked_alpha()?;
    let k = alpha.len();
    let off = trigamma_unchecked(alpha.sum());
    Ok(DMatrix::from_fn(k, k, |i, j| if i == j { trigamma_unchecked(alpha[i]) - off } else { -off }))
}

/// Normal-Wishart log-partition, up to parameter-independent constants:
/// `-(D/2) ln beta + (nu/2) ln|W| + (nu D/2) ln 2 + sum_j ln Gamma((nu + 1 - j)/2)`.
pub fn nw_log_partition(nw: &NormalWishartNat) -> Result<f64> {
    let h = nw.to_hyper()?;
    Ok(log_partition_of(&h, h.log_det_w()))
}

fn log_partition_of(h: &NwHyper, log_det_w: f64) -> f64 {
    let d = h.dim() as f64;
    let mut a = -0.5 * d * h.beta.ln() + 0.5 * h.nu * log_det_w + 0.5 * h.nu * d * LN_2;
    for j in 1..=h.dim() {
        a += log_gamma_unchecked(0.5 * (h.nu + 1.0 - j as f64));
    }
    a
}

/// `E[ln|Lambda|]`, `E[Lambda] = nu W`, `E[Lambda mu] = nu W m` and
/// `E[mu^T Lambda mu] = D/beta + nu m^T W m`.
pub fn nw_expected_stats(nw: &NormalWishartNat) -> Result<NwExpectedStats> {
    let h = nw.to_hyper()?;
    Ok(expected_stats_of(&h, h.log_det_w()))
}

pub(crate) fn expected_logdet_lambda(h: &NwHyper, log_det_w: f64) -> f64 {
    let d = h.dim();
    (1..=d).map(|j| digamma_unchecked(0.5 * (h.nu + 1.0 - j as f64))).sum::<f64>() + d as f64 * LN_2 + log_det_w
}

fn expected_stats_of(h: &NwHyper, log_det_w: f64) -> NwExpectedStats {
    let e_lambda = &h.w * h.nu;
    let e_lambda_mu = &e_lambda * &h.m;
    let e_mu_lambda_mu = h.dim() as f64 / h.beta + h.m.dot(&e_lambda_mu);
    NwExpectedStats { e_logdet_lambda: expected_logdet_lambda(h, log_det_w), e_lambda, e_lambda_mu, e_mu_lambda_mu }
}

/// `KL(Dir(p) || Dir(q))`.
pub fn kl_dirichlet(p: &DirichletNat, q: &DirichletNat) -> Result<f64> {
    if p.k() != q.k() {
        return Err(Error::shape(format!("Dirichlet sizes {} and {}", p.k(), q.k())));
    }
    let ap = p.checked_alpha()?;
    let aq = q.checked_alpha()?;
    let e_log_pi = expected_log_pi(&ap);
    let inner: f64 = (&ap - &aq).dot(&e_log_pi);
    Ok(inner - log_beta(&ap) + log_beta(&aq))
}

/// `KL(NW(p) || NW(q)) = <phi_p - phi_q, E_p[u]> - A(phi_p) + A(phi_q)`.
pub fn kl_normal_wishart(p: &NormalWishartNat, q: &NormalWishartNat) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!("normal-Wishart dimensions {} and {}", p.dim(), q.dim())));
    }
    let hp = p.to_hyper()?;
    let hq = q.to_hyper()?;
    let ldp = hp.log_det_w();
    let stats = expected_stats_of(&hp, ldp);
    let inner = (p.a - q.a) * stats.e_logdet_lambda
        + (&p.b - &q.b).component_mul(&stats.e_lambda).sum()
        + (&p.c - &q.c).dot(&stats.e_lambda_mu)
        + (p.d - q.d) * stats.e_mu_lambda_mu;
    Ok(inner - log_partition_of(&hp, ldp) + log_partition_of(&hq, hq.log_det_w()))
}

/// KL between the stacked distributions: Dirichlet KL plus the sum of component KLs.
pub fn kl_global(p: &GlobalNaturalParams, q: &GlobalNaturalParams) -> Result<f64> {
    p.check_same_layout(q)?;
    let mut kl = kl_dirichlet(&p.dirichlet, &q.dirichlet)?;
    for (a, b) in p.components.iter().zip(&q.components) {
        kl += kl_normal_wishart(a, b)?;
    }
    Ok(kl)
}
