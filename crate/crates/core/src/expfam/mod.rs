//! Natural-parameter representation of the GMM global posterior: one Dirichlet
//! block for the mixing weights and one normal-Wishart block per component.
//!
//! Flattened layout (used for message passing, Frobenius norms and CSV dumps):
//!
//! ```text
//! [eta_1 .. eta_K] then for each component k: [a, upper(B) row-major, c_1 .. c_D, d]
//! ```
//!
//! where `upper(B)` lists `B[i][j]` for `i <= j`. Off-diagonal entries of `B`
//! appear once, so linear combinations in flat space match linear combinations
//! of the symmetric matrix.

mod kl;

pub use kl::{
    dirichlet_expected_log_pi, dirichlet_log_partition, dirichlet_log_partition_hessian, kl_dirichlet,
    kl_global, kl_normal_wishart, nw_expected_stats, nw_log_partition, NwExpectedStats,
};
pub(crate) use kl::expected_logdet_lambda;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Block sizes of a [`GlobalNaturalParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layout {
    pub k: usize,
    pub d: usize,
}

impl Layout {
    pub fn new(k: usize, d: usize) -> Self {
        Layout { k, d }
    }

    /// Length of one flattened normal-Wishart block.
    pub fn nw_len(&self) -> usize {
        2 + self.d * (self.d + 1) / 2 + self.d
    }

    /// Length of the whole flattened vector.
    pub fn len(&self) -> usize {
        self.k + self.k * self.nw_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-coordinate weights such that `sum_i w_i x_i^2` is the squared
    /// Frobenius norm of the block-structured value (off-diagonals of `B` count twice).
    pub fn frobenius_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.k];
        for _ in 0..self.k {
            w.push(1.0);
            for i in 0..self.d {
                for j in i..self.d {
                    w.push(if i == j { 1.0 } else { 2.0 });
                }
            }
            w.extend(std::iter::repeat_n(1.0, self.d));
            w.push(1.0);
        }
        w
    }

    /// Frobenius norm of a flattened vector in this layout.
    pub fn frobenius_norm(&self, flat: &[f64]) -> f64 {
        debug_assert_eq!(flat.len(), self.len());
        self.frobenius_weights().iter().zip(flat).map(|(w, x)| w * x * x).sum::<f64>().sqrt()
    }
}

/// Dirichlet natural parameters, `eta = alpha - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletNat {
    pub eta: DVector<f64>,
}

impl DirichletNat {
    pub fn from_alpha(alpha: &[f64]) -> Self {
        DirichletNat { eta: DVector::from_iterator(alpha.len(), alpha.iter().map(|a| a - 1.0)) }
    }

    pub fn alpha(&self) -> DVector<f64> {
        self.eta.add_scalar(1.0)
    }

    pub fn k(&self) -> usize {
        self.eta.len()
    }

    pub fn in_domain(&self) -> bool {
        self.eta.iter().all(|e| e.is_finite() && *e > -1.0)
    }

    pub(crate) fn checked_alpha(&self) -> Result<DVector<f64>> {
        let alpha = self.alpha();
        for (k, a) in alpha.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0) {
                return Err(Error::domain(format!("dirichlet alpha[{k}] = {a} must be positive")));
            }
        }
        Ok(alpha)
    }
}

/// Normal-Wishart natural parameters:
/// `a = (nu - D)/2`, `B = -W^{-1}/2 - beta m m^T / 2`, `c = beta m`, `d = -beta/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalWishartNat {
    pub a: f64,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: f64,
}

/// Normal-Wishart hyperparameters `(m, beta, W, nu)` for one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct NwHyper {
    pub m: DVector<f64>,
    pub beta: f64,
    pub w: DMatrix<f64>,
    pub nu: f64,
}

impl NwHyper {
    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w.nrows() != d || self.w.ncols() != d {
            return Err(Error::shape(format!("W is {}x{}, expected {d}x{d}", self.w.nrows(), self.w.ncols())));
        }
        if !self.m.iter().all(|x| x.is_finite()) {
            return Err(Error::domain("m has non-finite entries"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::domain(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.nu.is_finite() && self.nu > d as f64 - 1.0) {
            return Err(Error::domain(format!("nu = {} must exceed D - 1 = {}", self.nu, d as f64 - 1.0)));
        }
        if !is_symmetric(&self.w) {
            return Err(Error::domain("W is not symmetric"));
        }
        if spd_cholesky(&self.w).is_none() {
            return Err(Error::domain("W is not positive definite"));
        }
        Ok(())
    }

    pub fn to_natural(&self) -> Result<NormalWishartNat> {
        self.validate()?;
        let d = self.dim();
        let w_inv = spd_cholesky(&self.w).expect("validated").inverse();
        let mmt = &self.m * self.m.transpose();
        let mut b = w_inv * -0.5 - mmt * (0.5 * self.beta);
        symmetrize(&mut b);
        Ok(NormalWishartNat { a: 0.5 * (self.nu - d as f64), b, c: &self.m * self.beta, d: -0.5 * self.beta })
    }

    /// `ln |W|`.
    pub fn log_det_w(&self) -> f64 {
        let chol = spd_cholesky(&self.w).expect("W validated as SPD");
        2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }
}

impl NormalWishartNat {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Recovered `W^{-1} = -2B - c c^T / beta` for a given `beta`.
    fn w_inv_for_beta(&self, beta: f64) -> DMatrix<f64> {
        let mut w_inv = &self.b * -2.0 - (&self.c * self.c.transpose()) / beta;
        symmetrize(&mut w_inv);
        w_inv
    }

    pub fn to_hyper(&self) -> Result<NwHyper> {
        let dim = self.dim();
        if !(self.a.is_finite() && self.d.is_finite())
            || !self.c.iter().all(|x| x.is_finite())
            || !self.b.iter().all(|x| x.is_finite())
        {
            return Err(Error::domain("normal-Wishart block has non-finite entries"));
        }
        if self.d >= 0.0 {
            return Err(Error::domain(format!("beta nonpositive (d = {})", self.d)));
        }
        let beta = -2.0 * self.d;
        let nu = 2.0 * self.a + dim as f64;
        if nu <= dim as f64 - 1.0 {
            return Err(Error::domain(format!("nu = {nu} must exceed D - 1 = {}", dim as f64 - 1.0)));
        }
        let w_inv = self.w_inv_for_beta(beta);
        let chol = spd_cholesky(&w_inv).ok_or_else(|| Error::domain("recovered W^-1 is not positive definite"))?;
        let mut w = chol.inverse();
        symmetrize(&mut w);
        if spd_cholesky(&w).is_none() {
            return Err(Error::domain("recovered W is numerically singular"));
        }
        Ok(NwHyper { m: &self.c / beta, beta, w, nu })
    }

    pub fn in_domain(&self) -> bool {
        self.to_hyper().is_ok()
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        out.push(self.a);
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                out.push(self.b[(i, j)]);
            }
        }
        out.extend(self.c.iter());
        out.push(self.d);
    }

    fn from_flat(d: usize, flat: &[f64]) -> Self {
        let a = flat[0];
        let mut b = DMatrix::zeros(d, d);
        let mut idx = 1;
        for i in 0..d {
            for j in i..d {
                b[(i, j)] = flat[idx];
                b[(j, i)] = flat[idx];
                idx += 1;
            }
        }
        let c = DVector::from_column_slice(&flat[idx..idx + d]);
        NormalWishartNat { a, b, c, d: flat[idx + d] }
    }
}

/// Stacked natural parameters of `q(pi) prod_k q(mu_k, Lambda_k)`; the message
/// exchanged between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalNaturalParams {
    pub dirichlet: DirichletNat,
    pub components: Vec<NormalWishartNat>,
}

/// GMM hyperparameters `(alpha, m, beta, W, nu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmHyperParams {
    pub alpha: Vec<f64>,
    pub components: Vec<NwHyper>,
}

impl GmmHyperParams {
    pub fn layout(&self) -> Layout {
        Layout::new(self.alpha.len(), self.components.first().map_or(0, NwHyper::dim))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::param("need at least one component"));
        }
        if self.alpha.len() != self.components.len() {
            return Err(Error::shape(format!(
                "{} Dirichlet weights but {} components",
                self.alpha.len(),
                self.components.len()
            )));
        }
        let d = self.components[0].dim();
        for (k, a) in self.alpha.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0) {
                return Err(Error::domain(format!("alpha[{k}] = {a} must be positive")));
            }
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.dim() != d {
                return Err(Error::shape(format!("component {k} has dimension {}, expected {d}", c.dim())));
            }
            c.validate().map_err(|e| prefix(e, &format!("component {k}")))?;
        }
        Ok(())
    }
}

fn prefix(err: Error, ctx: &str) -> Error {
    match err {
        Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Maps GMM hyperparameters to the stacked natural-parameter vector.
pub fn hyper_to_natural(h: &GmmHyperParams) -> Result<GlobalNaturalParams> {
    h.validate()?;
    let components = h.components.iter().map(NwHyper::to_natural).collect::<Result<Vec<_>>>()?;
    Ok(GlobalNaturalParams { dirichlet: DirichletNat::from_alpha(&h.alpha), components })
}

/// Inverse of [`hyper_to_natural`]; fails when `phi` lies outside the domain.
pub fn natural_to_hyper(phi: &GlobalNaturalParams) -> Result<GmmHyperParams> {
    let alpha = phi.dirichlet.checked_alpha()?;
    let components = phi
        .components
        .iter()
        .enumerate()
        .map(|(k, c)| c.to_hyper().map_err(|e| prefix(e, &format!("component {k}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(GmmHyperParams { alpha: alpha.iter().copied().collect(), components })
}

/// True iff every block satisfies its domain constraints.
pub fn in_domain(phi: &GlobalNaturalParams) -> bool {
    phi.dirichlet.in_domain() && phi.components.iter().all(NormalWishartNat::in_domain)
}

impl GlobalNaturalParams {
    pub fn layout(&self) -> Layout {
        Layout::new(self.dirichlet.k(), self.components.first().map_or(0, NormalWishartNat::dim))
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.len());
        out.extend(self.dirichlet.eta.iter());
        for c in &self.components {
            c.push_flat(&mut out);
        }
        DVector::from_vec(out)
    }

    pub fn from_flat(layout: Layout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::shape(format!(
                "flat vector has length {}, layout (K={}, D={}) needs {}",
                flat.len(),
                layout.k,
                layout.d,
                layout.len()
            )));
        }
        let eta = DVector::from_column_slice(&flat[..layout.k]);
        let components = flat[layout.k..]
            .chunks_exact(layout.nw_len())
            .map(|chunk| NormalWishartNat::from_flat(layout.d, chunk))
            .collect();
        Ok(GlobalNaturalParams { dirichlet: DirichletNat { eta }, components })
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.layout(), other.layout());
        if a != b || self.components.len() != other.components.len() {
            return Err(Error::shape(format!("layout (K={}, D={}) vs (K={}, D={})", a.k, a.d, b.k, b.d)));
        }
        Ok(())
    }

    /// Component `k` of the result is component `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        GlobalNaturalParams {
            dirichlet: DirichletNat { eta: DVector::from_iterator(perm.len(), perm.iter().map(|&p| self.dirichlet.eta[p])) },
            components: perm.iter().map(|&p| self.components[p].clone()).collect(),
        }
    }

    /// Frobenius distance between two values with the same layout.
    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        let diff = self.to_flat() - other.to_flat();
        self.layout().frobenius_norm(diff.as_slice())
    }
}

/// Strictly positive margins used by [`project_to_domain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMargins {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub w_eig: f64,
}

impl Default for ProjectionMargins {
    fn default() -> Self {
        ProjectionMargins { alpha: 1e-6, beta: 1e-8, nu: 1e-6, w_eig: 1e-8 }
    }
}

/// Repairs `phi` into the interior of the domain.
///
/// Blocks that are already valid are returned untouched. Invalid blocks are
/// repaired coordinate-wise: `alpha` and `beta` are clipped from below, `nu`
/// is raised above `D - 1`, and the recovered `W^{-1}` has its eigenvalues
/// clipped to `margins.w_eig`. The mean coordinate `c` is always preserved.
/// This is a surrogate for the exact Frobenius projection, which has no
/// closed form for the normal-Wishart block.
pub fn project_to_domain(phi: &GlobalNaturalParams, margins: &ProjectionMargins) -> GlobalNaturalParams {
    let dirichlet = if phi.dirichlet.in_domain() {
        phi.dirichlet.clone()
    } else {
        let eta = phi.dirichlet.eta.map(|e| {
            let alpha = if e.is_nan() { margins.alpha } else { (e + 1.0).max(margins.alpha) };
            alpha.min(f64::MAX) - 1.0
        });
        DirichletNat { eta }
    };
    let components = phi
        .components
        .iter()
        .map(|c| if c.in_domain() { c.clone() } else { project_nw(c, margins) })
        .collect();
    GlobalNaturalParams { dirichlet, components }
}

fn project_nw(nw: &NormalWishartNat, margins: &ProjectionMargins) -> NormalWishartNat {
    let dim = nw.dim();
    let finite_or = |x: f64, fallback: f64| if x.is_finite() { x } else { fallback };
    let c = nw.c.map(|x| finite_or(x, 0.0));
    let b = nw.b.map(|x| finite_or(x, 0.0));
    let beta = finite_or(-2.0 * nw.d, margins.beta).max(margins.beta);
    let nu = finite_or(2.0 * nw.a + dim as f64, dim as f64).max(dim as f64 - 1.0 + margins.nu);
    let a = 0.5 * (nu - dim as f64);
    let spectral = clip_w_inv(&b, &c, a, beta, margins.w_eig);
    let shrunk = shrink_mean(&b, &c, a, beta, margins.w_eig);
    if block_distance(nw, &shrunk) < block_distance(nw, &spectral) {
        shrunk
    } else {
        spectral
    }
}

// Keeps c and clips the spectrum of the recovered W^{-1}. Cheap when beta is
// healthy, but with a collapsed beta the rebuilt B carries c c^T / beta.
fn clip_w_inv(b: &DMatrix<f64>, c: &DVector<f64>, a: f64, beta: f64, w_eig: f64) -> NormalWishartNat {
    let mut w_inv = b * -2.0 - (c * c.transpose()) / beta;
    symmetrize(&mut w_inv);
    let cct_over_beta = (c * c.transpose()) / beta;
    let eig = w_inv.symmetric_eigen();
    // Rebuilding B reintroduces rounding of size ~eps * |c c^T / beta|; widen
    // the eigenvalue floor until the rebuilt block is strictly inside.
    let mut floor = w_eig;
    loop {
        let clipped = eig.eigenvalues.map(|l| if l.is_finite() { l.max(floor) } else { floor });
        let mut repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(&mut repaired);
        let mut b = (&repaired + &cct_over_beta) * -0.5;
        symmetrize(&mut b);
        let out = NormalWishartNat { a, b, c: c.clone(), d: -0.5 * beta };
        if out.in_domain() || !floor.is_finite() {
            return out;
        }
        floor *= 10.0;
    }
}

// Clips the spectrum of -2B and scales c toward zero just enough for
// W^{-1} = -2B - c c^T / beta to stay above the floor.
fn shrink_mean(b: &DMatrix<f64>, c: &DVector<f64>, a: f64, beta: f64, w_eig: f64) -> NormalWishartNat {
    let mut s = b * -2.0;
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let proj = eig.eigenvectors.transpose() * c;
    let mut floor = w_eig;
    loop {
        let clipped = eig.eigenvalues.map(|l| if l.is_finite() { l.max(2.0 * floor) } else { 2.0 * floor });
        let q: f64 = proj.iter().zip(clipped.iter()).map(|(p, l)| p * p / (l - floor)).sum();
        let scale = if q > beta { (beta / q).sqrt() } else { 1.0 };
        let mut repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(&mut repaired);
        let out = NormalWishartNat { a, b: repaired * -0.5, c: c * scale, d: -0.5 * beta };
        if out.in_domain() || !floor.is_finite() {
            return out;
        }
        floor *= 10.0;
    }
}

fn block_distance(x: &NormalWishartNat, y: &NormalWishartNat) -> f64 {
    let sq = |v: f64| if v.is_finite() { v * v } else { f64::INFINITY };
    let b: f64 = x.b.iter().zip(y.b.iter()).map(|(p, q)| sq(p - q)).sum();
    let c: f64 = x.c.iter().zip(y.c.iter()).map(|(p, q)| sq(p - q)).sum();
    sq(x.a - y.a) + b + c + sq(x.d - y.d)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= 1e-10 * scale))
}

/// Cholesky factorization that also rejects non-finite input and zero pivots.
pub(crate) fn spd_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if !m.iter().all(|x| x.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    chol.l_dirty().diagonal().iter().all(|x| *x > 0.0 && x.is_finite()).then_some(chol)
}
