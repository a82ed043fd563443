//! Seeded generators shared by unit and integration tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::expfam::{GmmHyperParams, NwHyper};

/// Random SPD matrix `A A^T + 0.3 I` with `A` uniform in `[-1, 1]`.
pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

/// Random valid normal-Wishart hyperparameters of moderate scale.
pub fn random_nw<R: Rng>(rng: &mut R, d: usize) -> NwHyper {
    NwHyper {
        m: DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0)),
        beta: rng.random_range(0.1..10.0),
        w: random_spd(rng, d),
        nu: d as f64 - 0.5 + rng.random_range(0.0..10.0),
    }
}

pub fn random_hyper<R: Rng>(rng: &mut R, k: usize, d: usize) -> GmmHyperParams {
    GmmHyperParams {
        alpha: (0..k).map(|_| rng.random_range(0.5..20.0)).collect(),
        components: (0..k).map(|_| random_nw(rng, d)).collect(),
    }
}
