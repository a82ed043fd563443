//! Evaluation metrics: component alignment, KL cost to the ground truth and
//! best-permutation clustering accuracy.

use nalgebra::{DMatrix, DVector};

use crate::algorithms::NodeState;
use crate::error::{Error, Result};
use crate::expfam::{kl_global, GlobalNaturalParams};
use crate::gmm::Responsibilities;

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `assign` with `assign[row] = column`. Shortest augmenting paths
/// with row/column potentials, `O(n^3)`.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::shape(format!("assignment needs a square matrix, got {}x{}", n, cost.ncols())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("assignment cost matrix has non-finite entries"));
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(r0 - 1, col - 1)] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assign[owner[col] - 1] = col - 1;
        }
    }
    Ok(assign)
}

fn posterior_means(phi: &GlobalNaturalParams) -> Vec<DVector<f64>> {
    phi.components.iter().map(|c| &c.c / (-2.0 * c.d)).collect()
}

/// Reorders the components of `estimate` to best match `truth`, pairing
/// posterior means by minimum total Euclidean distance.
pub fn align_to_truth(estimate: &GlobalNaturalParams, truth: &GlobalNaturalParams) -> Result<GlobalNaturalParams> {
    estimate.check_same_layout(truth)?;
    let (est, tru) = (posterior_means(estimate), posterior_means(truth));
    let k = tru.len();
    let cost = DMatrix::from_fn(k, k, |i, j| (&tru[i] - &est[j]).norm());
    Ok(estimate.permuted(&hungarian(&cost)?))
}

/// Per-node `KL(q_i || truth)` after component alignment.
pub fn node_costs(phis: &[&GlobalNaturalParams], truth: &GlobalNaturalParams) -> Result<Vec<f64>> {
    phis.iter().map(|phi| kl_global(&align_to_truth(phi, truth)?, truth)).collect()
}

/// Population mean and standard deviation of the per-node KL cost.
pub fn mean_kl_cost(states: &[NodeState], truth: &GlobalNaturalParams) -> Result<(f64, f64)> {
    if states.is_empty() {
        return Err(Error::param("no node states to evaluate"));
    }
    let phis: Vec<&GlobalNaturalParams> = states.iter().map(|s| &s.phi).collect();
    Ok(crate::algorithms::mean_std(&node_costs(&phis, truth)?))
}

/// Fraction of points whose hard assignment matches the true label under the
/// best single cluster-to-label permutation, pooled over all nodes.
pub fn clustering_accuracy(r_all: &[Responsibilities], labels: &[Vec<usize>]) -> Result<f64> {
    if r_all.len() != labels.len() {
        return Err(Error::shape(format!("{} responsibility blocks for {} label blocks", r_all.len(), labels.len())));
    }
    let k = r_all.iter().map(|r| r.r.ncols()).max().unwrap_or(0);
    let mut confusion = DMatrix::<f64>::zeros(k, k);
    let mut total = 0usize;
    for (r, lab) in r_all.iter().zip(labels) {
        if r.r.nrows() != lab.len() || r.r.ncols() != k {
            return Err(Error::shape(format!("{}x{} responsibilities for {} labels", r.r.nrows(), r.r.ncols(), lab.len())));
        }
        for (cluster, &label) in r.hard_assignments().into_iter().zip(lab) {
            if label >= k {
                return Err(Error::param(format!("label {label} outside 0..{k}")));
            }
            confusion[(cluster, label)] += 1.0;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::param("no labelled points"));
    }
    let assign = hungarian(&(-&confusion))?;
    let correct: f64 = assign.iter().enumerate().map(|(c, &l)| confusion[(c, l)]).sum();
    Ok(correct / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::hyper_to_natural;
    use crate::testutil::random_hyper;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn go(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[(row, c)] + go(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.ncols()])
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(n in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = DMatrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0));
            let assign = hungarian(&cost).unwrap();
            let mut seen = assign.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
            prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_small_cases() {
        let cost = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        assert_eq!(hungarian(&cost).unwrap(), vec![1, 0, 2]);
        assert!(hungarian(&DMatrix::zeros(2, 3)).is_err());
        assert_eq!(hungarian(&DMatrix::zeros(0, 0)).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn relabelled_estimate_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = hyper_to_natural(&random_hyper(&mut rng, 3, 2)).unwrap();
        let shuffled = truth.permuted(&[2, 0, 1]);
        let costs = node_costs(&[&truth, &shuffled], &truth).unwrap();
        assert!(costs.iter().all(|c| c.abs() < 1e-10), "{costs:?}");
    }

    #[test]
    fn two_point_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = hyper_to_natural(&random_hyper(&mut rng, 2, 2)).unwrap();
        let other = hyper_to_natural(&random_hyper(&mut rng, 2, 2)).unwrap();
        let r = Responsibilities { r: DMatrix::zeros(0, 2) };
        let state = |phi: &GlobalNaturalParams| NodeState { phi: phi.clone(), lambda: DVector::zeros(0), r: r.clone() };
        assert_eq!(mean_kl_cost(&[state(&truth), state(&truth)], &truth).unwrap(), (0.0, 0.0));
        let kl = node_costs(&[&other], &truth).unwrap()[0];
        let (mean, std) = mean_kl_cost(&[state(&truth), state(&other)], &truth).unwrap();
        assert!((mean - kl / 2.0).abs() < 1e-12 && (std - kl / 2.0).abs() < 1e-12);
        assert!(mean_kl_cost(&[], &truth).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let labels = vec![vec![0, 0, 1, 2], vec![2, 1]];
        let swapped: Vec<Responsibilities> = labels
            .iter()
            .map(|l| Responsibilities::one_hot(&l.iter().map(|&x| (x + 1) % 3).collect::<Vec<_>>(), 3).unwrap())
            .collect();
        assert_eq!(clustering_accuracy(&swapped, &labels).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let labels = vec![(0..n).map(|_| rng.random_range(0..2)).collect::<Vec<usize>>()];
        let uniform = vec![Responsibilities { r: DMatrix::from_element(n, 2, 0.5) }];
        let acc = clustering_accuracy(&uniform, &labels).unwrap();
        assert!((0.4..=0.6).contains(&acc), "{acc}");

        assert!(clustering_accuracy(&uniform, &[vec![0; 3]]).is_err());
        assert!(clustering_accuracy(&uniform, &[]).is_err());
    }
}
