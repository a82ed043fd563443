//! Labelled datasets: synthetic mixture draws, node partitioning and the
//! complete-data ground-truth posterior.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::GlobalNaturalParams;
use crate::gmm::{local_vbm_optimum, GmmModelConfig, NodeDataset, Responsibilities};

/// Points with optional ground-truth labels and a node assignment per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// One point per row.
    pub points: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub node_of: Vec<usize>,
    pub n_nodes: usize,
}

impl LabeledDataset {
    pub fn new(points: DMatrix<f64>, labels: Option<Vec<usize>>, node_of: Vec<usize>, n_nodes: usize) -> Result<Self> {
        if node_of.len() != points.nrows() {
            return Err(Error::shape(format!("{} node assignments for {} points", node_of.len(), points.nrows())));
        }
        if let Some(&bad) = node_of.iter().find(|&&i| i >= n_nodes) {
            return Err(Error::param(format!("point assigned to node {bad} outside 0..{n_nodes}")));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(Error::shape(format!("{} labels for {} points", l.len(), points.nrows())));
            }
        }
        Ok(LabeledDataset { points, labels, node_of, n_nodes })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    fn rows_of(&self, node: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.node_of[r] == node).collect()
    }

    /// Per-node datasets, keeping the original point order within each node.
    pub fn node_datasets(&self) -> Vec<NodeDataset> {
        (0..self.n_nodes)
            .map(|i| {
                let rows = self.rows_of(i);
                NodeDataset::new(i, self.points.select_rows(rows.iter()))
            })
            .collect()
    }

    pub fn node_labels(&self) -> Option<Vec<Vec<usize>>> {
        let labels = self.labels.as_ref()?;
        Some((0..self.n_nodes).map(|i| self.rows_of(i).into_iter().map(|r| labels[r]).collect()).collect())
    }

    pub fn pooled(&self) -> NodeDataset {
        NodeDataset::new(0, self.points.clone())
    }

    pub fn coordinate_mean(&self) -> DVector<f64> {
        let n = self.len().max(1) as f64;
        DVector::from_iterator(self.dim(), self.points.column_iter().map(|col| col.sum() / n))
    }

    /// Per-coordinate population standard deviation of all points.
    pub fn coordinate_std(&self) -> DVector<f64> {
        let n = self.len().max(1) as f64;
        DVector::from_iterator(
            self.dim(),
            self.points.column_iter().map(|col| {
                let mean = col.sum() / n;
                (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
            }),
        )
    }
}

/// Generator specification for Gaussian-mixture data spread over nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub node_counts: Vec<usize>,
    /// Per-node component proportions; `weights` is used for every node when absent.
    pub proportions: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Three overlapping clusters on 50 nodes with 100 points each. Nodes
    /// 0..15, 15..35 and 35..50 are dominated by components 1, 2 and 3.
    pub fn three_cluster_imbalanced(seed: u64) -> Self {
        let groups = [(15, [0.8, 0.1, 0.1]), (20, [0.05, 0.9, 0.05]), (15, [0.2, 0.2, 0.6])];
        SyntheticSpec {
            weights: vec![0.32, 0.45, 0.23],
            means: vec![vec![1.5, 3.5], vec![4.0, 4.0], vec![6.5, 4.5]],
            covariances: vec![
                vec![vec![0.6, 0.4], vec![0.4, 0.6]],
                vec![vec![0.6, -0.4], vec![-0.4, 0.6]],
                vec![vec![0.6, 0.4], vec![0.4, 0.6]],
            ],
            node_counts: vec![100; 50],
            proportions: Some(groups.iter().flat_map(|(n, p)| std::iter::repeat_n(p.to_vec(), *n)).collect()),
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn check_simplex(p: &[f64], what: &str) -> Result<()> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("{what} must be non-negative and sum to 1 (sum = {sum})")));
        }
        Ok(())
    }

    /// Checks shapes and simplex constraints and factors the covariances.
    pub fn cholesky_factors(&self) -> Result<Vec<DMatrix<f64>>> {
        let (k, d) = (self.k(), self.d());
        if k == 0 || d == 0 {
            return Err(Error::param("need at least one component and one dimension"));
        }
        Self::check_simplex(&self.weights, "mixing weights")?;
        if self.means.len() != k || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::shape(format!("expected {k} means of length {d}")));
        }
        if self.covariances.len() != k {
            return Err(Error::shape(format!("expected {k} covariances")));
        }
        if let Some(p) = &self.proportions {
            if p.len() != self.node_counts.len() {
                return Err(Error::shape(format!("{} proportion rows for {} nodes", p.len(), self.node_counts.len())));
            }
            for (i, row) in p.iter().enumerate() {
                if row.len() != k {
                    return Err(Error::shape(format!("node {i}: {} proportions for {k} components", row.len())));
                }
                Self::check_simplex(row, &format!("node {i} proportions"))?;
            }
        }
        self.covariances
            .iter()
            .enumerate()
            .map(|(c, rows)| {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::shape(format!("covariance {c} is not {d}x{d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                if (0..d).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
                    return Err(Error::param(format!("covariance {c} is not symmetric")));
                }
                m.cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::param(format!("covariance {c} is not positive definite (Cholesky failed)")))
            })
            .collect()
    }
}

/// Splits `n` items by `p` with largest-remainder rounding; ties go to the lower index.
pub fn exact_counts(n: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - counts[a] as f64, raw[b] - counts[b] as f64);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws the dataset described by `spec`. Each node receives exactly the
/// rounded per-component counts, in shuffled order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let factors = spec.cholesky_factors()?;
    let d = spec.d();
    let means: Vec<DVector<f64>> = spec.means.iter().map(|m| DVector::from_column_slice(m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.node_counts.iter().sum();
    let mut points = DMatrix::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    let mut node_of = Vec::with_capacity(total);
    for (node, &count) in spec.node_counts.iter().enumerate() {
        let p = spec.proportions.as_ref().map_or(&spec.weights, |rows| &rows[node]);
        let mut node_labels: Vec<usize> =
            exact_counts(count, p).into_iter().enumerate().flat_map(|(k, c)| std::iter::repeat_n(k, c)).collect();
        node_labels.shuffle(&mut rng);
        for k in node_labels {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &means[k] + &factors[k] * z;
            points.row_mut(labels.len()).copy_from(&x.transpose());
            labels.push(k);
            node_of.push(node);
        }
    }
    LabeledDataset::new(points, Some(labels), node_of, spec.node_counts.len())
}

/// Complete-data conjugate posterior from the pooled points and their true
/// labels, with replication factor 1.
pub fn ground_truth_posterior(data: &LabeledDataset, model: &GmmModelConfig) -> Result<GlobalNaturalParams> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::param("ground truth needs labelled data"))?;
    if data.dim() != model.d {
        return Err(Error::shape(format!("data has dimension {}, model expects {}", data.dim(), model.d)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.k) {
        return Err(Error::param(format!("label {bad} outside 0..{}", model.k)));
    }
    let r = Responsibilities::one_hot(labels, model.k)?;
    local_vbm_optimum(&data.pooled(), &r, &model.with_replication(1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPolicy {
    #[default]
    UniformRandom,
    Contiguous,
}

/// Assigns points to `n` nodes in nearly equal shares (sizes differ by at
/// most one). `UniformRandom` shuffles with `seed` first.
pub fn partition_to_nodes(data: &LabeledDataset, n: usize, policy: PartitionPolicy, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::param("need at least one node"));
    }
    let total = data.len();
    let mut order: Vec<usize> = (0..total).collect();
    if policy == PartitionPolicy::UniformRandom {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let (base, extra) = (total / n, total % n);
    let mut node_of = vec![0; total];
    let mut pos = 0;
    for node in 0..n {
        let size = base + usize::from(node < extra);
        for &r in &order[pos..pos + size] {
            node_of[r] = node;
        }
        pos += size;
    }
    LabeledDataset::new(data.points.clone(), data.labels.clone(), node_of, n)
}
