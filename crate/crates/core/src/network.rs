//! Undirected sensor-network topologies and diffusion combination weights.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of fresh placements tried by [`generate_geometric_graph`].
pub const GEOMETRIC_RETRY_CAP: usize = 1000;

/// Undirected graph without self-loops; neighbour lists are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    adjacency: Vec<Vec<usize>>,
    positions: Option<Vec<[f64; 2]>>,
}

impl Network {
    /// Builds a network from an undirected edge list. Duplicate edges are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::param(format!("edge ({u}, {v}) references a node outside 0..{n}")));
            }
            if u == v {
                return Err(Error::param(format!("self-loop at node {u}")));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Network { adjacency, positions: None })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::shape(format!("{} positions for {} nodes", positions.len(), self.len())));
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        Self::from_edges(n, &edges).expect("valid by construction")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
        Self::from_edges(n, &edges).expect("valid by construction")
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mean_degree(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        2.0 * self.edge_count() as f64 / self.len() as f64
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, nbrs)| nbrs.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    /// Text form: a `nodes <n>` header, one `u v` line per edge (0-indexed),
    /// then optionally a `positions` line followed by one `x y` line per node.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("nodes {}\n", self.len());
        for (u, v) in self.edges() {
            writeln!(out, "{u} {v}").unwrap();
        }
        if let Some(pos) = &self.positions {
            out.push_str("positions\n");
            for p in pos {
                writeln!(out, "{:?} {:?}", p[0], p[1]).unwrap();
            }
        }
        out
    }

    /// Parses [`Network::to_edge_list`] output. Blank lines and `#` comments are
    /// ignored; without a `nodes` header the node count is the largest index + 1.
    pub fn parse_edge_list(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, column: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            column,
            message,
        };
        let mut declared = None;
        let mut edges = Vec::new();
        let mut positions: Option<Vec<[f64; 2]>> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match (fields[0], &mut positions) {
                ("nodes", None) if fields.len() == 2 => {
                    let n = fields[1].parse().map_err(|e| perr(lineno, 2, format!("bad node count: {e}")))?;
                    declared = Some(n);
                }
                ("positions", None) if fields.len() == 1 => positions = Some(Vec::new()),
                (_, Some(pos)) => {
                    if fields.len() != 2 {
                        return Err(perr(lineno, 1, format!("expected `x y`, got {} fields", fields.len())));
                    }
                    let mut xy = [0.0; 2];
                    for (c, f) in fields.iter().enumerate() {
                        xy[c] = f.parse().map_err(|e| perr(lineno, c + 1, format!("bad coordinate: {e}")))?;
                    }
                    pos.push(xy);
                }
                (_, None) => {
                    if fields.len() != 2 {
                        return Err(perr(lineno, 1, format!("expected `u v`, got {} fields", fields.len())));
                    }
                    let mut uv = [0usize; 2];
                    for (c, f) in fields.iter().enumerate() {
                        uv[c] = f.parse().map_err(|e| perr(lineno, c + 1, format!("bad node index: {e}")))?;
                    }
                    edges.push((uv[0], uv[1]));
                }
            }
        }
        let inferred = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
        let n = declared.unwrap_or(inferred.max(positions.as_ref().map_or(0, Vec::len)));
        let net = Self::from_edges(n, &edges).map_err(|e| perr(0, 0, e.to_string()))?;
        match positions {
            Some(pos) => net.with_positions(pos).map_err(|e| perr(0, 0, e.to_string())),
            None => Ok(net),
        }
    }
}

/// True iff every node is reachable from node 0.
pub fn is_connected(net: &Network) -> bool {
    if net.len() <= 1 {
        return true;
    }
    let mut seen = vec![false; net.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in net.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == net.len()
}

/// Places `n` nodes uniformly in a `side x side` square and links pairs within
/// `radius`. Placements are redrawn from the same seeded stream until the
/// graph is connected.
pub fn generate_geometric_graph(n: usize, side: f64, radius: f64, seed: u64) -> Result<Network> {
    if n == 0 {
        return Err(Error::param("need at least one node"));
    }
    if !(side > 0.0 && side.is_finite()) || !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param(format!("side ({side}) and radius ({radius}) must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = radius * radius;
    for _ in 0..GEOMETRIC_RETRY_CAP {
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side)]).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let dx = pos[u][0] - pos[v][0];
                let dy = pos[u][1] - pos[v][1];
                if dx * dx + dy * dy <= r2 {
                    edges.push((u, v));
                }
            }
        }
        let net = Network::from_edges(n, &edges)?.with_positions(pos)?;
        if is_connected(&net) {
            return Ok(net);
        }
    }
    Err(Error::Disconnected { attempts: GEOMETRIC_RETRY_CAP })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    #[default]
    NearestNeighbor,
    Metropolis,
}

/// Row-stochastic combination weights supported on closed neighbourhoods.
/// Each row lists `(j, w_ij)` in increasing `j`, including the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl CombinationWeights {
    pub fn new(net: &Network, rule: WeightRule) -> Self {
        match rule {
            WeightRule::NearestNeighbor => nearest_neighbor_weights(net),
            WeightRule::Metropolis => metropolis_weights(net),
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().find(|(c, _)| *c == j).map_or(0.0, |(_, w)| *w)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.rows.len();
        self.rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; n];
                for &(j, w) in row {
                    dense[j] = w;
                }
                dense
            })
            .collect()
    }
}

fn closed_neighborhood(net: &Network, i: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = net.neighbors(i).to_vec();
    let pos = cols.partition_point(|&j| j < i);
    cols.insert(pos, i);
    cols
}

/// `w_ij = 1 / (|N_i| + 1)` for `j` in `N_i ∪ {i}`.
pub fn nearest_neighbor_weights(net: &Network) -> CombinationWeights {
    let rows = (0..net.len())
        .map(|i| {
            let w = 1.0 / (net.degree(i) + 1) as f64;
            closed_neighborhood(net, i).into_iter().map(|j| (j, w)).collect()
        })
        .collect();
    CombinationWeights { rows }
}

/// Metropolis rule: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges and the
/// remainder on the diagonal. Symmetric, hence doubly stochastic.
pub fn metropolis_weights(net: &Network) -> CombinationWeights {
    let rows = (0..net.len())
        .map(|i| {
            let mut self_w = 1.0;
            let mut row: Vec<(usize, f64)> = net
                .neighbors(i)
                .iter()
                .map(|&j| {
                    let w = 1.0 / (1 + net.degree(i).max(net.degree(j))) as f64;
                    self_w -= w;
                    (j, w)
                })
                .collect();
            let pos = row.partition_point(|&(j, _)| j < i);
            row.insert(pos, (i, self_w));
            row
        })
        .collect();
    CombinationWeights { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_row_stochastic(w: &CombinationWeights, net: &Network) {
        for i in 0..w.len() {
            let s: f64 = w.row(i).iter().map(|(_, x)| x).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
            for &(j, x) in w.row(i) {
                assert!(x >= 0.0);
                assert!(j == i || net.neighbors(i).contains(&j));
            }
        }
    }

    #[test]
    fn connectivity_examples() {
        assert!(is_connected(&Network::complete(5)));
        assert!(!is_connected(&Network::from_edges(4, &[(0, 1), (2, 3)]).unwrap()));
        assert!(is_connected(&Network::path(10)));
    }

    #[test]
    fn rejects_self_loops_and_out_of_range() {
        assert!(Network::from_edges(3, &[(1, 1)]).is_err());
        assert!(Network::from_edges(3, &[(0, 3)]).is_err());
    }

    #[test]
    fn geometric_small_cases() {
        let one = generate_geometric_graph(1, 3.5, 0.8, 1).unwrap();
        assert_eq!(one.edge_count(), 0);
        for seed in 0..20 {
            let two = generate_geometric_graph(2, 1.0, 2f64.sqrt(), seed).unwrap();
            assert_eq!(two.edge_count(), 1);
        }
        assert!(generate_geometric_graph(0, 1.0, 1.0, 0).is_err());
        assert!(generate_geometric_graph(3, -1.0, 1.0, 0).is_err());
    }

    #[test]
    fn geometric_fails_when_never_connected() {
        let err = generate_geometric_graph(50, 100.0, 0.01, 3).unwrap_err();
        assert!(err.to_string().contains("could not generate connected graph"), "{err}");
    }

    #[test]
    fn fifty_node_setup_is_connected_with_plausible_degree() {
        for seed in [1, 2, 3, 42] {
            let net = generate_geometric_graph(50, 3.5, 0.8, seed).unwrap();
            assert!(is_connected(&net));
            let md = net.mean_degree();
            assert!((3.0..=9.0).contains(&md), "seed {seed}: mean degree {md}");
            for i in 0..net.len() {
                assert!(!net.neighbors(i).contains(&i));
                for &j in net.neighbors(i) {
                    assert!(net.neighbors(j).contains(&i));
                }
            }
            assert_row_stochastic(&nearest_neighbor_weights(&net), &net);
            assert_row_stochastic(&metropolis_weights(&net), &net);
        }
    }

    #[test]
    fn nearest_neighbor_examples() {
        let single = Network::from_edges(1, &[]).unwrap();
        assert_eq!(nearest_neighbor_weights(&single).row(0), &[(0, 1.0)]);
        let star = Network::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let w = nearest_neighbor_weights(&star);
        assert_eq!(w.row(0), &[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]);
        assert_eq!(w.row(2), &[(0, 0.5), (2, 0.5)]);
    }

    #[test]
    fn metropolis_examples() {
        let w = metropolis_weights(&Network::path(2));
        assert_eq!(w.to_dense(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let star = Network::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let w = metropolis_weights(&star);
        assert_eq!(w.row(0), &[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)]);
        assert_eq!(w.row(1), &[(0, 0.25), (1, 0.75)]);
    }

    #[test]
    fn metropolis_is_doubly_stochastic_and_averages() {
        for seed in 0..5 {
            let net = generate_geometric_graph(10, 3.5 * (10f64 / 50.0).sqrt(), 0.8, seed).unwrap();
            let w = metropolis_weights(&net);
            let dense = w.to_dense();
            for j in 0..10 {
                let col: f64 = dense.iter().map(|r| r[j]).sum();
                assert!((col - 1.0).abs() < 1e-12);
                for i in 0..10 {
                    assert_eq!(dense[i][j], dense[j][i]);
                }
            }
            let mut x: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
            let avg = x.iter().sum::<f64>() / 10.0;
            for _ in 0..20_000 {
                x = (0..10).map(|i| w.row(i).iter().map(|&(j, wij)| wij * x[j]).sum()).collect();
            }
            assert!(x.iter().all(|v| (v - avg).abs() < 1e-8), "seed {seed}: {x:?}");
        }
    }

    #[test]
    fn edge_list_roundtrip() {
        let net = generate_geometric_graph(12, 2.0, 0.8, 9).unwrap();
        let text = net.to_edge_list();
        let back = Network::parse_edge_list(&text, "mem").unwrap();
        assert_eq!(back, net);
        let bare = Network::parse_edge_list("# comment\n0 1\n1 2\n\n", "mem").unwrap();
        assert_eq!(bare, Network::path(3));
        let isolated = Network::parse_edge_list("nodes 4\n0 1\n", "mem").unwrap();
        assert_eq!(isolated.len(), 4);
        let err = Network::parse_edge_list("0 1\n1 x\n", "net.txt").unwrap_err();
        assert!(err.to_string().starts_with("net.txt:2:2"), "{err}");
    }
}
