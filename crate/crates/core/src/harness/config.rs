//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgoConfig;
use crate::error::{Error, Result};
use crate::harness::data::PartitionPolicy;
use crate::harness::io::read_to_string;

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_noise() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Applied to every algorithm.
    #[serde(default = "one")]
    pub eval_stride: usize,
    #[serde(default = "one")]
    pub trials: usize,
    pub network: NetworkSpec,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub algorithms: Vec<AlgoConfig>,
}

/// Either an edge-list file or a random geometric graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub edge_list: Option<PathBuf>,
    pub nodes: Option<usize>,
    pub side: Option<f64>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticConfig),
    Csv(CsvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Fixed number of points at every node.
    pub points_per_node: Option<usize>,
    /// Inclusive range for per-node counts drawn uniformly.
    pub points_range: Option<[usize; 2]>,
    /// Consecutive node groups sharing a component-proportion row; must cover all nodes.
    #[serde(default)]
    pub groups: Vec<NodeGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGroup {
    pub nodes: usize,
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvConfig {
    pub path: PathBuf,
    #[serde(default = "yes")]
    pub has_labels: bool,
    /// How points are spread over nodes; `None` keeps a `node` column from the file.
    pub partition: Option<PartitionPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub k: usize,
    pub alpha0: Option<f64>,
    pub beta0: Option<f64>,
    pub nu0: Option<f64>,
    pub m0: Option<Vec<f64>>,
    pub w0: Option<Vec<Vec<f64>>>,
    /// Spread of the initial component means around the data mean, in units
    /// of the per-coordinate data std.
    #[serde(default = "default_noise")]
    pub init_noise: f64,
    /// Draw separate initial values per node instead of one shared draw.
    #[serde(default)]
    pub init_per_node: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse { path: origin.to_string(), line, column, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative input paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&read_to_string(path)?, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &mut self.network.edge_list {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let DataSpec::Csv(c) = &mut self.data {
            if c.path.is_relative() {
                c.path = base.join(&c.path);
            }
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut paths = Vec::new();
        paths.extend(self.network.edge_list.iter());
        if let DataSpec::Csv(c) = &self.data {
            paths.push(&c.path);
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.algorithms.is_empty() {
            return cfg_err("at least one [[algorithms]] entry is required".into());
        }
        if self.eval_stride == 0 || self.trials == 0 {
            return cfg_err("eval_stride and trials must be at least 1".into());
        }
        for a in &self.algorithms {
            a.validate()?;
        }
        let n = self.network.node_count_hint();
        match (&self.network.edge_list, n, self.network.side, self.network.radius) {
            (Some(_), None, None, None) | (None, Some(_), Some(_), Some(_)) => {}
            _ => return cfg_err("network needs either `edge_list` or all of `nodes`, `side`, `radius`".into()),
        }
        if self.model.k == 0 {
            return cfg_err("model.k must be at least 1".into());
        }
        if !(self.model.init_noise >= 0.0 && self.model.init_noise.is_finite()) {
            return cfg_err("model.init_noise must be non-negative".into());
        }
        if let DataSpec::Synthetic(s) = &self.data {
            if s.points_per_node.is_some() == s.points_range.is_some() {
                return cfg_err("synthetic data needs exactly one of `points_per_node`, `points_range`".into());
            }
            if let Some([lo, hi]) = s.points_range {
                if lo > hi {
                    return cfg_err(format!("points_range [{lo}, {hi}] is empty"));
                }
            }
            if s.weights.len() != self.model.k {
                return cfg_err(format!("{} mixing weights for model.k = {}", s.weights.len(), self.model.k));
            }
            if let (Some(n), false) = (n, s.groups.is_empty()) {
                let covered: usize = s.groups.iter().map(|g| g.nodes).sum();
                if covered != n {
                    return cfg_err(format!("data groups cover {covered} nodes, network has {n}"));
                }
            }
        }
        Ok(())
    }
}

impl NetworkSpec {
    pub fn node_count_hint(&self) -> Option<usize> {
        self.nodes
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::AlgoKind;

    const MINIMAL: &str = r#"
seed = 3
[network]
nodes = 4
side = 1.0
radius = 0.9
[data]
source = "synthetic"
weights = [0.5, 0.5]
means = [[0.0], [3.0]]
covariances = [[[1.0]], [[1.0]]]
points_per_node = 10
[model]
k = 2
[[algorithms]]
kind = "dsvb"
tau = 0.2
d0 = 1.0
max_iters = 5
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "m.toml").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.model.init_noise, 1.0);
        assert!(!cfg.model.init_per_node);
        assert_eq!(cfg.algorithms[0].kind, AlgoKind::Dsvb);
        assert!(matches!(cfg.data, DataSpec::Synthetic(_)));
    }

    #[test]
    fn reports_position_of_bad_values() {
        let text = MINIMAL.replace("k = 2", "k = \"two\"");
        let err = ExperimentConfig::from_toml(&text, "m.toml").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 14, .. }), "{err}");
        assert!(err.is_usage());
    }

    #[test]
    fn semantic_errors() {
        let missing_tau = MINIMAL.replace("tau = 0.2\n", "");
        assert!(ExperimentConfig::from_toml(&missing_tau, "m").unwrap_err().to_string().contains("tau"));
        let both = MINIMAL.replace("points_per_node = 10", "points_per_node = 10\npoints_range = [1, 2]");
        assert!(ExperimentConfig::from_toml(&both, "m").is_err());
        let no_net = MINIMAL.replace("side = 1.0\n", "");
        assert!(ExperimentConfig::from_toml(&no_net, "m").is_err());
        let typo = MINIMAL.replace("seed = 3", "sed = 3");
        assert!(ExperimentConfig::from_toml(&typo, "m").is_err());
        let groups = format!("{MINIMAL}\n[[data.groups]]\nnodes = 3\nproportions = [1.0, 0.0]\n");
        let err = ExperimentConfig::from_toml(&groups, "m").unwrap_err();
        assert!(err.to_string().contains("cover 3 nodes"), "{err}");
    }

    #[test]
    fn missing_referenced_path_is_a_config_error() {
        let text = MINIMAL.replace("nodes = 4\nside = 1.0\nradius = 0.9", "edge_list = \"nowhere.txt\"");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("nowhere.txt"), "{err}");
        assert!(err.is_usage());
        let err = ExperimentConfig::load(&dir.path().join("absent.toml")).unwrap_err();
        assert!(err.to_string().contains("absent.toml") && err.is_usage());
    }
}
