//! Synthetic hierarchical linear-regression task distribution.
//!
//! A tree of parameter vectors is grown from a root by adding Gaussian
//! offsets level by level; the leaves are the cluster centers. A task picks a
//! leaf uniformly, jitters its center slightly, and draws points
//! `y = <P, x> + noise` with every coordinate of `x` uniform on
//! `[input_low, input_high]`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// Jitter of a task around its leaf center, as a fraction of the last level scale.
pub const DEFAULT_JITTER_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGeneratorConfig {
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    /// Branch count per level below the root.
    #[serde(default = "defaults::branching")]
    pub branching: Vec<usize>,
    /// Offset std per level, root first; one longer than `branching`.
    #[serde(default = "defaults::level_scales")]
    pub level_scales: Vec<f64>,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default = "defaults::input_low")]
    pub input_low: f64,
    #[serde(default = "defaults::input_high")]
    pub input_high: f64,
    /// Per-task jitter std; `None` means `level_scales.last() * 0.1`.
    #[serde(default)]
    pub jitter_std: Option<f64>,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

mod defaults {
    pub fn dim() -> usize {
        64
    }
    pub fn branching() -> Vec<usize> {
        vec![2, 2]
    }
    pub fn level_scales() -> Vec<f64> {
        vec![1.0, 1.0, 0.5]
    }
    pub fn noise_std() -> f64 {
        0.01
    }
    pub fn input_low() -> f64 {
        -5.0
    }
    pub fn input_high() -> f64 {
        5.0
    }
    pub fn seed() -> u64 {
        42
    }
}

impl Default for TaskGeneratorConfig {
    fn default() -> Self {
        Self {
            dim: defaults::dim(),
            branching: defaults::branching(),
            level_scales: defaults::level_scales(),
            noise_std: defaults::noise_std(),
            input_low: defaults::input_low(),
            input_high: defaults::input_high(),
            jitter_std: None,
            seed: defaults::seed(),
        }
    }
}

impl TaskGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return fail("generator dim must be positive".into());
        }
        if self.branching.contains(&0) {
            return fail("branch counts must be positive".into());
        }
        if self.level_scales.len() != self.branching.len() + 1 {
            return fail(format!(
                "need {} level scales for {} levels, got {}",
                self.branching.len() + 1,
                self.branching.len(),
                self.level_scales.len()
            ));
        }
        if self.level_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return fail("level scales must be finite and non-negative".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail("noise_std must be finite and non-negative".into());
        }
        if self.input_low >= self.input_high || !self.input_low.is_finite() || !self.input_high.is_finite() {
            return fail("input_low must be below input_high".into());
        }
        if let Some(j) = self.jitter_std {
            if !(j.is_finite() && j >= 0.0) {
                return fail("jitter_std must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter_std
            .unwrap_or_else(|| self.level_scales.last().copied().unwrap_or(0.0) * DEFAULT_JITTER_FRACTION)
    }
}

/// One node of the generating parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNode {
    pub path: Vec<usize>,
    pub center: ParamVector,
}

/// The generating tree, stored level by level (root first).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTree {
    levels: Vec<Vec<ParamNode>>,
}

impl ParameterTree {
    pub fn num_nodes(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn root(&self) -> &ParamNode {
        &self.levels[0][0]
    }

    pub fn level(&self, depth: usize) -> &[ParamNode] {
        &self.levels[depth]
    }

    /// Leaves in lexicographic path order; the index is the leaf cluster id.
    pub fn leaves(&self) -> &[ParamNode] {
        self.levels.last().expect("tree has a root level")
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Grow the parameter tree: root ~ N(0, s0²), child = parent + N(0, s_level²).
pub fn build_parameter_tree<R: Rng + ?Sized>(cfg: &TaskGeneratorConfig, rng: &mut R) -> Result<ParameterTree> {
    cfg.validate()?;
    let draw = |rng: &mut R, scale: f64| -> Vec<f64> {
        if scale == 0.0 {
            return vec![0.0; cfg.dim];
        }
        let normal = Normal::new(0.0, scale).expect("validated scale");
        (0..cfg.dim).map(|_| normal.sample(rng)).collect()
    };
    let root = ParamNode {
        path: Vec::new(),
        center: ParamVector::new(draw(rng, cfg.level_scales[0]))?,
    };
    let mut levels = vec![vec![root]];
    for (level, &branches) in cfg.branching.iter().enumerate() {
        let scale = cfg.level_scales[level + 1];
        let mut next = Vec::with_capacity(levels[level].len() * branches);
        for parent in &levels[level] {
            for b in 0..branches {
                let offset = ParamVector::new(draw(rng, scale))?;
                let mut path = parent.path.clone();
                path.push(b);
                next.push(ParamNode {
                    path,
                    center: parent.center.add(&offset)?,
                });
            }
        }
        levels.push(next);
    }
    Ok(ParameterTree { levels })
}

/// A labelled regression sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: ParamVector,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTaskParams {
    pub weights: ParamVector,
    pub leaf_cluster_id: usize,
    /// Branch indices from the root to the task's leaf.
    pub path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub task_id: u64,
    pub params: RegressionTaskParams,
    pub train_points: Vec<Sample>,
    pub val_points: Vec<Sample>,
    pub test_points: Vec<Sample>,
}

/// Number of points drawn for each split of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }
}

/// Generator config plus its realised cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDistribution {
    config: TaskGeneratorConfig,
    leaves: Vec<ParamNode>,
}

impl TaskDistribution {
    /// Build the distribution from `config.seed`.
    pub fn from_config(config: TaskGeneratorConfig) -> Result<Self> {
        let seed = config.seed;
        Self::with_seed(config, seed)
    }

    /// Build the distribution from an explicit seed (recorded in the config).
    pub fn with_seed(mut config: TaskGeneratorConfig, seed: u64) -> Result<Self> {
        config.seed = seed;
        let mut rng = crate::rng::stream(seed, "generator", &[]);
        let tree = build_parameter_tree(&config, &mut rng)?;
        Ok(Self {
            leaves: tree.leaves().to_vec(),
            config,
        })
    }

    pub fn config(&self) -> &TaskGeneratorConfig {
        &self.config
    }

    pub fn centers(&self) -> impl Iterator<Item = &ParamVector> {
        self.leaves.iter().map(|l| &l.center)
    }

    pub fn leaves(&self) -> &[ParamNode] {
        &self.leaves
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Draw one task: uniform leaf, jittered weights, fresh points per split.
    pub fn sample_task<R: Rng + ?Sized>(&self, sizes: SplitSizes, task_id: u64, rng: &mut R) -> Result<TaskInstance> {
        let leaf_id = rng.random_range(0..self.leaves.len());
        let leaf = &self.leaves[leaf_id];
        let jitter = self.config.jitter();
        let weights = if jitter > 0.0 {
            let normal = Normal::new(0.0, jitter).expect("validated jitter");
            let offsets: Vec<f64> = (0..self.config.dim).map(|_| normal.sample(rng)).collect();
            leaf.center.add(&ParamVector::new(offsets)?)?
        } else {
            leaf.center.clone()
        };
        let train_points = self.sample_points(&weights, sizes.train, rng)?;
        let val_points = self.sample_points(&weights, sizes.val, rng)?;
        let test_points = self.sample_points(&weights, sizes.test, rng)?;
        Ok(TaskInstance {
            task_id,
            params: RegressionTaskParams {
                weights,
                leaf_cluster_id: leaf_id,
                path: leaf.path.clone(),
            },
            train_points,
            val_points,
            test_points,
        })
    }

    /// Draw `m` tasks with consecutive ids starting at `first_id`.
    pub fn sample_task_batch<R: Rng + ?Sized>(
        &self,
        m: usize,
        sizes: SplitSizes,
        first_id: u64,
        rng: &mut R,
    ) -> Result<Vec<TaskInstance>> {
        if m == 0 {
            return Err(Error::Config("task batch size must be positive".into()));
        }
        (0..m as u64)
            .map(|i| self.sample_task(sizes, first_id + i, rng))
            .collect()
    }

    fn sample_points<R: Rng + ?Sized>(&self, weights: &ParamVector, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        let cfg = &self.config;
        let uniform = Uniform::new_inclusive(cfg.input_low, cfg.input_high).expect("validated input range");
        let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("validated noise"));
        (0..n)
            .map(|_| {
                let x = ParamVector::new((0..cfg.dim).map(|_| uniform.sample(rng)).collect())?;
                let mut y = weights.dot(&x)?;
                if let Some(noise) = &noise {
                    y += noise.sample(rng);
                }
                Ok(Sample { x, y })
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "centers": self.leaves.iter().map(|l| l.center.as_slice()).collect::<Vec<_>>(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("distribution serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Stored {
            config: TaskGeneratorConfig,
            centers: Vec<ParamVector>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: Stored = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        stored.config.validate()?;
        if stored.centers.len() != stored.config.num_leaves() {
            return Err(Error::format(
                path,
                format!("expected {} centers, found {}", stored.config.num_leaves(), stored.centers.len()),
            ));
        }
        if let Some(c) = stored.centers.iter().find(|c| c.dim() != stored.config.dim) {
            return Err(Error::format(path, format!("center has dim {}, expected {}", c.dim(), stored.config.dim)));
        }
        let paths = leaf_paths(&stored.config.branching);
        let leaves = paths
            .into_iter()
            .zip(stored.centers)
            .map(|(path, center)| ParamNode { path, center })
            .collect();
        Ok(Self {
            config: stored.config,
            leaves,
        })
    }
}

/// All root-to-leaf paths in lexicographic order.
fn leaf_paths(branching: &[usize]) -> Vec<Vec<usize>> {
    branching.iter().fold(vec![Vec::new()], |acc, &b| {
        acc.into_iter()
            .flat_map(|p| {
                (0..b).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noiseless(scales: Vec<f64>) -> TaskGeneratorConfig {
        TaskGeneratorConfig {
            dim: 6,
            level_scales: scales,
            noise_std: 0.0,
            jitter_std: Some(0.0),
            ..Default::default()
        }
    }

    #[test]
    fn default_tree_has_seven_nodes() {
        let tree = build_parameter_tree(&TaskGeneratorConfig::default(), &mut rng::stream(1, "t", &[])).unwrap();
        assert_eq!(tree.num_nodes(), 7);
        assert_eq!(tree.level(1).len(), 2);
        assert_eq!(tree.leaves().len(), 4);
        assert_eq!(tree.depth(), 2);
        let paths: Vec<_> = tree.leaves().iter().map(|l| l.path.clone()).collect();
        assert_eq!(paths, leaf_paths(&[2, 2]));
    }

    #[test]
    fn zero_offsets_collapse_to_root() {
        let cfg = noiseless(vec![1.0, 0.0, 0.0]);
        let tree = build_parameter_tree(&cfg, &mut rng::stream(3, "t", &[])).unwrap();
        for leaf in tree.leaves() {
            assert_eq!(&leaf.center, &tree.root().center);
        }
    }

    #[test]
    fn noiseless_tasks_are_exact() {
        let dist = TaskDistribution::with_seed(noiseless(vec![1.0, 1.0, 0.5]), 9).unwrap();
        let mut r = rng::stream(9, "tasks", &[]);
        for id in 0..10 {
            let task = dist.sample_task(SplitSizes::new(5, 5, 3), id, &mut r).unwrap();
            assert_eq!(task.params.weights, dist.leaves()[task.params.leaf_cluster_id].center);
            assert_eq!(task.params.path, dist.leaves()[task.params.leaf_cluster_id].path);
            assert_eq!((task.train_points.len(), task.val_points.len()), (5, 5));
            for s in task.train_points.iter().chain(&task.val_points).chain(&task.test_points) {
                assert_eq!(s.y, task.params.weights.dot(&s.x).unwrap());
                assert!(s.x.iter().all(|v| (-5.0..=5.0).contains(v)));
            }
        }
    }

    #[test]
    fn sampling_replays_from_seed() {
        let dist = TaskDistribution::with_seed(TaskGeneratorConfig::default(), 5).unwrap();
        let a = dist.sample_task(SplitSizes::new(5, 5, 0), 0, &mut rng::stream(5, "x", &[1])).unwrap();
        let b = dist.sample_task(SplitSizes::new(5, 5, 0), 0, &mut rng::stream(5, "x", &[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(dist, TaskDistribution::with_seed(TaskGeneratorConfig::default(), 5).unwrap());
    }

    #[test]
    fn batch_ids_and_leaf_range() {
        let dist = TaskDistribution::with_seed(TaskGeneratorConfig::default(), 2).unwrap();
        let mut r = rng::stream(2, "b", &[]);
        let batch = dist.sample_task_batch(8, SplitSizes::new(2, 2, 0), 100, &mut r).unwrap();
        assert_eq!(batch.len(), 8);
        let ids: Vec<u64> = batch.iter().map(|t| t.task_id).collect();
        assert_eq!(ids, (100..108).collect::<Vec<_>>());
        assert!(batch.iter().all(|t| t.params.leaf_cluster_id < 4));
        assert_eq!(dist.sample_task_batch(1, SplitSizes::new(1, 1, 0), 0, &mut r).unwrap().len(), 1);
        assert!(matches!(
            dist.sample_task_batch(0, SplitSizes::new(1, 1, 0), 0, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TaskGeneratorConfig::default();
        cfg.level_scales.pop();
        assert!(cfg.validate().is_err());
        let cfg = TaskGeneratorConfig {
            input_low: 1.0,
            input_high: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(TaskGeneratorConfig::default().jitter(), 0.05);
    }

    #[test]
    fn export_round_trip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centers.json");
        let dist = TaskDistribution::with_seed(TaskGeneratorConfig::default(), 11).unwrap();
        dist.save(&path).unwrap();
        let back = TaskDistribution::load(&path).unwrap();
        assert_eq!(back, dist);

        let missing = dir.path().join("no_such_dir").join("centers.json");
        let err = dist.save(&missing).unwrap_err();
        assert!(err.to_string().contains("no_such_dir"));
    }

    /// Least squares via the normal equations and Gaussian elimination.
    fn ols(samples: &[Sample], d: usize) -> Vec<f64> {
        let mut a = vec![vec![0.0; d + 1]; d];
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += s.x[i] * s.x[j];
                }
                a[i][d] += s.x[i] * s.y;
            }
        }
        for c in 0..d {
            let pivot = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, pivot);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn least_squares_recovers_noiseless_weights() {
        let cfg = TaskGeneratorConfig {
            dim: 6,
            noise_std: 0.0,
            ..Default::default()
        };
        let dist = TaskDistribution::with_seed(cfg, 8).unwrap();
        let mut r = rng::stream(8, "ols", &[]);
        for id in 0..5 {
            let t = dist.sample_task(SplitSizes::new(7, 0, 0), id, &mut r).unwrap();
            let w = ParamVector::new(ols(&t.train_points, 6)).unwrap();
            let err = w.sub(&t.params.weights).unwrap().norm() / t.params.weights.norm();
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn siblings_are_closer_than_cousins_on_average() {
        let (mut sib, mut cousin) = (0.0, 0.0);
        for seed in 0..100 {
            let d = TaskDistribution::with_seed(TaskGeneratorConfig::default(), seed).unwrap();
            let c: Vec<&ParamVector> = d.centers().collect();
            let dist = |i: usize, j: usize| c[i].sub(c[j]).unwrap().norm();
            // Leaves are ordered by path: [0,0], [0,1], [1,0], [1,1].
            sib += dist(0, 1) + dist(2, 3);
            cousin += dist(0, 2) + dist(1, 3);
        }
        assert!(sib < cousin, "{sib} vs {cousin}");
    }

    #[test]
    fn leaf_occupancy_is_uniform() {
        let dist = TaskDistribution::with_seed(TaskGeneratorConfig { dim: 2, ..Default::default() }, 3).unwrap();
        let batch = dist.sample_task_batch(1000, SplitSizes::new(1, 0, 0), 0, &mut rng::stream(3, "occ", &[])).unwrap();
        let mut counts = [0usize; 4];
        for t in &batch {
            counts[t.params.leaf_cluster_id] += 1;
        }
        let bound = 5.0 * (250.0f64 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 250.0).abs() <= bound, "{counts:?}");
        }
    }

}
