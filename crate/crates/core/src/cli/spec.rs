use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{FixedTree, MetaConfig, Mode};
use crate::tasks::TaskGeneratorConfig;

/// One experiment grid: every mode × points count × replicate seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: TaskGeneratorConfig,
    /// Hyperparameters shared by every cell; `mode`, `points_*` and `seed`
    /// are overwritten per cell.
    pub meta: MetaConfig,
    pub modes: Vec<Mode>,
    pub points_sweep: Vec<usize>,
    pub meta_test_tasks: usize,
    /// Held-out points per meta-test task.
    pub test_points: usize,
    pub replicate_seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            generator: TaskGeneratorConfig::default(),
            meta: MetaConfig::default(),
            modes: Mode::ALL.to_vec(),
            points_sweep: vec![5, 10, 20],
            meta_test_tasks: 400,
            test_points: 100,
            replicate_seeds: vec![1, 2, 3],
        }
    }
}

/// Identity of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: Mode,
    pub points: usize,
    pub seed: u64,
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/points={}/seed={}", self.mode, self.points, self.seed)
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ExperimentSpec = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.modes.is_empty() || self.points_sweep.is_empty() || self.replicate_seeds.is_empty() {
            return Err(Error::Config("modes, points_sweep and replicate_seeds must be non-empty".into()));
        }
        if self.points_sweep.contains(&0) {
            return Err(Error::Config("points_sweep entries must be positive".into()));
        }
        if self.meta_test_tasks < 2 {
            return Err(Error::Config("meta_test_tasks must be at least 2 for a confidence interval".into()));
        }
        if self.test_points == 0 {
            return Err(Error::Config("test_points must be positive".into()));
        }
        for key in self.cells() {
            self.cell_config(key).validate()?;
        }
        Ok(())
    }

    /// All cells in (mode, points, seed) order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut cells = Vec::new();
        for &mode in &self.modes {
            for &points in &self.points_sweep {
                for &seed in &self.replicate_seeds {
                    cells.push(CellKey { mode, points, seed });
                }
            }
        }
        cells
    }

    /// Meta configuration of one cell. A fixed tree defaults to the
    /// generator's own hierarchy.
    pub fn cell_config(&self, key: CellKey) -> MetaConfig {
        let mut cfg = self.meta.clone();
        cfg.mode = key.mode;
        cfg.points_train = key.points;
        cfg.points_val = key.points;
        cfg.seed = key.seed;
        if cfg.fixed_tree.is_none() {
            cfg.fixed_tree = Some(FixedTree {
                depth: self.generator.depth(),
            });
        }
        cfg
    }
}
