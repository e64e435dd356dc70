use std::time::Instant;

use rayon::prelude::*;

use super::spec::{CellKey, ExperimentSpec};
use crate::clustering::TreeDump;
use crate::error::{Error, Result};
use crate::meta::{adapt_and_evaluate, meta_train, IterationLog, MetaConfig};
use crate::models::LinearRegressionModel;
use crate::numerics::{confidence_halfwidth_95, mean, ParamVector};
use crate::rng;
use crate::tasks::{SplitSizes, TaskDistribution, TaskInstance};

/// Everything one completed cell produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: CellKey,
    pub per_task_mse: Vec<f64>,
    pub mean_mse: f64,
    pub ci95: f64,
    pub wall_seconds: f64,
    pub omega: ParamVector,
    pub config: MetaConfig,
    pub train_log: Vec<IterationLog>,
    /// Cluster hierarchy used to adapt the first meta-test task (tree modes).
    pub first_tree: Option<TreeDump>,
}

#[derive(Debug)]
pub struct CellFailure {
    pub key: CellKey,
    pub error: Error,
}

pub type CellOutcome = std::result::Result<RunResult, CellFailure>;

/// Support batch and target of meta-test task `index`. Targets and supports
/// come from their own streams, so every mode sees the same test tasks.
pub fn meta_test_task(
    dist: &TaskDistribution,
    spec: &ExperimentSpec,
    key: CellKey,
    index: usize,
    with_support: bool,
) -> Result<(Vec<TaskInstance>, TaskInstance)> {
    let m = spec.meta.tasks_per_batch;
    let labels = [key.points as u64, index as u64];
    let target = dist.sample_task(
        SplitSizes::new(key.points, 0, spec.test_points),
        m as u64,
        &mut rng::stream(key.seed, "test-target", &labels),
    )?;
    let support = if with_support {
        dist.sample_task_batch(
            m,
            SplitSizes::new(key.points, 0, 0),
            0,
            &mut rng::stream(key.seed, "test-support", &labels),
        )?
    } else {
        Vec::new()
    };
    Ok((support, target))
}

/// Meta-train and meta-test one cell.
pub fn run_cell(spec: &ExperimentSpec, key: CellKey) -> Result<RunResult> {
    let start = Instant::now();
    let cfg = spec.cell_config(key);
    cfg.validate()?;
    let dist = TaskDistribution::with_seed(spec.generator.clone(), key.seed)?;
    let model = LinearRegressionModel::new(dist.dim())?;

    let m = cfg.tasks_per_batch;
    let sizes = SplitSizes::new(key.points, key.points, 0);
    let source = |iter: usize| {
        let mut r = rng::stream(key.seed, "train", &[key.points as u64, iter as u64]);
        dist.sample_task_batch(m, sizes, (iter * m) as u64, &mut r)
    };
    let trained = meta_train(&model, source, &cfg)?;

    let evaluations = (0..spec.meta_test_tasks)
        .into_par_iter()
        .map(|j| {
            let (support, target) = meta_test_task(&dist, spec, key, j, key.mode.is_tree())?;
            adapt_and_evaluate(&model, &trained.omega, &support, &target, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let first_tree = evaluations.first().and_then(|e| e.trace.as_ref()).map(|t| t.to_tree_dump());
    let per_task_mse: Vec<f64> = evaluations.iter().map(|e| e.test_mse).collect();
    Ok(RunResult {
        key,
        mean_mse: mean(&per_task_mse),
        ci95: confidence_halfwidth_95(&per_task_mse)?,
        per_task_mse,
        wall_seconds: start.elapsed().as_secs_f64(),
        omega: trained.omega,
        config: cfg,
        train_log: trained.log,
        first_tree,
    })
}

/// Run every cell of the grid; a failing cell is reported, not fatal.
/// Outcomes are returned in cell order regardless of completion order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<CellOutcome>> {
    spec.validate()?;
    Ok(spec
        .cells()
        .into_par_iter()
        .map(|key| run_cell(spec, key).map_err(|error| CellFailure { key, error }))
        .collect())
}
