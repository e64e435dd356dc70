//! Meta-learning engines: MAML, Fixed TreeMAML and Learned TreeMAML.
//!
//! All three share one inner loop. At step `k` every task sits in a cluster
//! whose parameters were produced at step `k − 1`; tasks are regrouped into
//! step-`k` clusters that refine the previous partition, and each new cluster
//! takes one gradient step from its parent's parameters using the gradient
//! pooled over its members. MAML is the case where every cluster is a single
//! task. The final inner step is always task-specific.
//!
//! The outer gradient is propagated back through the cluster tree: a cluster
//! step `θ_c = θ_p − α ḡ_c(θ_p)` has Jacobian `I − α H̄_c`, shared by all of
//! its members, so adjoints are accumulated bottom-up from leaves to the root.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{build_tree, ClusterConfig, TreeDump};
use crate::error::{Error, Result};
use crate::models::DifferentiableModel;
use crate::numerics::ParamVector;
use crate::rng;
use crate::tasks::{Sample, TaskInstance};

/// Meta-loss above which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One model fit to the pooled data of all tasks; no inner loop.
    Baseline,
    Maml,
    TreeFixed,
    TreeLearned,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Maml, Mode::TreeFixed, Mode::TreeLearned];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Maml => "maml",
            Mode::TreeFixed => "tree_fixed",
            Mode::TreeLearned => "tree_learned",
        }
    }

    pub fn is_tree(self) -> bool {
        matches!(self, Mode::TreeFixed | Mode::TreeLearned)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected one of baseline, maml, tree_fixed, tree_learned)")))
    }
}

/// A known task hierarchy: at step `k` tasks sharing the first `k` entries
/// of their generating path share a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTree {
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_batch: usize,
    pub points_train: usize,
    pub points_val: usize,
    pub mode: Mode,
    pub fixed_tree: Option<FixedTree>,
    pub cluster: Option<ClusterConfig>,
    pub second_order: bool,
    pub outer_iterations: usize,
    pub seed: u64,
    /// Std of the Gaussian initialisation of ω.
    pub init_std: f64,
    /// Give the baseline the same K task-specific steps at test time.
    pub baseline_finetune: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.007,
            outer_lr: 0.02,
            inner_steps: 3,
            tasks_per_batch: 64,
            points_train: 5,
            points_val: 5,
            mode: Mode::Maml,
            fixed_tree: Some(FixedTree { depth: 2 }),
            cluster: Some(ClusterConfig::default()),
            second_order: true,
            outer_iterations: 300,
            seed: 0,
            init_std: 0.01,
            baseline_finetune: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return fail("inner_lr must be finite and non-negative");
        }
        if !(self.outer_lr.is_finite() && self.outer_lr > 0.0) {
            return fail("outer_lr must be positive");
        }
        if self.inner_steps == 0 || self.tasks_per_batch == 0 || self.points_train == 0 || self.points_val == 0 {
            return fail("inner_steps, tasks_per_batch, points_train and points_val must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail("init_std must be finite and non-negative");
        }
        match self.mode {
            Mode::TreeFixed => {
                let tree = self.fixed_tree.ok_or_else(|| Error::Config("tree_fixed requires fixed_tree".into()))?;
                if self.inner_steps != tree.depth + 1 {
                    return Err(Error::Config(format!(
                        "tree_fixed with depth {} needs inner_steps = {}, got {}",
                        tree.depth,
                        tree.depth + 1,
                        self.inner_steps
                    )));
                }
            }
            Mode::TreeLearned => {
                let cluster = self.cluster.ok_or_else(|| Error::Config("tree_learned requires cluster config".into()))?;
                cluster.validate()?;
                if self.inner_steps != cluster.max_depth + 1 {
                    return Err(Error::Config(format!(
                        "tree_learned with max_depth {} needs inner_steps = {}, got {}",
                        cluster.max_depth,
                        cluster.max_depth + 1,
                        self.inner_steps
                    )));
                }
            }
            Mode::Baseline | Mode::Maml => {}
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Per-task gradient recorded at one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub task_id: u64,
    pub step: usize,
    pub gradient: ParamVector,
}

/// One cluster at one inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// Indices into the task batch.
    pub members: Vec<usize>,
    /// Index of the parent cluster in the previous step; `None` at the root.
    pub parent: Option<usize>,
    pub params: ParamVector,
}

/// Full record of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationTrace {
    pub task_ids: Vec<u64>,
    /// `steps[0]` is the root cluster holding ω; `steps[k]` the step-k clusters.
    pub steps: Vec<Vec<ClusterState>>,
    pub gradients: Vec<GradientRecord>,
}

impl AdaptationTrace {
    pub fn omega(&self) -> &ParamVector {
        &self.steps[0][0].params
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    /// Index of the cluster holding `task` at `step`.
    pub fn cluster_of(&self, step: usize, task: usize) -> usize {
        self.steps[step]
            .iter()
            .position(|c| c.members.contains(&task))
            .expect("every task belongs to one cluster per step")
    }

    pub fn params_at(&self, step: usize, task: usize) -> &ParamVector {
        &self.steps[step][self.cluster_of(step, task)].params
    }

    pub fn final_params(&self, task: usize) -> &ParamVector {
        self.params_at(self.num_steps(), task)
    }

    /// Cluster count at each inner step `1..=K`.
    pub fn partition_sizes(&self) -> Vec<usize> {
        self.steps[1..].iter().map(Vec::len).collect()
    }

    /// Task-id partition at `step`.
    pub fn partition(&self, step: usize) -> Vec<Vec<u64>> {
        self.steps[step]
            .iter()
            .map(|c| c.members.iter().map(|&i| self.task_ids[i]).collect())
            .collect()
    }

    fn structure(&self) -> Vec<Vec<(Vec<usize>, usize)>> {
        self.steps[1..]
            .iter()
            .map(|step| {
                step.iter()
                    .map(|c| (c.members.clone(), c.parent.expect("non-root cluster has a parent")))
                    .collect()
            })
            .collect()
    }

    /// The cluster hierarchy of this trace in the tree-dump format: the root
    /// at depth 0, then the step-k clusters at depth k.
    pub fn to_tree_dump(&self) -> TreeDump {
        let mut next_id = 0u64;
        self.dump_cluster(0, 0, &mut next_id)
    }

    fn dump_cluster(&self, step: usize, index: usize, next_id: &mut u64) -> TreeDump {
        let node_id = *next_id;
        *next_id += 1;
        let children = match self.steps.get(step + 1) {
            Some(next) => (0..next.len())
                .filter(|&j| next[j].parent == Some(index))
                .map(|j| self.dump_cluster(step + 1, j, next_id))
                .collect(),
            None => Vec::new(),
        };
        TreeDump {
            node_id,
            depth: step,
            children,
            member_tasks: self.steps[step][index].members.iter().map(|&i| self.task_ids[i]).collect(),
        }
    }
}

/// `params − α · (grad_sums[0] + … ) / count`; the single source of every
/// inner-loop update so that singleton clusters and task steps agree bitwise.
fn pooled_step(params: &ParamVector, grad_sums: &[&ParamVector], count: usize, alpha: f64) -> Result<ParamVector> {
    let (first, rest) = grad_sums.split_first().ok_or(Error::EmptyCluster)?;
    let mut acc = first.as_slice().to_vec();
    for g in rest {
        for (a, v) in acc.iter_mut().zip(g.iter()) {
            *a += v;
        }
    }
    let n = count as f64;
    ParamVector::new(
        params
            .iter()
            .zip(&acc)
            .map(|(p, a)| p - alpha * (a / n))
            .collect(),
    )
}

/// One task-specific gradient step: `params − α ∇L(params; batch)`.
pub fn inner_step_task<M: DifferentiableModel + ?Sized>(
    model: &M,
    params: &ParamVector,
    train_batch: &[Sample],
    alpha: f64,
) -> Result<ParamVector> {
    if train_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let g = model.gradient_sum(params, train_batch)?;
    pooled_step(params, &[&g], train_batch.len(), alpha)
}

/// One cluster step: the gradient is pooled over every point of every member.
pub fn inner_step_cluster<M: DifferentiableModel + ?Sized>(
    model: &M,
    params: &ParamVector,
    member_batches: &[&[Sample]],
    alpha: f64,
) -> Result<ParamVector> {
    if member_batches.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let sums = member_batches
        .iter()
        .map(|b| {
            if b.is_empty() {
                Err(Error::EmptyBatch)
            } else {
                model.gradient_sum(params, b)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let count = member_batches.iter().map(|b| b.len()).sum();
    let refs: Vec<&ParamVector> = sums.iter().collect();
    pooled_step(params, &refs, count, alpha)
}

/// How step-k clusters are formed inside each step-(k−1) cluster.
enum Regroup<'a> {
    Singletons,
    Fixed,
    Learned(&'a ClusterConfig),
    Replay(&'a [Vec<(Vec<usize>, usize)>]),
}

fn check_batch(tasks: &[TaskInstance]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("task batch is empty".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.train_points.is_empty()) {
        return Err(Error::TreeShape(format!("task {} has no training points", t.task_id)));
    }
    Ok(())
}

/// Run the inner loop of `cfg.mode` from `omega` on `tasks`.
///
/// Baseline mode has no inner loop; its trace holds only the root.
pub fn adapt_tree<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    tasks: &[TaskInstance],
    cfg: &MetaConfig,
) -> Result<AdaptationTrace> {
    cfg.validate()?;
    let (steps, regroup) = match cfg.mode {
        Mode::Baseline => (0, Regroup::Singletons),
        Mode::Maml => (cfg.inner_steps, Regroup::Singletons),
        Mode::TreeFixed => (cfg.inner_steps, Regroup::Fixed),
        Mode::TreeLearned => (cfg.inner_steps, Regroup::Learned(cfg.cluster.as_ref().expect("validated"))),
    };
    run_inner_loop(model, omega, tasks, steps, cfg.inner_lr, regroup)
}

fn run_inner_loop<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    tasks: &[TaskInstance],
    steps: usize,
    alpha: f64,
    regroup: Regroup<'_>,
) -> Result<AdaptationTrace> {
    check_batch(tasks)?;
    if omega.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: omega.dim(),
        });
    }
    let mut trace = AdaptationTrace {
        task_ids: tasks.iter().map(|t| t.task_id).collect(),
        steps: vec![vec![ClusterState {
            members: (0..tasks.len()).collect(),
            parent: None,
            params: omega.clone(),
        }]],
        gradients: Vec::new(),
    };

    for k in 1..=steps {
        let prev = &trace.steps[k - 1];
        // Gradients of every task at its current cluster's parameters.
        let mut sums: Vec<Option<ParamVector>> = vec![None; tasks.len()];
        for cluster in prev {
            for &i in &cluster.members {
                sums[i] = Some(model.gradient_sum(&cluster.params, &tasks[i].train_points)?);
            }
        }
        let sums: Vec<ParamVector> = sums.into_iter().map(|s| s.expect("every task visited")).collect();
        let means = sums
            .iter()
            .zip(tasks)
            .map(|(s, t)| s.scale(1.0 / t.train_points.len() as f64))
            .collect::<Result<Vec<_>>>()?;

        let groups: Vec<(Vec<usize>, usize)> = match &regroup {
            Regroup::Replay(structure) => structure
                .get(k - 1)
                .cloned()
                .ok_or_else(|| Error::TreeShape(format!("replay structure has no step {k}")))?,
            _ => {
                let mut groups = Vec::new();
                for (p, cluster) in prev.iter().enumerate() {
                    let split = if k == steps || cluster.members.len() == 1 {
                        cluster.members.iter().map(|&i| vec![i]).collect()
                    } else {
                        match &regroup {
                            Regroup::Singletons => cluster.members.iter().map(|&i| vec![i]).collect(),
                            Regroup::Fixed => split_by_path(tasks, &cluster.members, k)?,
                            Regroup::Learned(cc) => split_by_gradients(tasks, &cluster.members, &means, cc)?,
                            Regroup::Replay(_) => unreachable!(),
                        }
                    };
                    groups.extend(split.into_iter().map(|g| (g, p)));
                }
                groups
            }
        };
        validate_refinement(&groups, prev, tasks.len())?;

        let mut next = Vec::with_capacity(groups.len());
        for (members, parent) in groups {
            let refs: Vec<&ParamVector> = members.iter().map(|&i| &sums[i]).collect();
            let count = members.iter().map(|&i| tasks[i].train_points.len()).sum();
            let params = pooled_step(&prev[parent].params, &refs, count, alpha)?;
            next.push(ClusterState {
                members,
                parent: Some(parent),
                params,
            });
        }
        trace.gradients.extend(means.into_iter().zip(tasks).map(|(g, t)| GradientRecord {
            task_id: t.task_id,
            step: k,
            gradient: g,
        }));
        trace.steps.push(next);
    }
    Ok(trace)
}

fn split_by_path(tasks: &[TaskInstance], members: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups: Vec<(&[usize], Vec<usize>)> = Vec::new();
    for &i in members {
        let path = &tasks[i].params.path;
        if path.len() < k {
            return Err(Error::TreeShape(format!(
                "task {} has a path of length {} but step {k} needs a prefix of {k}",
                tasks[i].task_id,
                path.len()
            )));
        }
        let key = &path[..k];
        match groups.iter_mut().find(|(p, _)| *p == key) {
            Some((_, g)) => g.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    Ok(groups.into_iter().map(|(_, g)| g).collect())
}

fn split_by_gradients(
    tasks: &[TaskInstance],
    members: &[usize],
    gradients: &[ParamVector],
    cfg: &ClusterConfig,
) -> Result<Vec<Vec<usize>>> {
    let input: Vec<(u64, ParamVector)> = members
        .iter()
        .map(|&i| (tasks[i].task_id, gradients[i].clone()))
        .collect();
    let tree = build_tree(&input, cfg)?;
    tree.clusters_at_level(1)
        .into_iter()
        .map(|ids| {
            ids.into_iter()
                .map(|id| {
                    members
                        .iter()
                        .copied()
                        .find(|&i| tasks[i].task_id == id)
                        .ok_or_else(|| Error::TreeShape(format!("cluster tree returned unknown task {id}")))
                })
                .collect()
        })
        .collect()
}

fn validate_refinement(groups: &[(Vec<usize>, usize)], prev: &[ClusterState], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (members, parent) in groups {
        if members.is_empty() {
            return Err(Error::EmptyCluster);
        }
        let parent = prev
            .get(*parent)
            .ok_or_else(|| Error::TreeShape(format!("parent cluster {parent} does not exist")))?;
        for &i in members {
            if i >= n || seen[i] {
                return Err(Error::TreeShape(format!("task index {i} is missing or assigned twice")));
            }
            if !parent.members.contains(&i) {
                return Err(Error::TreeShape(format!("task index {i} is not in its parent cluster")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::TreeShape("partition does not cover every task".into()));
    }
    Ok(())
}

/// `(1/m) Σ_i L_i(θ_i; validation points)` at the trace's final parameters.
pub fn meta_loss<M: DifferentiableModel + ?Sized>(model: &M, trace: &AdaptationTrace, tasks: &[TaskInstance]) -> Result<f64> {
    let k = trace.num_steps();
    let mut total = 0.0;
    for cluster in &trace.steps[k] {
        for &i in &cluster.members {
            total += model.loss(&cluster.params, &tasks[i].val_points)?;
        }
    }
    Ok(total / tasks.len() as f64)
}

/// Meta-loss of `omega` with the cluster structure of `trace` held fixed.
pub fn replay_meta_loss<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    trace: &AdaptationTrace,
    tasks: &[TaskInstance],
    alpha: f64,
) -> Result<f64> {
    let structure = trace.structure();
    let replayed = run_inner_loop(model, omega, tasks, trace.num_steps(), alpha, Regroup::Replay(&structure))?;
    meta_loss(model, &replayed, tasks)
}

/// Gradient of the meta-loss with respect to ω, propagated through the
/// trace's cluster tree (or, when `second_order` is off, the first-order
/// approximation that treats adapted parameters as constants).
pub fn meta_gradient<M: DifferentiableModel + ?Sized>(
    model: &M,
    trace: &AdaptationTrace,
    tasks: &[TaskInstance],
    alpha: f64,
    second_order: bool,
) -> Result<ParamVector> {
    if second_order && !model.supports_hvp() {
        return Err(Error::Capability("hessian-vector products"));
    }
    let m = tasks.len() as f64;
    let k_final = trace.num_steps();
    let mut adjoints = trace.steps[k_final]
        .iter()
        .map(|c| {
            let mut acc = vec![0.0; model.dim()];
            for &i in &c.members {
                let g = model.gradient(&c.params, &tasks[i].val_points)?;
                for (a, v) in acc.iter_mut().zip(g.iter()) {
                    *a += v / m;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    for k in (1..=k_final).rev() {
        let parents = &trace.steps[k - 1];
        let mut up = vec![vec![0.0; model.dim()]; parents.len()];
        for (cluster, adj) in trace.steps[k].iter().zip(&adjoints) {
            let p = cluster.parent.expect("non-root cluster has a parent");
            let mut contrib = adj.clone();
            if second_order && alpha != 0.0 {
                let v = ParamVector::new(adj.clone())?;
                let count: usize = cluster.members.iter().map(|&i| tasks[i].train_points.len()).sum();
                for &i in &cluster.members {
                    let batch = &tasks[i].train_points;
                    let hv = model.hessian_vector_product(&parents[p].params, batch, &v)?;
                    let w = alpha * batch.len() as f64 / count as f64;
                    for (c, h) in contrib.iter_mut().zip(hv.iter()) {
                        *c -= w * h;
                    }
                }
            }
            for (u, c) in up[p].iter_mut().zip(&contrib) {
                *u += c;
            }
        }
        adjoints = up;
    }
    ParamVector::new(adjoints.swap_remove(0))
}

/// Pooled loss and gradient of the baseline: every task's training and
/// validation points, task-averaged.
fn baseline_loss_and_gradient<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    tasks: &[TaskInstance],
) -> Result<(f64, ParamVector)> {
    let m = tasks.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.dim()];
    for t in tasks {
        let pooled: Vec<Sample> = t.train_points.iter().chain(&t.val_points).cloned().collect();
        loss += model.loss(omega, &pooled)? / m;
        for (g, v) in grad.iter_mut().zip(model.gradient(omega, &pooled)?.iter()) {
            *g += v / m;
        }
    }
    Ok((loss, ParamVector::new(grad)?))
}

/// Outcome of one outer update.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub omega: ParamVector,
    /// Meta-loss at the pre-update ω.
    pub meta_loss: f64,
}

/// `ω − β ∇_ω L_meta`, with the trace produced from ω on `tasks`.
pub fn outer_update<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    trace: &AdaptationTrace,
    tasks: &[TaskInstance],
    cfg: &MetaConfig,
) -> Result<OuterStep> {
    if cfg.mode == Mode::Baseline {
        let (loss, grad) = baseline_loss_and_gradient(model, omega, tasks)?;
        return Ok(OuterStep {
            omega: omega.axpy(-cfg.outer_lr, &grad)?,
            meta_loss: loss,
        });
    }
    let loss = meta_loss(model, trace, tasks)?;
    let grad = meta_gradient(model, trace, tasks, cfg.inner_lr, cfg.second_order)?;
    Ok(OuterStep {
        omega: omega.axpy(-cfg.outer_lr, &grad)?,
        meta_loss: loss,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub meta_loss: f64,
    pub wall_ms: f64,
    /// Cluster counts C_1..C_K of this iteration's inner loop.
    pub partitions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub omega: ParamVector,
    pub log: Vec<IterationLog>,
}

/// Draw ω ~ N(0, init_std²) from the seed's `init` stream.
pub fn initial_omega(dim: usize, cfg: &MetaConfig) -> Result<ParamVector> {
    let mut r = rng::stream(cfg.seed, "init", &[]);
    if cfg.init_std == 0.0 {
        return ParamVector::zeros(dim);
    }
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    ParamVector::new((0..dim).map(|_| normal.sample(&mut r)).collect())
}

/// Run `cfg.outer_iterations` outer updates; `task_source(t)` supplies the
/// task batch of iteration `t`.
pub fn meta_train<M, S>(model: &M, mut task_source: S, cfg: &MetaConfig) -> Result<TrainOutcome>
where
    M: DifferentiableModel + ?Sized,
    S: FnMut(usize) -> Result<Vec<TaskInstance>>,
{
    cfg.validate()?;
    if cfg.second_order && cfg.mode != Mode::Baseline && !model.supports_hvp() {
        return Err(Error::Capability("hessian-vector products"));
    }
    let mut omega = initial_omega(model.dim(), cfg)?;
    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for iter in 0..cfg.outer_iterations {
        let start = Instant::now();
        let tasks = task_source(iter)?;
        let diverged = |e: Error| match e {
            Error::Numerical(_) => Error::Divergence {
                iteration: iter,
                loss: f64::INFINITY,
            },
            other => other,
        };
        let trace = adapt_tree(model, &omega, &tasks, cfg).map_err(diverged)?;
        let step = outer_update(model, &omega, &trace, &tasks, cfg).map_err(diverged)?;
        if !step.meta_loss.is_finite() || step.meta_loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: iter,
                loss: step.meta_loss,
            });
        }
        omega = step.omega;
        log.push(IterationLog {
            iter,
            meta_loss: step.meta_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            partitions: trace.partition_sizes(),
        });
    }
    Ok(TrainOutcome { omega, log })
}

/// Result of adapting to one target task.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub test_mse: f64,
    pub trace: Option<AdaptationTrace>,
}

/// Adapt ω to `target` and report its MSE on the held-out test points.
///
/// Tree modes adapt the support tasks and the target together, so the
/// target's early steps are pooled with related support tasks; the target is
/// inserted last. MAML adapts the target alone; the baseline is evaluated
/// directly unless `baseline_finetune` is set.
pub fn adapt_and_evaluate<M: DifferentiableModel + ?Sized>(
    model: &M,
    omega: &ParamVector,
    support: &[TaskInstance],
    target: &TaskInstance,
    cfg: &MetaConfig,
) -> Result<Evaluation> {
    if target.test_points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if support.iter().any(|t| t.task_id == target.task_id) {
        return Err(Error::DuplicateTask(target.task_id));
    }
    let (params, trace) = match cfg.mode {
        Mode::Baseline if !cfg.baseline_finetune => (omega.clone(), None),
        Mode::Baseline | Mode::Maml => {
            let mut theta = omega.clone();
            for _ in 0..cfg.inner_steps {
                theta = inner_step_task(model, &theta, &target.train_points, cfg.inner_lr)?;
            }
            (theta, None)
        }
        Mode::TreeFixed | Mode::TreeLearned => {
            let mut batch = support.to_vec();
            batch.push(target.clone());
            let trace = adapt_tree(model, omega, &batch, cfg)?;
            (trace.final_params(batch.len() - 1).clone(), Some(trace))
        }
    };
    Ok(Evaluation {
        test_mse: model.loss(&params, &target.test_points)?,
        trace,
    })
}

/// Serialized meta-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dim: usize,
    pub values: Vec<f64>,
    pub config_hash: String,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn new(omega: &ParamVector, cfg: &MetaConfig, iteration: usize) -> Self {
        Self {
            dim: omega.dim(),
            values: omega.as_slice().to_vec(),
            config_hash: cfg.config_hash(),
            iteration,
        }
    }

    pub fn omega(&self) -> Result<ParamVector> {
        if self.values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.values.len(),
            });
        }
        ParamVector::new(self.values.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}
