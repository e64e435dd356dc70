//! Non-binary online top-down (OTD) clustering of task gradient vectors.
//!
//! Tasks are inserted one at a time into a tree of bounded depth. At each
//! internal node the new vector either joins the children as a sibling,
//! descends into the most similar child, or pushes the existing children one
//! level down when it would lower the intracluster similarity by more than
//! `xi` standard deviations. Internal nodes are represented by the mean of
//! their descendant leaf vectors.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, ParamVector, SimilarityStats};

/// Similarity changes smaller than this are rounding, not signal: identical
/// directions must not look like a rise in coherence.
const SIM_TOLERANCE: f64 = 1e-12;

/// How the child to descend into is chosen once the new vector is found to
/// raise the node's coherence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChildSelection {
    /// argmax of cosine similarity.
    #[default]
    MostSimilar,
    /// argmin of cosine similarity, the operator as literally printed in the
    /// original algorithm listing.
    LeastSimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default)]
    pub similarity: SimilarityMetric,
    #[serde(default)]
    pub child_selection: ChildSelection,
}

fn default_max_depth() -> usize {
    2
}

fn default_xi() -> f64 {
    1.0
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            max_depth: default_max_depth(),
            xi: default_xi(),
            similarity: SimilarityMetric::Cosine,
            child_selection: ChildSelection::MostSimilar,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Config("cluster max_depth must be >= 1".into()));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::Config("cluster xi must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
struct Node {
    depth: usize,
    children: Vec<NodeId>,
    /// Task ids of every leaf below (or at) this node, in insertion order.
    members: Vec<u64>,
    /// Sum of descendant leaf vectors.
    rep_sum: Vec<f64>,
    task: Option<u64>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.task.is_some()
    }
}

enum Action {
    Append,
    GroupWith(usize),
    Descend(NodeId),
    PushDown,
}

/// Arena-backed cluster tree. Node ids are arena indices, so they are unique
/// and increase with creation order; the root is node 0 at depth 0.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    cfg: ClusterConfig,
    nodes: Vec<Node>,
    dim: Option<usize>,
    tasks: HashSet<u64>,
}

impl ClusterTree {
    pub fn new(cfg: ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            nodes: vec![Node {
                depth: 0,
                children: Vec::new(),
                members: Vec::new(),
                rep_sum: Vec::new(),
                task: None,
            }],
            dim: None,
            tasks: HashSet::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub const ROOT: NodeId = 0;

    pub fn depth(&self, node: NodeId) -> usize {
        self.nodes[node].depth
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node].children
    }

    pub fn members(&self, node: NodeId) -> &[u64] {
        &self.nodes[node].members
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.nodes[node].is_leaf()
    }

    pub fn task_of(&self, node: NodeId) -> Option<u64> {
        self.nodes[node].task
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Mean of the descendant leaf vectors.
    pub fn representative(&self, node: NodeId) -> Result<ParamVector> {
        let n = &self.nodes[node];
        if n.members.is_empty() {
            return Err(Error::EmptyCluster);
        }
        let count = n.members.len() as f64;
        ParamVector::new(n.rep_sum.iter().map(|v| v / count).collect())
    }

    /// Deepest node depth in the tree.
    pub fn max_depth(&self) -> usize {
        self.height(Self::ROOT)
    }

    /// Leaf node ids in depth-first order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![Self::ROOT];
        while let Some(n) = stack.pop() {
            if self.nodes[n].is_leaf() {
                out.push(n);
            }
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    fn height(&self, node: NodeId) -> usize {
        let n = &self.nodes[node];
        n.children
            .iter()
            .map(|&c| self.height(c))
            .max()
            .unwrap_or(n.depth)
    }

    /// Insert a task's gradient vector starting at the root.
    pub fn insert(&mut self, task_id: u64, gradient: &ParamVector) -> Result<()> {
        match self.dim {
            Some(d) if d != gradient.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: gradient.dim(),
                })
            }
            _ => {}
        }
        if gradient.norm() == 0.0 {
            return Err(Error::ZeroVector);
        }
        if self.tasks.contains(&task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        if self.dim.is_none() {
            self.dim = Some(gradient.dim());
            self.nodes[Self::ROOT].rep_sum = vec![0.0; gradient.dim()];
        }
        self.insert_at(Self::ROOT, task_id, gradient.as_slice())?;
        self.tasks.insert(task_id);
        Ok(())
    }

    fn unit_representative(&self, node: NodeId) -> Result<Vec<f64>> {
        let sum = &self.nodes[node].rep_sum;
        let norm = dot(sum, sum).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(sum.iter().map(|v| v / norm).collect())
    }

    fn decide(&self, node: NodeId, g: &[f64]) -> Result<Action> {
        let children = &self.nodes[node].children;
        if children.len() < 2 {
            return Ok(Action::Append);
        }
        let units = children
            .iter()
            .map(|&c| self.unit_representative(c))
            .collect::<Result<Vec<_>>>()?;
        let g_norm = dot(g, g).sqrt();
        let to_new: Vec<f64> = units
            .iter()
            .map(|u| (dot(u, g) / g_norm).clamp(-1.0, 1.0))
            .collect();

        let mut pairs = Vec::with_capacity(units.len() * (units.len() + 1) / 2);
        for (i, a) in units.iter().enumerate() {
            for b in &units[i + 1..] {
                pairs.push(dot(a, b).clamp(-1.0, 1.0));
            }
        }
        let without = SimilarityStats::from_pairs(&pairs);
        pairs.extend_from_slice(&to_new);
        let with = SimilarityStats::from_pairs(&pairs);

        if with.mean_pairwise > without.mean_pairwise + SIM_TOLERANCE {
            let depth = self.nodes[node].depth;
            if depth + 1 >= self.cfg.max_depth {
                return Ok(Action::Append);
            }
            let pick = self.select_child(children, &to_new);
            let child = children[pick];
            return Ok(if self.nodes[child].is_leaf() {
                Action::GroupWith(pick)
            } else {
                Action::Descend(child)
            });
        }
        if with.mean_pairwise < without.mean_pairwise - self.cfg.xi * without.std_pairwise - SIM_TOLERANCE
            && self.height(node) < self.cfg.max_depth
        {
            return Ok(Action::PushDown);
        }
        Ok(Action::Append)
    }

    /// Index into `children` of the chosen child; ties go to the lowest node id.
    fn select_child(&self, children: &[NodeId], sims: &[f64]) -> usize {
        let better = |a: f64, b: f64| match self.cfg.child_selection {
            ChildSelection::MostSimilar => a > b,
            ChildSelection::LeastSimilar => a < b,
        };
        let mut best = 0;
        for i in 1..children.len() {
            if better(sims[i], sims[best]) || (sims[i] == sims[best] && children[i] < children[best]) {
                best = i;
            }
        }
        best
    }

    fn push_node(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn new_leaf(&mut self, depth: usize, task_id: u64, g: &[f64]) -> NodeId {
        self.push_node(Node {
            depth,
            children: Vec::new(),
            members: vec![task_id],
            rep_sum: g.to_vec(),
            task: Some(task_id),
        })
    }

    fn shift_depth(&mut self, node: NodeId) {
        self.nodes[node].depth += 1;
        for c in self.nodes[node].children.clone() {
            self.shift_depth(c);
        }
    }

    fn insert_at(&mut self, node: NodeId, task_id: u64, g: &[f64]) -> Result<()> {
        let action = self.decide(node, g)?;
        let depth = self.nodes[node].depth;

        if let Action::PushDown = action {
            let old = &self.nodes[node];
            let moved = Node {
                depth: depth + 1,
                children: Vec::new(),
                members: old.members.clone(),
                rep_sum: old.rep_sum.clone(),
                task: None,
            };
            let children = std::mem::take(&mut self.nodes[node].children);
            for &c in &children {
                self.shift_depth(c);
            }
            let wrapper = self.push_node(moved);
            self.nodes[wrapper].children = children;
            self.nodes[node].children.push(wrapper);
        }

        let n = &mut self.nodes[node];
        n.members.push(task_id);
        for (s, v) in n.rep_sum.iter_mut().zip(g) {
            *s += v;
        }

        match action {
            Action::Append | Action::PushDown => {
                let leaf = self.new_leaf(depth + 1, task_id, g);
                self.nodes[node].children.push(leaf);
            }
            Action::GroupWith(pick) => {
                let sibling = self.nodes[node].children[pick];
                let s = &self.nodes[sibling];
                let group = Node {
                    depth: depth + 1,
                    children: Vec::new(),
                    members: s.members.iter().copied().chain([task_id]).collect(),
                    rep_sum: s.rep_sum.iter().zip(g).map(|(a, b)| a + b).collect(),
                    task: None,
                };
                let group = self.push_node(group);
                self.shift_depth(sibling);
                let leaf = self.new_leaf(depth + 2, task_id, g);
                self.nodes[group].children = vec![sibling, leaf];
                self.nodes[node].children[pick] = group;
            }
            Action::Descend(child) => self.insert_at(child, task_id, g)?,
        }
        Ok(())
    }

    /// Partition of task ids obtained by cutting the tree at depth `k`.
    ///
    /// Leaves above depth `k` persist as singleton clusters.
    pub fn clusters_at_level(&self, k: usize) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        self.collect_level(Self::ROOT, k, &mut out);
        out
    }

    fn collect_level(&self, node: NodeId, k: usize, out: &mut Vec<Vec<u64>>) {
        let n = &self.nodes[node];
        if n.depth == k || n.is_leaf() {
            if !n.members.is_empty() {
                out.push(n.members.clone());
            }
            return;
        }
        for &c in &n.children {
            self.collect_level(c, k, out);
        }
    }

    pub fn dump(&self) -> TreeDump {
        self.dump_node(Self::ROOT)
    }

    fn dump_node(&self, node: NodeId) -> TreeDump {
        let n = &self.nodes[node];
        TreeDump {
            node_id: node as u64,
            depth: n.depth,
            member_tasks: n.members.clone(),
            children: n.children.iter().map(|&c| self.dump_node(c)).collect(),
        }
    }
}

/// Insert `gradients` in order into a fresh tree.
pub fn build_tree(gradients: &[(u64, ParamVector)], cfg: &ClusterConfig) -> Result<ClusterTree> {
    if gradients.is_empty() {
        return Err(Error::Config("cannot build a cluster tree from no tasks".into()));
    }
    let mut tree = ClusterTree::new(*cfg)?;
    for (id, g) in gradients {
        tree.insert(*id, g)?;
    }
    Ok(tree)
}

/// Serializable view of a cluster tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDump {
    pub node_id: u64,
    pub depth: usize,
    pub children: Vec<TreeDump>,
    pub member_tasks: Vec<u64>,
}

impl TreeDump {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("tree dump serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    /// Number of nodes at exactly `depth`.
    pub fn width_at(&self, depth: usize) -> usize {
        if self.depth == depth {
            return 1;
        }
        self.children.iter().map(|c| c.width_at(depth)).sum()
    }
}
