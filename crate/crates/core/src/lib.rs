//! MAML and TreeMAML meta-learning on a synthetic hierarchical regression
//! benchmark, with online top-down clustering of task gradients.

pub mod cli;
pub mod clustering;
pub mod error;
pub mod meta;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod tasks;

pub use clustering::{build_tree, ClusterConfig, ClusterTree, TreeDump};
pub use error::{Error, Result};
pub use meta::{adapt_and_evaluate, adapt_tree, meta_train, AdaptationTrace, MetaConfig, Mode};
pub use models::{DifferentiableModel, LinearRegressionModel};
pub use numerics::ParamVector;
pub use tasks::{TaskDistribution, TaskGeneratorConfig, TaskInstance};
