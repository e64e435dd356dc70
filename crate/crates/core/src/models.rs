//! Differentiable-model contract and the linear-regression model.

use crate::error::{Error, Result};
use crate::numerics::{dot, ParamVector};
use crate::tasks::Sample;

/// What the meta-learners need from a model.
///
/// Losses and gradients are means over the batch. `gradient_sum` exposes the
/// un-normalised per-point sum so that pooled cluster steps can be formed
/// with a single division, in the same order as a single-task step.
pub trait DifferentiableModel: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, params: &ParamVector, batch: &[Sample]) -> Result<f64>;

    /// Sum over the batch of per-point loss gradients.
    fn gradient_sum(&self, params: &ParamVector, batch: &[Sample]) -> Result<ParamVector>;

    fn gradient(&self, params: &ParamVector, batch: &[Sample]) -> Result<ParamVector> {
        let sum = self.gradient_sum(params, batch)?;
        sum.scale(1.0 / batch.len() as f64)
    }

    fn supports_hvp(&self) -> bool {
        false
    }

    /// Hessian of the mean batch loss at `params`, applied to `v`.
    fn hessian_vector_product(&self, _params: &ParamVector, _batch: &[Sample], _v: &ParamVector) -> Result<ParamVector> {
        Err(Error::Capability("hessian-vector products"))
    }
}

/// `y ≈ <params, x>` under mean squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearRegressionModel {
    dim: usize,
}

impl LinearRegressionModel {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("model dim must be positive".into()));
        }
        Ok(Self { dim })
    }

    fn check(&self, params: &ParamVector, batch: &[Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if params.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: params.dim(),
            });
        }
        if let Some(s) = batch.iter().find(|s| s.x.dim() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: s.x.dim(),
            });
        }
        Ok(())
    }
}

impl DifferentiableModel for LinearRegressionModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
        mse_loss(self, params, batch)
    }

    fn gradient_sum(&self, params: &ParamVector, batch: &[Sample]) -> Result<ParamVector> {
        self.check(params, batch)?;
        let mut acc = vec![0.0; self.dim];
        for s in batch {
            let r = 2.0 * (dot(params.as_slice(), s.x.as_slice()) - s.y);
            for (a, xi) in acc.iter_mut().zip(s.x.iter()) {
                *a += r * xi;
            }
        }
        ParamVector::new(acc)
    }

    fn supports_hvp(&self) -> bool {
        true
    }

    fn hessian_vector_product(&self, params: &ParamVector, batch: &[Sample], v: &ParamVector) -> Result<ParamVector> {
        mse_hvp(self, params, batch, v)
    }
}

/// `(1/n) Σ (<params, x> − y)²`.
pub fn mse_loss(model: &LinearRegressionModel, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
    model.check(params, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| (dot(params.as_slice(), s.x.as_slice()) - s.y).powi(2))
        .sum();
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("mse loss overflowed".into()));
    }
    Ok(loss)
}

/// `(2/n) Σ (<params, x> − y) x`.
pub fn mse_gradient(model: &LinearRegressionModel, params: &ParamVector, batch: &[Sample]) -> Result<ParamVector> {
    model.gradient(params, batch)
}

/// `H v` with `H = (2/n) Σ x xᵀ`; independent of `params` for this model.
pub fn mse_hvp(model: &LinearRegressionModel, params: &ParamVector, batch: &[Sample], v: &ParamVector) -> Result<ParamVector> {
    model.check(params, batch)?;
    if v.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: v.dim(),
        });
    }
    let scale = 2.0 / batch.len() as f64;
    let mut acc = vec![0.0; model.dim];
    for s in batch {
        let xv = dot(s.x.as_slice(), v.as_slice());
        for (a, xi) in acc.iter_mut().zip(s.x.iter()) {
            *a += xv * xi;
        }
    }
    ParamVector::new(acc.into_iter().map(|a| a * scale).collect())
}
