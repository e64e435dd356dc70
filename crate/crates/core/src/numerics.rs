//! Flat parameter vectors, similarity metrics, summary statistics, and the
//! central-difference gradient used to check every analytic derivative in
//! the crate.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step for 64-bit losses of order one.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// z-score of the two-sided 95% normal interval.
const Z_95: f64 = 1.96;

/// A non-empty vector of finite reals holding model or meta parameters.
///
/// The length is fixed at construction. Every constructor and arithmetic
/// operation rejects NaN and infinities.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("parameter vector must have dim > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, c: f64) -> Result<ParamVector> {
        Self::new(self.0.iter().map(|a| a * c).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + c * b).collect())
    }

    /// Copy with coordinate `i` shifted by `delta`.
    pub fn perturbed(&self, i: usize, delta: f64) -> Result<ParamVector> {
        let mut values = self.0.clone();
        values[i] += delta;
        Self::new(values)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        ParamVector::new(values).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between `a` and `b`.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let ab = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

/// Pairwise-similarity summary of a set of vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean_pairwise: f64,
    pub std_pairwise: f64,
    pub count_pairs: usize,
}

impl SimilarityStats {
    /// Stats of a set with fewer than two members: a perfectly coherent cluster.
    pub const DEGENERATE: SimilarityStats = SimilarityStats {
        mean_pairwise: 1.0,
        std_pairwise: 0.0,
        count_pairs: 0,
    };

    /// Mean and population standard deviation of a list of pairwise values.
    pub fn from_pairs(pairs: &[f64]) -> Self {
        if pairs.is_empty() {
            return Self::DEGENERATE;
        }
        let n = pairs.len() as f64;
        let mean = pairs.iter().sum::<f64>() / n;
        let std = if pairs.len() == 1 {
            0.0
        } else {
            (pairs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        Self {
            mean_pairwise: mean,
            std_pairwise: std,
            count_pairs: pairs.len(),
        }
    }
}

/// Mean and population std of cosine similarity over all unordered pairs.
///
/// Empty and singleton sets report mean 1.0 and std 0.0.
pub fn set_similarity(vectors: &[ParamVector]) -> Result<SimilarityStats> {
    let mut pairs = Vec::with_capacity(vectors.len() * vectors.len().saturating_sub(1) / 2);
    for (i, a) in vectors.iter().enumerate() {
        for b in &vectors[i + 1..] {
            pairs.push(cosine_similarity(a, b)?);
        }
    }
    Ok(SimilarityStats::from_pairs(&pairs))
}

/// Half-width of the normal-approximation 95% confidence interval of the mean.
pub fn confidence_halfwidth_95(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    Ok(Z_95 * sample_std(samples) / (samples.len() as f64).sqrt())
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Standard deviation with Bessel's correction.
pub fn sample_std(samples: &[f64]) -> f64 {
    let m = mean(samples);
    let ss: f64 = samples.iter().map(|s| (s - m).powi(2)).sum();
    (ss / (samples.len() as f64 - 1.0)).sqrt()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(f: F, x: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut grad = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let plus = f(&x.perturbed(i, h)?)?;
        let minus = f(&x.perturbed(i, -h)?)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "objective not finite near coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    ParamVector::new(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`; the floor keeps near-zero vectors comparable.
pub fn relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> Result<f64> {
    let diff = a.sub(b)?.norm();
    Ok(diff / a.norm().max(b.norm()).max(floor))
}
