//! Hypersphere primitives shared by every loss: row/column normalization,
//! cosine logits with angle recovery, and the sine half-angle difficulty
//! metric.
//!
//! All angular quantities live in f64. Cosines are clamped away from the
//! endpoints before `acos` so that `sin(theta)` never vanishes in the
//! gradient denominators downstream.

use ndarray::{Array2, ArrayView2};
use std::f64::consts::PI;
use thiserror::Error;

/// Clamp width for cosines: dot products are restricted to
/// `[-1 + COS_EPS, 1 - COS_EPS]` before angle recovery. This bounds
/// `sin(theta) >= sqrt(2 * COS_EPS) ~ 4.5e-4`, keeping the `1/sin(theta)`
/// chain factors finite.
pub const COS_EPS: f64 = 1e-7;

/// Norms below this are treated as zero vectors (not normalizable).
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("vector {index} has norm {norm:.3e}, too small to normalize")]
    ZeroVector { index: usize, norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("angle {0} lies outside [0, pi]")]
    DomainError(f64),
    #[error("column {index} has norm {norm}, expected unit length")]
    NotNormalized { index: usize, norm: f64 },
}

/// Scale every row of `matrix` to unit L2 norm.
pub fn normalize_rows(matrix: &ArrayView2<f64>) -> Result<Array2<f64>, GeometryError> {
    let mut out = matrix.to_owned();
    for (index, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            return Err(GeometryError::ZeroVector { index, norm });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn normalize_columns(matrix: &ArrayView2<f64>) -> Result<Array2<f64>, GeometryError> {
    let transposed = matrix.t();
    let normalized = normalize_rows(&transposed)?;
    Ok(normalized.t().to_owned())
}

/// A batch of unit-norm feature rows with their class labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    /// Normalize `features` row-wise and pair them with `labels`.
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self, GeometryError> {
        if features.nrows() != labels.len() {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let features = normalize_rows(&features.view())?;
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Per-class weight vectors stored as unit-norm columns of a `d x n` matrix.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    weights: Array2<f64>,
}

impl ClassWeights {
    /// Normalize `weights` column-wise; column j is class j's direction.
    pub fn new(weights: Array2<f64>) -> Result<Self, GeometryError> {
        let weights = normalize_columns(&weights.view())?;
        Ok(Self { weights })
    }

    /// Adopt a matrix whose columns are already unit-norm, without touching
    /// them. Re-normalizing perturbs values by an ulp, so deserialization
    /// uses this to restore trained weights bit for bit. Columns further
    /// than `1e-6` from unit length are rejected.
    pub fn from_unit_columns(weights: Array2<f64>) -> Result<Self, GeometryError> {
        for (j, col) in weights.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(GeometryError::NotNormalized { index: j, norm });
            }
        }
        Ok(Self { weights })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mutable access for optimizer steps. Callers must re-project with
    /// [`ClassWeights::renormalize_columns`] afterwards.
    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    /// Re-project every column back onto the unit sphere.
    pub fn renormalize_columns(&mut self) -> Result<(), GeometryError> {
        self.weights = normalize_columns(&self.weights.view())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }
}

/// Pairwise feature/class cosines with their recovered angles.
///
/// `cosines[[i, j]]` is the dot product of feature row i with weight column
/// j, clamped into `[-1 + COS_EPS, 1 - COS_EPS]`; `angles[[i, j]]` is its
/// arccosine. Both matrices are `B x n`.
#[derive(Debug, Clone)]
pub struct AngularLogits {
    pub cosines: Array2<f64>,
    pub angles: Array2<f64>,
}

impl AngularLogits {
    pub fn batch_size(&self) -> usize {
        self.cosines.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.cosines.ncols()
    }

    /// True when this cosine sits at the clamp boundary, i.e. the underlying
    /// dot product saturated. Derivatives through a saturated entry are zero.
    pub fn is_clamped(&self, i: usize, j: usize) -> bool {
        self.cosines[[i, j]].abs() >= 1.0 - COS_EPS
    }
}

/// Compute clamped cosines and angles between normalized feature rows and
/// normalized class-weight columns.
pub fn angular_logits(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
) -> Result<AngularLogits, GeometryError> {
    if batch.dim() != weights.dim() {
        return Err(GeometryError::DimensionMismatch(format!(
            "feature dim {} vs weight dim {}",
            batch.dim(),
            weights.dim()
        )));
    }
    Ok(angular_logits_from_raw(
        &batch.features().view(),
        &weights.matrix().view(),
    ))
}

/// Raw-matrix variant of [`angular_logits`]: no normalization is applied to
/// either operand. Finite-difference checks rely on this to perturb single
/// entries of already-normalized matrices without the perturbation being
/// projected away.
pub fn angular_logits_from_raw(
    features: &ArrayView2<f64>,
    weights: &ArrayView2<f64>,
) -> AngularLogits {
    let mut cosines = features.dot(weights);
    cosines.mapv_inplace(|c| c.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS));
    let angles = cosines.mapv(f64::acos);
    AngularLogits { cosines, angles }
}

/// Difficulty of a positive angle: `sin(theta / 2)`, increasing from 0 at the
/// class center to 1 at the antipode. Tolerates 1e-9 of numerical overshoot
/// outside `[0, pi]`.
pub fn difficulty(theta: f64) -> Result<f64, GeometryError> {
    const TOL: f64 = 1e-9;
    if !theta.is_finite() || theta < -TOL || theta > PI + TOL {
        return Err(GeometryError::DomainError(theta));
    }
    Ok((theta.clamp(0.0, PI) / 2.0).sin())
}
