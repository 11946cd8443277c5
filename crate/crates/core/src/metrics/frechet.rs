//! Gaussian moment fitting and the Fréchet distance between fitted
//! Gaussians:
//!
//! ```text
//! d² = ||μa − μb||² + Tr(Σa + Σb − 2·(Σa^{1/2} Σb Σa^{1/2})^{1/2})
//! ```
//!
//! Matrix square roots use a symmetric eigendecomposition with negative
//! eigenvalues clipped to zero, and the result is clamped at 0.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Surfaces below this eigenvalue trigger covariance regularization.
const EIGEN_FLOOR: f64 = 1e-9;
/// Ridge added to near-singular covariances.
const COV_EPSILON: f64 = 1e-6;

/// One feature vector per slice, tagged with the embedder that produced
/// them. Rows are slices, columns are feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub embedder_id: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, embedder_id: impl Into<String>) -> Result<Self> {
        if vectors.ncols() < 2 {
            return Err(Error::Precondition(format!(
                "embeddings need dimension >= 2, got {}",
                vectors.ncols()
            )));
        }
        if let Some(bad) = vectors.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding contains non-finite value {bad}"
            )));
        }
        Ok(EmbeddingSet {
            vectors,
            embedder_id: embedder_id.into(),
        })
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Concatenates the rows of both sets; embedder ids must match.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.embedder_id != other.embedder_id {
            return Err(Error::Precondition(format!(
                "cannot pool embeddings from {:?} and {:?}",
                self.embedder_id, other.embedder_id
            )));
        }
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!(
                "embedding dims differ: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let mut vectors = Array2::zeros((self.count() + other.count(), self.dim()));
        vectors
            .slice_mut(ndarray::s![..self.count(), ..])
            .assign(&self.vectors);
        vectors
            .slice_mut(ndarray::s![self.count().., ..])
            .assign(&other.vectors);
        Ok(EmbeddingSet {
            vectors,
            embedder_id: self.embedder_id.clone(),
        })
    }
}

/// Fitted first and second moments of an embedding distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    /// Symmetric positive-semidefinite, possibly ridge-regularized.
    pub covariance: Array2<f64>,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Sample mean and unbiased sample covariance of an embedding set. The
/// covariance is symmetrized; if its smallest eigenvalue falls below 1e-9
/// (low sample counts, constant features) a ridge of 1e-6 is added so the
/// matrix square root downstream stays well defined.
pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats> {
    let n = set.count();
    let d = set.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "Gaussian fit needs at least 2 vectors, got {n}"
        )));
    }

    let mean = set.vectors.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let centered = &set.vectors - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    // Exact symmetrization before any spectral work.
    let mut cov = (&cov + &cov.t()) / 2.0;

    if min_eigenvalue(&to_dmatrix(&cov)) < EIGEN_FLOOR {
        for i in 0..d {
            cov[[i, i]] += COV_EPSILON;
        }
    }
    Ok(GaussianStats {
        mean,
        covariance: cov,
    })
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two fitted Gaussians.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.covariance.dim() != (d, d) || b.covariance.dim() != (d, d) {
        return Err(Error::Dimension(format!(
            "Gaussian dimensions disagree: mean {} vs {}, covariance {:?} vs {:?}",
            a.mean.len(),
            b.mean.len(),
            a.covariance.dim(),
            b.covariance.dim()
        )));
    }
    for v in a
        .mean
        .iter()
        .chain(b.mean.iter())
        .chain(a.covariance.iter())
        .chain(b.covariance.iter())
    {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite entry in Gaussian stats".into()));
        }
    }

    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let ca = {
        let m = to_dmatrix(&a.covariance);
        (&m + m.transpose()) / 2.0
    };
    let cb = {
        let m = to_dmatrix(&b.covariance);
        (&m + m.transpose()) / 2.0
    };

    let sqrt_a = symmetric_sqrt(&ca);
    let inner = &sqrt_a * &cb * sqrt_a;
    let inner = (&inner + inner.transpose()) / 2.0;
    let cross_trace: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();

    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross_trace;
    Ok(value.max(0.0))
}
