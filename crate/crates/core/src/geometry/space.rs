use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Error, Result};
use crate::numeric::{check_distribution, rng_from_seed};

/// Tolerance on unit row norms.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Rows deviating from unit norm by more than this are renormalised by the
/// file loader.
pub const LOADER_NORM_TOL: f64 = 1e-6;

/// Weighted collection of unit vectors with the inner product as similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVectorSpace {
    vectors: DMatrix<f64>,
    weights: Vec<f64>,
}

impl SemanticVectorSpace {
    pub fn new(vectors: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        let (m, d) = vectors.shape();
        if m == 0 || d == 0 {
            return Err(dimension("a space needs at least one vector of positive dimension"));
        }
        if weights.len() != m {
            return Err(dimension(format!("{} weights for {m} vectors", weights.len())));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector entries".into()));
        }
        for (i, row) in vectors.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(domain(format!("row {i} has norm {norm}")));
            }
        }
        check_distribution(&weights, 1e-12, "space weights")?;
        Ok(Self { vectors, weights })
    }

    /// Uniform weights.
    pub fn uniform(vectors: DMatrix<f64>) -> Result<Self> {
        let m = vectors.nrows();
        Self::new(vectors, vec![1.0 / m as f64; m])
    }

    /// `count` Gaussian directions in `dim` dimensions, normalised, with
    /// uniform weights.
    pub fn random(count: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut v = DMatrix::from_fn(count, dim, |_, _| StandardNormal.sample(&mut rng));
        crate::model::normalize_rows(&mut v);
        Self::uniform(v)
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Gram matrix of inner products.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.vectors * self.vectors.transpose()
    }

    /// Applies `q` (d x d) to every vector: rows become `q * s_i`.
    pub fn transformed(&self, q: &DMatrix<f64>) -> Result<Self> {
        if q.shape() != (self.dim(), self.dim()) {
            return Err(dimension("transform must be d x d"));
        }
        Self::new(&self.vectors * q.transpose(), self.weights.clone())
    }

    /// Reorders points so that new point `k` is old point `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.count() {
            return Err(dimension("permutation length differs from point count"));
        }
        let v = DMatrix::from_fn(self.count(), self.dim(), |i, j| self.vectors[(perm[i], j)]);
        let w = perm.iter().map(|&p| self.weights[p]).collect();
        Self::new(v, w)
    }

    /// Reads a space file, renormalising rows whose norm is off by more than
    /// [`LOADER_NORM_TOL`]. The flag reports whether that happened.
    pub fn load(path: &Path) -> Result<(Self, bool)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, bool)> {
        let f: SpaceFile = serde_json::from_str(text)?;
        if f.vectors.len() != f.count || f.vectors.iter().any(|r| r.len() != f.dim) {
            return Err(Error::Format(format!("vectors must be {} x {}", f.count, f.dim)));
        }
        let mut v = DMatrix::from_fn(f.count, f.dim, |i, j| f.vectors[i][j]);
        let mut normalized = false;
        for mut row in v.row_iter_mut() {
            let norm = row.norm();
            if (norm - 1.0).abs() > LOADER_NORM_TOL {
                if norm == 0.0 {
                    return Err(Error::Format("zero vector cannot be normalised".into()));
                }
                row /= norm;
                normalized = true;
            }
        }
        Ok((Self::new(v, f.weights)?, normalized))
    }

    pub fn to_json(&self) -> Result<String> {
        let f = SpaceFile {
            vectors: self.vectors.row_iter().map(|r| r.iter().copied().collect()).collect(),
            weights: self.weights.clone(),
            dim: self.dim(),
            count: self.count(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }
}

/// On-disk space format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceFile {
    pub vectors: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub dim: usize,
    pub count: usize,
}

/// Inner product of rows `i` and `j`, which for unit rows is their cosine.
pub fn cosine(space: &SemanticVectorSpace, i: usize, j: usize) -> Result<f64> {
    let m = space.count();
    if i >= m || j >= m {
        return Err(domain(format!("index out of range for {m} points")));
    }
    Ok(space.vectors.row(i).dot(&space.vectors.row(j)))
}
