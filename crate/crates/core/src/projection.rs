//! Random dimension reduction of semantic vector spaces.
//!
//! A projection is an `m x N` matrix `A`; inner products `s_i^T s_j` are
//! compared against `(A s_i)^T (A s_j) = s_i^T P s_j` with `P = A^T A`.
//! Structured kinds take `m` distinct rows of an orthonormal transform,
//! scale them by `sqrt(N/m)` and multiply on the right by a random sign
//! diagonal `D_sigma`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dimension, domain, Result};
use crate::geometry::{gw_cost_gram, gw_oracle_gram, SemanticVectorSpace, ORACLE_MAX_POINTS};
use crate::numeric::rng_from_seed;

/// Default JL constant.
pub const DEFAULT_JL_CONSTANT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// iid `N(0, 1/m)` entries.
    Gaussian,
    /// Rows of the orthonormal DCT-II matrix.
    PartialDct,
    /// Rows of the normalised Sylvester Hadamard matrix; `N` a power of two.
    PartialHadamard,
    /// A user-supplied matrix.
    Explicit,
}

impl ProjectionKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Gaussian => "gaussian",
            ProjectionKind::PartialDct => "partial_dct",
            ProjectionKind::PartialHadamard => "partial_hadamard",
            ProjectionKind::Explicit => "explicit",
        }
    }
}

impl std::str::FromStr for ProjectionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ProjectionKind::Gaussian),
            "partial_dct" | "dct" => Ok(ProjectionKind::PartialDct),
            "partial_hadamard" | "hadamard" => Ok(ProjectionKind::PartialHadamard),
            other => Err(domain(format!("unknown projection kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    kind: ProjectionKind,
    seed: u64,
    /// Selected transform rows, ascending (structured kinds only).
    rows: Option<Vec<usize>>,
    /// Rademacher diagonal (structured kinds only).
    signs: Option<Vec<f64>>,
    matrix: DMatrix<f64>,
}

/// Entry `(k, n)` of the orthonormal DCT-II matrix of size `big_n`.
fn dct_entry(k: usize, n: usize, big_n: usize) -> f64 {
    let nf = big_n as f64;
    let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
    alpha * (PI * (2 * n + 1) as f64 * k as f64 / (2.0 * nf)).cos()
}

/// Entry `(i, j)` of the Sylvester Hadamard matrix divided by `sqrt(N)`.
fn hadamard_entry(i: usize, j: usize, big_n: usize) -> f64 {
    let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    sign / (big_n as f64).sqrt()
}

/// Draws a projection of the requested kind; deterministic in `seed`.
pub fn make_projection(kind: ProjectionKind, n: usize, m: usize, seed: u64) -> Result<ProjectionOperator> {
    if m == 0 || m > n {
        return Err(dimension(format!("need 1 <= m <= N, got m = {m}, N = {n}")));
    }
    let mut rng = rng_from_seed(seed);
    match kind {
        ProjectionKind::Gaussian => {
            let normal = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("positive variance");
            // Row-major draw order so the matrix does not depend on storage layout.
            let mut matrix = DMatrix::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    matrix[(i, j)] = normal.sample(&mut rng);
                }
            }
            Ok(ProjectionOperator {
                kind,
                seed,
                rows: None,
                signs: None,
                matrix,
            })
        }
        ProjectionKind::PartialDct | ProjectionKind::PartialHadamard => {
            if kind == ProjectionKind::PartialHadamard && !n.is_power_of_two() {
                return Err(dimension(format!("Hadamard needs N a power of two, got {n}")));
            }
            let mut rows = index::sample(&mut rng, n, m).into_vec();
            rows.sort_unstable();
            let signs: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            Ok(structured(kind, seed, rows, signs))
        }
        ProjectionKind::Explicit => Err(domain(
            "explicit projections are built with ProjectionOperator::explicit",
        )),
    }
}

fn structured(kind: ProjectionKind, seed: u64, rows: Vec<usize>, signs: Vec<f64>) -> ProjectionOperator {
    let n = signs.len();
    let scale = (n as f64 / rows.len() as f64).sqrt();
    let entry = |k: usize, j: usize| match kind {
        ProjectionKind::PartialDct => dct_entry(k, j, n),
        _ => hadamard_entry(k, j, n),
    };
    let matrix = DMatrix::from_fn(rows.len(), n, |i, j| scale * entry(rows[i], j) * signs[j]);
    ProjectionOperator {
        kind,
        seed,
        rows: Some(rows),
        signs: Some(signs),
        matrix,
    }
}

impl ProjectionOperator {
    /// Wraps a given `m x N` matrix.
    pub fn explicit(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.nrows() > matrix.ncols() {
            return Err(dimension("need 1 <= m <= N"));
        }
        Ok(Self {
            kind: ProjectionKind::Explicit,
            seed: 0,
            rows: None,
            signs: None,
            matrix,
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::explicit(DMatrix::identity(n, n))
    }

    /// Replaces the sign diagonal of a structured operator, keeping its rows.
    pub fn with_signs(&self, signs: Vec<f64>) -> Result<Self> {
        let rows = self
            .rows
            .clone()
            .ok_or_else(|| domain("only structured projections carry signs"))?;
        if signs.len() != self.in_dim() || signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err(domain("signs must be N entries of +1 or -1"));
        }
        Ok(structured(self.kind, self.seed, rows, signs))
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rows(&self) -> Option<&[usize]> {
        self.rows.as_deref()
    }

    pub fn signs(&self) -> Option<&[f64]> {
        self.signs.as_deref()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Little-endian bytes of the matrix in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.matrix.len());
        for row in self.matrix.row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(dimension(format!(
                "vector has length {}, projection expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(&self.matrix * x)
    }

    /// Projected vectors as rows (`M x m`), not renormalised.
    pub fn project(&self, space: &SemanticVectorSpace) -> Result<DMatrix<f64>> {
        if space.dim() != self.in_dim() {
            return Err(dimension(format!(
                "space dimension {} differs from projection input {}",
                space.dim(),
                self.in_dim()
            )));
        }
        Ok(space.vectors() * self.matrix.transpose())
    }

    /// Projected space with rows renormalised to the unit sphere.
    pub fn project_space(&self, space: &SemanticVectorSpace) -> Result<SemanticVectorSpace> {
        let mut v = self.project(space)?;
        for (i, mut row) in v.row_iter_mut().enumerate() {
            let norm = row.norm();
            if norm == 0.0 {
                return Err(domain(format!("row {i} projects to zero")));
            }
            row /= norm;
        }
        SemanticVectorSpace::new(v, space.weights().to_vec())
    }
}

/// Which bound [`jl_dimension`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JlBound {
    /// `m >= (C / eps^2) ln M`.
    Standard,
    /// `m >= (C / eps^2) ln(M / eta) ln N`.
    Rip { eta: f64, ambient: usize },
}

/// Smallest integer `m` meeting the bound. `points` is real so that
/// boundary cases such as `M = e` can be stated exactly.
pub fn jl_dimension(points: f64, eps: f64, c: f64, bound: JlBound) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(domain(format!("eps must lie in (0, 1], got {eps}")));
    }
    if !(points >= 2.0) || !(c > 0.0) {
        return Err(domain("need M >= 2 and C > 0"));
    }
    let raw = match bound {
        JlBound::Standard => c / (eps * eps) * points.ln(),
        JlBound::Rip { eta, ambient } => {
            if !(eta > 0.0 && eta < 1.0) || ambient < 2 {
                return Err(domain("need eta in (0, 1) and N >= 2"));
            }
            c / (eps * eps) * (points / eta).ln() * (ambient as f64).ln()
        }
    };
    // The guard absorbs rounding in ln so exact integers are not bumped up.
    Ok(((raw - 1e-9).ceil() as usize).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JlReport {
    pub max_deviation: f64,
    /// Pairs `(i, j)` with `i <= j` whose deviation exceeds `eps`.
    pub violating_pairs: Vec<(usize, usize)>,
}

/// Entrywise `|G - A G A^T|` over all pairs including the diagonal.
fn deviations(space: &SemanticVectorSpace, op: &ProjectionOperator) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let y = op.project(space)?;
    Ok((space.gram(), &y * y.transpose()))
}

pub fn jl_check(space: &SemanticVectorSpace, op: &ProjectionOperator, eps: f64) -> Result<JlReport> {
    let (g, h) = deviations(space, op)?;
    let m = space.count();
    let mut max_deviation = 0.0f64;
    let mut violating_pairs = Vec::new();
    for i in 0..m {
        for j in i..m {
            let d = (g[(i, j)] - h[(i, j)]).abs();
            max_deviation = max_deviation.max(d);
            if d > eps {
                violating_pairs.push((i, j));
            }
        }
    }
    Ok(JlReport {
        max_deviation,
        violating_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionDistortion {
    /// `sum_ij w_i w_j (s_i^T s_j - s_i^T P s_j)^2`.
    pub identity_coupling: f64,
    /// Minimum over permutation couplings, for uniform spaces of at most
    /// six points.
    pub oracle: Option<f64>,
}

/// Distortion between a space and its (unnormalised) projection.
pub fn compression_distortion(space: &SemanticVectorSpace, op: &ProjectionOperator) -> Result<CompressionDistortion> {
    let (g, h) = deviations(space, op)?;
    let w = space.weights();
    let plan = DMatrix::from_fn(w.len(), w.len(), |i, j| if i == j { w[i] } else { 0.0 });
    let identity_coupling = gw_cost_gram(&g, &h, &plan)?;
    let m = space.count();
    let uniform = w.iter().all(|x| (x - 1.0 / m as f64).abs() <= 1e-12);
    let oracle = if uniform && m <= ORACLE_MAX_POINTS {
        Some(gw_oracle_gram(&g, &h)?.cost)
    } else {
        None
    };
    Ok(CompressionDistortion {
        identity_coupling,
        oracle,
    })
}

/// One row of a JL experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JlTrial {
    pub seed: u64,
    pub kind: ProjectionKind,
    pub ambient: usize,
    pub m: usize,
    pub eps: f64,
    pub max_deviation: f64,
    /// Identity-coupling distortion of the projected space.
    pub distortion: f64,
}

/// Projects `space` once per seed in `seeds` and records the largest
/// inner-product deviation and the distortion of each draw.
pub fn jl_trials(
    space: &SemanticVectorSpace,
    kind: ProjectionKind,
    m: usize,
    eps: f64,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<JlTrial>> {
    use rayon::prelude::*;
    seeds
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| {
            let op = make_projection(kind, space.dim(), m, seed)?;
            let rep = jl_check(space, &op, eps)?;
            let dist = compression_distortion(space, &op)?;
            Ok(JlTrial {
                seed,
                kind,
                ambient: space.dim(),
                m,
                eps,
                max_deviation: rep.max_deviation,
                distortion: dist.identity_coupling,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jl_dimension_cases() {
        assert_eq!(jl_dimension(100.0, 0.5, 4.0, JlBound::Standard).unwrap(), 74);
        assert_eq!(
            jl_dimension(std::f64::consts::E, 1.0, 1.0, JlBound::Standard).unwrap(),
            1
        );
        let rip = JlBound::Rip {
            eta: 0.05,
            ambient: 1024,
        };
        assert_eq!(jl_dimension(100.0, 0.5, 1.0, rip).unwrap(), 211);
        assert!(jl_dimension(100.0, 0.0, 4.0, JlBound::Standard).is_err());
    }

    #[test]
    fn full_hadamard_with_unit_signs_is_orthogonal() {
        let op = make_projection(ProjectionKind::PartialHadamard, 4, 4, 7)
            .unwrap()
            .with_signs(vec![1.0; 4])
            .unwrap();
        let p = op.matrix().tr_mul(op.matrix());
        assert!((p - DMatrix::identity(4, 4)).abs().max() < 1e-12);
    }

    #[test]
    fn full_dct_is_orthogonal() {
        let op = make_projection(ProjectionKind::PartialDct, 6, 6, 1).unwrap();
        let p = op.matrix().tr_mul(op.matrix());
        assert!((p - DMatrix::identity(6, 6)).abs().max() < 1e-12);
    }

    #[test]
    fn gaussian_gram_averages_to_identity() {
        let mut acc = DMatrix::zeros(8, 8);
        let trials = 10_000;
        for seed in 0..trials {
            let op = make_projection(ProjectionKind::Gaussian, 8, 8, seed).unwrap();
            acc += op.matrix().tr_mul(op.matrix());
        }
        acc /= trials as f64;
        assert!((acc - DMatrix::identity(8, 8)).abs().max() < 0.02);
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [
            ProjectionKind::Gaussian,
            ProjectionKind::PartialDct,
            ProjectionKind::PartialHadamard,
        ] {
            let a = make_projection(kind, 16, 5, 3).unwrap();
            let b = make_projection(kind, 16, 5, 3).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
            assert_ne!(a.to_bytes(), make_projection(kind, 16, 5, 4).unwrap().to_bytes());
        }
    }

    #[test]
    fn invalid_dims() {
        assert!(make_projection(ProjectionKind::Gaussian, 4, 5, 0).is_err());
        assert!(make_projection(ProjectionKind::Gaussian, 4, 0, 0).is_err());
        assert!(make_projection(ProjectionKind::PartialHadamard, 6, 3, 0).is_err());
    }

    #[test]
    fn identity_and_zero_projections() {
        let s = SemanticVectorSpace::random(6, 5, 0).unwrap();
        let id = ProjectionOperator::identity(5).unwrap();
        assert_eq!(jl_check(&s, &id, 0.1).unwrap().max_deviation, 0.0);
        assert_eq!(compression_distortion(&s, &id).unwrap().identity_coupling, 0.0);
        let zero = ProjectionOperator::explicit(DMatrix::zeros(2, 5)).unwrap();
        let r = jl_check(&s, &zero, 0.5).unwrap();
        assert!((r.max_deviation - 1.0).abs() < 1e-12);
        assert!(r.violating_pairs.contains(&(0, 0)));
    }

    #[test]
    fn distortion_matches_double_loop() {
        let s = SemanticVectorSpace::random(4, 6, 0).unwrap();
        let op = make_projection(ProjectionKind::Gaussian, 6, 2, 0).unwrap();
        let y: Vec<DVector<f64>> = (0..4)
            .map(|i| op.apply(&s.vectors().row(i).transpose()).unwrap())
            .collect();
        let mut direct = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let si = s.vectors().row(i);
                let d = si.dot(&s.vectors().row(j)) - y[i].dot(&y[j]);
                direct += 0.25 * 0.25 * d * d;
            }
        }
        let r = compression_distortion(&s, &op).unwrap();
        assert!((r.identity_coupling - direct).abs() < 1e-12);
        let dev = jl_check(&s, &op, 1.0).unwrap().max_deviation;
        assert!(r.identity_coupling <= dev * dev + 1e-12);
        assert!(r.oracle.unwrap() <= r.identity_coupling + 1e-12);
    }
}
