use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::language::Token;
use crate::model::TransformerParams;
use crate::numeric::log_softmax;

/// Step of the central second differences.
pub const FISHER_STEP: f64 = 1e-3;

/// Largest parameter subset accepted.
pub const FISHER_MAX_PARAMS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherReport {
    /// Symmetrised matrix, row-major.
    pub matrix: Vec<Vec<f64>>,
    /// Largest `|F_ij - F_ji|` before symmetrisation.
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
}

impl FisherReport {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let k = self.matrix.len();
        DMatrix::from_fn(k, k, |i, j| self.matrix[i][j])
    }
}

/// Hessian at `theta` of `theta' -> H(P(theta), P(theta'))` by central
/// second differences with step [`FISHER_STEP`].
///
/// `cross_entropy(theta')` must hold the reference distribution fixed at
/// `theta`.
pub fn fisher_matrix<F>(cross_entropy: F, theta: &[f64]) -> Result<FisherReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let k = theta.len();
    if k == 0 || k > FISHER_MAX_PARAMS {
        return Err(domain(format!(
            "parameter subset must have 1..={FISHER_MAX_PARAMS} entries"
        )));
    }
    let h = FISHER_STEP;
    let eval = |moves: &[(usize, f64)]| {
        let mut t = theta.to_vec();
        for &(i, d) in moves {
            t[i] += d;
        }
        cross_entropy(&t)
    };
    let f0 = eval(&[])?;
    let mut raw = DMatrix::zeros(k, k);
    for i in 0..k {
        raw[(i, i)] = (eval(&[(i, h)])? - 2.0 * f0 + eval(&[(i, -h)])?) / (h * h);
        for j in 0..k {
            if i != j {
                let v = eval(&[(i, h), (j, h)])? - eval(&[(i, h), (j, -h)])? - eval(&[(i, -h), (j, h)])?
                    + eval(&[(i, -h), (j, -h)])?;
                raw[(i, j)] = v / (4.0 * h * h);
            }
        }
    }
    let asymmetry = (&raw - raw.transpose()).abs().max();
    let sym = (&raw + raw.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    Ok(FisherReport {
        matrix: sym.row_iter().map(|r| r.iter().copied().collect()).collect(),
        asymmetry,
        min_eigenvalue,
    })
}

/// One scalar entry of the transformer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "matrix", content = "index", rename_all = "snake_case")]
pub enum ParamRef {
    Embedding(usize, usize),
    Value(usize, usize),
    Bilinear(usize, usize),
}

fn entry(params: &mut TransformerParams, r: ParamRef) -> &mut f64 {
    let (e, a, b) = params.parts_mut();
    match r {
        ParamRef::Embedding(i, j) => &mut e[(i, j)],
        ParamRef::Value(i, j) => &mut a[(i, j)],
        ParamRef::Bilinear(i, j) => &mut b[(i, j)],
    }
}

/// Fisher matrix of the transformer on `subset`, with cross-entropy
/// averaged over weighted contexts. Perturbed embeddings are not
/// renormalised.
pub fn transformer_fisher(
    params: &TransformerParams,
    contexts: &[(Vec<Token>, f64)],
    subset: &[ParamRef],
) -> Result<FisherReport> {
    let (n, d) = (params.alphabet_size(), params.dim());
    for r in subset {
        let ok = match *r {
            ParamRef::Embedding(i, j) => i < n && j < d,
            ParamRef::Value(i, j) | ParamRef::Bilinear(i, j) => i < d && j < d,
        };
        if !ok {
            return Err(domain(format!("{r:?} outside the parameter shapes")));
        }
    }
    if contexts.is_empty() || contexts.iter().any(|(c, _)| c.is_empty()) {
        return Err(domain("contexts must be non-empty"));
    }
    let reference: Vec<Vec<f64>> = contexts
        .iter()
        .map(|(c, _)| params.next_token_distribution(c))
        .collect::<Result<_>>()?;
    let total: f64 = contexts.iter().map(|(_, w)| w).sum();
    let theta: Vec<f64> = subset.iter().map(|&r| *entry(&mut params.clone(), r)).collect();
    fisher_matrix(
        |t| {
            let mut q = params.clone();
            for (&r, &v) in subset.iter().zip(t) {
                *entry(&mut q, r) = v;
            }
            let mut acc = 0.0;
            for ((c, w), p) in contexts.iter().zip(&reference) {
                let lq = log_softmax(&q.next_token_logits(c)?);
                acc -= w / total * p.iter().zip(&lq).map(|(pi, l)| pi * l).sum::<f64>();
            }
            Ok(acc)
        },
        &theta,
    )
}
