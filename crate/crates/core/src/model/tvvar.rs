//! Time-varying vector autoregression form of an autoregressive model.
//!
//! The next-token distribution is `softmax((1/xi) * E * sum_j A_tj u_j)` for
//! coefficient matrices `A_tj` supplied by a [`CoefficientProvider`]. The
//! attention model is the special case `A_tj = pi_tj * A`; a linear state
//! space model is the special case `A_tj = C * A^(t-1-j) * B`.

use nalgebra::{DMatrix, DVector};

use crate::error::{dimension, Error, Result};
use crate::numeric::softmax;

use super::TransformerParams;

/// Supplies the coefficient matrix `A_tj` for `1 <= j < t`.
///
/// `t` is the 1-based position being predicted and `history` holds
/// `u_1..u_{t-1}`.
pub trait CoefficientProvider {
    fn coefficient(&self, t: usize, j: usize, history: &[DVector<f64>]) -> DMatrix<f64>;
}

impl<F> CoefficientProvider for F
where
    F: Fn(usize, usize, &[DVector<f64>]) -> DMatrix<f64>,
{
    fn coefficient(&self, t: usize, j: usize, history: &[DVector<f64>]) -> DMatrix<f64> {
        self(t, j, history)
    }
}

/// `A_tj = pi_tj * A` with attention weights from the model's bilinear form.
pub struct AttentionProvider<'a> {
    params: &'a TransformerParams,
}

impl<'a> AttentionProvider<'a> {
    pub fn new(params: &'a TransformerParams) -> Self {
        Self { params }
    }
}

impl CoefficientProvider for AttentionProvider<'_> {
    fn coefficient(&self, _t: usize, j: usize, history: &[DVector<f64>]) -> DMatrix<f64> {
        let pi = self
            .params
            .attention_weights_for(history)
            .expect("history is non-empty whenever j exists");
        self.params.value() * pi[j - 1]
    }
}

/// Next-token distribution of the TV-VAR model with output embedding table
/// `embedding` (N x d) and temperature `temperature`.
pub fn tvvar_next<P: CoefficientProvider + ?Sized>(
    provider: &P,
    embedding: &DMatrix<f64>,
    temperature: f64,
    history: &[DVector<f64>],
) -> Result<Vec<f64>> {
    Ok(softmax(&tvvar_logits(provider, embedding, temperature, history)?))
}

pub fn tvvar_logits<P: CoefficientProvider + ?Sized>(
    provider: &P,
    embedding: &DMatrix<f64>,
    temperature: f64,
    history: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let d = embedding.ncols();
    let t = history.len() + 1;
    let mut acc = DVector::zeros(d);
    for (idx, u) in history.iter().enumerate() {
        if u.len() != d {
            return Err(dimension("history vector has wrong dimension"));
        }
        let a = provider.coefficient(t, idx + 1, history);
        if a.shape() != (d, d) {
            return Err(dimension(format!(
                "coefficient A_{t},{} has shape {:?}",
                idx + 1,
                a.shape()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient A_{t},{}", idx + 1)));
        }
        acc += a * u;
    }
    let z = embedding * acc;
    Ok(z.iter().map(|v| v / temperature).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitConfig;

    #[test]
    fn attention_provider_reproduces_transformer() {
        let p = TransformerParams::random(&InitConfig::new(5, 3), 0).unwrap();
        let hist = p.embed(&[0, 3, 1, 4]).unwrap();
        let via_tvvar = tvvar_next(&AttentionProvider::new(&p), p.embedding(), p.temperature(), &hist).unwrap();
        let direct = p.next_token_distribution(&[0, 3, 1, 4]).unwrap();
        for (a, b) in via_tvvar.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_provider_is_uniform() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let hist = p.embed(&[0, 1]).unwrap();
        let zero = |_: usize, _: usize, _: &[DVector<f64>]| DMatrix::zeros(3, 3);
        assert_eq!(tvvar_next(&zero, p.embedding(), 1.0, &hist).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn non_finite_coefficient_is_rejected() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let hist = p.embed(&[0, 1]).unwrap();
        let bad = |_: usize, _: usize, _: &[DVector<f64>]| DMatrix::from_element(3, 3, f64::NAN);
        assert!(matches!(
            tvvar_next(&bad, p.embedding(), 1.0, &hist),
            Err(Error::NonFinite(_))
        ));
    }
}
