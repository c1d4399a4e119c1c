//! Linear state space model read out through the same embedding/logit path
//! as the attention model.
//!
//! State recursion `x_k = A_k x_{k-1} + B_k s_k` with `x_0 = 0`, where `s_k`
//! is the embedding of the k-th token; the next-token logits after `t-1`
//! tokens are `(1/xi) * E * C * x_{t-1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{dimension, domain, Result};
use crate::language::{NextTokenModel, Token};
use crate::numeric::{argmax, rng_from_seed, sample_categorical, softmax};

use super::tvvar::CoefficientProvider;
use super::{DecodeMode, Generation};

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub state: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub output: DMatrix<f64>,
    /// Optional per-step `(A_k, B_k)` replacing the time-invariant pair at
    /// step `k` (1-based; index 0 here is step 1).
    pub overrides: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl SsmParams {
    pub fn new(state: DMatrix<f64>, input: DMatrix<f64>, output: DMatrix<f64>) -> Result<Self> {
        let p = Self {
            state,
            input,
            output,
            overrides: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_overrides(mut self, overrides: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        self.overrides = overrides;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.state.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.state.nrows();
        let square = |m: &DMatrix<f64>| m.shape() == (d, d);
        if !(square(&self.state) && square(&self.input) && square(&self.output)) {
            return Err(dimension("SSM matrices must all be d x d"));
        }
        if self.overrides.iter().any(|(a, b)| !square(a) || !square(b)) {
            return Err(dimension("SSM overrides must be d x d"));
        }
        let all = [&self.state, &self.input, &self.output];
        let finite = all.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self
                .overrides
                .iter()
                .all(|(a, b)| a.iter().chain(b.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(crate::Error::NonFinite("SSM entries".into()));
        }
        Ok(())
    }

    fn step_matrices(&self, k: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        match self.overrides.get(k - 1) {
            Some((a, b)) => (a, b),
            None => (&self.state, &self.input),
        }
    }

    /// State after consuming `inputs` from the zero state.
    pub fn final_state(&self, inputs: &[DVector<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (idx, s) in inputs.iter().enumerate() {
            let (a, b) = self.step_matrices(idx + 1);
            x = a * x + b * s;
        }
        x
    }

    /// The recursion unrolled into TV-VAR coefficients
    /// `A_tj = C * A_{t-1} * ... * A_{j+1} * B_j`.
    pub fn unrolled(&self) -> UnrolledSsm<'_> {
        UnrolledSsm { ssm: self }
    }
}

pub struct UnrolledSsm<'a> {
    ssm: &'a SsmParams,
}

impl CoefficientProvider for UnrolledSsm<'_> {
    fn coefficient(&self, t: usize, j: usize, _history: &[DVector<f64>]) -> DMatrix<f64> {
        let (_, b_j) = self.ssm.step_matrices(j);
        let mut m = b_j.clone();
        for k in (j + 1)..t {
            let (a_k, _) = self.ssm.step_matrices(k);
            m = a_k * m;
        }
        &self.ssm.output * m
    }
}

/// An SSM with an output embedding table, temperature and stop token.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmModel {
    pub ssm: SsmParams,
    pub embedding: DMatrix<f64>,
    pub temperature: f64,
    pub stop_token: Token,
}

impl SsmModel {
    pub fn new(ssm: SsmParams, embedding: DMatrix<f64>, temperature: f64, stop_token: Token) -> Result<Self> {
        if embedding.ncols() != ssm.dim() {
            return Err(dimension("embedding width must match SSM dimension"));
        }
        if !(temperature > 0.0) {
            return Err(domain("temperature must be positive"));
        }
        if stop_token >= embedding.nrows() {
            return Err(domain("stop token outside alphabet"));
        }
        Ok(Self {
            ssm,
            embedding,
            temperature,
            stop_token,
        })
    }

    fn embed(&self, tokens: &[Token]) -> Result<Vec<DVector<f64>>> {
        tokens
            .iter()
            .map(|&t| {
                if t >= self.embedding.nrows() {
                    Err(domain(format!("token {t} outside alphabet")))
                } else {
                    Ok(self.embedding.row(t).transpose())
                }
            })
            .collect()
    }

    pub fn next_token_distribution(&self, history: &[Token]) -> Result<Vec<f64>> {
        let x = self.ssm.final_state(&self.embed(history)?);
        let z = &self.embedding * (&self.ssm.output * x);
        Ok(softmax(&z.iter().map(|v| v / self.temperature).collect::<Vec<_>>()))
    }

    /// Decoding with the same stop rule and tie-breaking as
    /// [`TransformerParams::generate`](super::TransformerParams::generate).
    pub fn generate(&self, prompt: &[Token], max_len: usize, mode: DecodeMode, seed: u64) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(domain("generation needs a non-empty prompt"));
        }
        let mut rng = rng_from_seed(seed);
        let mut tokens = prompt.to_vec();
        let mut distributions = Vec::new();
        while tokens.len() < max_len {
            let p = self.next_token_distribution(&tokens)?;
            let tok = match mode {
                DecodeMode::Greedy => argmax(&p),
                DecodeMode::Sample => sample_categorical(&p, &mut rng),
            };
            distributions.push(p);
            tokens.push(tok);
            if tok == self.stop_token {
                break;
            }
        }
        Ok(Generation {
            prompt_len: prompt.len(),
            tokens,
            distributions,
        })
    }
}

/// Generates from an SSM model; see [`SsmModel::generate`].
pub fn ssm_generate(
    model: &SsmModel,
    prompt: &[Token],
    max_len: usize,
    mode: DecodeMode,
    seed: u64,
) -> Result<Generation> {
    model.generate(prompt, max_len, mode, seed)
}

impl NextTokenModel for SsmModel {
    fn alphabet_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn stop_token(&self) -> Token {
        self.stop_token
    }

    fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.next_token_distribution(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tvvar::tvvar_next;
    use crate::model::{InitConfig, TransformerParams};
    use crate::numeric::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    fn embedding() -> DMatrix<f64> {
        TransformerParams::random(&InitConfig::new(5, 3), 0)
            .unwrap()
            .embedding()
            .clone()
    }

    fn random_matrix(d: usize, seed: u64, scale: f64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(d, d, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    }

    #[test]
    fn memoryless_ssm_depends_on_last_token_only() {
        let d = 3;
        let ssm = SsmParams::new(DMatrix::zeros(d, d), DMatrix::identity(d, d), DMatrix::identity(d, d)).unwrap();
        let m = SsmModel::new(ssm, embedding(), 0.5, 4).unwrap();
        let a = m.next_token_distribution(&[0, 1, 2]).unwrap();
        let b = m.next_token_distribution(&[3, 3, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_state_gives_constant_output() {
        let d = 3;
        let ssm = SsmParams::new(DMatrix::identity(d, d), DMatrix::zeros(d, d), DMatrix::identity(d, d)).unwrap();
        let m = SsmModel::new(ssm, embedding(), 0.5, 4).unwrap();
        let a = m.next_token_distribution(&[0, 1]).unwrap();
        let b = m.next_token_distribution(&[4, 2, 3, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0.2; 5]);
    }

    #[test]
    fn unrolled_form_matches_recursion() {
        let d = 3;
        let ssm = SsmParams::new(
            random_matrix(d, 0, 0.5),
            random_matrix(d, 1, 1.0),
            random_matrix(d, 2, 1.0),
        )
        .unwrap()
        .with_overrides(vec![(random_matrix(d, 3, 0.5), random_matrix(d, 4, 1.0))])
        .unwrap();
        let m = SsmModel::new(ssm, embedding(), 0.7, 4).unwrap();
        let toks = [2, 0, 3, 1];
        let hist: Vec<_> = toks.iter().map(|&t| m.embedding.row(t).transpose()).collect();
        let a = tvvar_next(&m.ssm.unrolled(), &m.embedding, m.temperature, &hist).unwrap();
        let b = m.next_token_distribution(&toks).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
