use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dimension, domain, Error, Result};
use crate::language::{NextTokenModel, Token};
use crate::numeric::{argmax, rng_from_seed, sample_categorical, softmax};

/// Tolerance on the unit norm of embedding rows.
pub const EMBEDDING_NORM_TOL: f64 = 1e-9;

/// Single-head, single-layer attention model.
///
/// The next-token logits after a history `u_1..u_{t-1}` are
/// `z_i = (1/xi) * e_i^T (sum_j pi_j A u_j)` where `e_i` is row `i` of the
/// embedding table and the weights `pi_j` are the softmax of the bilinear
/// scores `u_{t-1}^T B u_j`. The query is always the most recent vector.
/// Tokens enter the history through their embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    embedding: DMatrix<f64>,
    value: DMatrix<f64>,
    bilinear: DMatrix<f64>,
    temperature: f64,
    stop_token: Token,
}

/// Options for [`TransformerParams::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub alphabet_size: usize,
    pub dim: usize,
    /// Standard deviation of the entries of `A`.
    pub value_scale: f64,
    /// Standard deviation of the entries of `B`.
    pub bilinear_scale: f64,
    pub temperature: f64,
    pub stop_token: Token,
}

impl InitConfig {
    pub fn new(alphabet_size: usize, dim: usize) -> Self {
        Self {
            alphabet_size,
            dim,
            value_scale: 1.5,
            bilinear_scale: 1.5,
            temperature: 0.5,
            stop_token: alphabet_size - 1,
        }
    }
}

/// Intermediate values of one forward pass, kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub pi: Vec<f64>,
    /// Attention-weighted history `sum_j pi_j u_j`.
    pub mixed: DVector<f64>,
    /// Context vector `A * mixed`.
    pub context: DVector<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TransformerParams {
    pub fn new(
        embedding: DMatrix<f64>,
        value: DMatrix<f64>,
        bilinear: DMatrix<f64>,
        temperature: f64,
        stop_token: Token,
    ) -> Result<Self> {
        let p = Self {
            embedding,
            value,
            bilinear,
            temperature,
            stop_token,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn random(cfg: &InitConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let (n, d) = (cfg.alphabet_size, cfg.dim);
        let mut embedding = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        normalize_rows(&mut embedding);
        let value = DMatrix::from_fn(d, d, |_, _| {
            cfg.value_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let bilinear = DMatrix::from_fn(d, d, |_, _| {
            cfg.bilinear_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self::new(embedding, value, bilinear, cfg.temperature, cfg.stop_token)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.embedding.shape();
        if n < 2 || d < 1 {
            return Err(dimension(format!("embedding must be N x d with N >= 2, got {n} x {d}")));
        }
        if self.value.shape() != (d, d) || self.bilinear.shape() != (d, d) {
            return Err(dimension("A and B must be d x d"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.stop_token >= n {
            return Err(domain("stop token outside alphabet"));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.embedding) && finite(&self.value) && finite(&self.bilinear)) {
            return Err(Error::NonFinite("parameter entries".into()));
        }
        for (i, row) in self.embedding.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > EMBEDDING_NORM_TOL {
                return Err(domain(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    pub fn alphabet_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn embedding(&self) -> &DMatrix<f64> {
        &self.embedding
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn bilinear(&self) -> &DMatrix<f64> {
        &self.bilinear
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn stop_token(&self) -> Token {
        self.stop_token
    }

    pub fn with_value(mut self, value: DMatrix<f64>) -> Result<Self> {
        self.value = value;
        self.validate()?;
        Ok(self)
    }

    pub fn with_bilinear(mut self, bilinear: DMatrix<f64>) -> Result<Self> {
        self.bilinear = bilinear;
        self.validate()?;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_embedding(mut self, embedding: DMatrix<f64>) -> Result<Self> {
        self.embedding = embedding;
        self.validate()?;
        Ok(self)
    }

    /// Raw mutable access for optimisers and finite-difference probes; the
    /// caller is responsible for restoring the invariants.
    pub(crate) fn parts_mut(&mut self) -> (&mut DMatrix<f64>, &mut DMatrix<f64>, &mut DMatrix<f64>) {
        (&mut self.embedding, &mut self.value, &mut self.bilinear)
    }

    /// Embedding row of `token` as a column vector.
    pub fn token_vector(&self, token: Token) -> DVector<f64> {
        self.embedding.row(token).transpose()
    }

    pub fn embed(&self, tokens: &[Token]) -> Result<Vec<DVector<f64>>> {
        self.check_tokens(tokens)?;
        Ok(tokens.iter().map(|&t| self.token_vector(t)).collect())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.alphabet_size()) {
            Some(t) => Err(domain(format!("token {t} outside alphabet"))),
            None => Ok(()),
        }
    }

    /// Attention weights over an explicit history of vectors.
    pub fn attention_weights_for(&self, history: &[DVector<f64>]) -> Result<Vec<f64>> {
        let query = history
            .last()
            .ok_or_else(|| domain("attention needs a non-empty history"))?;
        let key_dir = self.bilinear.tr_mul(query);
        let scores: Vec<f64> = history.iter().map(|u| key_dir.dot(u)).collect();
        Ok(softmax(&scores))
    }

    /// Attention weights `pi_{t,1..t-1}` after a token history.
    pub fn attention_weights(&self, history: &[Token]) -> Result<Vec<f64>> {
        self.attention_weights_for(&self.embed(history)?)
    }

    /// Logits for an explicit history of vectors.
    pub fn logits_for(&self, history: &[DVector<f64>]) -> Result<Vec<f64>> {
        let pi = self.attention_weights_for(history)?;
        let mut mixed = DVector::zeros(self.dim());
        for (w, u) in pi.iter().zip(history) {
            mixed.axpy(*w, u, 1.0);
        }
        Ok(self.readout(&(&self.value * mixed)))
    }

    /// `(1/xi) * E * context`.
    pub fn readout(&self, context: &DVector<f64>) -> Vec<f64> {
        let z = &self.embedding * context;
        z.iter().map(|v| v / self.temperature).collect()
    }

    pub fn next_token_logits(&self, history: &[Token]) -> Result<Vec<f64>> {
        self.logits_for(&self.embed(history)?)
    }

    pub fn next_token_distribution(&self, history: &[Token]) -> Result<Vec<f64>> {
        Ok(softmax(&self.next_token_logits(history)?))
    }

    pub(crate) fn forward(&self, history: &[Token]) -> Forward {
        let query = self.embedding.row(*history.last().expect("non-empty history"));
        let key_dir = &self.bilinear.transpose() * query.transpose();
        let scores: Vec<f64> = history
            .iter()
            .map(|&t| self.embedding.row(t).dot(&key_dir.transpose()))
            .collect();
        let pi = softmax(&scores);
        let mut mixed = DVector::zeros(self.dim());
        for (w, &t) in pi.iter().zip(history) {
            mixed += self.embedding.row(t).transpose() * *w;
        }
        let context = &self.value * &mixed;
        let logits = self.readout(&context);
        let probs = softmax(&logits);
        Forward {
            pi,
            mixed,
            context,
            logits,
            probs,
        }
    }

    /// Autoregressive decoding from `prompt` until the stop token or until
    /// the sequence holds `max_len` tokens. Greedy decoding breaks ties
    /// toward the lowest token id.
    pub fn generate(&self, prompt: &[Token], max_len: usize, mode: DecodeMode, seed: u64) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(domain("generation needs a non-empty prompt"));
        }
        self.check_tokens(prompt)?;
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

pub(crate) fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

impl NextTokenModel for TransformerParams {
    fn alphabet_size(&self) -> usize {
        TransformerParams::alphabet_size(self)
    }

    fn stop_token(&self) -> Token {
        self.stop_token
    }

    /// An empty prefix yields the uniform distribution (empty attention sum).
    fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            let n = TransformerParams::alphabet_size(self);
            return Ok(vec![1.0 / n as f64; n]);
        }
        self.next_token_distribution(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt_len: usize,
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<Token>,
    /// Next-token distribution at each generated step.
    pub distributions: Vec<Vec<f64>>,
}

impl Generation {
    pub fn generated(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }
}
