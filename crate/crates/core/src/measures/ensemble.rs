use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::language::{NextTokenModel, PromptPrior, Token};
use crate::numeric::{check_distribution, checked_pow, decode_tuple, encode_tuple, log_sum_exp, rng_from_seed};

/// Largest number of full sequences an ensemble may hold.
pub const ENSEMBLE_LIMIT: u128 = 10_000_000;

/// Tolerance on the total mass of an ensemble.
pub const MASS_TOL: f64 = 1e-10;

/// Exhaustive joint distribution of prompt `S_{1:n}` and continuation
/// `U_{n+1:T}`.
///
/// Sequences are indexed by the base-`N` encoding of the full length-`T`
/// tuple, first token most significant. The stop token is absorbing: once a
/// generated position emits it, every later position is the stop token with
/// probability one. Continuations that stop early are therefore represented
/// by padding with the stop token, and the padded steps carry no information.
#[derive(Debug, Clone)]
pub struct SequenceEnsemble {
    alphabet_size: usize,
    stop_token: Token,
    prompt_len: usize,
    horizon: usize,
    /// `levels[t][i]`: log-probability that the first `t` tokens have
    /// encoding `i`. `levels[horizon]` is the full joint.
    levels: Vec<Vec<f64>>,
    /// `cont_levels[t - n][i]`: log-probability that `U_{n+1:t}` has encoding
    /// `i`, marginalised over prompts.
    cont_levels: Vec<Vec<f64>>,
}

impl SequenceEnsemble {
    /// Enumerates all continuations of every prompt under `model`.
    pub fn build<M>(model: &M, prior: &PromptPrior, prompt_len: usize, horizon: usize) -> Result<Self>
    where
        M: NextTokenModel + ?Sized,
    {
        let probs = prior.probabilities(model.alphabet_size(), prompt_len)?;
        Self::build_with_prompt_probs(model, &probs, prompt_len, horizon)
    }

    /// As [`build`](Self::build) with explicit prompt probabilities indexed by
    /// prompt encoding.
    pub fn build_with_prompt_probs<M>(
        model: &M,
        prompt_probs: &[f64],
        prompt_len: usize,
        horizon: usize,
    ) -> Result<Self>
    where
        M: NextTokenModel + ?Sized,
    {
        let n_tok = model.alphabet_size();
        let stop = model.stop_token();
        check_size(n_tok, prompt_len, horizon)?;
        if prompt_probs.len() as u128 != checked_pow(n_tok, prompt_len) {
            return Err(domain("prompt probabilities do not match alphabet and prompt length"));
        }
        check_distribution(prompt_probs, 1e-12, "prompt prior")?;
        let block = n_tok.pow((horizon - prompt_len) as u32);
        let mut joint = vec![f64::NEG_INFINITY; n_tok.pow(horizon as u32)];
        joint
            .par_chunks_mut(block)
            .enumerate()
            .try_for_each(|(idx, chunk)| -> Result<()> {
                let w = prompt_probs[idx];
                if w > 0.0 {
                    let prompt = decode_tuple(idx, n_tok, prompt_len);
                    fill(model, n_tok, stop, horizon, prompt_len, prompt, w.ln(), chunk)?;
                }
                Ok(())
            })?;
        Self::from_log_joint(n_tok, stop, prompt_len, horizon, joint)
    }

    /// Wraps an explicit log-joint over all length-`horizon` tuples.
    pub fn from_log_joint(
        alphabet_size: usize,
        stop_token: Token,
        prompt_len: usize,
        horizon: usize,
        log_joint: Vec<f64>,
    ) -> Result<Self> {
        check_size(alphabet_size, prompt_len, horizon)?;
        if stop_token >= alphabet_size {
            return Err(domain("stop token outside alphabet"));
        }
        if log_joint.len() != alphabet_size.pow(horizon as u32) {
            return Err(domain("log-joint has the wrong length"));
        }
        if log_joint.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("log-joint entries".into()));
        }
        let mut levels = vec![Vec::new(); horizon + 1];
        levels[horizon] = log_joint;
        for t in (0..horizon).rev() {
            levels[t] = levels[t + 1].chunks(alphabet_size).map(log_sum_exp).collect();
        }
        let mass = levels[0][0].exp();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(domain(format!("ensemble mass is {mass}, not 1")));
        }
        let mut cont_levels = Vec::with_capacity(horizon - prompt_len + 1);
        for t in prompt_len..=horizon {
            let width = alphabet_size.pow((t - prompt_len) as u32);
            let lvl = &levels[t];
            let cont: Vec<f64> = (0..width)
                .map(|u| {
                    let terms: Vec<f64> = (0..lvl.len() / width).map(|s| lvl[s * width + u]).collect();
                    log_sum_exp(&terms)
                })
                .collect();
            cont_levels.push(cont);
        }
        Ok(Self {
            alphabet_size,
            stop_token,
            prompt_len,
            horizon,
            levels,
            cont_levels,
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn stop_token(&self) -> Token {
        self.stop_token
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of full sequences `N^T`.
    pub fn len(&self) -> usize {
        self.levels[self.horizon].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Log-probabilities of the full sequences, by encoding.
    pub fn log_joint(&self) -> &[f64] {
        &self.levels[self.horizon]
    }

    /// Log-probabilities of the first `t` tokens, by encoding.
    pub fn level(&self, t: usize) -> &[f64] {
        &self.levels[t]
    }

    /// Log-probabilities of `U_{n+1:t}` marginalised over prompts.
    pub fn continuation_level(&self, t: usize) -> &[f64] {
        &self.cont_levels[t - self.prompt_len]
    }

    /// Total probability, recomputed from the full joint.
    pub fn total_mass(&self) -> f64 {
        log_sum_exp(self.log_joint()).exp()
    }

    /// Prompt marginal, by prompt encoding.
    pub fn prompt_marginal(&self) -> Vec<f64> {
        self.levels[self.prompt_len].iter().map(|l| l.exp()).collect()
    }

    pub fn decode(&self, index: usize) -> Vec<Token> {
        decode_tuple(index, self.alphabet_size, self.horizon)
    }

    pub fn encode(&self, tokens: &[Token]) -> usize {
        encode_tuple(tokens, self.alphabet_size)
    }

    /// `ln P(s, u_{n+1:t})` for a prefix `tokens` of length `t`.
    pub fn log_prefix(&self, tokens: &[Token]) -> Result<f64> {
        self.check_prefix(tokens)?;
        Ok(self.levels[tokens.len()][self.encode(tokens)])
    }

    /// `P(U_t = . | s, u_{n+1:t-1})` where `context` is the prompt followed by
    /// the first `t-1-n` continuation tokens.
    pub fn conditional_given_prompt(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let t = context.len() + 1;
        let idx = self.encode(context);
        let base = self.levels[t - 1][idx];
        if base == f64::NEG_INFINITY {
            return Err(Error::ZeroProbabilityPath(format!("{context:?}")));
        }
        Ok((0..self.alphabet_size)
            .map(|k| (self.levels[t][idx * self.alphabet_size + k] - base).exp())
            .collect())
    }

    /// `P(U_t = . | u_{n+1:t-1})` with the prompt marginalised under the
    /// ensemble's prompt prior.
    pub fn conditional_marginal(&self, continuation: &[Token]) -> Result<Vec<f64>> {
        let t = self.prompt_len + continuation.len() + 1;
        if t > self.horizon {
            return Err(domain("continuation reaches the horizon"));
        }
        self.check_tokens(continuation)?;
        let idx = self.encode(continuation);
        let lvl_prev = self.continuation_level(t - 1);
        let lvl = self.continuation_level(t);
        let base = lvl_prev[idx];
        if base == f64::NEG_INFINITY {
            return Err(Error::ZeroProbabilityPath(format!("continuation {continuation:?}")));
        }
        Ok((0..self.alphabet_size)
            .map(|k| (lvl[idx * self.alphabet_size + k] - base).exp())
            .collect())
    }

    /// Draws full sequence indices from the joint.
    pub fn sample_indices(&self, count: usize, seed: u64) -> Result<Vec<usize>> {
        let weights: Vec<f64> = self.log_joint().iter().map(|l| l.exp()).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| domain(format!("cannot sample ensemble: {e}")))?;
        let mut rng = rng_from_seed(seed);
        Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
    }

    /// Draws full sequences `(prompt, continuation)` from the joint.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<Vec<(Vec<Token>, Vec<Token>)>> {
        Ok(self
            .sample_indices(count, seed)?
            .into_iter()
            .map(|i| {
                let mut toks = self.decode(i);
                let cont = toks.split_off(self.prompt_len);
                (toks, cont)
            })
            .collect())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.alphabet_size) {
            Some(t) => Err(domain(format!("token {t} outside alphabet"))),
            None => Ok(()),
        }
    }

    fn check_prefix(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.horizon {
            return Err(domain("prefix longer than the horizon"));
        }
        self.check_tokens(tokens)
    }

    fn check_context(&self, context: &[Token]) -> Result<()> {
        if context.len() < self.prompt_len || context.len() >= self.horizon {
            return Err(domain(format!(
                "context length {} outside [{}, {})",
                context.len(),
                self.prompt_len,
                self.horizon
            )));
        }
        self.check_tokens(context)
    }
}

fn check_size(n_tok: usize, prompt_len: usize, horizon: usize) -> Result<()> {
    if horizon <= prompt_len {
        return Err(domain("horizon must exceed the prompt length"));
    }
    let needed = checked_pow(n_tok, horizon);
    if needed > ENSEMBLE_LIMIT {
        return Err(Error::SizeLimit {
            what: "sequence ensemble",
            needed,
            limit: ENSEMBLE_LIMIT,
        });
    }
    Ok(())
}

/// Fills the block of one prompt. `chunk` is indexed by continuation encoding.
#[allow(clippy::too_many_arguments)]
fn fill<M>(
    model: &M,
    n_tok: usize,
    stop: Token,
    horizon: usize,
    prompt_len: usize,
    prompt: Vec<Token>,
    log_w: f64,
    chunk: &mut [f64],
) -> Result<()>
where
    M: NextTokenModel + ?Sized,
{
    let mut stack: Vec<(Vec<Token>, f64)> = vec![(prompt, log_w)];
    while let Some((seq, lp)) = stack.pop() {
        if seq.len() == horizon {
            chunk[encode_tuple(&seq[prompt_len..], n_tok)] = lp;
            continue;
        }
        if seq.len() > prompt_len && seq[seq.len() - 1] == stop {
            let mut padded = seq;
            padded.resize(horizon, stop);
            chunk[encode_tuple(&padded[prompt_len..], n_tok)] = lp;
            continue;
        }
        let p = model.conditional(&seq)?;
        if p.len() != n_tok {
            return Err(domain("model returned a distribution of the wrong length"));
        }
        check_distribution(&p, 1e-9, "model conditional")?;
        for (k, &pk) in p.iter().enumerate().rev() {
            if pk > 0.0 {
                let mut child = seq.clone();
                child.push(k);
                stack.push((child, lp + pk.ln()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{FnModel, TeacherProcess, TokenAlphabet};
    use crate::model::{InitConfig, TransformerParams};

    #[test]
    fn uniform_binary_gives_quarter_mass() {
        let t = TeacherProcess::uniform(TokenAlphabet::new(2, 1).unwrap());
        let e = SequenceEnsemble::build(&t, &PromptPrior::Uniform, 1, 2).unwrap();
        // The stop token 1 is absorbing but with T = 2 there is one generated step.
        for l in e.log_joint() {
            assert!((l.exp() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_model_has_one_continuation_per_prompt() {
        let m = FnModel::new(3, 2, |_: &[Token]| vec![0.0, 1.0, 0.0]);
        let e = SequenceEnsemble::build(&m, &PromptPrior::Uniform, 1, 3).unwrap();
        let support: Vec<usize> = (0..e.len()).filter(|&i| e.log_joint()[i] > f64::NEG_INFINITY).collect();
        assert_eq!(support.len(), 3);
        for i in support {
            assert_eq!(e.decode(i)[1..], [1, 1]);
            assert!((e.log_joint()[i].exp() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_is_absorbing() {
        let m = FnModel::new(2, 1, |_: &[Token]| vec![0.5, 0.5]);
        let e = SequenceEnsemble::build(&m, &PromptPrior::Uniform, 1, 4).unwrap();
        // After a generated stop (token 1) only stops follow.
        let lp = e.log_prefix(&[0, 1, 1, 1]).unwrap();
        assert!((lp.exp() - 0.25).abs() < 1e-15);
        assert_eq!(e.log_prefix(&[0, 1, 0, 0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn transformer_mass_by_independent_pass() {
        let p = TransformerParams::random(&InitConfig::new(3, 2), 0).unwrap();
        let e = SequenceEnsemble::build(&p, &PromptPrior::Uniform, 2, 4).unwrap();
        let direct: f64 = e.log_joint().iter().map(|l| l.exp()).sum();
        assert!((direct - 1.0).abs() < 1e-10);
        assert!((e.total_mass() - 1.0).abs() < 1e-10);
        for m in e.prompt_marginal() {
            assert!((m - 1.0 / 9.0).abs() < 1e-10);
        }
    }

    #[test]
    fn size_limit_is_enforced() {
        let t = TeacherProcess::uniform(TokenAlphabet::new(10, 9).unwrap());
        assert!(matches!(
            SequenceEnsemble::build(&t, &PromptPrior::Uniform, 2, 8),
            Err(Error::SizeLimit { .. })
        ));
    }
}
