//! Finite token alphabets and ground-truth teacher processes.
//!
//! A [`TeacherProcess`] supplies exact next-token conditionals, which every
//! downstream measure is computed from. Two kinds exist: an order-`k` Markov
//! chain given by an explicit transition table, and a "teacher transformer"
//! that wraps [`TransformerParams`] and reuses the model's forward pass.
//!
//! Anything that can produce a next-token distribution for a prefix implements
//! [`NextTokenModel`]; ensembles, training and sampling are written against
//! that trait.

use std::path::Path;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{ModelFile, TransformerParams};
use crate::numeric::{
    check_distribution, checked_pow, decode_tuple, encode_tuple, rng_from_seed, sample_categorical, PROB_SUM_TOL,
};

pub type Token = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlphabet {
    size: usize,
    stop_token: Token,
}

impl TokenAlphabet {
    pub fn new(size: usize, stop_token: Token) -> Result<Self> {
        if size < 2 {
            return Err(domain(format!("alphabet size must be at least 2, got {size}")));
        }
        if stop_token >= size {
            return Err(domain(format!(
                "stop token {stop_token} outside alphabet of size {size}"
            )));
        }
        Ok(Self { size, stop_token })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stop_token(&self) -> Token {
        self.stop_token
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(domain(format!("token {t} outside alphabet of size {}", self.size))),
            None => Ok(()),
        }
    }
}

/// A source of exact next-token distributions.
pub trait NextTokenModel: Sync {
    fn alphabet_size(&self) -> usize;

    fn stop_token(&self) -> Token;

    /// Distribution of the next token given everything emitted so far
    /// (prompt followed by any generated tokens).
    fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>>;
}

/// Wraps a closure as a [`NextTokenModel`]; handy for constructed processes
/// such as copy channels.
pub struct FnModel<F> {
    alphabet_size: usize,
    stop_token: Token,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[Token]) -> Vec<f64> + Sync,
{
    pub fn new(alphabet_size: usize, stop_token: Token, f: F) -> Self {
        Self {
            alphabet_size,
            stop_token,
            f,
        }
    }
}

impl<F> NextTokenModel for FnModel<F>
where
    F: Fn(&[Token]) -> Vec<f64> + Sync,
{
    fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    fn stop_token(&self) -> Token {
        self.stop_token
    }

    fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        if let Some(t) = prefix.iter().find(|&&t| t >= self.alphabet_size) {
            return Err(domain(format!("token {t} outside alphabet")));
        }
        Ok((self.f)(prefix))
    }
}

/// Order-`k` Markov transition table. Row `r` is the distribution of the next
/// token after the context whose base-`N` encoding (oldest token most
/// significant) is `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovKernel {
    order: usize,
    rows: Vec<Vec<f64>>,
}

impl MarkovKernel {
    pub fn new(alphabet_size: usize, order: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let expected = checked_pow(alphabet_size, order);
        if rows.len() as u128 != expected {
            return Err(domain(format!(
                "order-{order} table over {alphabet_size} tokens needs {expected} rows, got {}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != alphabet_size {
                return Err(domain(format!("row {i} has {} entries", row.len())));
            }
            check_distribution(row, PROB_SUM_TOL, &format!("transition row {i}"))?;
        }
        Ok(Self { order, rows })
    }

    /// Rows drawn independently from the flat Dirichlet distribution.
    pub fn random(alphabet_size: usize, order: usize, seed: u64) -> Result<Self> {
        if alphabet_size < 2 {
            return Err(domain("alphabet needs at least two tokens"));
        }
        let count = checked_pow(alphabet_size, order);
        if count > 1_000_000 {
            return Err(Error::SizeLimit {
                what: "markov table",
                needed: count,
                limit: 1_000_000,
            });
        }
        let mut rng = rng_from_seed(seed);
        let rows = (0..count)
            .map(|_| {
                let g: Vec<f64> = (0..alphabet_size).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let z: f64 = g.iter().sum();
                g.into_iter().map(|x| x / z).collect()
            })
            .collect();
        Self::new(alphabet_size, order, rows)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Conditional after `prefix`. A prefix shorter than the order is
    /// completed by averaging over all consistent full contexts.
    fn conditional(&self, n: usize, prefix: &[Token]) -> Vec<f64> {
        if prefix.len() >= self.order {
            let ctx = &prefix[prefix.len() - self.order..];
            return self.rows[encode_tuple(ctx, n)].clone();
        }
        let known = encode_tuple(prefix, n);
        let modulus = n.pow(prefix.len() as u32);
        let mut out = vec![0.0; n];
        let mut count = 0usize;
        for (r, row) in self.rows.iter().enumerate() {
            if r % modulus == known {
                count += 1;
                for (o, p) in out.iter_mut().zip(row) {
                    *o += p;
                }
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        out
    }
}

/// Distribution over prompts of a given length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptPrior {
    /// Uniform over all `N^n` prompts.
    #[default]
    Uniform,
    /// Explicit probabilities over the `N^n` prompts, indexed by the base-`N`
    /// encoding of the prompt.
    Explicit { probabilities: Vec<f64> },
    /// Prompts generated by an order-1 Markov chain.
    Markov {
        initial: Vec<f64>,
        transitions: Vec<Vec<f64>>,
    },
}

impl PromptPrior {
    /// Probabilities of all `N^n` prompts of length `n`.
    pub fn probabilities(&self, alphabet_size: usize, n: usize) -> Result<Vec<f64>> {
        let count = checked_pow(alphabet_size, n);
        if count > 10_000_000 {
            return Err(Error::SizeLimit {
                what: "prompt prior",
                needed: count,
                limit: 10_000_000,
            });
        }
        let count = count as usize;
        match self {
            PromptPrior::Uniform => Ok(vec![1.0 / count as f64; count]),
            PromptPrior::Explicit { probabilities } => {
                if probabilities.len() != count {
                    return Err(domain(format!(
                        "explicit prompt prior has {} entries, expected {count}",
                        probabilities.len()
                    )));
                }
                check_distribution(probabilities, PROB_SUM_TOL, "prompt prior")?;
                Ok(probabilities.clone())
            }
            PromptPrior::Markov { initial, transitions } => {
                if initial.len() != alphabet_size || transitions.len() != alphabet_size {
                    return Err(domain("markov prompt prior has wrong shape"));
                }
                check_distribution(initial, PROB_SUM_TOL, "prompt prior initial")?;
                let kernel = MarkovKernel::new(alphabet_size, 1, transitions.clone())?;
                let mut out = Vec::with_capacity(count);
                for idx in 0..count {
                    let prompt = decode_tuple(idx, alphabet_size, n);
                    let mut p = if n == 0 { 1.0 } else { initial[prompt[0]] };
                    for w in prompt.windows(2) {
                        p *= kernel.rows[w[0]][w[1]];
                    }
                    out.push(p);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum TeacherKind {
    Markov(MarkovKernel),
    Transformer(TransformerParams),
}

/// Ground-truth generative process with exact conditionals.
#[derive(Debug, Clone)]
pub struct TeacherProcess {
    alphabet: TokenAlphabet,
    kind: TeacherKind,
    prompt_prior: PromptPrior,
}

impl TeacherProcess {
    pub fn markov(alphabet: TokenAlphabet, kernel: MarkovKernel, prompt_prior: PromptPrior) -> Result<Self> {
        if kernel.rows.first().map(Vec::len) != Some(alphabet.size()) {
            return Err(domain("kernel width does not match alphabet"));
        }
        Ok(Self {
            alphabet,
            kind: TeacherKind::Markov(kernel),
            prompt_prior,
        })
    }

    pub fn transformer(params: TransformerParams, prompt_prior: PromptPrior) -> Result<Self> {
        let alphabet = TokenAlphabet::new(params.alphabet_size(), params.stop_token())?;
        Ok(Self {
            alphabet,
            kind: TeacherKind::Transformer(params),
            prompt_prior,
        })
    }

    /// i.i.d. uniform tokens.
    pub fn uniform(alphabet: TokenAlphabet) -> Self {
        let n = alphabet.size();
        let kernel = MarkovKernel {
            order: 0,
            rows: vec![vec![1.0 / n as f64; n]],
        };
        Self {
            alphabet,
            kind: TeacherKind::Markov(kernel),
            prompt_prior: PromptPrior::Uniform,
        }
    }

    pub fn alphabet(&self) -> TokenAlphabet {
        self.alphabet
    }

    pub fn kind(&self) -> &TeacherKind {
        &self.kind
    }

    pub fn prompt_prior(&self) -> &PromptPrior {
        &self.prompt_prior
    }

    pub fn with_prompt_prior(mut self, prior: PromptPrior) -> Self {
        self.prompt_prior = prior;
        self
    }

    /// Exact next-token distribution after `prefix`.
    ///
    /// A transformer teacher with an empty prefix has an empty attention sum,
    /// so its logits vanish and the conditional is uniform.
    pub fn exact_conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.alphabet.check_tokens(prefix)?;
        match &self.kind {
            TeacherKind::Markov(k) => Ok(k.conditional(self.alphabet.size(), prefix)),
            TeacherKind::Transformer(p) => {
                if prefix.is_empty() {
                    let n = self.alphabet.size();
                    Ok(vec![1.0 / n as f64; n])
                } else {
                    p.next_token_distribution(prefix)
                }
            }
        }
    }

    /// Samples from the empty prefix until the stop token or `max_len` tokens.
    pub fn sample_sequence(&self, max_len: usize, seed: u64) -> Result<Vec<Token>> {
        let mut rng = rng_from_seed(seed);
        sample_continuation(self, &[], max_len, &mut rng)
    }

    /// `ln P(continuation | prompt)` in nats; `-inf` for impossible sequences.
    pub fn sequence_logprob(&self, prompt: &[Token], continuation: &[Token]) -> Result<f64> {
        sequence_logprob(self, prompt, continuation)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TeacherFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TeacherFile::from(self))?)
    }
}

impl NextTokenModel for TeacherProcess {
    fn alphabet_size(&self) -> usize {
        self.alphabet.size()
    }

    fn stop_token(&self) -> Token {
        self.alphabet.stop_token()
    }

    fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        self.exact_conditional(prefix)
    }
}

/// Extends `prompt` by sampling until the stop token or until the sequence
/// (prompt included) reaches `max_len`. Returns only the sampled tokens.
pub fn sample_continuation<M, R>(model: &M, prompt: &[Token], max_len: usize, rng: &mut R) -> Result<Vec<Token>>
where
    M: NextTokenModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while seq.len() < max_len {
        let p = model.conditional(&seq)?;
        let tok = sample_categorical(&p, rng);
        seq.push(tok);
        out.push(tok);
        if tok == model.stop_token() {
            break;
        }
    }
    Ok(out)
}

/// Sum of log conditionals of `continuation` after `prompt`.
pub fn sequence_logprob<M>(model: &M, prompt: &[Token], continuation: &[Token]) -> Result<f64>
where
    M: NextTokenModel + ?Sized,
{
    let mut seq = prompt.to_vec();
    let mut acc = 0.0;
    for &tok in continuation {
        if tok >= model.alphabet_size() {
            return Err(domain(format!("token {tok} outside alphabet")));
        }
        let p = model.conditional(&seq)?;
        acc += p[tok].ln();
        seq.push(tok);
    }
    Ok(acc)
}

/// A context reachable under a process: prompt plus a generated prefix that
/// has not yet emitted the stop token.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedContext {
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
    /// Joint probability of prompt and generated prefix.
    pub weight: f64,
    /// Next-token distribution of the process at this context.
    pub next: Vec<f64>,
}

/// Enumerates every context with positive probability for prompts of length
/// `prompt_len` drawn from `prior` and generation up to `horizon` total
/// tokens. Branches end at the stop token. Output order is by prompt index,
/// then depth-first in token order.
pub fn reachable_contexts<M>(
    model: &M,
    prior: &[f64],
    prompt_len: usize,
    horizon: usize,
) -> Result<Vec<WeightedContext>>
where
    M: NextTokenModel + ?Sized,
{
    let n_tok = model.alphabet_size();
    if horizon <= prompt_len {
        return Err(domain("horizon must exceed the prompt length"));
    }
    if prior.len() as u128 != checked_pow(n_tok, prompt_len) {
        return Err(domain("prior size does not match alphabet and prompt length"));
    }
    let per_prompt: Vec<Result<Vec<WeightedContext>>> = prior
        .par_iter()
        .enumerate()
        .map(|(idx, &w)| {
            let mut out = Vec::new();
            if w > 0.0 {
                let prompt = decode_tuple(idx, n_tok, prompt_len);
                walk(model, prompt, prompt_len, horizon, w, &mut out)?;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for chunk in per_prompt {
        all.extend(chunk?);
    }
    Ok(all)
}

fn walk<M>(
    model: &M,
    tokens: Vec<Token>,
    prompt_len: usize,
    horizon: usize,
    weight: f64,
    out: &mut Vec<WeightedContext>,
) -> Result<()>
where
    M: NextTokenModel + ?Sized,
{
    let next = model.conditional(&tokens)?;
    let children: Vec<(Token, f64)> = next
        .iter()
        .enumerate()
        .filter(|&(tok, &p)| p > 0.0 && tok != model.stop_token())
        .map(|(tok, &p)| (tok, weight * p))
        .collect();
    let depth = tokens.len();
    out.push(WeightedContext {
        tokens: tokens.clone(),
        prompt_len,
        weight,
        next,
    });
    if depth + 1 < horizon {
        for (tok, w) in children {
            let mut child = tokens.clone();
            child.push(tok);
            walk(model, child, prompt_len, horizon, w, out)?;
        }
    }
    Ok(())
}

/// On-disk teacher specification (version "v1").
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherFile {
    pub version: String,
    pub alphabet_size: usize,
    pub stop_token: Token,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelFile>,
    #[serde(default)]
    pub prompt_prior: PromptPrior,
}

impl From<&TeacherProcess> for TeacherFile {
    fn from(t: &TeacherProcess) -> Self {
        let (kind, order, transitions, model) = match &t.kind {
            TeacherKind::Markov(k) => ("markov", Some(k.order), Some(k.rows.clone()), None),
            TeacherKind::Transformer(p) => ("transformer", None, None, Some(ModelFile::from(p))),
        };
        TeacherFile {
            version: "v1".into(),
            alphabet_size: t.alphabet.size(),
            stop_token: t.alphabet.stop_token(),
            kind: kind.into(),
            order,
            transitions,
            model,
            prompt_prior: t.prompt_prior.clone(),
        }
    }
}

impl TryFrom<TeacherFile> for TeacherProcess {
    type Error = Error;

    fn try_from(f: TeacherFile) -> Result<Self> {
        if f.version != "v1" {
            return Err(Error::Format(format!("unsupported teacher version {:?}", f.version)));
        }
        let alphabet = TokenAlphabet::new(f.alphabet_size, f.stop_token)?;
        let teacher = match f.kind.as_str() {
            "markov" => {
                let order = f
                    .order
                    .ok_or_else(|| Error::Format("markov teacher needs \"order\"".into()))?;
                let rows = f
                    .transitions
                    .ok_or_else(|| Error::Format("markov teacher needs \"transitions\"".into()))?;
                TeacherProcess::markov(
                    alphabet,
                    MarkovKernel::new(alphabet.size(), order, rows)?,
                    f.prompt_prior,
                )?
            }
            "transformer" => {
                let m = f
                    .model
                    .ok_or_else(|| Error::Format("transformer teacher needs \"model\"".into()))?;
                let params = TransformerParams::try_from(m)?;
                if params.alphabet_size() != alphabet.size() || params.stop_token() != alphabet.stop_token() {
                    return Err(Error::Format("embedded model disagrees with alphabet".into()));
                }
                TeacherProcess::transformer(params, f.prompt_prior)?
            }
            other => return Err(Error::Format(format!("unknown teacher kind {other:?}"))),
        };
        if let PromptPrior::Markov { .. } = teacher.prompt_prior {
            teacher.prompt_prior.probabilities(alphabet.size(), 1)?;
        }
        Ok(teacher)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> TeacherProcess {
        let a = TokenAlphabet::new(2, 1).unwrap();
        let k = MarkovKernel::new(2, 1, vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        TeacherProcess::markov(a, k, PromptPrior::Uniform).unwrap()
    }

    #[test]
    fn alphabet_invariants() {
        assert!(TokenAlphabet::new(1, 0).is_err());
        assert!(TokenAlphabet::new(3, 3).is_err());
        assert!(TokenAlphabet::new(3, 2).is_ok());
    }

    #[test]
    fn random_kernel_is_seeded() {
        let a = MarkovKernel::random(3, 2, 7).unwrap();
        assert_eq!(a.rows().len(), 9);
        assert_eq!(a, MarkovKernel::random(3, 2, 7).unwrap());
        assert_ne!(a, MarkovKernel::random(3, 2, 8).unwrap());
    }

    #[test]
    fn markov_lookup() {
        let a = TokenAlphabet::new(2, 1).unwrap();
        let k = MarkovKernel::new(2, 1, vec![vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap();
        let t = TeacherProcess::markov(a, k, PromptPrior::Uniform).unwrap();
        assert_eq!(t.exact_conditional(&[0]).unwrap(), vec![0.5, 0.5]);
        // Empty prefix averages the rows.
        let p = t.exact_conditional(&[]).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15 && (p[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_token_is_domain_error() {
        let t = two_state();
        assert!(matches!(t.exact_conditional(&[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn uniform_teacher() {
        let t = TeacherProcess::uniform(TokenAlphabet::new(4, 3).unwrap());
        assert_eq!(t.exact_conditional(&[1, 2, 0]).unwrap(), vec![0.25; 4]);
        let lp = t.sequence_logprob(&[0], &[1, 2, 0]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn logprob_by_hand() {
        let t = two_state();
        assert_eq!(t.sequence_logprob(&[0], &[]).unwrap(), 0.0);
        let lp = t.sequence_logprob(&[0], &[0, 1]).unwrap();
        assert!((lp - (0.9f64.ln() + 0.1f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_sequence_is_neg_inf() {
        let a = TokenAlphabet::new(2, 1).unwrap();
        let k = MarkovKernel::new(2, 1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = TeacherProcess::markov(a, k, PromptPrior::Uniform).unwrap();
        assert_eq!(t.sequence_logprob(&[0], &[1]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn deterministic_stop_sequence() {
        let a = TokenAlphabet::new(4, 3).unwrap();
        let k = MarkovKernel::new(4, 0, vec![vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let t = TeacherProcess::markov(a, k, PromptPrior::Uniform).unwrap();
        assert_eq!(t.sample_sequence(10, 7).unwrap(), vec![3]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let t = two_state();
        assert_eq!(t.sample_sequence(50, 11).unwrap(), t.sample_sequence(50, 11).unwrap());
    }

    #[test]
    fn markov_prompt_prior() {
        let prior = PromptPrior::Markov {
            initial: vec![0.5, 0.5],
            transitions: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        };
        let p = prior.probabilities(2, 2).unwrap();
        assert!((p[0] - 0.45).abs() < 1e-15);
        assert!((p[3] - 0.4).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_json_roundtrip() {
        let t = two_state();
        let back = TeacherProcess::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back.exact_conditional(&[1]).unwrap(), vec![0.2, 0.8]);
        assert!(TeacherProcess::from_json(r#"{"version":"v1","alphabet_size":2,"stop_token":1,"kind":"markov","order":1,"transitions":[[0.5,0.5],[0.5,0.5]],"extra":1}"#).is_err());
    }

    #[test]
    fn contexts_stop_at_stop_token() {
        let t = two_state();
        let prior = PromptPrior::Uniform.probabilities(2, 1).unwrap();
        let ctx = reachable_contexts(&t, &prior, 1, 3).unwrap();
        // prompts [0],[1]; each extends by token 0 only (1 is stop).
        assert_eq!(ctx.len(), 4);
        assert_eq!(ctx[1].tokens, vec![0, 0]);
        assert!((ctx[1].weight - 0.45).abs() < 1e-15);
    }
}
