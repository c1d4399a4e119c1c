//! Gradient-descent training against a teacher with three objectives:
//! plain cross-entropy, directed information plus `lambda` times
//! cross-entropy, and directed information minus `lambda` times expected
//! reward.
//!
//! The information and reward terms are computed exactly on the student's
//! own sequence ensemble. Their gradients use the score-function identity
//! `grad E_P[h] = E_P[h * grad ln P(u|s)]`, which is exact here because the
//! expectation is a finite sum; for `h = ln P(u|s) - ln P(u)` the remaining
//! terms of the product rule vanish.

use std::fmt::Debug;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::language::{reachable_contexts, NextTokenModel, TeacherProcess, Token};
use crate::measures::SequenceEnsemble;
use crate::numeric::{decode_tuple, encode_tuple, kl_divergence, rng_from_seed};

use super::loss::{accumulate, cross_entropy_loss, Gradient, Target, TrainingExample};
use super::transformer::{normalize_rows, TransformerParams};

/// A scalar score of a prompt and its continuation.
///
/// The continuation passed in is trimmed after the first stop token.
pub trait RewardFunction: Send + Sync + Debug {
    fn reward(&self, prompt: &[Token], continuation: &[Token]) -> f64;

    /// Declared `(min, max)` of the reward.
    fn range(&self) -> (f64, f64);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantReward(pub f64);

impl RewardFunction for ConstantReward {
    fn reward(&self, _: &[Token], _: &[Token]) -> f64 {
        self.0
    }

    fn range(&self) -> (f64, f64) {
        (self.0, self.0)
    }
}

/// 1 when `token` does not occur in the continuation, else 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoTokenReward(pub Token);

impl RewardFunction for NoTokenReward {
    fn reward(&self, _: &[Token], continuation: &[Token]) -> f64 {
        if continuation.contains(&self.0) {
            0.0
        } else {
            1.0
        }
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

/// Log-likelihood of the continuation under a teacher, floored at `floor`
/// so the reward stays finite.
#[derive(Debug, Clone)]
pub struct TeacherLogLikelihood {
    pub teacher: TeacherProcess,
    pub floor: f64,
}

impl TeacherLogLikelihood {
    pub fn new(teacher: TeacherProcess) -> Self {
        Self { teacher, floor: -50.0 }
    }
}

impl RewardFunction for TeacherLogLikelihood {
    fn reward(&self, prompt: &[Token], continuation: &[Token]) -> f64 {
        self.teacher
            .sequence_logprob(prompt, continuation)
            .unwrap_or(f64::NEG_INFINITY)
            .max(self.floor)
    }

    fn range(&self) -> (f64, f64) {
        (self.floor, 0.0)
    }
}

#[derive(Debug, Clone)]
pub enum LossVariant {
    /// Per-token cross-entropy against the teacher conditionals.
    CrossEntropy,
    /// `DI / T + lambda * cross-entropy`.
    CePlusDi { lambda: f64 },
    /// `DI / T - lambda * E[w]`.
    DiMinusReward {
        lambda: f64,
        reward: Arc<dyn RewardFunction>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub prompt_len: usize,
    pub horizon: usize,
    /// Contexts drawn per step for the cross-entropy term; `None` uses the
    /// exact expectation over all reachable teacher contexts.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64, prompt_len: usize, horizon: usize) -> Self {
        Self {
            steps,
            lr,
            prompt_len,
            horizon,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TransformerParams,
    /// Objective value before each update.
    pub loss_trace: Vec<f64>,
}

/// Teacher conditionals at every reachable context, as weighted soft-target
/// examples. The weights are the context probabilities.
pub fn teacher_examples(teacher: &TeacherProcess, prompt_len: usize, horizon: usize) -> Result<Vec<TrainingExample>> {
    let prior = teacher
        .prompt_prior()
        .probabilities(teacher.alphabet().size(), prompt_len)?;
    Ok(reachable_contexts(teacher, &prior, prompt_len, horizon)?
        .into_iter()
        .map(|c| TrainingExample {
            prefix: c.tokens,
            target: Target::Distribution(c.next),
            weight: c.weight,
        })
        .collect())
}

/// Applies the score-function gradient `sum_paths P * h * grad ln P(u|s)`
/// over the student's ensemble, with `h` supplied per full sequence index.
/// Returns `sum_paths P * h` and the gradient.
fn score_gradient<H>(params: &TransformerParams, ens: &SequenceEnsemble, h: H) -> Result<(f64, Gradient)>
where
    H: Fn(usize, &[Token], &[Token]) -> f64 + Sync,
{
    let n_tok = params.alphabet_size();
    let stop = params.stop_token();
    let n = ens.prompt_len();
    let horizon = ens.horizon();
    // coef[t][ctx * N + k]: accumulated P * h for paths whose first t tokens
    // are ctx followed by k, for generated positions t = n+1..T (index t-1).
    let mut coef: Vec<Vec<f64>> = (0..horizon)
        .map(|t| vec![0.0; if t >= n { n_tok.pow(t as u32 + 1) } else { 0 }])
        .collect();
    let mut value = 0.0;
    for (idx, &lp) in ens.log_joint().iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let toks = ens.decode(idx);
        let end = toks[n..]
            .iter()
            .position(|&t| t == stop)
            .map(|p| n + p + 1)
            .unwrap_or(horizon);
        let hv = h(idx, &toks[..n], &toks[n..end]);
        let w = lp.exp() * hv;
        value += w;
        for t in n..end {
            let key = encode_tuple(&toks[..=t], n_tok);
            coef[t][key] += w;
        }
    }
    // Each context with nonzero coefficients contributes
    // -d/dparams [-sum_k G_k ln q_k].
    let jobs: Vec<(Vec<Token>, Vec<f64>)> = (n..horizon)
        .flat_map(|t| {
            let level = &coef[t];
            (0..level.len() / n_tok)
                .filter_map(move |ctx| {
                    let g = &level[ctx * n_tok..(ctx + 1) * n_tok];
                    g.iter()
                        .any(|v| *v != 0.0)
                        .then(|| (decode_tuple(ctx, n_tok, t), g.to_vec()))
                })
                .collect::<Vec<_>>()
        })
        .filter(|(ctx, _)| !ctx.is_empty())
        .collect();
    let parts: Vec<Gradient> = jobs
        .par_iter()
        .map(|(ctx, g)| {
            let fwd = params.forward(ctx);
            let mut grad = Gradient::zeros(n_tok, params.dim());
            accumulate(params, ctx, &fwd, g, -1.0, &mut grad);
            grad
        })
        .collect();
    let mut grad = Gradient::zeros(n_tok, params.dim());
    for g in &parts {
        grad.add_assign(g);
    }
    Ok((value, grad))
}

/// Exact directed information of the student and its gradient.
pub fn di_gradient(
    params: &TransformerParams,
    prompt_probs: &[f64],
    prompt_len: usize,
    horizon: usize,
) -> Result<(f64, Gradient)> {
    let ens = SequenceEnsemble::build_with_prompt_probs(params, prompt_probs, prompt_len, horizon)?;
    let width = params.alphabet_size().pow((horizon - prompt_len) as u32);
    let prompts = ens.level(prompt_len).to_vec();
    let conts = ens.continuation_level(horizon).to_vec();
    let joint = ens.log_joint().to_vec();
    score_gradient(params, &ens, |idx, _, _| {
        joint[idx] - prompts[idx / width] - conts[idx % width]
    })
}

/// Exact expected reward under the student and its gradient.
pub fn reward_gradient(
    params: &TransformerParams,
    prompt_probs: &[f64],
    prompt_len: usize,
    horizon: usize,
    reward: &dyn RewardFunction,
) -> Result<(f64, Gradient)> {
    let ens = SequenceEnsemble::build_with_prompt_probs(params, prompt_probs, prompt_len, horizon)?;
    score_gradient(params, &ens, |_, s, u| reward.reward(s, u))
}

/// Value and gradient of the chosen objective at `params`.
pub fn objective(
    params: &TransformerParams,
    variant: &LossVariant,
    ce_batch: Option<&[TrainingExample]>,
    prompt_probs: &[f64],
    prompt_len: usize,
    horizon: usize,
) -> Result<(f64, Gradient)> {
    let t = horizon as f64;
    match variant {
        LossVariant::CrossEntropy => cross_entropy_loss(params, ce_batch.ok_or_else(|| domain("missing batch"))?),
        LossVariant::CePlusDi { lambda } => {
            let (ce, mut g) = cross_entropy_loss(params, ce_batch.ok_or_else(|| domain("missing batch"))?)?;
            let (di, gd) = di_gradient(params, prompt_probs, prompt_len, horizon)?;
            g.scale(*lambda);
            let mut gd = gd;
            gd.scale(1.0 / t);
            g.add_assign(&gd);
            Ok((di / t + lambda * ce, g))
        }
        LossVariant::DiMinusReward { lambda, reward } => {
            let (di, mut g) = di_gradient(params, prompt_probs, prompt_len, horizon)?;
            g.scale(1.0 / t);
            let (ew, mut gw) = reward_gradient(params, prompt_probs, prompt_len, horizon, reward.as_ref())?;
            gw.scale(-lambda);
            g.add_assign(&gw);
            Ok((di / t - lambda * ew, g))
        }
    }
}

/// One projected gradient step; embedding rows are renormalised afterwards.
pub(crate) fn gradient_step(params: &mut TransformerParams, grad: &mut Gradient, lr: f64) {
    grad.project_embedding_tangent(params.embedding());
    let (e, a, b) = params.parts_mut();
    *e -= &grad.embedding * lr;
    *a -= &grad.value * lr;
    *b -= &grad.bilinear * lr;
    normalize_rows(e);
}

/// Trains `params` against `teacher` by plain gradient descent.
///
/// The prompt distribution is the teacher's prompt prior. Deterministic for
/// a fixed configuration: minibatches come from the seeded generator and all
/// reductions run in a fixed order.
pub fn train(
    params: TransformerParams,
    teacher: &TeacherProcess,
    variant: &LossVariant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(domain("learning rate must be positive"));
    }
    if teacher.alphabet_size() != params.alphabet_size() {
        return Err(domain("teacher and student alphabets differ"));
    }
    if let LossVariant::CePlusDi { lambda } | LossVariant::DiMinusReward { lambda, .. } = variant {
        if !(lambda.is_finite() && *lambda >= 0.0) {
            return Err(domain("lambda must be finite and nonnegative"));
        }
    }
    let prompt_probs = teacher
        .prompt_prior()
        .probabilities(params.alphabet_size(), cfg.prompt_len)?;
    let needs_ce = !matches!(variant, LossVariant::DiMinusReward { .. });
    let examples = if needs_ce {
        teacher_examples(teacher, cfg.prompt_len, cfg.horizon)?
    } else {
        Vec::new()
    };
    let sampler = match (needs_ce, cfg.batch_size) {
        (true, Some(0)) => return Err(domain("batch size must be positive")),
        (true, Some(_)) => Some(
            WeightedIndex::new(examples.iter().map(|e| e.weight))
                .map_err(|e| domain(format!("cannot sample contexts: {e}")))?,
        ),
        _ => None,
    };
    let mut rng = rng_from_seed(cfg.seed);
    let mut params = params;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Option<Vec<TrainingExample>> = match (&sampler, cfg.batch_size) {
            (Some(s), Some(size)) => Some(
                (0..size)
                    .map(|_| {
                        let mut ex = examples[s.sample(&mut rng)].clone();
                        ex.weight = 1.0;
                        ex
                    })
                    .collect(),
            ),
            _ => None,
        };
        let ce_batch = if needs_ce {
            Some(batch.as_deref().unwrap_or(&examples))
        } else {
            None
        };
        let (loss, mut grad) = objective(&params, variant, ce_batch, &prompt_probs, cfg.prompt_len, cfg.horizon)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })?;
        if !loss.is_finite() || grad.max_abs().is_nan() {
            return Err(Error::NonFinite(format!("training objective at step {step} is {loss}")));
        }
        trace.push(loss);
        gradient_step(&mut params, &mut grad, cfg.lr);
    }
    params
        .validate()
        .map_err(|e| Error::NonFinite(format!("parameters after training: {e}")))?;
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// `sum_ctx w * KL(teacher || student)` over the teacher's reachable
/// contexts, divided by `T - n` (mean KL per generated step).
pub fn mean_kl(
    teacher: &TeacherProcess,
    student: &TransformerParams,
    prompt_len: usize,
    horizon: usize,
) -> Result<f64> {
    let examples = teacher_examples(teacher, prompt_len, horizon)?;
    let mut acc = 0.0;
    for ex in &examples {
        if let Target::Distribution(p) = &ex.target {
            let q = if ex.prefix.is_empty() {
                vec![1.0 / p.len() as f64; p.len()]
            } else {
                student.next_token_distribution(&ex.prefix)?
            };
            let kl = kl_divergence(p, &q);
            acc += ex.weight * kl;
        }
    }
    Ok(acc / (horizon - prompt_len) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{PromptPrior, TokenAlphabet};
    use crate::measures::directed_information;
    use crate::model::InitConfig;

    fn student(n: usize, d: usize, seed: u64) -> TransformerParams {
        TransformerParams::random(&InitConfig::new(n, d), seed).unwrap()
    }

    /// Central differences of `f` along every parameter entry, compared
    /// against the analytic gradient.
    fn fd_worst<F>(p: &TransformerParams, g: &Gradient, f: F) -> f64
    where
        F: Fn(&TransformerParams) -> f64,
    {
        let h = 1e-5;
        let mut worst = 0.0f64;
        for which in 0..3 {
            let shape = match which {
                0 => g.embedding.shape(),
                1 => g.value.shape(),
                _ => g.bilinear.shape(),
            };
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let eval = |delta: f64| {
                        let mut q = p.clone();
                        let (e, a, b) = q.parts_mut();
                        let m = match which {
                            0 => e,
                            1 => a,
                            _ => b,
                        };
                        m[(i, j)] += delta;
                        f(&q)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = match which {
                        0 => g.embedding[(i, j)],
                        1 => g.value[(i, j)],
                        _ => g.bilinear[(i, j)],
                    };
                    worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
                }
            }
        }
        worst
    }

    #[test]
    fn di_gradient_matches_finite_differences() {
        let p = student(3, 2, 4);
        let prior = vec![1.0 / 9.0; 9];
        let (di, g) = di_gradient(&p, &prior, 2, 4).unwrap();
        let ens = SequenceEnsemble::build_with_prompt_probs(&p, &prior, 2, 4).unwrap();
        assert!((di - directed_information(&ens)).abs() < 1e-10);
        let worst = fd_worst(&p, &g, |q| {
            directed_information(&SequenceEnsemble::build_with_prompt_probs(q, &prior, 2, 4).unwrap())
        });
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn reward_gradient_matches_finite_differences() {
        let p = student(3, 2, 5);
        let prior = vec![1.0 / 9.0; 9];
        let w = NoTokenReward(0);
        let (_, g) = reward_gradient(&p, &prior, 2, 4, &w).unwrap();
        let worst = fd_worst(&p, &g, |q| reward_gradient(q, &prior, 2, 4, &w).unwrap().0);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let p = student(3, 2, 5);
        let prior = vec![1.0 / 9.0; 9];
        let (v, g) = reward_gradient(&p, &prior, 2, 4, &ConstantReward(2.0)).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let teacher = TeacherProcess::transformer(student(4, 3, 0), PromptPrior::Uniform).unwrap();
        let out = train(
            student(4, 3, 1),
            &teacher,
            &LossVariant::CrossEntropy,
            &TrainConfig::new(100, 1e-3, 2, 5),
        )
        .unwrap();
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(out.params.validate().is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let teacher = TeacherProcess::uniform(TokenAlphabet::new(4, 3).unwrap());
        let mut cfg = TrainConfig::new(20, 0.1, 1, 3);
        cfg.batch_size = Some(8);
        cfg.seed = 9;
        let a = train(student(4, 3, 2), &teacher, &LossVariant::CrossEntropy, &cfg).unwrap();
        let b = train(student(4, 3, 2), &teacher, &LossVariant::CrossEntropy, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let teacher = TeacherProcess::uniform(TokenAlphabet::new(4, 3).unwrap());
        let cfg = TrainConfig::new(1, 0.0, 1, 3);
        assert!(train(student(4, 3, 0), &teacher, &LossVariant::CrossEntropy, &cfg).is_err());
    }
}
