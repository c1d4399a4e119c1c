use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::language::{NextTokenModel, Token};
use crate::measures::SequenceEnsemble;
use crate::model::RewardFunction;
use crate::numeric::{encode_tuple, kl_divergence};

use super::sweep::trim_at_stop;

/// Simplex grid resolution of the grid method.
pub const GRID_RESOLUTION: f64 = 0.05;

/// Largest prompt family the grid method accepts.
pub const GRID_MAX_PROMPTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMethod {
    /// Simplex grid followed by a shrinking pairwise-transfer search.
    Grid,
    /// Alternating maximisation over the prior and the backward channel,
    /// with a multiplier on the reward constraint.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityResult {
    /// Maximum directed information in nats.
    pub capacity: f64,
    /// Maximising prior over the prompt family.
    pub prior: Vec<f64>,
    /// `E[w]` under the maximising prior, when a constraint was given.
    pub expected_reward: Option<f64>,
    pub method: CapacityMethod,
}

/// Continuation law of each prompt plus per-prompt expected rewards.
struct Channel {
    rows: Vec<Vec<f64>>,
    rewards: Option<Vec<f64>>,
}

impl Channel {
    fn mixture(&self, prior: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.rows[0].len()];
        for (p, row) in prior.iter().zip(&self.rows) {
            for (qi, r) in q.iter_mut().zip(row) {
                *qi += p * r;
            }
        }
        q
    }

    /// `D(P(.|s_k) || q)` for every prompt.
    fn divergences(&self, prior: &[f64]) -> Vec<f64> {
        let q = self.mixture(prior);
        self.rows.iter().map(|r| kl_divergence(r, &q)).collect()
    }

    fn information(&self, prior: &[f64]) -> f64 {
        let d = self.divergences(prior);
        prior
            .iter()
            .zip(&d)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, v)| p * v)
            .sum::<f64>()
            .max(0.0)
    }

    fn reward(&self, prior: &[f64]) -> Option<f64> {
        self.rewards
            .as_ref()
            .map(|r| prior.iter().zip(r).map(|(p, w)| p * w).sum())
    }
}

fn build_channel<M: NextTokenModel + ?Sized>(
    model: &M,
    prompts: &[Vec<Token>],
    horizon: usize,
    reward: Option<&dyn RewardFunction>,
) -> Result<Channel> {
    let k = prompts.len();
    if k == 0 {
        return Err(domain("prompt family is empty"));
    }
    let n = prompts[0].len();
    if prompts.iter().any(|p| p.len() != n) {
        return Err(domain("prompts must share one length"));
    }
    let n_tok = model.alphabet_size();
    if prompts.iter().flatten().any(|&t| t >= n_tok) {
        return Err(domain("prompt token outside alphabet"));
    }
    let codes: Vec<usize> = prompts.iter().map(|p| encode_tuple(p, n_tok)).collect();
    let mut sorted = codes.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != k {
        return Err(domain("prompts must be distinct"));
    }
    let mut probs = vec![0.0; n_tok.pow(n as u32)];
    for &c in &codes {
        probs[c] = 1.0 / k as f64;
    }
    let ens = SequenceEnsemble::build_with_prompt_probs(model, &probs, n, horizon)?;
    let width = n_tok.pow((horizon - n) as u32);
    let stop = model.stop_token();
    let mut rows = Vec::with_capacity(k);
    let mut rewards = reward.map(|_| Vec::with_capacity(k));
    for (prompt, &c) in prompts.iter().zip(&codes) {
        let block = &ens.log_joint()[c * width..(c + 1) * width];
        let row: Vec<f64> = block.iter().map(|&l| (l + (k as f64).ln()).exp()).collect();
        if let (Some(w), Some(out)) = (reward, rewards.as_mut()) {
            let mut acc = 0.0;
            for (u, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    let cont = crate::numeric::decode_tuple(u, n_tok, horizon - n);
                    acc += p * w.reward(prompt, trim_at_stop(&cont, stop));
                }
            }
            out.push(acc);
        }
        rows.push(row);
    }
    Ok(Channel { rows, rewards })
}

/// All compositions of `total` into `parts` nonnegative parts, in
/// lexicographic order.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn feasible(ch: &Channel, prior: &[f64], threshold: Option<f64>) -> bool {
    match (ch.reward(prior), threshold) {
        (Some(w), Some(t)) => w >= t,
        _ => true,
    }
}

fn grid_search(ch: &Channel, threshold: Option<f64>) -> Option<(f64, Vec<f64>)> {
    let k = ch.rows.len();
    let steps = (1.0 / GRID_RESOLUTION).round() as usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for c in compositions(steps, k) {
        let prior: Vec<f64> = c.iter().map(|&v| v as f64 / steps as f64).collect();
        if !feasible(ch, &prior, threshold) {
            continue;
        }
        let v = ch.information(&prior);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, prior));
        }
    }
    // Refine around the best grid point by moving mass between pairs of
    // prompts with a shrinking step.
    let (mut value, mut prior) = best?;
    let mut step = GRID_RESOLUTION / 2.0;
    while step > 1e-10 {
        let mut improved = false;
        for i in 0..k {
            for j in 0..k {
                if i == j || prior[i] <= 0.0 {
                    continue;
                }
                let mut cand = prior.clone();
                let moved = step.min(cand[i]);
                cand[i] -= moved;
                cand[j] += moved;
                if !feasible(ch, &cand, threshold) {
                    continue;
                }
                let v = ch.information(&cand);
                if v > value {
                    value = v;
                    prior = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    Some((value, prior))
}

/// Prior maximising `I(p) + mu * E_p[w]` by alternating updates
/// `p_k <- p_k exp(D_k + mu r_k) / Z`.
fn alternating_fixed(ch: &Channel, mu: f64) -> Vec<f64> {
    let k = ch.rows.len();
    let mut prior = vec![1.0 / k as f64; k];
    let r = ch.rewards.clone().unwrap_or_else(|| vec![0.0; k]);
    for _ in 0..200_000 {
        let d = ch.divergences(&prior);
        let i = ch.information(&prior);
        let max_d = d.iter().zip(&prior).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        // For mu = 0, max_k D_k - I(p) bounds the gap to the optimum.
        if mu == 0.0 && max_d - i < 1e-12 {
            break;
        }
        let logits: Vec<f64> = prior
            .iter()
            .zip(d.iter().zip(&r))
            .map(|(p, (dk, rk))| {
                if *p > 0.0 {
                    p.ln() + dk + mu * rk
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let next = crate::numeric::softmax(&logits);
        let change = next.iter().zip(&prior).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prior = next;
        if change < 1e-15 {
            break;
        }
    }
    prior
}

fn alternating(ch: &Channel, threshold: Option<f64>) -> (f64, Vec<f64>) {
    let free = alternating_fixed(ch, 0.0);
    let t = match threshold {
        Some(t) if !feasible(ch, &free, Some(t)) => t,
        _ => return (ch.information(&free), free),
    };
    // Expected reward grows with the multiplier; bisect for the smallest
    // multiplier that meets the threshold.
    let mut hi = 1.0;
    while !feasible(ch, &alternating_fixed(ch, hi), Some(t)) && hi < 1e12 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if feasible(ch, &alternating_fixed(ch, mid), Some(t)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let prior = alternating_fixed(ch, hi);
    (ch.information(&prior), prior)
}

/// Maximum directed information over priors on a prompt family, optionally
/// subject to `E[w] >= threshold`.
///
/// The constraint is evaluated in expectation. A threshold at or above the
/// largest per-prompt expected reward admits no prior with `E[w] > W` and
/// yields [`Error::Infeasible`].
pub fn semantic_capacity<M: NextTokenModel + ?Sized>(
    model: &M,
    prompts: &[Vec<Token>],
    horizon: usize,
    constraint: Option<(&dyn RewardFunction, f64)>,
    method: CapacityMethod,
) -> Result<CapacityResult> {
    if method == CapacityMethod::Grid && prompts.len() > GRID_MAX_PROMPTS {
        return Err(domain(format!(
            "grid method handles at most {GRID_MAX_PROMPTS} prompts"
        )));
    }
    let ch = build_channel(model, prompts, horizon, constraint.map(|c| c.0))?;
    let threshold = constraint.map(|c| c.1);
    if let (Some(t), Some(r)) = (threshold, &ch.rewards) {
        let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best <= t {
            return Err(Error::Infeasible(format!(
                "no prompt prior reaches E[w] > {t}; the largest per-prompt expected reward is {best}"
            )));
        }
    }
    let (capacity, prior) = match method {
        CapacityMethod::Grid => {
            grid_search(&ch, threshold).ok_or_else(|| Error::Infeasible("no grid prior meets the constraint".into()))?
        }
        CapacityMethod::Alternating => alternating(&ch, threshold),
    };
    Ok(CapacityResult {
        expected_reward: ch.reward(&prior),
        capacity,
        prior,
        method,
    })
}
