use crate::error::{domain, Error, Result};
use crate::language::Token;
use crate::numeric::{checked_pow, xlogx};

use super::ensemble::{SequenceEnsemble, ENSEMBLE_LIMIT};

/// Per-step conditional mutual information terms
/// `I(S_{1:n}; U_t | U_{n+1:t-1})` for `t = n+1..T`.
pub fn directed_information_terms(ens: &SequenceEnsemble) -> Vec<f64> {
    let n_tok = ens.alphabet_size();
    let n = ens.prompt_len();
    (n + 1..=ens.horizon())
        .map(|t| {
            let joint = ens.level(t);
            let joint_prev = ens.level(t - 1);
            let cont = ens.continuation_level(t);
            let cont_prev = ens.continuation_level(t - 1);
            let width = n_tok.pow((t - n) as u32);
            let mut acc = 0.0;
            for (idx, &l) in joint.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let u = idx % width;
                let cond = l - joint_prev[idx / n_tok];
                let marg = cont[u] - cont_prev[u / n_tok];
                acc += l.exp() * (cond - marg);
            }
            acc.max(0.0)
        })
        .collect()
}

/// `I(S_{1:n} -> U_{n+1:T})` in nats.
///
/// With the whole prompt visible at every step this equals the mutual
/// information between prompt and continuation; the terms are nonetheless
/// accumulated step by step.
pub fn directed_information(ens: &SequenceEnsemble) -> f64 {
    directed_information_terms(ens).iter().sum()
}

/// `I(S_{1:n}; U_{n+1:T})` in nats.
pub fn mutual_information(ens: &SequenceEnsemble) -> f64 {
    let n_tok = ens.alphabet_size();
    let width = n_tok.pow((ens.horizon() - ens.prompt_len()) as u32);
    let prompts = ens.level(ens.prompt_len());
    let conts = ens.continuation_level(ens.horizon());
    let mut acc = 0.0;
    for (idx, &l) in ens.log_joint().iter().enumerate() {
        if l > f64::NEG_INFINITY {
            acc += l.exp() * (l - prompts[idx / width] - conts[idx % width]);
        }
    }
    acc.max(0.0)
}

/// Directed information density at the last step of `continuation`:
/// `ln P(u_t | u_{n+1:t-1}, s) - ln P(u_t | u_{n+1:t-1})`.
pub fn information_density(ens: &SequenceEnsemble, prompt: &[Token], continuation: &[Token]) -> Result<f64> {
    if prompt.len() != ens.prompt_len() {
        return Err(domain("prompt length does not match the ensemble"));
    }
    let (&last, head) = continuation
        .split_last()
        .ok_or_else(|| domain("density needs at least one continuation token"))?;
    let mut context = prompt.to_vec();
    context.extend_from_slice(head);
    let p_cond = ens.conditional_given_prompt(&context)?;
    if last >= p_cond.len() || p_cond[last] <= 0.0 {
        return Err(Error::ZeroProbabilityPath(format!("{prompt:?} -> {continuation:?}")));
    }
    let p_marg = ens.conditional_marginal(head)?;
    Ok(p_cond[last].ln() - p_marg[last].ln())
}

/// Pathwise flow `sum_t i_t` of a full continuation.
pub fn path_density(ens: &SequenceEnsemble, prompt: &[Token], continuation: &[Token]) -> Result<f64> {
    (1..=continuation.len())
        .map(|k| information_density(ens, prompt, &continuation[..k]))
        .sum()
}

/// Dense joint distribution of two finite sequences `X_{1:n}` and `Y_{1:m}`.
/// Index is `encode(x) * Ny^m + encode(y)`, first element most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequences {
    x_alphabet: usize,
    y_alphabet: usize,
    x_len: usize,
    y_len: usize,
    probs: Vec<f64>,
}

impl JointSequences {
    pub fn new(x_alphabet: usize, x_len: usize, y_alphabet: usize, y_len: usize, probs: Vec<f64>) -> Result<Self> {
        let size = checked_pow(x_alphabet, x_len).saturating_mul(checked_pow(y_alphabet, y_len));
        if size > ENSEMBLE_LIMIT {
            return Err(Error::SizeLimit {
                what: "joint sequences",
                needed: size,
                limit: ENSEMBLE_LIMIT,
            });
        }
        if probs.len() as u128 != size {
            return Err(domain(format!("joint has {} entries, expected {size}", probs.len())));
        }
        crate::numeric::check_distribution(&probs, 1e-10, "joint sequences")?;
        Ok(Self {
            x_alphabet,
            y_alphabet,
            x_len,
            y_len,
            probs,
        })
    }

    /// Prompt as `X`, continuation as `Y`.
    pub fn from_ensemble(ens: &SequenceEnsemble) -> Result<Self> {
        let probs = ens.log_joint().iter().map(|l| l.exp()).collect();
        Self::new(
            ens.alphabet_size(),
            ens.prompt_len(),
            ens.alphabet_size(),
            ens.horizon() - ens.prompt_len(),
            probs,
        )
    }

    pub fn x_len(&self) -> usize {
        self.x_len
    }

    pub fn y_len(&self) -> usize {
        self.y_len
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn radices(&self) -> Vec<usize> {
        let mut r = vec![self.x_alphabet; self.x_len];
        r.extend(std::iter::repeat_n(self.y_alphabet, self.y_len));
        r
    }

    /// Entropy of the marginal on the variables flagged in `keep`
    /// (`X_1..X_n` then `Y_1..Y_m`).
    pub fn marginal_entropy(&self, keep: &[bool]) -> f64 {
        let radices = self.radices();
        let marg = marginalize(&self.probs, &radices, keep);
        -marg.iter().map(|&p| xlogx(p)).sum::<f64>()
    }

    /// `I(A; B | C)` for disjoint variable sets given as masks.
    pub fn conditional_mi(&self, a: &[bool], b: &[bool], c: &[bool]) -> f64 {
        let or = |u: &[bool], v: &[bool]| u.iter().zip(v).map(|(p, q)| *p || *q).collect::<Vec<_>>();
        let ac = or(a, c);
        let bc = or(b, c);
        let abc = or(&ac, b);
        let v = self.marginal_entropy(&ac) + self.marginal_entropy(&bc)
            - self.marginal_entropy(&abc)
            - self.marginal_entropy(c);
        v.max(0.0)
    }

    /// Mask selecting `X_{lo..=hi}` (1-based, empty when `lo > hi`).
    pub fn x_mask(&self, lo: usize, hi: usize) -> Vec<bool> {
        let mut m = vec![false; self.x_len + self.y_len];
        for i in lo..=hi.min(self.x_len) {
            if i >= 1 {
                m[i - 1] = true;
            }
        }
        m
    }

    /// Mask selecting `Y_{lo..=hi}` (1-based, empty when `lo > hi`).
    pub fn y_mask(&self, lo: usize, hi: usize) -> Vec<bool> {
        let mut m = vec![false; self.x_len + self.y_len];
        for i in lo..=hi.min(self.y_len) {
            if i >= 1 {
                m[self.x_len + i - 1] = true;
            }
        }
        m
    }
}

/// Sums `probs` (mixed-radix, first variable most significant) onto the
/// variables flagged in `keep`. The result is indexed by the kept variables
/// in their original order.
pub fn marginalize(probs: &[f64], radices: &[usize], keep: &[bool]) -> Vec<f64> {
    let out_size: usize = radices.iter().zip(keep).filter(|(_, k)| **k).map(|(r, _)| r).product();
    let mut out = vec![0.0; out_size];
    let mut digits = vec![0usize; radices.len()];
    for &p in probs {
        if p != 0.0 {
            let mut key = 0;
            for ((d, r), k) in digits.iter().zip(radices).zip(keep) {
                if *k {
                    key = key * r + d;
                }
            }
            out[key] += p;
        }
        // Increment the mixed-radix counter, last variable fastest.
        for i in (0..radices.len()).rev() {
            digits[i] += 1;
            if digits[i] < radices[i] {
                break;
            }
            digits[i] = 0;
        }
    }
    out
}

/// Backward directed information `sum_t I(X_{t+1:n}; Y_t | Y_{1:t-1})`,
/// `t = 1..m`. Terms with `t >= n` are zero.
pub fn backward_directed_information_terms(joint: &JointSequences) -> Vec<f64> {
    (1..=joint.y_len())
        .map(|t| {
            if t >= joint.x_len() {
                return 0.0;
            }
            joint.conditional_mi(
                &joint.x_mask(t + 1, joint.x_len()),
                &joint.y_mask(t, t),
                &joint.y_mask(1, t - 1),
            )
        })
        .collect()
}

pub fn backward_directed_information(joint: &JointSequences) -> f64 {
    backward_directed_information_terms(joint).iter().sum()
}

/// Backward directed information from prompt to continuation of an ensemble.
pub fn backward_directed_information_of(ens: &SequenceEnsemble) -> Result<f64> {
    Ok(backward_directed_information(&JointSequences::from_ensemble(ens)?))
}
