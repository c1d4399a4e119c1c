//! Exhaustive search for the sequence encoder maximising backward directed
//! information, compared with the CPC objective.
//!
//! An encoder maps each token through a codebook `g_enc: X -> Z` and feeds
//! the codes to a finite state machine `g_ar: S x Z -> S` started in state
//! 0. `S_t` is the state after consuming `Z_1..Z_t`, so it depends on
//! `X_1..X_t` only.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::language::{NextTokenModel, TeacherProcess, Token};
use crate::measures::SequenceEnsemble;
use crate::numeric::{checked_pow, decode_tuple, xlogx};

/// Largest family accepted.
pub const FAMILY_LIMIT: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Encoder {
    /// `codebook[x]` is the code of token `x`.
    pub codebook: Vec<usize>,
    /// `transitions[s * code_size + z]` is the state after `s` reads `z`.
    pub transitions: Vec<usize>,
    pub code_size: usize,
    pub num_states: usize,
}

impl Encoder {
    pub fn new(codebook: Vec<usize>, transitions: Vec<usize>, code_size: usize, num_states: usize) -> Result<Self> {
        if code_size == 0 || num_states == 0 {
            return Err(domain("code and state alphabets must be non-empty"));
        }
        if codebook.iter().any(|&z| z >= code_size) || transitions.iter().any(|&s| s >= num_states) {
            return Err(domain("encoder table entry out of range"));
        }
        if transitions.len() != code_size * num_states {
            return Err(domain("transition table must have states x codes entries"));
        }
        Ok(Self {
            codebook,
            transitions,
            code_size,
            num_states,
        })
    }

    /// `S_t = X_t`.
    pub fn identity(alphabet: usize) -> Self {
        let transitions = (0..alphabet).flat_map(|_| 0..alphabet).collect();
        Self {
            codebook: (0..alphabet).collect(),
            transitions,
            code_size: alphabet,
            num_states: alphabet,
        }
    }

    /// `S_t = 0`.
    pub fn constant(alphabet: usize) -> Self {
        Self {
            codebook: vec![0; alphabet],
            transitions: vec![0],
            code_size: 1,
            num_states: 1,
        }
    }

    /// `S_1..S_n` for the tokens `x`.
    pub fn states(&self, x: &[Token]) -> Vec<usize> {
        let mut s = 0;
        x.iter()
            .map(|&t| {
                s = self.transitions[s * self.code_size + self.codebook[t]];
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderFamily {
    pub alphabet: usize,
    pub members: Vec<Encoder>,
}

impl EncoderFamily {
    /// Every codebook `X -> Z` combined with every transition table on
    /// `num_states` states, in lexicographic order of (codebook, table).
    pub fn exhaustive(alphabet: usize, code_size: usize, num_states: usize) -> Result<Self> {
        if alphabet == 0 || code_size == 0 || num_states == 0 {
            return Err(domain("alphabets must be non-empty"));
        }
        let books = checked_pow(code_size, alphabet);
        let tables = checked_pow(num_states, code_size * num_states);
        let needed = books.saturating_mul(tables);
        if needed > FAMILY_LIMIT {
            return Err(Error::SizeLimit {
                what: "encoder family",
                needed,
                limit: FAMILY_LIMIT,
            });
        }
        let mut members = Vec::with_capacity(needed as usize);
        for b in 0..books as usize {
            let codebook = decode_tuple(b, code_size, alphabet);
            for t in 0..tables as usize {
                let transitions = decode_tuple(t, num_states, code_size * num_states);
                members.push(Encoder {
                    codebook: codebook.clone(),
                    transitions,
                    code_size,
                    num_states,
                });
            }
        }
        Ok(Self { alphabet, members })
    }

    pub fn from_members(alphabet: usize, members: Vec<Encoder>) -> Result<Self> {
        if members.is_empty() || members.len() as u128 > FAMILY_LIMIT {
            return Err(domain("family must have between 1 and 100000 members"));
        }
        if members.iter().any(|m| m.codebook.len() != alphabet) {
            return Err(domain("codebook length differs from alphabet size"));
        }
        Ok(Self { alphabet, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Distribution of `X_1..X_n`, dense over `N^n` tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSource {
    pub alphabet: usize,
    pub len: usize,
    pub probs: Vec<f64>,
}

impl SequenceSource {
    pub fn new(alphabet: usize, len: usize, probs: Vec<f64>) -> Result<Self> {
        if checked_pow(alphabet, len) != probs.len() as u128 {
            return Err(domain("source probabilities have the wrong length"));
        }
        crate::numeric::check_distribution(&probs, 1e-10, "source")?;
        Ok(Self { alphabet, len, probs })
    }

    /// First `n` tokens of the teacher: `X_1` from the length-1 prompt prior,
    /// the rest from its conditionals (stop absorbing).
    pub fn from_teacher(teacher: &TeacherProcess, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(domain("need at least two tokens"));
        }
        let ens = SequenceEnsemble::build(teacher, teacher.prompt_prior(), 1, n)?;
        Self::new(
            teacher.alphabet_size(),
            n,
            ens.log_joint().iter().map(|l| l.exp()).collect(),
        )
    }
}

fn entropy_of(bucket: &[f64]) -> f64 {
    -bucket.iter().map(|&p| xlogx(p)).sum::<f64>()
}

/// Per-sequence state paths for the support of the source.
fn paths(enc: &Encoder, src: &SequenceSource) -> Vec<(Vec<Token>, Vec<usize>, f64)> {
    src.probs
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, &p)| {
            let x = decode_tuple(i, src.alphabet, src.len);
            let s = enc.states(&x);
            (x, s, p)
        })
        .collect()
}

fn encode(digits: &[usize], radix: usize) -> usize {
    digits.iter().fold(0, |acc, &d| acc * radix + d)
}

/// Backward directed information `sum_t I(X_{t+1:n}; S_t | S_{1:t-1})`.
pub fn encoder_objective(enc: &Encoder, src: &SequenceSource) -> f64 {
    let paths = paths(enc, src);
    let (k, nx, n) = (enc.num_states, src.alphabet, src.len);
    let mut total = 0.0;
    for t in 1..n {
        // H(S_{<=t}) - H(S_{<t}) - H(S_{<=t}, X_{>t}) + H(S_{<t}, X_{>t})
        let fut = nx.pow((n - t) as u32);
        let mut s_le = vec![0.0; k.pow(t as u32)];
        let mut s_lt = vec![0.0; k.pow(t as u32 - 1)];
        let mut s_le_x = vec![0.0; s_le.len() * fut];
        let mut s_lt_x = vec![0.0; s_lt.len() * fut];
        for (x, s, p) in &paths {
            let a = encode(&s[..t], k);
            let b = encode(&s[..t - 1], k);
            let xf = encode(&x[t..], nx);
            s_le[a] += p;
            s_lt[b] += p;
            s_le_x[a * fut + xf] += p;
            s_lt_x[b * fut + xf] += p;
        }
        let v = entropy_of(&s_le) - entropy_of(&s_lt) - entropy_of(&s_le_x) + entropy_of(&s_lt_x);
        total += v.max(0.0);
    }
    total
}

/// `I(X_{t+k}; S_t)` indexed `[t-1][k-1]` for `t = 1..n-1`, `k = 1..n-t`.
pub fn cpc_terms(enc: &Encoder, src: &SequenceSource) -> Vec<Vec<f64>> {
    let paths = paths(enc, src);
    let (ns, nx, n) = (enc.num_states, src.alphabet, src.len);
    (1..n)
        .map(|t| {
            (1..=n - t)
                .map(|k| {
                    let mut joint = vec![0.0; ns * nx];
                    for (x, s, p) in &paths {
                        joint[s[t - 1] * nx + x[t + k - 1]] += p;
                    }
                    let ps: Vec<f64> = joint.chunks(nx).map(|r| r.iter().sum()).collect();
                    let px: Vec<f64> = (0..nx).map(|j| (0..ns).map(|i| joint[i * nx + j]).sum()).collect();
                    (entropy_of(&ps) + entropy_of(&px) - entropy_of(&joint)).max(0.0)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingResult {
    /// Index of the first maximiser in family order.
    pub best_index: usize,
    pub best: Encoder,
    pub objective: f64,
    /// `sum_t sum_k max_f I(X_{t+k}; S_t)` over the family.
    pub cpc_upper_bound: f64,
    /// Objective of every member, in family order.
    pub objectives: Vec<f64>,
    /// CPC objective `sum_t sum_k I(X_{t+k}; S_t)` of every member.
    pub cpc_values: Vec<f64>,
    /// Every member satisfies `objective <= cpc_upper_bound + 1e-10`.
    pub bound_holds: bool,
}

/// Exhaustive search over the family for the largest backward directed
/// information from tokens to states.
pub fn embedding_objective(family: &EncoderFamily, src: &SequenceSource) -> Result<EmbeddingResult> {
    if family.is_empty() {
        return Err(domain("empty encoder family"));
    }
    if family.alphabet != src.alphabet {
        return Err(domain("family and source alphabets differ"));
    }
    let per: Vec<(f64, Vec<Vec<f64>>)> = family
        .members
        .par_iter()
        .map(|e| (encoder_objective(e, src), cpc_terms(e, src)))
        .collect();
    let mut best_index = 0;
    for (i, (v, _)) in per.iter().enumerate() {
        if *v > per[best_index].0 {
            best_index = i;
        }
    }
    let mut cpc_upper_bound = 0.0;
    for t in 0..src.len - 1 {
        for k in 0..src.len - 1 - t {
            cpc_upper_bound += per.iter().map(|(_, c)| c[t][k]).fold(0.0, f64::max);
        }
    }
    let objectives: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
    let cpc_values = per.iter().map(|(_, c)| c.iter().flatten().sum()).collect();
    Ok(EmbeddingResult {
        best_index,
        best: family.members[best_index].clone(),
        objective: objectives[best_index],
        bound_holds: objectives.iter().all(|v| *v <= cpc_upper_bound + 1e-10),
        cpc_upper_bound,
        objectives,
        cpc_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{MarkovKernel, PromptPrior, TokenAlphabet};
    use crate::measures::{backward_directed_information, JointSequences};

    fn markov_source() -> SequenceSource {
        let alphabet = TokenAlphabet::new(3, 2).unwrap();
        let kernel = MarkovKernel::new(
            3,
            1,
            vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.5, 0.2], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let prior = PromptPrior::Explicit {
            probabilities: vec![0.6, 0.4, 0.0],
        };
        let teacher = TeacherProcess::markov(alphabet, kernel, prior).unwrap();
        SequenceSource::from_teacher(&teacher, 4).unwrap()
    }

    #[test]
    fn identity_encoder_matches_backward_di() {
        let src = markov_source();
        let enc = Encoder::identity(3);
        let ns = 3usize.pow(4);
        let mut probs = vec![0.0; ns * ns];
        for (i, &p) in src.probs.iter().enumerate() {
            probs[i * ns + i] = p;
        }
        let joint = JointSequences::new(3, 4, 3, 4, probs).unwrap();
        let want = backward_directed_information(&joint);
        assert!((encoder_objective(&enc, &src) - want).abs() < 1e-12);
        assert!(want > 0.0);
    }

    #[test]
    fn constant_encoder_scores_zero() {
        assert_eq!(encoder_objective(&Encoder::constant(3), &markov_source()), 0.0);
    }

    #[test]
    fn family_size_and_limit() {
        assert_eq!(EncoderFamily::exhaustive(3, 2, 2).unwrap().len(), 8 * 16);
        assert!(matches!(
            EncoderFamily::exhaustive(4, 4, 4),
            Err(Error::SizeLimit { .. })
        ));
    }

    #[test]
    fn search_is_deterministic_and_bounded() {
        let src = markov_source();
        let fam = EncoderFamily::exhaustive(3, 2, 2).unwrap();
        let a = embedding_objective(&fam, &src).unwrap();
        let b = embedding_objective(&fam, &src).unwrap();
        assert_eq!(a, b);
        assert!(a.bound_holds);
        assert!(a.objectives.iter().all(|v| *v <= a.objective));
    }
}
