use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::Serialize;

use crate::error::{domain, Result};
use crate::language::{NextTokenModel, TeacherProcess};
use crate::model::TransformerParams;
use crate::numeric::{decode_tuple, log_softmax, rng_from_seed, sample_categorical};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub samples: usize,
    pub delta: f64,
    /// Mean `-ln Q(u_m | s_m)` over the sample.
    pub empirical_loss: f64,
    /// `(2 sqrt 2 / M) sum_m |z_m|`.
    pub logit_term: f64,
    /// `3 sqrt(ln(2/delta) / (2M))`.
    pub deviation_term: f64,
    pub bound: f64,
    /// Exact `sum_s P(s) H(P(.|s), Q(.|s))`.
    pub true_cross_entropy: f64,
    /// `bound - true_cross_entropy`.
    pub margin: f64,
}

/// Rademacher-style bound on the next-token cross-entropy at the first
/// generated position.
///
/// Draws `M` prompts from the teacher's prior, one ground-truth next token
/// for each, and compares
/// `L + (2 sqrt 2 / M) sum |z_m| + 3 sqrt(ln(2/delta) / (2M))` with the exact
/// expected cross-entropy. `z_m` is the model logit of the drawn token.
pub fn generalization_bound(
    params: &TransformerParams,
    teacher: &TeacherProcess,
    prompt_len: usize,
    samples: usize,
    delta: f64,
    seed: u64,
) -> Result<BoundReport> {
    if samples < 2 {
        return Err(domain("need at least two samples"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if prompt_len == 0 {
        return Err(domain("prompt length must be positive"));
    }
    let n_tok = params.alphabet_size();
    if teacher.alphabet_size() != n_tok {
        return Err(domain("teacher and model alphabets differ"));
    }
    let prior = teacher.prompt_prior().probabilities(n_tok, prompt_len)?;
    let mut truth = 0.0;
    for (idx, &w) in prior.iter().enumerate() {
        if w > 0.0 {
            let s = decode_tuple(idx, n_tok, prompt_len);
            let p = teacher.exact_conditional(&s)?;
            let logq = log_softmax(&params.next_token_logits(&s)?);
            truth -= w * p
                .iter()
                .zip(&logq)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, l)| pi * l)
                .sum::<f64>();
        }
    }
    let sampler = WeightedIndex::new(&prior).map_err(|e| domain(format!("prompt prior: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let (mut loss, mut logits) = (0.0, 0.0);
    for _ in 0..samples {
        let s = decode_tuple(sampler.sample(&mut rng), n_tok, prompt_len);
        let u = sample_categorical(&teacher.exact_conditional(&s)?, &mut rng);
        let z = params.next_token_logits(&s)?;
        loss -= log_softmax(&z)[u];
        logits += z[u].abs();
    }
    let m = samples as f64;
    let empirical_loss = loss / m;
    let logit_term = 2.0 * 2f64.sqrt() / m * logits;
    let deviation_term = 3.0 * ((2.0 / delta).ln() / (2.0 * m)).sqrt();
    let bound = empirical_loss + logit_term + deviation_term;
    Ok(BoundReport {
        samples,
        delta,
        empirical_loss,
        logit_term,
        deviation_term,
        bound,
        true_cross_entropy: truth,
        margin: bound - truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::PromptPrior;
    use crate::model::InitConfig;
    use nalgebra::DMatrix;

    #[test]
    fn zero_value_matrix_gives_uniform_terms() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0)
            .unwrap()
            .with_value(DMatrix::zeros(3, 3))
            .unwrap();
        let teacher = TeacherProcess::transformer(
            TransformerParams::random(&InitConfig::new(4, 3), 5).unwrap(),
            PromptPrior::Uniform,
        )
        .unwrap();
        let r = generalization_bound(&p, &teacher, 2, 50, 0.1, 0).unwrap();
        let ln4 = 4f64.ln();
        assert!((r.empirical_loss - ln4).abs() < 1e-12);
        assert_eq!(r.logit_term, 0.0);
        assert!((r.true_cross_entropy - ln4).abs() < 1e-12);
        assert!((r.bound - (ln4 + 3.0 * (20f64.ln() / 100.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn delta_outside_unit_interval_is_rejected() {
        let p = TransformerParams::random(&InitConfig::new(3, 2), 0).unwrap();
        let t = TeacherProcess::transformer(p.clone(), PromptPrior::Uniform).unwrap();
        assert!(generalization_bound(&p, &t, 1, 10, 2.0, 0).is_err());
        assert!(generalization_bound(&p, &t, 1, 1, 0.1, 0).is_err());
    }
}
