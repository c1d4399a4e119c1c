//! Latent-position view of one attention step.
//!
//! Given a history `u_1..u_{t-1}`, a latent position `J` is drawn uniformly
//! and the next token follows `softmax((1/xi) E A u_J)`. The attention
//! weights serve as the variational posterior over `J`.

use serde::Serialize;

use crate::error::{domain, Result};
use crate::language::Token;
use crate::model::{Target, TrainingExample, TransformerParams};
use crate::numeric::{argmax, log_softmax, log_sum_exp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub log_likelihood: f64,
    /// `log_likelihood - elbo`, equal to `KL(q || posterior)`.
    pub gap: f64,
}

/// `ln P(token | J = j)` for each position and `ln P(j)`.
fn position_loglik(params: &TransformerParams, prefix: &[Token]) -> Result<Vec<Vec<f64>>> {
    let us = params.embed(prefix)?;
    Ok(us
        .iter()
        .map(|u| log_softmax(&params.readout(&(params.value() * u))))
        .collect())
}

fn check(params: &TransformerParams, prefix: &[Token], token: Token) -> Result<()> {
    if prefix.is_empty() {
        return Err(domain("the latent-position model needs a non-empty prefix"));
    }
    if token >= params.alphabet_size() {
        return Err(domain(format!("token {token} outside alphabet")));
    }
    Ok(())
}

fn terms_from(loglik: &[Vec<f64>], token: Token, q: &[f64]) -> ElboTerms {
    let log_prior = -(loglik.len() as f64).ln();
    let joint: Vec<f64> = loglik.iter().map(|l| log_prior + l[token]).collect();
    let log_likelihood = log_sum_exp(&joint);
    let elbo: f64 = q
        .iter()
        .zip(&joint)
        .filter(|(qj, _)| **qj > 0.0)
        .map(|(qj, lj)| qj * (lj - qj.ln()))
        .sum();
    ElboTerms {
        elbo,
        log_likelihood,
        gap: log_likelihood - elbo,
    }
}

/// Exact posterior over positions given the next token.
pub fn position_posterior(params: &TransformerParams, prefix: &[Token], token: Token) -> Result<Vec<f64>> {
    check(params, prefix, token)?;
    let ll = position_loglik(params, prefix)?;
    let joint: Vec<f64> = ll.iter().map(|l| l[token]).collect();
    let z = log_sum_exp(&joint);
    Ok(joint.iter().map(|l| (l - z).exp()).collect())
}

/// ELBO of `token` after `prefix` under an arbitrary variational `q`.
pub fn elbo_terms(params: &TransformerParams, prefix: &[Token], token: Token, q: &[f64]) -> Result<ElboTerms> {
    check(params, prefix, token)?;
    if q.len() != prefix.len() {
        return Err(domain("q must have one entry per position"));
    }
    crate::numeric::check_distribution(q, 1e-9, "variational q")?;
    Ok(terms_from(&position_loglik(params, prefix)?, token, q))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboBatch {
    /// Weighted means over the batch.
    pub elbo: f64,
    pub log_likelihood: f64,
    pub gap: f64,
    /// Smallest per-example gap.
    pub min_gap: f64,
}

/// Weighted mean ELBO, log-likelihood and gap over a labelled batch with
/// `q` set to the attention weights. A distribution target contributes the
/// expectation of the per-token terms.
pub fn elbo_training(params: &TransformerParams, batch: &[TrainingExample]) -> Result<ElboBatch> {
    let total: f64 = batch.iter().map(|e| e.weight).sum();
    if batch.is_empty() || !(total > 0.0) {
        return Err(domain("batch must be non-empty with positive weight"));
    }
    let mut out = ElboBatch {
        elbo: 0.0,
        log_likelihood: 0.0,
        gap: 0.0,
        min_gap: f64::INFINITY,
    };
    for ex in batch {
        let targets: Vec<(Token, f64)> = match &ex.target {
            Target::Token(t) => vec![(*t, 1.0)],
            Target::Distribution(p) => p.iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect(),
        };
        let q = params.attention_weights(&ex.prefix)?;
        let ll = position_loglik(params, &ex.prefix)?;
        let w = ex.weight / total;
        for (tok, p) in targets {
            check(params, &ex.prefix, tok)?;
            let t = terms_from(&ll, tok, &q);
            out.elbo += w * p * t.elbo;
            out.log_likelihood += w * p * t.log_likelihood;
            out.gap += w * p * t.gap;
            out.min_gap = out.min_gap.min(t.gap);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboRow {
    pub token: Token,
    pub elbo: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboTable {
    pub rows: Vec<ElboRow>,
    /// Whether the ELBO and the exact log-probability pick the same token.
    pub argmax_agrees: bool,
}

/// ELBO and exact log marginal for every candidate next token.
pub fn elbo_inference(params: &TransformerParams, prefix: &[Token]) -> Result<ElboTable> {
    check(params, prefix, 0)?;
    let q = params.attention_weights(prefix)?;
    let ll = position_loglik(params, prefix)?;
    let rows: Vec<ElboRow> = (0..params.alphabet_size())
        .map(|k| {
            let t = terms_from(&ll, k, &q);
            ElboRow {
                token: k,
                elbo: t.elbo,
                log_prob: t.log_likelihood,
            }
        })
        .collect();
    let e: Vec<f64> = rows.iter().map(|r| r.elbo).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.log_prob).collect();
    Ok(ElboTable {
        argmax_agrees: argmax(&e) == argmax(&l),
        rows,
    })
}
