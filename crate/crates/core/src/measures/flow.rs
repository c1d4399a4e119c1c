use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::language::Token;
use crate::numeric::kl_divergence;

use super::ensemble::SequenceEnsemble;
use super::information::{directed_information, directed_information_terms};

/// Semantic information flow along one path with its Doob decomposition.
///
/// Entry `k` refers to step `t = n + 1 + k`. `cumulative = martingale +
/// compensator`; the compensator increments are the conditional KL terms and
/// `variance` accumulates the conditional variances of the densities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowTrace {
    pub steps: Vec<usize>,
    pub density: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub martingale: Vec<f64>,
    pub compensator: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_flow(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// CSV with header `step,density,cumulative,M,A,V`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,density,cumulative,M,A,V\n");
        for k in 0..self.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.steps[k],
                self.density[k],
                self.cumulative[k],
                self.martingale[k],
                self.compensator[k],
                self.variance[k]
            ));
        }
        s
    }
}

/// One step of the flow: the realised density plus the exact conditional
/// mean and variance of the density given the past.
struct StepStats {
    density: f64,
    kl: f64,
    mean_density: f64,
    variance: f64,
}

fn step_stats(ens: &SequenceEnsemble, prompt: &[Token], head: &[Token], token: Token) -> Result<StepStats> {
    let mut context = prompt.to_vec();
    context.extend_from_slice(head);
    let p = ens.conditional_given_prompt(&context)?;
    let q = ens.conditional_marginal(head)?;
    if p[token] <= 0.0 {
        return Err(Error::ZeroProbabilityPath(format!("{prompt:?} -> {head:?} + {token}")));
    }
    let densities: Vec<Option<f64>> = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| (a > 0.0).then(|| a.ln() - b.ln()))
        .collect();
    let mean_density: f64 = p.iter().zip(&densities).filter_map(|(a, d)| d.map(|d| a * d)).sum();
    let second: f64 = p.iter().zip(&densities).filter_map(|(a, d)| d.map(|d| a * d * d)).sum();
    Ok(StepStats {
        density: densities[token].expect("checked positive"),
        kl: kl_divergence(&p, &q),
        mean_density,
        variance: (second - mean_density * mean_density).max(0.0),
    })
}

/// Flow trace of `prompt` followed by `continuation`.
pub fn semantic_flow(ens: &SequenceEnsemble, prompt: &[Token], continuation: &[Token]) -> Result<FlowTrace> {
    if prompt.len() != ens.prompt_len() {
        return Err(domain("prompt length does not match the ensemble"));
    }
    if ens.prompt_len() + continuation.len() > ens.horizon() {
        return Err(domain("continuation runs past the horizon"));
    }
    let mut tr = FlowTrace {
        steps: Vec::new(),
        density: Vec::new(),
        cumulative: Vec::new(),
        martingale: Vec::new(),
        compensator: Vec::new(),
        variance: Vec::new(),
    };
    let (mut flow, mut a, mut v) = (0.0, 0.0, 0.0);
    for k in 0..continuation.len() {
        let st = step_stats(ens, prompt, &continuation[..k], continuation[k])?;
        flow += st.density;
        a += st.kl;
        v += st.variance;
        tr.steps.push(ens.prompt_len() + 1 + k);
        tr.density.push(st.density);
        tr.cumulative.push(flow);
        tr.compensator.push(a);
        tr.martingale.push(flow - a);
        tr.variance.push(v);
    }
    Ok(tr)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmartingaleReport {
    pub paths: usize,
    pub checks: usize,
    /// Steps where the expected next flow fell below the current flow by more
    /// than 1e-10.
    pub violations: usize,
    /// Smallest `E[flow_t | past] - flow_{t-1}` seen.
    pub min_margin: f64,
    /// Largest gap between the expected density and the conditional KL.
    pub max_kl_mismatch: f64,
}

/// Samples paths and checks at every step that the expected flow increment,
/// computed as the mean of the pathwise densities over the next token, is
/// nonnegative and equals the conditional KL divergence.
pub fn submartingale_check(ens: &SequenceEnsemble, num_paths: usize, seed: u64) -> Result<SubmartingaleReport> {
    let paths = ens.sample_paths(num_paths, seed)?;
    let per_path: Vec<Result<(usize, f64, f64)>> = paths
        .par_iter()
        .map(|(s, u)| {
            let mut viol = 0;
            let mut min_margin = f64::INFINITY;
            let mut mismatch = 0.0f64;
            for k in 0..u.len() {
                let st = step_stats(ens, s, &u[..k], u[k])?;
                if st.mean_density < -1e-10 {
                    viol += 1;
                }
                min_margin = min_margin.min(st.mean_density);
                mismatch = mismatch.max((st.mean_density - st.kl).abs());
            }
            Ok((viol, min_margin, mismatch))
        })
        .collect();
    let mut rep = SubmartingaleReport {
        paths: num_paths,
        checks: num_paths * (ens.horizon() - ens.prompt_len()),
        violations: 0,
        min_margin: f64::INFINITY,
        max_kl_mismatch: 0.0,
    };
    for r in per_path {
        let (v, m, mm) = r?;
        rep.violations += v;
        rep.min_margin = rep.min_margin.min(m);
        rep.max_kl_mismatch = rep.max_kl_mismatch.max(mm);
    }
    Ok(rep)
}

/// Freedman-type bound `exp(-alpha^2 / (2 (alpha + beta)))`.
pub fn freedman_bound(alpha: f64, beta: f64) -> f64 {
    (-alpha * alpha / (2.0 * (alpha + beta))).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreedmanCell {
    pub alpha: f64,
    pub beta: f64,
    pub empirical: f64,
    pub bound: f64,
}

/// Empirical frequency of `{M_tau > alpha, V_tau < beta}` at the end of the
/// sampled paths, against the bound, for every grid cell.
pub fn freedman_check(
    ens: &SequenceEnsemble,
    alphas: &[f64],
    betas: &[f64],
    num_paths: usize,
    seed: u64,
) -> Result<Vec<FreedmanCell>> {
    if num_paths == 0 {
        return Err(domain("need at least one path"));
    }
    let paths = ens.sample_paths(num_paths, seed)?;
    let finals: Vec<Result<(f64, f64)>> = paths
        .par_iter()
        .map(|(s, u)| {
            let tr = semantic_flow(ens, s, u)?;
            Ok((
                tr.martingale.last().copied().unwrap_or(0.0),
                tr.variance.last().copied().unwrap_or(0.0),
            ))
        })
        .collect();
    let finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let hits = finals.iter().filter(|(m, v)| *m > alpha && *v < beta).count();
            out.push(FreedmanCell {
                alpha,
                beta,
                empirical: hits as f64 / num_paths as f64,
                bound: freedman_bound(alpha, beta),
            });
        }
    }
    Ok(out)
}

/// `(I(S -> U_{n+1:T}), I(S -> U_{n+1}))`; the first is never smaller.
pub fn optional_stopping_check(ens: &SequenceEnsemble) -> (f64, f64) {
    let first = directed_information_terms(ens)[0];
    (directed_information(ens), first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{FnModel, PromptPrior, TeacherProcess, TokenAlphabet};
    use crate::model::{InitConfig, TransformerParams};
    use std::f64::consts::LN_2;

    #[test]
    fn bound_at_unit_point() {
        assert!((freedman_bound(1.0, 1.0) - (-0.25f64).exp()).abs() < 1e-15);
        assert!((freedman_bound(1.0, 1.0) - 0.77880).abs() < 1e-5);
    }

    #[test]
    fn prompt_independent_flow_is_zero() {
        let t = TeacherProcess::uniform(TokenAlphabet::new(3, 2).unwrap());
        let e = SequenceEnsemble::build(&t, &PromptPrior::Uniform, 1, 4).unwrap();
        let tr = semantic_flow(&e, &[0], &[1, 0, 2]).unwrap();
        assert!(tr
            .cumulative
            .iter()
            .chain(&tr.compensator)
            .chain(&tr.variance)
            .all(|v| v.abs() < 1e-12));
        let rep = submartingale_check(&e, 50, 0).unwrap();
        assert!(rep.min_margin.abs() < 1e-12);
        let (full, first) = optional_stopping_check(&e);
        assert!(full.abs() < 1e-12 && first.abs() < 1e-12);
    }

    #[test]
    fn copy_step_margin_is_ln2() {
        let m = FnModel::new(3, 2, |p: &[Token]| {
            if p.len() == 1 {
                let mut v = vec![0.0; 3];
                v[p[0]] = 1.0;
                v
            } else {
                vec![0.0, 0.0, 1.0]
            }
        });
        let prior = PromptPrior::Explicit {
            probabilities: vec![0.5, 0.5, 0.0],
        };
        let e = SequenceEnsemble::build(&m, &prior, 1, 3).unwrap();
        let tr = semantic_flow(&e, &[0], &[0, 2]).unwrap();
        assert!((tr.compensator[0] - LN_2).abs() < 1e-12);
        assert!((tr.density[0] - LN_2).abs() < 1e-12);
        let rep = submartingale_check(&e, 20, 3).unwrap();
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn single_step_horizon_has_equal_information() {
        let p = TransformerParams::random(&InitConfig::new(3, 2), 0).unwrap();
        let e = SequenceEnsemble::build(&p, &PromptPrior::Uniform, 2, 3).unwrap();
        let (full, first) = optional_stopping_check(&e);
        assert_eq!(full, first);
    }

    #[test]
    fn doob_components_add_up() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let e = SequenceEnsemble::build(&p, &PromptPrior::Uniform, 2, 5).unwrap();
        for (s, u) in e.sample_paths(100, 1).unwrap() {
            let tr = semantic_flow(&e, &s, &u).unwrap();
            for k in 0..tr.len() {
                assert!((tr.martingale[k] + tr.compensator[k] - tr.cumulative[k]).abs() < 1e-10);
                if k > 0 {
                    assert!(tr.compensator[k] >= tr.compensator[k - 1] - 1e-10);
                }
            }
        }
    }

    #[test]
    fn csv_header() {
        let t = TeacherProcess::uniform(TokenAlphabet::new(2, 1).unwrap());
        let e = SequenceEnsemble::build(&t, &PromptPrior::Uniform, 1, 2).unwrap();
        let csv = semantic_flow(&e, &[0], &[1]).unwrap().to_csv();
        assert!(csv.starts_with("step,density,cumulative,M,A,V\n2,0,0,0,0,0\n"));
    }
}
