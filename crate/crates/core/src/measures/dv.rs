//! Donsker-Varadhan estimate of directed information from samples.
//!
//! The joint `P(S, U)` is compared against the reference `P(S) * prod_j
//! P(U_j | U_{<j})`, i.e. the product of the prompt marginal and the
//! continuation marginal. Their KL divergence is the directed information in
//! the full-prompt setting, and
//! `KL >= E_joint[f] - ln E_ref[exp f]` for every test function `f`.
//! The test function is a two-layer tanh network on the one-hot encoding of
//! the whole sequence.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numeric::{log_sum_exp, rng_from_seed};

use super::ensemble::SequenceEnsemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvConfig {
    /// Samples drawn from each of the joint and the reference. Samples are
    /// aggregated into counts per sequence, so the cost grows with the
    /// support size rather than with this number.
    pub samples: usize,
    pub width: usize,
    pub train_steps: usize,
    pub lr: f64,
    /// Fraction of samples used for training; the rest score the estimate.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DvConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            width: 32,
            train_steps: 2_000,
            lr: 0.01,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DvEstimate {
    /// DV objective on the held-out samples, in nats.
    pub estimate: f64,
    /// DV objective on the training samples after the last step.
    pub train_objective: f64,
    /// Set when the objective became non-finite; `estimate` is then the last
    /// finite held-out value (or 0).
    pub diverged: bool,
}

/// Empirical distribution as sorted `(sequence index, count)` pairs.
type Counts = Vec<(usize, f64)>;

fn tally(indices: &[usize]) -> Counts {
    let mut m = BTreeMap::new();
    for &i in indices {
        *m.entry(i).or_insert(0.0) += 1.0;
    }
    m.into_iter().collect()
}

struct Net {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DVector<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(size: usize) -> Self {
        Self {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

impl Net {
    /// Hidden pre-activation for a one-hot input: sum of the active columns.
    fn hidden(&self, active: &[usize]) -> DVector<f64> {
        let mut h = self.b1.clone();
        for &c in active {
            h += self.w1.column(c);
        }
        h
    }

    fn eval(&self, active: &[usize]) -> f64 {
        self.w2.dot(&self.hidden(active).map(f64::tanh))
    }
}

/// DV objective and its gradient with respect to `f` at each point.
fn objective(fj: &[f64], joint: &Counts, fr: &[f64], reference: &Counts) -> (f64, Vec<f64>, Vec<f64>) {
    let nj: f64 = joint.iter().map(|(_, c)| c).sum();
    let mean_j: f64 = joint.iter().zip(fj).map(|((_, c), f)| c * f).sum::<f64>() / nj;
    let logs: Vec<f64> = reference.iter().zip(fr).map(|((_, c), f)| c.ln() + f).collect();
    let lse = log_sum_exp(&logs);
    let nr: f64 = reference.iter().map(|(_, c)| c).sum();
    let value = mean_j - (lse - nr.ln());
    let gj = joint.iter().map(|(_, c)| c / nj).collect();
    let gr = logs.iter().map(|l| -(l - lse).exp()).collect();
    (value, gj, gr)
}

/// Estimates the directed information of `ens` from sampled sequences.
pub fn dv_estimate(ens: &SequenceEnsemble, cfg: &DvConfig) -> Result<DvEstimate> {
    if cfg.samples < 1000 {
        return Err(domain("need at least 1000 samples from each distribution"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.width == 0 || !(cfg.lr > 0.0) {
        return Err(domain("invalid estimator configuration"));
    }
    let n_tok = ens.alphabet_size();
    let horizon = ens.horizon();
    let width_u = n_tok.pow((horizon - ens.prompt_len()) as u32);

    let joint_idx = ens.sample_indices(cfg.samples, cfg.seed)?;
    // Reference: prompt and continuation from two independent joint draws.
    let a = ens.sample_indices(cfg.samples, cfg.seed.wrapping_add(1))?;
    let b = ens.sample_indices(cfg.samples, cfg.seed.wrapping_add(2))?;
    let ref_idx: Vec<usize> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x / width_u) * width_u + y % width_u)
        .collect();

    let split = |v: Vec<usize>, salt: u64| {
        let mut v = v;
        v.shuffle(&mut rng_from_seed(cfg.seed.wrapping_add(salt)));
        let cut = ((v.len() as f64) * cfg.train_fraction).round() as usize;
        let cut = cut.clamp(1, v.len() - 1);
        let test = v.split_off(cut);
        (tally(&v), tally(&test))
    };
    let (joint_train, joint_test) = split(joint_idx, 3);
    let (ref_train, ref_test) = split(ref_idx, 4);

    let active = |idx: usize| -> Vec<usize> {
        ens.decode(idx)
            .iter()
            .enumerate()
            .map(|(pos, &tok)| pos * n_tok + tok)
            .collect()
    };
    let act_jt: Vec<Vec<usize>> = joint_train.iter().map(|(i, _)| active(*i)).collect();
    let act_rt: Vec<Vec<usize>> = ref_train.iter().map(|(i, _)| active(*i)).collect();
    let act_jh: Vec<Vec<usize>> = joint_test.iter().map(|(i, _)| active(*i)).collect();
    let act_rh: Vec<Vec<usize>> = ref_test.iter().map(|(i, _)| active(*i)).collect();

    let input = horizon * n_tok;
    let w = cfg.width;
    let mut rng = rng_from_seed(cfg.seed.wrapping_add(5));
    let init = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("valid normal");
    let init2 = Normal::new(0.0, 1.0 / (w as f64).sqrt()).expect("valid normal");
    let mut net = Net {
        w1: DMatrix::from_fn(w, input, |_, _| init.sample(&mut rng)),
        b1: DVector::zeros(w),
        w2: DVector::from_fn(w, |_, _| init2.sample(&mut rng)),
    };
    let n_params = w * input + 2 * w;
    let mut adam = Adam::new(n_params);

    let held_out = |net: &Net| {
        let fj: Vec<f64> = act_jh.iter().map(|a| net.eval(a)).collect();
        let fr: Vec<f64> = act_rh.iter().map(|a| net.eval(a)).collect();
        objective(&fj, &joint_test, &fr, &ref_test).0
    };

    let mut train_value = 0.0;
    let mut last_finite = 0.0;
    let mut diverged = false;
    for _ in 0..cfg.train_steps {
        let mut g_w1 = DMatrix::zeros(w, input);
        let mut g_b1 = DVector::zeros(w);
        let mut g_w2 = DVector::zeros(w);
        let hj: Vec<DVector<f64>> = act_jt.iter().map(|a| net.hidden(a).map(f64::tanh)).collect();
        let hr: Vec<DVector<f64>> = act_rt.iter().map(|a| net.hidden(a).map(f64::tanh)).collect();
        let fj: Vec<f64> = hj.iter().map(|h| net.w2.dot(h)).collect();
        let fr: Vec<f64> = hr.iter().map(|h| net.w2.dot(h)).collect();
        let (value, gj, gr) = objective(&fj, &joint_train, &fr, &ref_train);
        if !value.is_finite() {
            diverged = true;
            break;
        }
        train_value = value;
        for ((acts, h), g) in act_jt.iter().zip(&hj).zip(&gj).chain(act_rt.iter().zip(&hr).zip(&gr)) {
            g_w2.axpy(*g, h, 1.0);
            let gh = net.w2.component_mul(&h.map(|v| 1.0 - v * v)) * *g;
            g_b1 += &gh;
            for &c in acts {
                let mut col = g_w1.column_mut(c);
                col += &gh;
            }
        }
        let mut flat: Vec<f64> = net
            .w1
            .iter()
            .chain(net.b1.iter())
            .chain(net.w2.iter())
            .copied()
            .collect();
        let grad: Vec<f64> = g_w1.iter().chain(g_b1.iter()).chain(g_w2.iter()).copied().collect();
        adam.step(&mut flat, &grad, cfg.lr);
        let (p1, rest) = flat.split_at(w * input);
        let (p2, p3) = rest.split_at(w);
        net.w1.copy_from_slice(p1);
        net.b1.copy_from_slice(p2);
        net.w2.copy_from_slice(p3);
        let h = held_out(&net);
        if h.is_finite() {
            last_finite = h;
        } else {
            diverged = true;
            break;
        }
    }
    Ok(DvEstimate {
        estimate: if diverged { last_finite } else { held_out(&net) },
        train_objective: train_value,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_of_zero_function_is_zero() {
        let j = vec![(0, 3.0), (2, 1.0)];
        let r = vec![(1, 2.0), (2, 2.0)];
        let (v, gj, gr) = objective(&[0.0, 0.0], &j, &[0.0, 0.0], &r);
        assert!(v.abs() < 1e-15);
        assert_eq!(gj, vec![0.75, 0.25]);
        assert_eq!(gr, vec![-0.5, -0.5]);
    }

    #[test]
    fn tally_counts_in_index_order() {
        assert_eq!(tally(&[3, 1, 3, 3]), vec![(1, 1.0), (3, 3.0)]);
    }
}
