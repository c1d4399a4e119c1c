use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::language::Token;
use crate::numeric::log_softmax;

use super::transformer::{Forward, TransformerParams};

/// What the model should predict after a prefix.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// A single observed token.
    Token(Token),
    /// A full labelled distribution (soft target), e.g. a teacher conditional.
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub prefix: Vec<Token>,
    pub target: Target,
    pub weight: f64,
}

impl TrainingExample {
    pub fn token(prefix: Vec<Token>, target: Token) -> Self {
        Self {
            prefix,
            target: Target::Token(target),
            weight: 1.0,
        }
    }
}

/// Gradient with the same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub embedding: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub bilinear: DMatrix<f64>,
}

impl Gradient {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            embedding: DMatrix::zeros(n, d),
            value: DMatrix::zeros(d, d),
            bilinear: DMatrix::zeros(d, d),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.embedding *= s;
        self.value *= s;
        self.bilinear *= s;
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.embedding += &other.embedding;
        self.value += &other.value;
        self.bilinear += &other.bilinear;
    }

    /// Removes from each embedding-row gradient its component along the row,
    /// leaving the tangent direction of the unit sphere.
    pub fn project_embedding_tangent(&mut self, embedding: &DMatrix<f64>) {
        for i in 0..embedding.nrows() {
            let u = embedding.row(i);
            let radial = self.embedding.row(i).dot(&u);
            let mut gi = self.embedding.row_mut(i);
            gi -= u * radial;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.embedding
            .iter()
            .chain(self.value.iter())
            .chain(self.bilinear.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Adds `scale * d/dparams [-sum_k coef_k ln q_k(history)]` to `grad`.
///
/// The coefficients need not be a distribution; the information-gradient
/// terms of the training objectives use signed coefficients.
pub(crate) fn accumulate(
    params: &TransformerParams,
    history: &[Token],
    fwd: &Forward,
    coef: &[f64],
    scale: f64,
    grad: &mut Gradient,
) {
    let xi = params.temperature();
    let e = params.embedding();
    let a = params.value();
    let b = params.bilinear();
    let total: f64 = coef.iter().sum();
    let g_z = DVector::from_fn(coef.len(), |k, _| scale * (total * fwd.probs[k] - coef[k]));

    // z = (1/xi) E c
    grad.embedding += (&g_z * fwd.context.transpose()) / xi;
    let g_c = e.tr_mul(&g_z) / xi;
    // c = A h
    grad.value += &g_c * fwd.mixed.transpose();
    let g_h = a.tr_mul(&g_c);
    // h = sum_j pi_j u_j, pi = softmax(s), s_j = q^T B u_j
    let q_tok = *history.last().expect("non-empty history");
    let q = params.token_vector(q_tok);
    let us: Vec<DVector<f64>> = history.iter().map(|&t| params.token_vector(t)).collect();
    let g_pi: Vec<f64> = us.iter().map(|u| g_h.dot(u)).collect();
    let mean: f64 = fwd.pi.iter().zip(&g_pi).map(|(p, g)| p * g).sum();
    let bt_q = b.tr_mul(&q);
    let mut g_q = DVector::zeros(q.len());
    for (j, (&tok, u)) in history.iter().zip(&us).enumerate() {
        let g_s = fwd.pi[j] * (g_pi[j] - mean);
        grad.bilinear += (&q * u.transpose()) * g_s;
        g_q.axpy(g_s, &(b * u), 1.0);
        let g_u = &g_h * fwd.pi[j] + &bt_q * g_s;
        let mut row = grad.embedding.row_mut(tok);
        row += g_u.transpose();
    }
    let mut row = grad.embedding.row_mut(q_tok);
    row += g_q.transpose();
}

/// Gradient of `ln Q(token | history)` with respect to all parameters.
pub fn log_prob_gradient(params: &TransformerParams, history: &[Token], token: Token) -> Result<Gradient> {
    let n = params.alphabet_size();
    if token >= n || history.iter().any(|&t| t >= n) {
        return Err(domain("token outside alphabet"));
    }
    let mut g = Gradient::zeros(n, params.dim());
    if history.is_empty() {
        return Ok(g);
    }
    let fwd = params.forward(history);
    let mut coef = vec![0.0; n];
    coef[token] = 1.0;
    accumulate(params, history, &fwd, &coef, -1.0, &mut g);
    Ok(g)
}

/// Weighted mean of `-ln Q(target | prefix)` over the batch together with
/// its analytic gradient. For a distribution target `p` the per-example term
/// is the cross-entropy `-sum_k p_k ln Q(k | prefix)`.
///
/// The embedding gradient is returned unprojected; [`train`](super::train)
/// projects it onto the sphere's tangent space before stepping.
pub fn cross_entropy_loss(params: &TransformerParams, batch: &[TrainingExample]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let n = params.alphabet_size();
    let total_weight: f64 = batch.iter().map(|ex| ex.weight).sum();
    if !(total_weight > 0.0) || batch.iter().any(|ex| !(ex.weight >= 0.0)) {
        return Err(domain("example weights must be nonnegative with positive sum"));
    }
    for ex in batch {
        if let Some(t) = ex.prefix.iter().find(|&&t| t >= n) {
            return Err(domain(format!("token {t} outside alphabet")));
        }
        match &ex.target {
            Target::Token(t) if *t >= n => return Err(domain(format!("target {t} outside alphabet"))),
            Target::Distribution(p) if p.len() != n => return Err(domain("target distribution has wrong length")),
            _ => {}
        }
    }
    // Per-example work in parallel; the reduction runs in index order.
    let parts: Vec<(f64, Option<Gradient>)> = batch
        .par_iter()
        .map(|ex| {
            let coef = match &ex.target {
                Target::Token(t) => {
                    let mut c = vec![0.0; n];
                    c[*t] = 1.0;
                    c
                }
                Target::Distribution(p) => p.clone(),
            };
            let w = ex.weight / total_weight;
            if ex.prefix.is_empty() {
                // Empty history: uniform prediction, no parameter dependence.
                let s: f64 = coef.iter().sum();
                return (w * s * (n as f64).ln(), None);
            }
            let fwd = params.forward(&ex.prefix);
            let logq = log_softmax(&fwd.logits);
            let ce: f64 = coef
                .iter()
                .zip(&logq)
                .filter(|(c, _)| **c != 0.0)
                .map(|(c, l)| -c * l)
                .sum();
            let mut g = Gradient::zeros(n, params.dim());
            accumulate(params, &ex.prefix, &fwd, &coef, w, &mut g);
            (w * ce, Some(g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = Gradient::zeros(n, params.dim());
    for (l, g) in parts {
        loss += l;
        if let Some(g) = g {
            grad.add_assign(&g);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitConfig;
    use crate::numeric::entropy;

    fn batch() -> Vec<TrainingExample> {
        vec![
            TrainingExample::token(vec![0, 1], 2),
            TrainingExample::token(vec![3, 1, 2], 0),
            TrainingExample {
                prefix: vec![2, 2, 0, 1],
                target: Target::Distribution(vec![0.1, 0.2, 0.3, 0.4]),
                weight: 2.5,
            },
            TrainingExample::token(vec![1], 3),
        ]
    }

    fn loss_at(p: &TransformerParams, b: &[TrainingExample]) -> f64 {
        cross_entropy_loss(p, b).unwrap().0
    }

    /// Max over entries of |analytic - fd| / max(|analytic|, |fd|, 1e-3).
    fn fd_check(p: &TransformerParams, b: &[TrainingExample]) -> f64 {
        let h = 1e-4;
        let (_, g) = cross_entropy_loss(p, b).unwrap();
        let mut worst = 0.0f64;
        for which in 0..3 {
            let (rows, cols) = match which {
                0 => g.embedding.shape(),
                1 => g.value.shape(),
                _ => g.bilinear.shape(),
            };
            for i in 0..rows {
                for j in 0..cols {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        let (e, a, bb) = q.parts_mut();
                        let m = match which {
                            0 => e,
                            1 => a,
                            _ => bb,
                        };
                        m[(i, j)] += delta;
                        loss_at(&q, b)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = match which {
                        0 => g.embedding[(i, j)],
                        1 => g.value[(i, j)],
                        _ => g.bilinear[(i, j)],
                    };
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    #[test]
    fn uniform_prediction_gives_ln_n() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0)
            .unwrap()
            .with_value(DMatrix::zeros(3, 3))
            .unwrap();
        let (l, _) = cross_entropy_loss(&p, &batch()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let worst = fd_check(&p, &batch());
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn teacher_targets_at_teacher_params_give_entropy() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let prefixes = [vec![0, 1], vec![2, 3, 1], vec![1]];
        let b: Vec<_> = prefixes
            .iter()
            .map(|pre| TrainingExample {
                prefix: pre.clone(),
                target: Target::Distribution(p.next_token_distribution(pre).unwrap()),
                weight: 1.0,
            })
            .collect();
        let h: f64 = prefixes
            .iter()
            .map(|pre| entropy(&p.next_token_distribution(pre).unwrap()))
            .sum::<f64>()
            / 3.0;
        assert!((loss_at(&p, &b) - h).abs() < 1e-10);
    }

    #[test]
    fn tangent_projection_is_orthogonal_to_rows() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let (_, mut g) = cross_entropy_loss(&p, &batch()).unwrap();
        g.project_embedding_tangent(p.embedding());
        for i in 0..4 {
            assert!(g.embedding.row(i).dot(&p.embedding().row(i)).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        assert!(cross_entropy_loss(&p, &[]).is_err());
    }
}
