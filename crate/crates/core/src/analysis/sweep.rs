use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::language::{NextTokenModel, TeacherProcess, Token};
use crate::measures::{directed_information, SequenceEnsemble};
use crate::model::{
    mean_kl, train, DecodeMode, InitConfig, LossVariant, RewardFunction, TrainConfig, TransformerParams,
};
use crate::numeric::rng_from_seed;

/// Monte-Carlo sample count for rewards that cannot be enumerated.
pub const REWARD_SAMPLES: usize = 10_000;

/// Grid and training budget shared by the rate-distortion and rate-reward
/// sweeps. A lambda of `inf` (written `"inf"` in JSON) means the pure
/// cross-entropy objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(with = "lambda_list")]
    pub lambdas: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    pub prompt_len: usize,
    pub horizon: usize,
    /// Embedding dimension of the students.
    pub student_dim: usize,
    /// Seed of the student initialisation and of training.
    pub seed: u64,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(domain("lambda grid is empty"));
        }
        if self.lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(domain("lambdas must be nonnegative"));
        }
        if self.steps == 0 {
            return Err(domain("training budget must be at least one step"));
        }
        if !(self.lr > 0.0) {
            return Err(domain("learning rate must be positive"));
        }
        if self.horizon <= self.prompt_len || self.student_dim == 0 {
            return Err(domain("need T > n and a positive student dimension"));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::new(self.steps, self.lr, self.prompt_len, self.horizon)
        }
    }

    fn student(&self, teacher: &TeacherProcess) -> Result<TransformerParams> {
        let alphabet = teacher.alphabet();
        let init = InitConfig {
            stop_token: alphabet.stop_token(),
            ..InitConfig::new(alphabet.size(), self.student_dim)
        };
        TransformerParams::random(&init, self.seed)
    }
}

mod lambda_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Repr> = v
            .iter()
            .map(|x| {
                if x.is_infinite() {
                    Repr::Text("inf".into())
                } else {
                    Repr::Num(*x)
                }
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
                Repr::Text(t) => Err(serde::de::Error::custom(format!("bad lambda {t:?}"))),
            })
            .collect()
    }
}

/// One trained grid point. Values are `NaN` (JSON `null`) when training
/// diverged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(serialize_with = "lambda_value")]
    pub lambda: f64,
    /// Mean per-step KL from teacher to student.
    pub distortion: f64,
    /// Student directed information divided by `T`.
    pub rate: f64,
    /// Exact (or sampled) expected reward; rate-reward sweeps only.
    pub expected_reward: Option<f64>,
    pub final_loss: f64,
    pub diverged: bool,
    /// On the lower-left Pareto front of (distortion, rate).
    pub pareto: bool,
}

fn lambda_value<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdCurve {
    /// Sorted by distortion; diverged points last.
    pub points: Vec<SweepPoint>,
    /// Teacher directed information divided by `T`.
    pub teacher_rate: f64,
    pub prompt_len: usize,
    pub horizon: usize,
}

impl RdCurve {
    /// Pareto-filtered points in order of increasing distortion; their
    /// rates are strictly decreasing.
    pub fn pareto_front(&self) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.pareto).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrCurve {
    /// In grid order.
    pub points: Vec<SweepPoint>,
    /// Whether achieved expected reward is non-decreasing in lambda.
    pub reward_monotone: bool,
    pub prompt_len: usize,
    pub horizon: usize,
}

/// Student directed information over the teacher's prompt prior, divided by `T`.
fn rate_of(params: &TransformerParams, prompt_probs: &[f64], n: usize, horizon: usize) -> Result<f64> {
    let ens = SequenceEnsemble::build_with_prompt_probs(params, prompt_probs, n, horizon)?;
    Ok(directed_information(&ens) / horizon as f64)
}

fn diverged_point(lambda: f64) -> SweepPoint {
    SweepPoint {
        lambda,
        distortion: f64::NAN,
        rate: f64::NAN,
        expected_reward: None,
        final_loss: f64::NAN,
        diverged: true,
        pareto: false,
    }
}

fn mark_pareto(points: &mut [SweepPoint]) {
    points.sort_by(|a, b| {
        a.diverged
            .cmp(&b.diverged)
            .then(a.distortion.total_cmp(&b.distortion))
            .then(a.rate.total_cmp(&b.rate))
    });
    let mut best = f64::INFINITY;
    for p in points.iter_mut().filter(|p| !p.diverged) {
        p.pareto = p.rate < best;
        best = best.min(p.rate);
    }
}

/// Directed rate-distortion sweep: one student per lambda trained on
/// `DI / T + lambda * CE` (pure cross-entropy at `inf`), evaluated exactly.
/// Grid points train in parallel; a point whose training diverges is
/// flagged and the sweep continues.
pub fn rd_sweep(teacher: &TeacherProcess, cfg: &SweepConfig) -> Result<RdCurve> {
    cfg.validate()?;
    let (n, horizon) = (cfg.prompt_len, cfg.horizon);
    let prompt_probs = teacher.prompt_prior().probabilities(teacher.alphabet_size(), n)?;
    let teacher_ens = SequenceEnsemble::build_with_prompt_probs(teacher, &prompt_probs, n, horizon)?;
    let teacher_rate = directed_information(&teacher_ens) / horizon as f64;
    let student = cfg.student(teacher)?;
    let tc = cfg.train_config();
    let mut points: Vec<SweepPoint> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda| -> Result<SweepPoint> {
            let variant = if lambda.is_infinite() {
                LossVariant::CrossEntropy
            } else {
                LossVariant::CePlusDi { lambda }
            };
            match train(student.clone(), teacher, &variant, &tc) {
                Ok(out) => Ok(SweepPoint {
                    lambda,
                    distortion: mean_kl(teacher, &out.params, n, horizon)?,
                    rate: rate_of(&out.params, &prompt_probs, n, horizon)?,
                    expected_reward: None,
                    final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
                    diverged: false,
                    pareto: false,
                }),
                Err(Error::NonFinite(_)) => Ok(diverged_point(lambda)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    mark_pareto(&mut points);
    Ok(RdCurve {
        points,
        teacher_rate,
        prompt_len: n,
        horizon,
    })
}

/// Keeps the continuation up to and including its first stop token.
pub(crate) fn trim_at_stop(continuation: &[Token], stop: Token) -> &[Token] {
    match continuation.iter().position(|&t| t == stop) {
        Some(p) => &continuation[..=p],
        None => continuation,
    }
}

/// `E[w]` under `model` with the given prompt probabilities: exact when the
/// ensemble fits, otherwise the mean over [`REWARD_SAMPLES`] seeded draws.
pub fn expected_reward(
    params: &TransformerParams,
    prompt_probs: &[f64],
    prompt_len: usize,
    horizon: usize,
    reward: &dyn RewardFunction,
    seed: u64,
) -> Result<f64> {
    let stop = params.stop_token();
    match SequenceEnsemble::build_with_prompt_probs(params, prompt_probs, prompt_len, horizon) {
        Ok(ens) => {
            let mut acc = 0.0;
            for (idx, &lp) in ens.log_joint().iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    let toks = ens.decode(idx);
                    acc += lp.exp() * reward.reward(&toks[..prompt_len], trim_at_stop(&toks[prompt_len..], stop));
                }
            }
            Ok(acc)
        }
        Err(Error::SizeLimit { .. }) => {
            let sampler = WeightedIndex::new(prompt_probs).map_err(|e| domain(format!("prompt prior: {e}")))?;
            let mut rng = rng_from_seed(seed);
            let mut acc = 0.0;
            for i in 0..REWARD_SAMPLES {
                let prompt = crate::numeric::decode_tuple(sampler.sample(&mut rng), params.alphabet_size(), prompt_len);
                let g = params.generate(&prompt, horizon, DecodeMode::Sample, seed.wrapping_add(i as u64))?;
                acc += reward.reward(&prompt, trim_at_stop(g.generated(), stop));
            }
            Ok(acc / REWARD_SAMPLES as f64)
        }
        Err(e) => Err(e),
    }
}

/// Directed rate-reward sweep: one student per lambda trained on
/// `DI / T - lambda * E[w]`; records the achieved expected reward and rate.
pub fn rr_sweep(teacher: &TeacherProcess, reward: Arc<dyn RewardFunction>, cfg: &SweepConfig) -> Result<RrCurve> {
    cfg.validate()?;
    if cfg.lambdas.iter().any(|l| l.is_infinite()) {
        return Err(domain("rate-reward lambdas must be finite"));
    }
    let (n, horizon) = (cfg.prompt_len, cfg.horizon);
    let prompt_probs = teacher.prompt_prior().probabilities(teacher.alphabet_size(), n)?;
    let student = cfg.student(teacher)?;
    let tc = cfg.train_config();
    let points: Vec<SweepPoint> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda| -> Result<SweepPoint> {
            let variant = LossVariant::DiMinusReward {
                lambda,
                reward: reward.clone(),
            };
            match train(student.clone(), teacher, &variant, &tc) {
                Ok(out) => Ok(SweepPoint {
                    lambda,
                    distortion: mean_kl(teacher, &out.params, n, horizon)?,
                    rate: rate_of(&out.params, &prompt_probs, n, horizon)?,
                    expected_reward: Some(expected_reward(
                        &out.params,
                        &prompt_probs,
                        n,
                        horizon,
                        reward.as_ref(),
                        cfg.seed,
                    )?),
                    final_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
                    diverged: false,
                    pareto: false,
                }),
                Err(Error::NonFinite(_)) => Ok(diverged_point(lambda)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut by_lambda: Vec<&SweepPoint> = points.iter().filter(|p| !p.diverged).collect();
    by_lambda.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let reward_monotone = by_lambda
        .windows(2)
        .all(|w| w[1].expected_reward.unwrap_or(f64::NAN) >= w[0].expected_reward.unwrap_or(f64::NAN) - 1e-12);
    Ok(RrCurve {
        points,
        reward_monotone,
        prompt_len: n,
        horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingEndpointReport {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_kl: f64,
    pub di_teacher: f64,
    pub di_student: f64,
    pub di_gap: f64,
    #[serde(skip)]
    pub student: TransformerParams,
}

/// Trains `student` on the teacher's cross-entropy and compares both
/// directed informations by exact enumeration.
pub fn verify_training_endpoint(
    teacher: &TeacherProcess,
    student: TransformerParams,
    cfg: &TrainConfig,
) -> Result<TrainingEndpointReport> {
    let (n, horizon) = (cfg.prompt_len, cfg.horizon);
    let prompt_probs = teacher.prompt_prior().probabilities(teacher.alphabet_size(), n)?;
    let teacher_ens = SequenceEnsemble::build_with_prompt_probs(teacher, &prompt_probs, n, horizon)?;
    let di_teacher = directed_information(&teacher_ens);
    let (student, final_loss) = if cfg.steps == 0 {
        (student, f64::NAN)
    } else {
        let out = train(student, teacher, &LossVariant::CrossEntropy, cfg)?;
        let last = out.loss_trace.last().copied().unwrap_or(f64::NAN);
        (out.params, last)
    };
    let student_ens = SequenceEnsemble::build_with_prompt_probs(&student, &prompt_probs, n, horizon)?;
    let di_student = directed_information(&student_ens);
    Ok(TrainingEndpointReport {
        steps: cfg.steps,
        final_loss,
        mean_kl: mean_kl(teacher, &student, n, horizon)?,
        di_teacher,
        di_student,
        di_gap: (di_student - di_teacher).abs(),
        student,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{MarkovKernel, PromptPrior, TokenAlphabet};
    use crate::model::{ConstantReward, NoTokenReward};

    fn seed0_teacher(n: usize, d: usize) -> TeacherProcess {
        let p = TransformerParams::random(&InitConfig::new(n, d), 0).unwrap();
        TeacherProcess::transformer(p, PromptPrior::Uniform).unwrap()
    }

    fn cfg(lambdas: Vec<f64>) -> SweepConfig {
        SweepConfig {
            lambdas,
            steps: 30,
            lr: 0.1,
            prompt_len: 1,
            horizon: 3,
            student_dim: 2,
            seed: 1,
            batch_size: None,
        }
    }

    #[test]
    fn student_equal_to_teacher_has_no_gap() {
        let teacher = seed0_teacher(4, 3);
        let student = TransformerParams::random(&InitConfig::new(4, 3), 0).unwrap();
        let r = verify_training_endpoint(&teacher, student, &TrainConfig::new(0, 0.1, 2, 4)).unwrap();
        assert!(r.mean_kl < 1e-10 && r.di_gap < 1e-10);
    }

    #[test]
    fn prompt_independent_teacher_has_zero_rates() {
        let alphabet = TokenAlphabet::new(3, 2).unwrap();
        let rows = vec![vec![0.2, 0.5, 0.3]];
        let kernel = MarkovKernel::new(3, 0, rows).unwrap();
        let teacher = TeacherProcess::markov(alphabet, kernel, PromptPrior::Uniform).unwrap();
        let r = verify_training_endpoint(
            &teacher,
            TransformerParams::random(&InitConfig::new(3, 2), 1).unwrap(),
            &TrainConfig::new(5, 0.1, 1, 3),
        )
        .unwrap();
        assert!(r.di_teacher.abs() < 1e-12);
        let curve = rd_sweep(&teacher, &cfg(vec![0.0, 1.0])).unwrap();
        assert!(curve.teacher_rate.abs() < 1e-12);
    }

    #[test]
    fn rd_front_is_monotone_and_sorted() {
        let teacher = seed0_teacher(3, 2);
        let curve = rd_sweep(&teacher, &cfg(vec![0.0, 0.5, 2.0, f64::INFINITY])).unwrap();
        assert_eq!(curve.points.len(), 4);
        let front = curve.pareto_front();
        assert!(!front.is_empty());
        for w in front.windows(2) {
            assert!(w[0].distortion <= w[1].distortion && w[1].rate < w[0].rate);
        }
        for w in curve.points.windows(2) {
            assert!(w[0].distortion <= w[1].distortion);
        }
    }

    #[test]
    fn huge_learning_rate_is_flagged_not_fatal() {
        let teacher = seed0_teacher(3, 2);
        let mut c = cfg(vec![1.0, f64::INFINITY]);
        c.lr = 1e300;
        let curve = rd_sweep(&teacher, &c).unwrap();
        assert_eq!(curve.points.len(), 2);
    }

    #[test]
    fn constant_reward_reduces_to_di_minimisation() {
        let teacher = seed0_teacher(3, 2);
        let a = rr_sweep(&teacher, Arc::new(ConstantReward(1.0)), &cfg(vec![0.0, 5.0])).unwrap();
        assert!((a.points[0].rate - a.points[1].rate).abs() < 1e-12);
        assert!((a.points[1].expected_reward.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reward_helper_matches_indicator_by_hand() {
        let p = TransformerParams::random(&InitConfig::new(3, 2), 0).unwrap();
        let probs = vec![1.0 / 3.0; 3];
        let ew = expected_reward(&p, &probs, 1, 2, &NoTokenReward(0), 0).unwrap();
        let mut direct = 0.0;
        for s in 0..3 {
            let q = p.next_token_distribution(&[s]).unwrap();
            direct += (1.0 / 3.0) * (1.0 - q[0]);
        }
        assert!((ew - direct).abs() < 1e-12);
    }

    #[test]
    fn lambda_json_accepts_inf() {
        let text = r#"{"lambdas": [0.5, "inf"], "steps": 1, "lr": 0.1, "prompt_len": 1, "horizon": 2, "student_dim": 2, "seed": 0}"#;
        let c: SweepConfig = serde_json::from_str(text).unwrap();
        assert!(c.lambdas[1].is_infinite());
        let back: SweepConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
