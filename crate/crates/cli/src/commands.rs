use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokscope::analysis::{
    elbo_inference, elbo_training, embedding_objective, generalization_bound, rd_sweep, rr_sweep, semantic_capacity,
    transformer_fisher, CapacityMethod, EncoderFamily, ParamRef, SequenceSource, SweepConfig, SweepPoint,
};
use tokscope::geometry::{
    gw_cost, gw_distance_entropic, gw_distance_oracle, Coupling, EntropicGwConfig, SemanticVectorSpace,
};
use tokscope::language::{MarkovKernel, PromptPrior, TeacherProcess, TokenAlphabet};
use tokscope::measures::{
    directed_information, directed_information_terms, dv_estimate, freedman_check, mutual_information, semantic_flow,
    submartingale_check, DvConfig, SequenceEnsemble,
};
use tokscope::model::{
    mean_kl, teacher_examples, train, ConstantReward, InitConfig, LossVariant, NoTokenReward, RewardFunction, Target,
    TeacherLogLikelihood, TrainConfig, TransformerParams,
};
use tokscope::projection::{jl_dimension, jl_trials, JlBound, ProjectionKind};

use crate::run::{
    csv, load_model, load_teacher, merge, parse_tokens, require, to_points, CliResult, Failure, Lambda, Outcome, Plot,
    Run,
};

fn f(x: f64) -> String {
    x.to_string()
}

/// Seed offset separating the point cloud from the projection draws.
const SPACE_SEED_OFFSET: u64 = 1 << 32;

/// `no-token:K`, `constant:C` or `teacher-ll`.
fn parse_reward(spec: &str, teacher: &TeacherProcess) -> CliResult<Arc<dyn RewardFunction>> {
    let bad = || {
        Failure::config(format!(
            "bad reward {spec:?}; expected no-token:K, constant:C or teacher-ll"
        ))
    };
    match spec.split_once(':') {
        Some(("no-token", k)) => Ok(Arc::new(NoTokenReward(k.parse().map_err(|_| bad())?))),
        Some(("constant", c)) => Ok(Arc::new(ConstantReward(c.parse().map_err(|_| bad())?))),
        None if spec == "teacher-ll" => Ok(Arc::new(TeacherLogLikelihood::new(teacher.clone()))),
        _ => Err(bad()),
    }
}

/// The explicit model, or the teacher's own parameters.
fn model_or_teacher(model: &Option<PathBuf>, teacher: &TeacherProcess) -> CliResult<TransformerParams> {
    match (model, teacher.kind()) {
        (Some(p), _) => load_model(p),
        (None, tokscope::language::TeacherKind::Transformer(p)) => Ok(p.clone()),
        (None, _) => Err(Failure::config(
            "--model is required when the teacher is not a transformer",
        )),
    }
}

// gen-teacher

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherChoice {
    Transformer,
    Markov,
    Uniform,
}

#[derive(Debug, Args, Serialize)]
pub struct GenTeacherArgs {
    #[arg(long)]
    kind: Option<TeacherChoice>,
    /// Alphabet size.
    #[arg(long = "N")]
    #[serde(rename = "N")]
    alphabet_size: Option<usize>,
    /// Embedding dimension of a transformer teacher.
    #[arg(long)]
    d: Option<usize>,
    /// Order of a Markov teacher.
    #[arg(long)]
    order: Option<usize>,
    /// Defaults to the last token.
    #[arg(long)]
    stop_token: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTeacherConfig {
    kind: TeacherChoice,
    #[serde(rename = "N")]
    alphabet_size: usize,
    d: usize,
    order: usize,
    stop_token: Option<usize>,
    temperature: f64,
}

impl Default for GenTeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherChoice::Transformer,
            alphabet_size: 5,
            d: 4,
            order: 1,
            stop_token: None,
            temperature: 0.5,
        }
    }
}

pub fn gen_teacher(run: &Run, file: &Map<String, Value>, args: &GenTeacherArgs) -> CliResult<Outcome> {
    let cfg: GenTeacherConfig = merge(file, args)?;
    let n = cfg.alphabet_size;
    if n < 2 {
        return Err(Failure::config("N must be at least 2"));
    }
    let stop = cfg.stop_token.unwrap_or(n - 1);
    let alphabet = TokenAlphabet::new(n, stop)?;
    let teacher = match cfg.kind {
        TeacherChoice::Transformer => {
            let init = InitConfig {
                temperature: cfg.temperature,
                stop_token: stop,
                ..InitConfig::new(n, cfg.d)
            };
            TeacherProcess::transformer(TransformerParams::random(&init, run.seed)?, PromptPrior::Uniform)?
        }
        TeacherChoice::Markov => TeacherProcess::markov(
            alphabet,
            MarkovKernel::random(n, cfg.order, run.seed)?,
            PromptPrior::Uniform,
        )?,
        TeacherChoice::Uniform => TeacherProcess::uniform(alphabet),
    };
    let mut out = Outcome::new(
        &cfg,
        json!({"kind": cfg.kind, "N": n, "stop_token": stop, "teacher": "teacher.json"}),
    )?;
    out.file("teacher.json", teacher.to_json()?);
    if let tokscope::language::TeacherKind::Transformer(p) = teacher.kind() {
        out.file("model.json", p.to_json()?);
    }
    Ok(out)
}

// train

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossChoice {
    /// Cross-entropy against the teacher.
    Ce,
    /// DI/T + lambda * cross-entropy.
    CeDi,
    /// DI/T - lambda * expected reward.
    DiReward,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Initial student; a random one is drawn when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dimension of a random initial student.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss: Option<LossChoice>,
    #[arg(long)]
    lambda: Option<f64>,
    /// `no-token:K`, `constant:C` or `teacher-ll`.
    #[arg(long)]
    reward: Option<String>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCliConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    d: usize,
    steps: usize,
    lr: f64,
    loss: LossChoice,
    lambda: f64,
    reward: String,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
    batch_size: Option<usize>,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            d: 4,
            steps: 1000,
            lr: 0.5,
            loss: LossChoice::Ce,
            lambda: 1.0,
            reward: "teacher-ll".into(),
            prompt_len: 2,
            horizon: 5,
            batch_size: None,
        }
    }
}

pub fn train_cmd(run: &Run, file: &Map<String, Value>, args: &TrainArgs) -> CliResult<Outcome> {
    let cfg: TrainCliConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let student = match &cfg.model {
        Some(p) => load_model(p)?,
        None => {
            let a = teacher.alphabet();
            let init = InitConfig {
                stop_token: a.stop_token(),
                ..InitConfig::new(a.size(), cfg.d)
            };
            TransformerParams::random(&init, run.seed)?
        }
    };
    let variant = match cfg.loss {
        LossChoice::Ce => LossVariant::CrossEntropy,
        LossChoice::CeDi => LossVariant::CePlusDi { lambda: cfg.lambda },
        LossChoice::DiReward => LossVariant::DiMinusReward {
            lambda: cfg.lambda,
            reward: parse_reward(&cfg.reward, &teacher)?,
        },
    };
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        seed: run.seed,
        ..TrainConfig::new(cfg.steps, cfg.lr, cfg.prompt_len, cfg.horizon)
    };
    let outcome = train(student, &teacher, &variant, &tc)?;
    let (n, t) = (cfg.prompt_len, cfg.horizon);
    let di_teacher = directed_information(&SequenceEnsemble::build(&teacher, teacher.prompt_prior(), n, t)?);
    let di_student = directed_information(&SequenceEnsemble::build(&outcome.params, teacher.prompt_prior(), n, t)?);
    let kl = mean_kl(&teacher, &outcome.params, n, t)?;
    let summary = json!({
        "final_loss": outcome.loss_trace.last(),
        "mean_kl": kl,
        "di_teacher": di_teacher,
        "di_student": di_student,
        "di_gap": (di_student - di_teacher).abs(),
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = outcome
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"step": i, "loss": l}))
        .collect();
    out.plots.push(Plot::new("loss", "step", &["loss"]));
    out.file(
        "loss.csv",
        csv(
            &["step", "loss"],
            outcome
                .loss_trace
                .iter()
                .enumerate()
                .map(|(i, l)| vec![i.to_string(), f(*l)]),
        ),
    );
    out.file("model.json", outcome.params.to_json()?);
    Ok(out)
}

// flow

#[derive(Debug, Args, Serialize)]
pub struct FlowArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Measure this model under the teacher's prompt prior instead.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    /// Prompt of the traced path; sampled when absent.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    continuation: Option<String>,
    /// Paths for the sub-martingale check.
    #[arg(long)]
    paths: Option<usize>,
    /// Paths for the Freedman grid; 0 skips it.
    #[arg(long)]
    freedman_paths: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
    prompt: Option<String>,
    continuation: Option<String>,
    paths: usize,
    freedman_paths: usize,
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            prompt_len: 2,
            horizon: 5,
            prompt: None,
            continuation: None,
            paths: 1000,
            freedman_paths: 10_000,
            alphas: vec![0.5, 1.0, 2.0],
            betas: vec![0.5, 1.0, 2.0],
        }
    }
}

pub fn flow(run: &Run, file: &Map<String, Value>, args: &FlowArgs) -> CliResult<Outcome> {
    let cfg: FlowConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let ens = match &cfg.model {
        Some(p) => SequenceEnsemble::build(&load_model(p)?, teacher.prompt_prior(), cfg.prompt_len, cfg.horizon)?,
        None => SequenceEnsemble::build(&teacher, teacher.prompt_prior(), cfg.prompt_len, cfg.horizon)?,
    };
    let (prompt, cont) = match (&cfg.prompt, &cfg.continuation) {
        (Some(p), Some(c)) => (parse_tokens(p)?, parse_tokens(c)?),
        (None, None) => ens.sample_paths(1, run.seed)?.remove(0),
        _ => return Err(Failure::config("give both --prompt and --continuation or neither")),
    };
    let trace = semantic_flow(&ens, &prompt, &cont)?;
    let sub = submartingale_check(&ens, cfg.paths, run.seed)?;
    let cells = if cfg.freedman_paths > 0 {
        freedman_check(&ens, &cfg.alphas, &cfg.betas, cfg.freedman_paths, run.seed)?
    } else {
        Vec::new()
    };
    let summary = json!({
        "prompt": prompt,
        "continuation": cont,
        "final_flow": trace.final_flow(),
        "directed_information": directed_information(&ens),
        "submartingale": sub,
        "freedman": cells,
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = (0..trace.len())
        .map(|k| {
            json!({
                "step": trace.steps[k],
                "density": trace.density[k],
                "cumulative": trace.cumulative[k],
                "M": trace.martingale[k],
                "A": trace.compensator[k],
                "V": trace.variance[k],
            })
        })
        .collect();
    out.plots.push(Plot::new("flow", "step", &["cumulative", "A"]));
    out.check(
        "submartingale",
        sub.violations == 0,
        format!(
            "{} of {} steps with negative expected increment",
            sub.violations, sub.checks
        ),
    );
    out.check(
        "increment_equals_kl",
        sub.max_kl_mismatch <= 1e-10,
        format!("max |E[increment] - KL| = {:e}", sub.max_kl_mismatch),
    );
    if !cells.is_empty() {
        let worst = cells
            .iter()
            .map(|c| c.empirical - c.bound)
            .fold(f64::NEG_INFINITY, f64::max);
        out.check(
            "freedman",
            cells.iter().all(|c| c.empirical <= c.bound),
            format!("largest empirical - bound = {worst}"),
        );
        out.file(
            "freedman.csv",
            csv(
                &["alpha", "beta", "empirical", "bound"],
                cells
                    .iter()
                    .map(|c| vec![f(c.alpha), f(c.beta), f(c.empirical), f(c.bound)]),
            ),
        );
    }
    out.file("flow.csv", trace.to_csv());
    Ok(out)
}

// di

#[derive(Debug, Args, Serialize)]
pub struct DiArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Measure this model under the teacher's prompt prior instead.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    /// Also run the Donsker-Varadhan estimator.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    dv: Option<bool>,
    #[arg(long)]
    dv_samples: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
    dv: bool,
    dv_samples: usize,
}

impl Default for DiConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            prompt_len: 2,
            horizon: 5,
            dv: false,
            dv_samples: DvConfig::default().samples,
        }
    }
}

pub fn di(run: &Run, file: &Map<String, Value>, args: &DiArgs) -> CliResult<Outcome> {
    let cfg: DiConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let ens = match &cfg.model {
        Some(p) => SequenceEnsemble::build(&load_model(p)?, teacher.prompt_prior(), cfg.prompt_len, cfg.horizon)?,
        None => SequenceEnsemble::build(&teacher, teacher.prompt_prior(), cfg.prompt_len, cfg.horizon)?,
    };
    let value = directed_information(&ens);
    let mi = mutual_information(&ens);
    let terms = directed_information_terms(&ens);
    let mut summary = json!({
        "directed_information": value,
        "mutual_information": mi,
        "terms": terms,
    });
    if cfg.dv {
        let dv = dv_estimate(
            &ens,
            &DvConfig {
                samples: cfg.dv_samples,
                seed: run.seed,
                ..DvConfig::default()
            },
        )?;
        summary["dv_estimate"] = serde_json::to_value(&dv).expect("plain data serializes");
    }
    let mut out = Outcome::new(&cfg, summary)?;
    let first = cfg.prompt_len + 1;
    let mut acc = 0.0;
    let rows: Vec<(usize, f64, f64)> = terms
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            acc += v;
            (first + k, v, acc)
        })
        .collect();
    out.points = rows
        .iter()
        .map(|(s, v, c)| json!({"step": s, "term": v, "cumulative": c}))
        .collect();
    out.plots
        .push(Plot::new("directed_information", "step", &["cumulative"]));
    out.file(
        "di.csv",
        csv(
            &["step", "term", "cumulative"],
            rows.iter().map(|(s, v, c)| vec![s.to_string(), f(*v), f(*c)]),
        ),
    );
    out.check(
        "di_equals_mi",
        (value - mi).abs() <= 1e-10,
        format!("|DI - MI| = {:e}", (value - mi).abs()),
    );
    Ok(out)
}

// rd-sweep and rr-sweep

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Comma-separated; `inf` is pure cross-entropy.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<Lambda>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    /// Student embedding dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reward of `rr-sweep`: `no-token:K`, `constant:C` or `teacher-ll`.
    #[arg(long)]
    reward: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepCliConfig {
    teacher: Option<PathBuf>,
    lambdas: Vec<Lambda>,
    steps: usize,
    lr: f64,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
    d: usize,
    batch_size: Option<usize>,
    reward: String,
}

impl Default for SweepCliConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            lambdas: [0.1, 0.5, 1.0, 2.0, 5.0, f64::INFINITY].map(Lambda).to_vec(),
            steps: 500,
            lr: 0.5,
            prompt_len: 2,
            horizon: 5,
            d: 4,
            batch_size: None,
            reward: "no-token:0".into(),
        }
    }
}

impl SweepCliConfig {
    fn library(&self, seed: u64) -> SweepConfig {
        SweepConfig {
            lambdas: self.lambdas.iter().map(|l| l.0).collect(),
            steps: self.steps,
            lr: self.lr,
            prompt_len: self.prompt_len,
            horizon: self.horizon,
            student_dim: self.d,
            seed,
            batch_size: self.batch_size,
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn sweep_rows(points: &[SweepPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                Lambda(p.lambda).to_string(),
                f(p.distortion),
                f(p.rate),
                opt(p.expected_reward),
                f(p.final_loss),
                p.diverged.to_string(),
                p.pareto.to_string(),
            ]
        })
        .collect()
}

const SWEEP_HEADER: [&str; 7] = [
    "lambda",
    "distortion",
    "rate",
    "expected_reward",
    "final_loss",
    "diverged",
    "pareto",
];

pub fn rd_sweep_cmd(run: &Run, file: &Map<String, Value>, args: &SweepArgs) -> CliResult<Outcome> {
    let cfg: SweepCliConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let curve = rd_sweep(&teacher, &cfg.library(run.seed))?;
    let front = curve.pareto_front();
    let monotone = front.windows(2).all(|w| w[1].rate <= w[0].rate);
    let summary = json!({
        "teacher_rate": curve.teacher_rate,
        "pareto_size": front.len(),
        "diverged": curve.points.iter().filter(|p| p.diverged).count(),
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = to_points(&curve.points);
    out.plots.push(Plot::new("rate_distortion", "distortion", &["rate"]));
    out.check(
        "pareto_monotone",
        monotone,
        "rate non-increasing along the Pareto front",
    );
    out.file("rd.csv", csv(&SWEEP_HEADER, sweep_rows(&curve.points)));
    Ok(out)
}

pub fn rr_sweep_cmd(run: &Run, file: &Map<String, Value>, args: &SweepArgs) -> CliResult<Outcome> {
    let cfg: SweepCliConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let reward = parse_reward(&cfg.reward, &teacher)?;
    let curve = rr_sweep(&teacher, reward, &cfg.library(run.seed))?;
    let summary = json!({
        "reward_monotone": curve.reward_monotone,
        "diverged": curve.points.iter().filter(|p| p.diverged).count(),
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = to_points(&curve.points);
    out.plots.push(Plot::new("rate_reward", "expected_reward", &["rate"]));
    out.file("rr.csv", csv(&SWEEP_HEADER, sweep_rows(&curve.points)));
    Ok(out)
}

impl std::fmt::Display for Lambda {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            write!(fm, "inf")
        } else {
            write!(fm, "{}", self.0)
        }
    }
}

// capacity

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    Grid,
    Alternating,
    /// Run both and compare.
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct CapacityArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Use this model's conditionals instead of the teacher's.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prompt family, e.g. `0;1,2;3`. Defaults to the single-token prompts.
    #[arg(long)]
    prompts: Option<String>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    method: Option<MethodChoice>,
    #[arg(long)]
    reward: Option<String>,
    /// Reward threshold `W` for the constraint `E[w] >= W`.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    prompts: Option<String>,
    #[serde(rename = "T")]
    horizon: usize,
    method: MethodChoice,
    reward: Option<String>,
    threshold: Option<f64>,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            prompts: None,
            horizon: 3,
            method: MethodChoice::Both,
            reward: None,
            threshold: None,
        }
    }
}

pub fn capacity(_run: &Run, file: &Map<String, Value>, args: &CapacityArgs) -> CliResult<Outcome> {
    let cfg: CapacityConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let prompts: Vec<Vec<usize>> = match &cfg.prompts {
        Some(s) => s.split(';').map(parse_tokens).collect::<CliResult<_>>()?,
        None => (0..teacher.alphabet().size().min(tokscope::analysis::GRID_MAX_PROMPTS))
            .map(|k| vec![k])
            .collect(),
    };
    let reward = match (&cfg.reward, cfg.threshold) {
        (Some(r), Some(w)) => Some((parse_reward(r, &teacher)?, w)),
        (None, None) => None,
        _ => return Err(Failure::config("--reward and --threshold go together")),
    };
    let model = cfg.model.as_deref().map(load_model).transpose()?;
    let methods: &[CapacityMethod] = match cfg.method {
        MethodChoice::Grid => &[CapacityMethod::Grid],
        MethodChoice::Alternating => &[CapacityMethod::Alternating],
        MethodChoice::Both => &[CapacityMethod::Grid, CapacityMethod::Alternating],
    };
    let mut results = Vec::new();
    for &m in methods {
        let constraint = reward.as_ref().map(|(r, w)| (r.as_ref(), *w));
        let r = match &model {
            Some(p) => semantic_capacity(p, &prompts, cfg.horizon, constraint, m),
            None => semantic_capacity(&teacher, &prompts, cfg.horizon, constraint, m),
        };
        match r {
            Ok(r) => results.push(r),
            Err(tokscope::Error::Infeasible(msg)) => {
                let mut out = Outcome::new(&cfg, json!({"infeasible": true, "message": msg}))?;
                out.check("feasible", true, "infeasibility reported as a result");
                return Ok(out);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut out = Outcome::new(
        &cfg,
        json!({"infeasible": false, "prompts": prompts, "results": results}),
    )?;
    out.points = to_points(&results);
    if let [a, b] = results.as_slice() {
        let gap = (a.capacity - b.capacity).abs();
        out.check("methods_agree", gap <= 1e-3, format!("|grid - alternating| = {gap:e}"));
    }
    Ok(out)
}

// elbo

#[derive(Debug, Args, Serialize)]
pub struct ElboArgs {
    /// Model to inspect; a random one is drawn when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Adds a batch summary over the teacher's reachable contexts.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    prefix: Option<String>,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    alphabet_size: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    model: Option<PathBuf>,
    teacher: Option<PathBuf>,
    prefix: String,
    #[serde(rename = "N")]
    alphabet_size: usize,
    d: usize,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            model: None,
            teacher: None,
            prefix: "0,1,2".into(),
            alphabet_size: 5,
            d: 4,
            prompt_len: 2,
            horizon: 5,
        }
    }
}

pub fn elbo(run: &Run, file: &Map<String, Value>, args: &ElboArgs) -> CliResult<Outcome> {
    let cfg: ElboConfig = merge(file, args)?;
    let params = match &cfg.model {
        Some(p) => load_model(p)?,
        None => TransformerParams::random(&InitConfig::new(cfg.alphabet_size, cfg.d), run.seed)?,
    };
    let table = elbo_inference(&params, &parse_tokens(&cfg.prefix)?)?;
    let batch = match &cfg.teacher {
        Some(p) => {
            let teacher = load_teacher(p)?;
            let examples: Vec<_> = teacher_examples(&teacher, cfg.prompt_len, cfg.horizon)?
                .into_iter()
                .filter(|e| !e.prefix.is_empty())
                .collect();
            Some(elbo_training(&params, &examples)?)
        }
        None => None,
    };
    let worst = table
        .rows
        .iter()
        .map(|r| r.elbo - r.log_prob)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Outcome::new(&cfg, json!({"argmax_agrees": table.argmax_agrees, "batch": batch}))?;
    out.points = to_points(&table.rows);
    out.plots.push(Plot::new("elbo", "token", &["elbo", "log_prob"]));
    out.check(
        "elbo_below_log_likelihood",
        worst <= 1e-12,
        format!("max ELBO - log p = {worst:e}"),
    );
    if let Some(b) = &batch {
        out.check(
            "batch_gap_nonnegative",
            b.min_gap >= -1e-12,
            format!("min gap = {:e}", b.min_gap),
        );
    }
    out.file(
        "elbo.csv",
        csv(
            &["token", "elbo", "log_prob"],
            table
                .rows
                .iter()
                .map(|r| vec![r.token.to_string(), f(r.elbo), f(r.log_prob)]),
        ),
    );
    Ok(out)
}

// bound

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Defaults to the teacher's own parameters.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    /// Sample size `M`.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    resamples: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    #[serde(rename = "n")]
    prompt_len: usize,
    samples: usize,
    delta: f64,
    resamples: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            prompt_len: 2,
            samples: 50,
            delta: 0.1,
            resamples: 100,
        }
    }
}

pub fn bound(run: &Run, file: &Map<String, Value>, args: &BoundArgs) -> CliResult<Outcome> {
    let cfg: BoundConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let params = model_or_teacher(&cfg.model, &teacher)?;
    let reports = (0..cfg.resamples as u64)
        .map(|r| generalization_bound(&params, &teacher, cfg.prompt_len, cfg.samples, cfg.delta, run.seed + r))
        .collect::<tokscope::Result<Vec<_>>>()?;
    let held = reports.iter().filter(|r| r.margin >= 0.0).count();
    let mut out = Outcome::new(&cfg, json!({"held": held, "resamples": reports.len()}))?;
    out.points = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut v = serde_json::to_value(r).expect("plain data serializes");
            v["resample"] = json!(i);
            v
        })
        .collect();
    out.plots
        .push(Plot::new("bound", "resample", &["bound", "true_cross_entropy"]));
    out.check(
        "bound_holds",
        held == reports.len(),
        format!("{held} of {} resamples", reports.len()),
    );
    out.file(
        "bound.csv",
        csv(
            &["resample", "empirical_loss", "bound", "true_cross_entropy", "margin"],
            reports.iter().enumerate().map(|(i, r)| {
                vec![
                    i.to_string(),
                    f(r.empirical_loss),
                    f(r.bound),
                    f(r.true_cross_entropy),
                    f(r.margin),
                ]
            }),
        ),
    );
    Ok(out)
}

// fisher

#[derive(Debug, Args, Serialize)]
pub struct FisherArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Defaults to the teacher's own parameters.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "n")]
    #[serde(rename = "n")]
    prompt_len: Option<usize>,
    #[arg(long = "T")]
    #[serde(rename = "T")]
    horizon: Option<usize>,
    /// Entries such as `B:0:0,A:1:2,E:3:0`; defaults to the first ten of `B`.
    #[arg(long)]
    subset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    teacher: Option<PathBuf>,
    model: Option<PathBuf>,
    #[serde(rename = "n")]
    prompt_len: usize,
    #[serde(rename = "T")]
    horizon: usize,
    subset: Option<String>,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            model: None,
            prompt_len: 2,
            horizon: 3,
            subset: None,
        }
    }
}

fn parse_param(s: &str) -> CliResult<ParamRef> {
    let bad = || Failure::config(format!("bad parameter {s:?}; expected E:i:j, A:i:j or B:i:j"));
    let parts: Vec<&str> = s.trim().split(':').collect();
    let [m, i, j] = parts.as_slice() else {
        return Err(bad());
    };
    let (i, j) = (i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?);
    match *m {
        "E" => Ok(ParamRef::Embedding(i, j)),
        "A" => Ok(ParamRef::Value(i, j)),
        "B" => Ok(ParamRef::Bilinear(i, j)),
        _ => Err(bad()),
    }
}

pub fn fisher(_run: &Run, file: &Map<String, Value>, args: &FisherArgs) -> CliResult<Outcome> {
    let cfg: FisherConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let params = model_or_teacher(&cfg.model, &teacher)?;
    let d = params.dim();
    let subset: Vec<ParamRef> = match &cfg.subset {
        Some(s) => s.split(',').map(parse_param).collect::<CliResult<_>>()?,
        None => (0..(d * d).min(10)).map(|k| ParamRef::Bilinear(k / d, k % d)).collect(),
    };
    let contexts: Vec<(Vec<usize>, f64)> = teacher_examples(&teacher, cfg.prompt_len, cfg.horizon)?
        .into_iter()
        .filter(|e| !e.prefix.is_empty() && matches!(e.target, Target::Distribution(_)))
        .map(|e| (e.prefix, e.weight))
        .collect();
    let rep = transformer_fisher(&params, &contexts, &subset)?;
    let summary = json!({
        "subset": subset,
        "asymmetry": rep.asymmetry,
        "min_eigenvalue": rep.min_eigenvalue,
        "matrix": rep.matrix,
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.check(
        "symmetric",
        rep.asymmetry <= 1e-8,
        format!("max |F_ij - F_ji| = {:e}", rep.asymmetry),
    );
    let header: Vec<String> = (0..subset.len()).map(|k| format!("c{k}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.file(
        "fisher.csv",
        csv(&header, rep.matrix.iter().map(|r| r.iter().map(|x| f(*x)).collect())),
    );
    Ok(out)
}

// jl

#[derive(Debug, Args, Serialize)]
pub struct JlArgs {
    /// Ambient dimension.
    #[arg(long = "N")]
    #[serde(rename = "N")]
    ambient: Option<usize>,
    /// Number of points.
    #[arg(long = "M")]
    #[serde(rename = "M")]
    points: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// JL constant.
    #[arg(long = "C")]
    #[serde(rename = "C")]
    constant: Option<f64>,
    /// Target dimension; the JL bound when absent.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlConfig {
    #[serde(rename = "N")]
    ambient: usize,
    #[serde(rename = "M")]
    points: usize,
    eps: f64,
    #[serde(rename = "C")]
    constant: f64,
    m: Option<usize>,
    kinds: Vec<String>,
    trials: usize,
}

impl Default for JlConfig {
    fn default() -> Self {
        Self {
            ambient: 1024,
            points: 100,
            eps: 0.5,
            constant: tokscope::projection::DEFAULT_JL_CONSTANT,
            m: None,
            kinds: vec!["gaussian".into(), "partial_dct".into(), "partial_hadamard".into()],
            trials: 100,
        }
    }
}

pub fn jl(run: &Run, file: &Map<String, Value>, args: &JlArgs) -> CliResult<Outcome> {
    let cfg: JlConfig = merge(file, args)?;
    let m = match cfg.m {
        Some(m) => m,
        None => jl_dimension(cfg.points as f64, cfg.eps, cfg.constant, JlBound::Standard)?,
    };
    let space = SemanticVectorSpace::random(cfg.points, cfg.ambient, run.seed.wrapping_add(SPACE_SEED_OFFSET))?;
    let mut trials = Vec::new();
    let mut success = Map::new();
    for k in &cfg.kinds {
        let kind: ProjectionKind = k.parse()?;
        let rows = jl_trials(&space, kind, m, cfg.eps, run.seed..run.seed + cfg.trials as u64)?;
        let ok = rows.iter().filter(|t| t.max_deviation <= cfg.eps).count();
        success.insert(kind.name().into(), json!(ok));
        trials.extend(rows);
    }
    let worst = trials
        .iter()
        .map(|t| t.distortion - t.max_deviation * t.max_deviation)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Outcome::new(&cfg, json!({"m": m, "trials": cfg.trials, "within_eps": success}))?;
    out.points = to_points(&trials);
    out.check(
        "distortion_below_squared_deviation",
        worst <= 1e-12,
        format!("max distortion - max_deviation^2 = {worst:e}"),
    );
    out.file(
        "jl.csv",
        csv(
            &["seed", "kind", "N", "m", "eps", "max_deviation", "distortion"],
            trials.iter().map(|t| {
                vec![
                    t.seed.to_string(),
                    t.kind.name().into(),
                    t.ambient.to_string(),
                    t.m.to_string(),
                    f(t.eps),
                    f(t.max_deviation),
                    f(t.distortion),
                ]
            }),
        ),
    );
    Ok(out)
}

// gw

#[derive(Debug, Args, Serialize)]
pub struct GwArgs {
    /// Space file; random when absent.
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    /// Points per random space.
    #[arg(long = "M")]
    #[serde(rename = "M")]
    points: Option<usize>,
    /// Dimension of random spaces.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    eps_end: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GwConfig {
    a: Option<PathBuf>,
    b: Option<PathBuf>,
    #[serde(rename = "M")]
    points: usize,
    d: usize,
    restarts: usize,
    eps_end: f64,
}

impl Default for GwConfig {
    fn default() -> Self {
        let e = EntropicGwConfig::default();
        Self {
            a: None,
            b: None,
            points: 4,
            d: 3,
            restarts: e.restarts,
            eps_end: e.eps_end,
        }
    }
}

fn load_space(path: &std::path::Path) -> CliResult<SemanticVectorSpace> {
    if !path.exists() {
        return Err(Failure::at(path, "file not found"));
    }
    SemanticVectorSpace::load(path)
        .map(|(s, _)| s)
        .map_err(|e| Failure::at(path, e))
}

pub fn gw(run: &Run, file: &Map<String, Value>, args: &GwArgs) -> CliResult<Outcome> {
    let cfg: GwConfig = merge(file, args)?;
    let a = match &cfg.a {
        Some(p) => load_space(p)?,
        None => SemanticVectorSpace::random(cfg.points, cfg.d, run.seed)?,
    };
    let b = match &cfg.b {
        Some(p) => load_space(p)?,
        None => SemanticVectorSpace::random(cfg.points, cfg.d, run.seed.wrapping_add(1))?,
    };
    let ecfg = EntropicGwConfig {
        restarts: cfg.restarts,
        eps_end: cfg.eps_end,
        seed: run.seed,
        ..EntropicGwConfig::default()
    };
    let ent = gw_distance_entropic(&a, &b, &ecfg)?;
    let oracle = match gw_distance_oracle(&a, &b) {
        Ok(o) => Some(o),
        Err(tokscope::Error::OracleScope(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let self_a = gw_cost(&a, &a, &Coupling::identity(a.weights()))?;
    let summary = json!({
        "entropic_cost": ent.cost,
        "converged": ent.converged,
        "oracle_cost": oracle.as_ref().map(|o| o.cost),
        "oracle_permutation": oracle.as_ref().map(|o| o.permutation.clone()),
        "self_distance_a": self_a,
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = ent
        .trace
        .iter()
        .enumerate()
        .map(|(i, c)| json!({"iteration": i, "cost": c}))
        .collect();
    out.plots.push(Plot::new("gw_trace", "iteration", &["cost"]));
    out.check(
        "trace_monotone",
        ent.trace.windows(2).all(|w| w[1] <= w[0]),
        "accepted cost never increases",
    );
    out.check("self_distance_zero", self_a <= 1e-9, format!("d(a, a) = {self_a:e}"));
    if let Some(o) = &oracle {
        out.check(
            "entropic_within_oracle",
            ent.cost <= o.cost + 1e-3,
            format!("entropic {} vs oracle {}", ent.cost, o.cost),
        );
    }
    let plan = ent.coupling.plan();
    out.file(
        "plan.csv",
        csv(
            &(0..plan.ncols())
                .map(|j| format!("t{j}"))
                .collect::<Vec<_>>()
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>(),
            plan.row_iter().map(|r| r.iter().map(|x| f(*x)).collect()),
        ),
    );
    out.file(
        "trace.csv",
        csv(
            &["iteration", "cost"],
            ent.trace.iter().enumerate().map(|(i, c)| vec![i.to_string(), f(*c)]),
        ),
    );
    Ok(out)
}

// embed-opt

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Length of the token sequences.
    #[arg(long = "n")]
    #[serde(rename = "n")]
    len: Option<usize>,
    /// Code alphabet size.
    #[arg(long)]
    codes: Option<usize>,
    /// Encoder state count.
    #[arg(long)]
    states: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    teacher: Option<PathBuf>,
    #[serde(rename = "n")]
    len: usize,
    codes: usize,
    states: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            teacher: None,
            len: 3,
            codes: 2,
            states: 2,
        }
    }
}

pub fn embed_opt(_run: &Run, file: &Map<String, Value>, args: &EmbedArgs) -> CliResult<Outcome> {
    let cfg: EmbedConfig = merge(file, args)?;
    let teacher = load_teacher(require(&cfg.teacher, "teacher")?)?;
    let src = SequenceSource::from_teacher(&teacher, cfg.len)?;
    let family = EncoderFamily::exhaustive(teacher.alphabet().size(), cfg.codes, cfg.states)?;
    let res = embedding_objective(&family, &src)?;
    let summary = json!({
        "family_size": family.len(),
        "best_index": res.best_index,
        "best": res.best,
        "objective": res.objective,
        "cpc_upper_bound": res.cpc_upper_bound,
    });
    let mut out = Outcome::new(&cfg, summary)?;
    out.points = res
        .objectives
        .iter()
        .zip(&res.cpc_values)
        .enumerate()
        .map(|(i, (o, c))| json!({"index": i, "objective": o, "cpc": c}))
        .collect();
    out.check(
        "cpc_upper_bound",
        res.bound_holds,
        format!("every objective <= {} + 1e-10", res.cpc_upper_bound),
    );
    out.file(
        "embed.csv",
        csv(
            &["index", "objective", "cpc"],
            res.objectives
                .iter()
                .zip(&res.cpc_values)
                .enumerate()
                .map(|(i, (o, c))| vec![i.to_string(), f(*o), f(*c)]),
        ),
    );
    Ok(out)
}
