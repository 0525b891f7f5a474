//! Joint objective, comparison objectives and the training loop.

mod loss;
mod targets;

use std::path::Path;

use langaux_numcore::{adam_step, AdamConfig, AdamState, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{joint_loss, LossBreakdown, Normalization, Term};
pub use targets::{aux_items, forward_targets, instruction_caps, plan_complete, plan_tokens, Aux, ACTION_TOKEN_BASE};

use crate::dataset::{make_batches, Example, IGNORE};
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{argmax_rows, DecodeItem, EncoderInput, Forward, Group, ModelConfig, ModelParams};
use crate::seed::child_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    Lang,
    Bc,
    Forward,
    GoalPred,
    Hierarchy,
    ProbeGoalOnly,
    ProbeGoalObs,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Self::Lang,
        Self::Bc,
        Self::Forward,
        Self::GoalPred,
        Self::Hierarchy,
        Self::ProbeGoalOnly,
        Self::ProbeGoalObs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lang => "lang",
            Self::Bc => "bc",
            Self::Forward => "forward",
            Self::GoalPred => "goal_pred",
            Self::Hierarchy => "hierarchy",
            Self::ProbeGoalOnly => "probe_goal_only",
            Self::ProbeGoalObs => "probe_goal_obs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// Auxiliary decoder target of the joint objectives.
    fn joint_aux(self) -> Option<Aux> {
        match self {
            Self::Lang => Some(Aux::Lang),
            Self::Forward => Some(Aux::Forward),
            Self::GoalPred => Some(Aux::Goal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub normalization: Normalization,
    /// Interval between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("crafting-like").expect("built-in preset")
    }
}

/// Keys accepted by [`TrainConfig::set`], in `to_kv` order.
pub const TRAIN_KEYS: [&str; 13] = [
    "objective",
    "lambda",
    "steps",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
    "grad_clip",
    "seed",
    "normalization",
    "checkpoint_every",
];

pub const PRESETS: [&str; 2] = ["babyai-like", "crafting-like"];

impl TrainConfig {
    /// Named presets. Both use Adam at 1e-4 with epsilon 1e-8 and 20000 steps.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            objective: Objective::Lang,
            lambda: 0.0,
            steps: 20_000,
            batch_size: 32,
            adam: AdamConfig {
                learning_rate: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                weight_decay: 0.0,
                grad_clip_norm: None,
            },
            seed: 0,
            normalization: Normalization::Mean,
            checkpoint_every: 0,
        };
        match name {
            "babyai-like" => Ok(Self { lambda: 0.7, ..base }),
            "crafting-like" => Ok(Self {
                lambda: 0.25,
                batch_size: 64,
                adam: AdamConfig {
                    weight_decay: 0.05,
                    grad_clip_norm: Some(1.0),
                    ..base.adam
                },
                ..base
            }),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}`; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Dropout paired with each preset.
    pub fn preset_dropout(name: &str) -> Result<f64> {
        match name {
            "babyai-like" => Ok(0.0),
            "crafting-like" => Ok(0.1),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// λ as applied: behavior cloning ignores the configured value.
    pub fn effective_lambda(&self) -> f64 {
        match self.objective {
            Objective::Bc => 0.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be a nonnegative number, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config(
                "learning_rate must be positive and betas must lie in [0, 1)".into(),
            ));
        }
        if !(a.epsilon > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(Error::Config(
                "epsilon must be positive and weight_decay nonnegative".into(),
            ));
        }
        if matches!(a.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive or `none`".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "objective = {}\nlambda = {}\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\n\
             epsilon = {}\nweight_decay = {}\ngrad_clip = {}\nseed = {}\nnormalization = {}\ncheckpoint_every = {}\n",
            self.objective.name(),
            self.lambda,
            self.steps,
            self.batch_size,
            self.adam.learning_rate,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.epsilon,
            self.adam.weight_decay,
            self.adam.grad_clip_norm.map_or("none".to_string(), |c| c.to_string()),
            self.seed,
            self.normalization.name(),
            self.checkpoint_every,
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use kv::parse_value as pv;
        match key {
            "objective" => {
                self.objective = Objective::parse(value).ok_or_else(|| {
                    let names: Vec<&str> = Objective::ALL.iter().map(|o| o.name()).collect();
                    Error::Config(format!(
                        "`objective`: expected one of {}, got `{value}`",
                        names.join(", ")
                    ))
                })?
            }
            "lambda" => self.lambda = pv(key, value)?,
            "steps" => self.steps = pv(key, value)?,
            "batch_size" => self.batch_size = pv(key, value)?,
            "learning_rate" => self.adam.learning_rate = pv(key, value)?,
            "beta1" => self.adam.beta1 = pv(key, value)?,
            "beta2" => self.adam.beta2 = pv(key, value)?,
            "epsilon" => self.adam.epsilon = pv(key, value)?,
            "weight_decay" => self.adam.weight_decay = pv(key, value)?,
            "grad_clip" => {
                self.adam.grad_clip_norm = match value {
                    "none" | "0" => None,
                    v => Some(pv(key, v)?),
                }
            }
            "seed" => self.seed = pv(key, value)?,
            "normalization" => {
                self.normalization = Normalization::parse(value)
                    .ok_or_else(|| Error::Config(format!("`normalization`: expected mean or sum, got `{value}`")))?
            }
            "checkpoint_every" => self.checkpoint_every = pv(key, value)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }
}

/// What one training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Role {
    /// Whether the behavior-cloning term is present.
    pub actions: bool,
    pub aux: Option<Aux>,
    /// Feed each example's joined instructions to the encoder.
    pub plan_prefix: bool,
    pub train_encoder: bool,
}

impl Role {
    pub fn joint(objective: Objective, lambda: f64) -> Self {
        Self {
            actions: true,
            aux: if lambda > 0.0 { objective.joint_aux() } else { None },
            plan_prefix: false,
            train_encoder: true,
        }
    }

    fn aux_only(aux: Aux, train_encoder: bool) -> Self {
        Self {
            actions: false,
            aux: Some(aux),
            plan_prefix: false,
            train_encoder,
        }
    }

    fn trainable(&self, g: Group, decoder_used: bool) -> bool {
        match g {
            Group::Encoder => self.train_encoder,
            Group::Policy => self.actions,
            Group::Decoder => decoder_used,
        }
    }

    fn uses_decoder(&self, rows: &[&Example]) -> bool {
        match self.aux {
            None => false,
            Some(Aux::Goal) => rows.iter().any(|e| !e.goal.is_empty()),
            Some(_) => rows.iter().any(|e| e.annotated()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub action_nll: f64,
    pub lang_nll: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<StepMetrics>,
}

/// Tape values of one batch's loss.
pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub decoder_logits: Option<(Var, Vec<usize>)>,
}

/// Builds the loss of one batch on `tape`.
pub fn batch_loss<F: Real>(
    fwd: &Forward<F>,
    tape: &mut Tape<F>,
    rows: &[&Example],
    role: Role,
    lambda: f64,
    norm: Normalization,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    let cfg = &fwd.params.config;
    let plans: Vec<Vec<usize>> = rows
        .iter()
        .map(|e| {
            if role.plan_prefix {
                plan_tokens(&e.segments)
            } else {
                Vec::new()
            }
        })
        .collect();
    let inputs: Vec<EncoderInput> = rows
        .iter()
        .zip(&plans)
        .map(|(e, p)| EncoderInput {
            goal: &e.goal,
            plan: p,
            obs: &e.obs,
            steps: e.steps,
        })
        .collect();
    let mut rng = rng;
    let enc = fwd.encode(tape, &inputs, rng.as_deref_mut())?;
    let action_targets: Vec<usize> = rows.iter().flat_map(|e| e.actions.iter().copied()).collect();
    let action_logits = if role.actions {
        Some(fwd.policy_logits(tape, &enc)?)
    } else {
        None
    };
    let mut decoder_logits = None;
    if let Some(aux) = role.aux {
        let mut items: Vec<DecodeItem> = Vec::new();
        let mut targets = Vec::new();
        for (e, r) in rows.iter().zip(&enc.examples) {
            if let Some((its, tg)) = aux_items(aux, e, r, cfg)? {
                items.extend(its);
                targets.extend(tg);
            }
        }
        if !items.is_empty() {
            let logits = fwd.decode(tape, enc.z, &items, rng.as_deref_mut())?;
            decoder_logits = Some((logits, targets));
        }
    }
    let weight = if role.actions { lambda } else { 1.0 };
    let (loss, breakdown) = joint_loss(
        tape,
        action_logits.map(|l| Term {
            logits: l,
            targets: &action_targets,
        }),
        decoder_logits.as_ref().map(|(l, t)| Term { logits: *l, targets: t }),
        weight,
        norm,
        rows.len(),
    )?;
    Ok(BatchLoss {
        loss,
        breakdown,
        decoder_logits,
    })
}

fn append_metrics(path: &Path, m: &StepMetrics) -> Result<()> {
    let fresh = !path.exists();
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    w.serialize(m)?;
    w.flush()?;
    Ok(())
}

/// Runs `cfg.steps` optimizer updates of `role` starting from `params`.
/// With `out` set, metrics are appended to `metrics.csv` and checkpoints
/// written as `step_<n>` and `final`; a non-finite loss writes `last_good`
/// before failing.
pub fn train_role(
    cfg: &TrainConfig,
    role: Role,
    examples: &[Example],
    mut params: ModelParams<f32>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let lambda = cfg.effective_lambda();
    let mut state = AdamState::new(cfg.adam.clone(), &params.tensors);
    let batch_seed = child_seed(cfg.seed, "batches", 0);
    let dropout_seed = child_seed(cfg.seed, "dropout", 0);
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut order = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if k == 0 {
            order = make_batches(examples.len(), cfg.batch_size, batch_seed, epoch as u64)?;
        }
        let rows: Vec<&Example> = order[k].iter().map(|&i| &examples[i]).collect();
        let decoder_used = role.uses_decoder(&rows);
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, &params, |g| role.trainable(g, decoder_used));
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        rng.set_stream(step as u64);
        let b = batch_loss(&fwd, &mut tape, &rows, role, lambda, cfg.normalization, Some(&mut rng))?;
        let total = tape.value(b.loss).item()?.as_f64();
        if !total.is_finite() {
            if let Some(dir) = out {
                params.save(dir, "last_good")?;
            }
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(b.loss)?;
        let vars = fwd.vars().to_vec();
        let grads: Vec<_> = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if role.trainable(params.group_of(i), decoder_used) {
                    grads.get(v).cloned()
                } else {
                    None
                }
            })
            .collect();
        drop(fwd);
        let stats = adam_step(&mut params.tensors, &params.names, &grads, &mut state)?;
        let m = StepMetrics {
            step: step + 1,
            total: b.breakdown.total,
            action_nll: b.breakdown.action_nll,
            lang_nll: b.breakdown.lang_nll,
            grad_norm: stats.grad_norm,
        };
        if let Some(dir) = out {
            append_metrics(&dir.join("metrics.csv"), &m)?;
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                params.save(dir, &format!("step_{}", step + 1))?;
            }
        }
        history.push(m);
    }
    if let Some(dir) = out {
        params.save(dir, "final")?;
    }
    Ok(TrainOutcome { params, history })
}

/// Trains one of the joint objectives (`lang`, `bc`, `forward`,
/// `goal_pred`) from `params`.
pub fn train(
    cfg: &TrainConfig,
    examples: &[Example],
    params: ModelParams<f32>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    match cfg.objective {
        Objective::Lang | Objective::Bc | Objective::Forward | Objective::GoalPred => train_role(
            cfg,
            Role::joint(cfg.objective, cfg.effective_lambda()),
            examples,
            params,
            out,
        ),
        o => Err(Error::Config(format!(
            "objective `{}` has its own entry point (hierarchy_train or probe_train)",
            o.name()
        ))),
    }
}

/// Initializes parameters from the run seed, then trains.
pub fn train_fresh(
    cfg: &TrainConfig,
    examples: &[Example],
    model: &ModelConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(model, child_seed(cfg.seed, "init", 0))?;
    train(cfg, examples, params, out)
}

pub struct HierarchyOutcome {
    pub high: TrainOutcome,
    pub low: TrainOutcome,
}

/// Trains a planner that emits every instruction from the first latent and
/// a low-level policy conditioned on the joined instructions.
pub fn hierarchy_train(
    cfg: &TrainConfig,
    examples: &[Example],
    model: &ModelConfig,
    out: Option<&Path>,
) -> Result<HierarchyOutcome> {
    if let Some(i) = examples.iter().position(|e| !e.annotated()) {
        return Err(Error::Config(format!(
            "hierarchy training needs every trajectory annotated; example {i} is not"
        )));
    }
    if model.max_plan_len == 0 {
        return Err(Error::Config("hierarchy training needs max_plan_len > 0".into()));
    }
    let high_cfg = ModelConfig {
        max_plan_len: 0,
        ..model.clone()
    };
    let high_params = ModelParams::init(&high_cfg, child_seed(cfg.seed, "init", 0))?;
    let high = train_role(
        cfg,
        Role::aux_only(Aux::Plan, true),
        examples,
        high_params,
        out.map(|d| d.join("high")).as_deref(),
    )?;
    let low_params = ModelParams::init(model, child_seed(cfg.seed, "hierarchy-low", 0))?;
    let low_role = Role {
        actions: true,
        aux: None,
        plan_prefix: true,
        train_encoder: true,
    };
    let low = train_role(
        cfg,
        low_role,
        examples,
        low_params,
        out.map(|d| d.join("low")).as_deref(),
    )?;
    Ok(HierarchyOutcome { high, low })
}

/// Teacher-forced decoder statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LangMetrics {
    /// Mean negative log-likelihood per target token.
    pub nll: f64,
    pub correct: usize,
    pub tokens: usize,
}

impl LangMetrics {
    pub fn accuracy(&self) -> Option<f64> {
        (self.tokens > 0).then(|| self.correct as f64 / self.tokens as f64)
    }
}

/// Next-token accuracy and likelihood of `aux` targets without dropout.
pub fn language_metrics(
    params: &ModelParams<f32>,
    examples: &[Example],
    aux: Aux,
    plan_prefix: bool,
) -> Result<LangMetrics> {
    let vocab = params.config.decoder_vocab_size;
    let role = Role {
        actions: false,
        aux: Some(aux),
        plan_prefix,
        train_encoder: false,
    };
    let mut out = LangMetrics::default();
    let mut nll_sum = 0.0;
    for chunk in examples.chunks(16) {
        let rows: Vec<&Example> = chunk.iter().collect();
        if !role.uses_decoder(&rows) {
            continue;
        }
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, params, |_| false);
        let b = batch_loss(&fwd, &mut tape, &rows, role, 1.0, Normalization::Mean, None)?;
        let Some((logits, targets)) = b.decoder_logits else {
            continue;
        };
        let preds = argmax_rows(tape.value(logits).data(), vocab);
        let valid = targets.iter().filter(|&&t| t != IGNORE).count();
        out.correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
        out.tokens += valid;
        nll_sum += b.breakdown.lang_nll * valid as f64;
    }
    if out.tokens == 0 {
        return Err(Error::Empty("supervised decoder tokens"));
    }
    out.nll = nll_sum / out.tokens as f64;
    Ok(out)
}

pub struct ProbeOutcome {
    pub accuracy: f64,
    pub metrics: LangMetrics,
    pub history: Vec<StepMetrics>,
    pub params: ModelParams<f32>,
}

/// Trains a freshly initialized decoder on top of a frozen `encoder` to emit
/// each trajectory's joined instructions from the goal latents, plus the
/// latents of the whole demonstration when `with_observations` holds, and reports
/// next-token accuracy on `validation`.
pub fn probe_train(
    cfg: &TrainConfig,
    train_set: &[Example],
    validation: &[Example],
    encoder: &ModelParams<f32>,
    with_observations: bool,
) -> Result<ProbeOutcome> {
    // The decoder is rebuilt, so it may be sized for the longest target.
    let longest = train_set
        .iter()
        .chain(validation)
        .map(|e| plan_tokens(&e.segments).len())
        .max()
        .unwrap_or(0);
    let probe_cfg = ModelConfig {
        max_instr_len: encoder.config.max_instr_len.max(longest),
        ..encoder.config.clone()
    };
    let mut params = ModelParams::<f32>::init(&probe_cfg, child_seed(cfg.seed, "probe", 0))?;
    for i in 0..params.tensors.len() {
        if params.group_of(i) != Group::Decoder {
            params.tensors[i] = encoder.tensors[i].clone();
        }
    }
    let aux = Aux::Probe {
        observations: with_observations,
    };
    let out = train_role(cfg, Role::aux_only(aux, false), train_set, params, None)?;
    let metrics = language_metrics(&out.params, validation, aux, false)?;
    Ok(ProbeOutcome {
        accuracy: metrics.accuracy().unwrap_or(0.0),
        metrics,
        history: out.history,
        params: out.params,
    })
}
