use std::collections::BTreeSet;
use std::path::Path;

use langaux_numcore::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{to_jsonl, Example, ObsSpec, BOS, EOS};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{bleu, difficulty_breakdown, success_rate, EpisodeResult};
use crate::evaluation::report::{EvalReport, ReportRow};
use crate::evaluation::rollout::{decode_plan, Environment, ModelPolicy};
use crate::kv;
use crate::model::{
    cross_cap, greedy_decode, EncoderInput, EncoderKind, Forward, MaskMode, ModelConfig, ModelParams, MODEL_KEYS,
};
use crate::pipeline::{encode_all, initial_state, size_model, task_key, Corpus, DataConfig, DATA_KEYS};
use crate::seed::child_seed;
use crate::training::{
    hierarchy_train, language_metrics, plan_tokens, train_fresh, Aux, Objective, StepMetrics, TrainConfig, TRAIN_KEYS,
};

/// Part of every configuration hash; bump when results would change.
pub const CODE_VERSION: &str = concat!("langaux-", env!("CARGO_PKG_VERSION"), "-r1");

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Keep dropout active during rollouts.
    pub eval_dropout: bool,
    /// Record greedy instruction decodes during rollouts.
    pub decode: bool,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            eval_dropout: false,
            decode: false,
            workers: 1,
        }
    }
}

pub const EVAL_KEYS: [&str; 4] = ["episodes", "eval_dropout", "decode", "workers"];

impl EvalConfig {
    pub fn to_kv(&self) -> String {
        format!(
            "episodes = {}\neval_dropout = {}\ndecode = {}\nworkers = {}\n",
            self.episodes, self.eval_dropout, self.decode, self.workers
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "episodes" => self.episodes = kv::parse_value(key, value)?,
            "eval_dropout" => self.eval_dropout = kv::parse_bool(key, value)?,
            "decode" => self.decode = kv::parse_bool(key, value)?,
            "workers" => self.workers = kv::parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown eval key `{key}`"))),
        }
        Ok(())
    }
}

/// Every setting of one experiment, addressable as `section.key`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.dropout = TrainConfig::preset_dropout("crafting-like").expect("built-in preset");
        Self {
            data: DataConfig::default(),
            model,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_kv(&self) -> String {
        format!(
            "[data]\n{}\n[model]\n{}\n[train]\n{}\n[eval]\n{}",
            self.data.to_kv(),
            self.model.to_kv(),
            self.train.to_kv(),
            self.eval.to_kv()
        )
    }

    /// Applies one `section.key = value`. `train.preset` replaces λ, batch
    /// size, optimizer settings and model dropout with the named preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, k) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` needs a section prefix")))?;
        match (section, k) {
            ("train", "preset") => {
                let p = TrainConfig::preset(value)?;
                self.train.lambda = p.lambda;
                self.train.batch_size = p.batch_size;
                self.train.adam = p.adam;
                self.model.dropout = TrainConfig::preset_dropout(value)?;
                Ok(())
            }
            ("data", k) => self.data.set(k, value),
            ("model", k) => self.model.set(k, value),
            ("train", k) => self.train.set(k, value),
            ("eval", k) => self.eval.set(k, value),
            _ => Err(Error::Config(format!("unknown section `{section}`"))),
        }
    }

    /// Every `section.key` that [`ExperimentConfig::set`] accepts.
    pub fn keys() -> Vec<String> {
        let sections: [(&str, &[&str]); 4] = [
            ("data", &DATA_KEYS),
            ("model", &MODEL_KEYS),
            ("train", &TRAIN_KEYS),
            ("eval", &EVAL_KEYS),
        ];
        let mut out: Vec<String> = sections
            .iter()
            .flat_map(|(s, keys)| keys.iter().map(move |k| format!("{s}.{k}")))
            .collect();
        out.push("train.preset".into());
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in kv::parse(text)? {
            cfg.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 || self.eval.episodes > self.data.eval_tasks {
            return Err(Error::Config(format!(
                "eval.episodes must lie in 1..={} (data.eval_tasks)",
                self.data.eval_tasks
            )));
        }
        if self.eval.workers == 0 {
            return Err(Error::Config("eval.workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical text of this configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub objective: Objective,
    pub demos: usize,
    pub annotation_fraction: f64,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}-n{}-a{}-{}-s{}",
            self.objective.name(),
            self.demos,
            self.annotation_fraction,
            self.mask_mode.name(),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub objectives: Vec<Objective>,
    pub demos: Vec<usize>,
    pub annotation_fractions: Vec<f64>,
    pub mask_modes: Vec<MaskMode>,
    pub seeds: Vec<u64>,
}

impl Grid {
    /// Cartesian product, objectives outermost and seeds innermost.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &objective in &self.objectives {
            for &demos in &self.demos {
                for &annotation_fraction in &self.annotation_fractions {
                    for &mask_mode in &self.mask_modes {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                objective,
                                demos,
                                annotation_fraction,
                                mask_mode,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Hex SHA-256 of the demonstrations and unseen tasks a corpus holds.
pub fn corpus_fingerprint(corpus: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    h.update(to_jsonl(&corpus.train)?.as_bytes());
    for t in &corpus.pool.unseen {
        h.update(serde_json::to_string(t)?.as_bytes());
        h.update(b"\n");
    }
    h.update(corpus.vocab.to_text().as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Where a hierarchical policy gets its instruction block.
#[derive(Clone, Copy)]
pub enum PlanSource<'a> {
    None,
    Planner(&'a ModelParams<f32>),
    /// The expert's instructions for the same task.
    Oracle,
}

/// Rolls out `params` on the first `episodes` unseen tasks. Every episode
/// asserts that its task key is unseen.
pub fn evaluate_success(
    params: &ModelParams<f32>,
    plans: PlanSource,
    corpus: &Corpus,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let unseen: BTreeSet<(String, u64)> = corpus.pool.unseen.iter().map(task_key).collect();
    let train: BTreeSet<(String, u64)> = corpus.pool.train.iter().map(task_key).collect();
    let env = Environment {
        recipes: &corpus.recipes,
        spec: ObsSpec {
            observability: params.config.observability,
            window: params.config.window,
        },
        budget: corpus.budget,
    };
    let n = eval.episodes.min(corpus.pool.unseen.len());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let task = &corpus.pool.unseen[i];
            let key = task_key(task);
            if !unseen.contains(&key) || train.contains(&key) {
                return Err(Error::Leak(format!("{key:?}")));
            }
            let init = initial_state(&corpus.recipes, task, &corpus.gen)?;
            let goal = corpus.vocab.tokenize(&task.goal_text);
            let mut policy = ModelPolicy::new(params, goal.clone());
            match plans {
                PlanSource::None => {}
                PlanSource::Planner(high) => {
                    let plan = decode_plan(high, &goal, &env.tokens(&init)?)?;
                    policy = policy.with_plan(plan);
                }
                PlanSource::Oracle => {
                    let segs = encode_all(&corpus.unseen[i..=i], &corpus.vocab, &env.spec)?;
                    let mut plan = plan_tokens(&segs[0].segments);
                    plan.truncate(params.config.max_plan_len.max(1));
                    policy = policy.with_plan(plan);
                }
            }
            if eval.decode {
                policy = policy.with_decoding(&corpus.vocab);
            }
            if eval.eval_dropout && params.config.dropout > 0.0 {
                policy = policy.with_dropout(ChaCha8Rng::seed_from_u64(child_seed(seed, "eval", i as u64)));
            }
            env.rollout(task, &init, &mut policy)
        })
        .collect()
}

/// Held-out instruction metrics under the execution mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LanguageEval {
    pub token_accuracy: f64,
    pub lang_nll: f64,
    pub bleu: f64,
}

/// Teacher-forced accuracy and likelihood plus greedy-decode BLEU of each
/// instruction of `examples`, with every instruction attending the latents
/// up to the end of its own execution.
pub fn evaluate_language(params: &ModelParams<f32>, examples: &[Example]) -> Result<LanguageEval> {
    let mut exec = params.clone();
    exec.config.mask_mode = MaskMode::Execution;
    let tf = language_metrics(&exec, examples, Aux::Lang, false)?;
    let mut scores = Vec::new();
    for chunk in examples.chunks(8) {
        let rows: Vec<&Example> = chunk.iter().filter(|e| e.annotated()).collect();
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, &exec, |_| false);
        let inputs: Vec<EncoderInput> = rows
            .iter()
            .map(|e| EncoderInput {
                goal: &e.goal,
                plan: &[],
                obs: &e.obs,
                steps: e.steps,
            })
            .collect();
        let enc = fwd.encode(&mut tape, &inputs, None)?;
        let mut keys = Vec::new();
        let mut refs = Vec::new();
        for (e, r) in rows.iter().zip(&enc.examples) {
            let goal_keys = if exec.config.goal_keys {
                r.goal_rows()
            } else {
                Vec::new()
            };
            for s in &e.segments {
                let latent = match exec.config.encoder {
                    EncoderKind::Sequence => {
                        let cap = cross_cap(MaskMode::Execution, (s.start, s.end), e.steps);
                        r.latent_rows(0)[..cap].to_vec()
                    }
                    EncoderKind::State => r.latent_rows(s.start - 1),
                };
                keys.push(goal_keys.iter().copied().chain(latent).collect());
                refs.push(&s.tokens);
            }
        }
        let hyps = greedy_decode(&fwd, &mut tape, enc.z, &keys, BOS, EOS, exec.config.max_instr_len)?;
        for (h, r) in hyps.iter().zip(refs) {
            scores.push(bleu(h, r, 4)?);
        }
    }
    let bleu = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(LanguageEval {
        token_accuracy: tf.accuracy().unwrap_or(0.0),
        lang_nll: tf.nll,
        bleu,
    })
}

pub struct CellOutcome {
    pub row: ReportRow,
    /// Trained parameters; absent when the row came from the cache.
    pub params: Option<ModelParams<f32>>,
    pub history: Vec<StepMetrics>,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Serialize, Deserialize)]
struct CachedCell {
    config_hash: String,
    row: ReportRow,
}

impl Cell {
    /// The cell a single configuration describes.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            objective: cfg.train.objective,
            demos: cfg.data.demos,
            annotation_fraction: cfg.data.annotation_fraction,
            mask_mode: cfg.model.mask_mode,
            seed: cfg.train.seed,
        }
    }
}

/// One report line from a cell's episodes and optional language metrics.
pub fn report_row(
    cell: &Cell,
    episodes: &[EpisodeResult],
    lang: Option<LanguageEval>,
    config_hash: &str,
) -> Result<ReportRow> {
    let by_difficulty = difficulty_breakdown(episodes);
    let rate_at = |d: u8| by_difficulty.iter().find(|r| r.difficulty == d).map(|r| r.rate);
    Ok(ReportRow {
        cell: cell.id(),
        objective: cell.objective.name().to_string(),
        demos: cell.demos,
        annotation_fraction: cell.annotation_fraction,
        mask_mode: cell.mask_mode.name().to_string(),
        seed: cell.seed,
        episodes: episodes.len(),
        success_rate: success_rate(episodes)?,
        token_accuracy: lang.map(|l| l.token_accuracy),
        bleu: lang.map(|l| l.bleu),
        lang_nll: lang.map(|l| l.lang_nll),
        success_d1: rate_at(1),
        success_d2: rate_at(2),
        success_d3: rate_at(3),
        success_d4: rate_at(4),
        success_d5: rate_at(5),
        config_hash: config_hash.to_string(),
    })
}

/// The configuration a cell trains under.
pub fn cell_config(base: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.train.objective = cell.objective;
    cfg.train.seed = cell.seed;
    cfg.data.annotation_fraction = cell.annotation_fraction;
    cfg.model.mask_mode = cell.mask_mode;
    cfg
}

/// Trains and evaluates one cell. With `cache` set, a stored row with the
/// same configuration hash is returned as is; a stored row with another
/// hash is a cache error.
pub fn run_cell(
    base: &ExperimentConfig,
    corpus: &Corpus,
    fingerprint: &str,
    cell: &Cell,
    cache: Option<&Path>,
) -> Result<CellOutcome> {
    let cfg = cell_config(base, cell);
    cfg.validate()?;
    let hash = {
        let mut h = Sha256::new();
        h.update(cfg.to_kv().as_bytes());
        h.update(cell.id().as_bytes());
        h.update(fingerprint.as_bytes());
        h.update(CODE_VERSION.as_bytes());
        hex::encode(h.finalize())
    };
    let cache_path = cache.map(|d| d.join(format!("{}.json", cell.id())));
    if let Some(p) = cache_path.as_deref().filter(|p| p.exists()) {
        let stored: CachedCell = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        if stored.config_hash != hash {
            return Err(Error::Cache {
                cell: cell.id(),
                stored: stored.config_hash,
                requested: hash,
            });
        }
        return Ok(CellOutcome {
            row: stored.row,
            params: None,
            history: Vec::new(),
            episodes: Vec::new(),
        });
    }

    let model = size_model(
        &cfg.model,
        &corpus.vocab,
        cell.objective,
        cfg.data.grid_size,
        cfg.data.budget,
    );
    let spec = ObsSpec {
        observability: model.observability,
        window: model.window,
    };
    let trajs = corpus.training_subset(cell.demos, cell.annotation_fraction, cell.seed)?;
    let examples = encode_all(&trajs, &corpus.vocab, &spec)?;
    let (params, history, episodes) = match cell.objective {
        Objective::Hierarchy => {
            let out = hierarchy_train(&cfg.train, &examples, &model, None)?;
            let eps = evaluate_success(
                &out.low.params,
                PlanSource::Planner(&out.high.params),
                corpus,
                &cfg.eval,
                cell.seed,
            )?;
            let mut history = out.high.history;
            history.extend(out.low.history);
            (out.low.params, history, eps)
        }
        Objective::ProbeGoalOnly | Objective::ProbeGoalObs => {
            return Err(Error::Config(
                "probe objectives are not grid cells; use probe_train".into(),
            ));
        }
        _ => {
            let out = train_fresh(&cfg.train, &examples, &model, None)?;
            let eps = evaluate_success(&out.params, PlanSource::None, corpus, &cfg.eval, cell.seed)?;
            (out.params, out.history, eps)
        }
    };
    let lang = if cell.objective == Objective::Lang
        && cfg.train.effective_lambda() > 0.0
        && examples.iter().any(Example::annotated)
    {
        let n = cfg.eval.episodes.min(corpus.unseen.len());
        let held_out = encode_all(&corpus.unseen[..n], &corpus.vocab, &spec)?;
        Some(evaluate_language(&params, &held_out)?)
    } else {
        None
    };
    let row = report_row(cell, &episodes, lang, &hash)?;
    if let Some(p) = cache_path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let stored = CachedCell {
            config_hash: hash,
            row: row.clone(),
        };
        std::fs::write(&p, serde_json::to_string_pretty(&stored)?)?;
    }
    Ok(CellOutcome {
        row,
        params: Some(params),
        history,
        episodes,
    })
}

/// Runs every cell of `grid` against one shared corpus. With `out` set,
/// cells are cached under `out/cells` and the report is written to
/// `out/report.csv`.
pub fn run_grid(base: &ExperimentConfig, grid: &Grid, out: Option<&Path>) -> Result<EvalReport> {
    base.validate()?;
    if let Some(&max) = grid.demos.iter().max() {
        if max > base.data.demos {
            return Err(Error::Config(format!(
                "grid asks for {max} demonstrations but data.demos is {}",
                base.data.demos
            )));
        }
    }
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let corpus = Corpus::build(&base.data, base.model.window)?;
    let fingerprint = corpus_fingerprint(&corpus)?;
    let cache = out.map(|d| d.join("cells"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(base.eval.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<ReportRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(base, &corpus, &fingerprint, c, cache.as_deref()).map(|o| o.row))
            .collect::<Result<_>>()
    })?;
    let report = EvalReport { rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        report.write_csv(&dir.join("report.csv"))?;
    }
    Ok(report)
}
