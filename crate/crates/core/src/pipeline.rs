//! From a master seed to tokenized training and evaluation sets.

use std::collections::BTreeSet;

use langaux_craftworld::{
    fresh_seed, generate_task, oracle_rollout, split_tasks, GenConfig, RecipeGraph, TaskSpec, Trajectory, WorldState,
    MAX_DEPTH,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{drop_annotations, encode_trajectory, Example, ObsSpec, Vocabulary, OBS_VOCAB};
use crate::error::{Error, Result};
use crate::kv;
use crate::model::ModelConfig;
use crate::seed::child_seed;
use crate::training::{Objective, ACTION_TOKEN_BASE};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Seeds the task pool and the unseen split.
    pub seed: u64,
    /// Training tasks kept in the pool; cells draw their demonstrations from it.
    pub demos: usize,
    pub eval_tasks: usize,
    pub min_difficulty: u8,
    pub max_difficulty: u8,
    pub grid_size: usize,
    pub budget: usize,
    /// Fraction of (goal, layout) keys held out as unseen.
    pub holdout: f64,
    pub annotation_fraction: f64,
    pub walls: usize,
    pub distractors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            demos: 150,
            eval_tasks: 200,
            min_difficulty: 1,
            max_difficulty: 3,
            grid_size: 7,
            budget: 120,
            holdout: 0.25,
            annotation_fraction: 1.0,
            walls: 4,
            distractors: 2,
        }
    }
}

pub const DATA_KEYS: [&str; 12] = [
    "seed",
    "demos",
    "eval_tasks",
    "difficulty",
    "grid_size",
    "budget",
    "holdout",
    "annotation_fraction",
    "walls",
    "distractors",
    "min_difficulty",
    "max_difficulty",
];

/// Parses `"2"` or `"1-3"`.
pub fn parse_difficulty_range(s: &str) -> Result<(u8, u8)> {
    let bad = || {
        Error::Config(format!(
            "`difficulty`: expected N or A-B within 1-{MAX_DEPTH}, got `{s}`"
        ))
    };
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if a < 1 || b < a || b > MAX_DEPTH {
        return Err(bad());
    }
    Ok((a, b))
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 || self.eval_tasks == 0 {
            return Err(Error::Config("demos and eval_tasks must be positive".into()));
        }
        if self.min_difficulty < 1 || self.max_difficulty < self.min_difficulty || self.max_difficulty > MAX_DEPTH {
            return Err(Error::Config(format!(
                "difficulty range {}-{} is outside 1-{MAX_DEPTH}",
                self.min_difficulty, self.max_difficulty
            )));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!(
                "holdout must lie in (0, 1), got {}",
                self.holdout
            )));
        }
        if !(0.0..=1.0).contains(&self.annotation_fraction) {
            return Err(Error::Config(format!(
                "annotation_fraction must lie in [0, 1], got {}",
                self.annotation_fraction
            )));
        }
        if self.grid_size < 5 || self.budget == 0 {
            return Err(Error::Config("grid_size must be at least 5 and budget positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "seed = {}\ndemos = {}\neval_tasks = {}\ndifficulty = {}-{}\ngrid_size = {}\nbudget = {}\nholdout = {}\n\
             annotation_fraction = {}\nwalls = {}\ndistractors = {}\n",
            self.seed,
            self.demos,
            self.eval_tasks,
            self.min_difficulty,
            self.max_difficulty,
            self.grid_size,
            self.budget,
            self.holdout,
            self.annotation_fraction,
            self.walls,
            self.distractors,
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use kv::parse_value as pv;
        match key {
            "seed" => self.seed = pv(key, value)?,
            "demos" => self.demos = pv(key, value)?,
            "eval_tasks" => self.eval_tasks = pv(key, value)?,
            "difficulty" => (self.min_difficulty, self.max_difficulty) = parse_difficulty_range(value)?,
            "min_difficulty" => self.min_difficulty = pv(key, value)?,
            "max_difficulty" => self.max_difficulty = pv(key, value)?,
            "grid_size" => self.grid_size = pv(key, value)?,
            "budget" => self.budget = pv(key, value)?,
            "holdout" => self.holdout = pv(key, value)?,
            "annotation_fraction" => self.annotation_fraction = pv(key, value)?,
            "walls" => self.walls = pv(key, value)?,
            "distractors" => self.distractors = pv(key, value)?,
            _ => return Err(Error::Config(format!("unknown data key `{key}`"))),
        }
        Ok(())
    }

    pub fn gen_config(&self, window: usize) -> GenConfig {
        GenConfig {
            walls: self.walls,
            distractors: self.distractors,
            window,
            ..GenConfig::default()
        }
    }
}

/// Training and unseen tasks drawn from one seeded pool and split by
/// (goal, layout) key.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub train: Vec<TaskSpec>,
    pub unseen: Vec<TaskSpec>,
}

impl TaskPool {
    pub fn generate(data: &DataConfig, recipes: &RecipeGraph, gen: &GenConfig) -> Result<Self> {
        data.validate()?;
        let span = (data.max_difficulty - data.min_difficulty + 1) as usize;
        let mut size = 2 * (data.demos + data.eval_tasks);
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(data.seed, "tasks", 0));
            let mut used = BTreeSet::new();
            let mut tasks = Vec::with_capacity(size);
            for i in 0..size {
                let difficulty = data.min_difficulty + (i % span) as u8;
                let seed = fresh_seed(&mut rng, &mut used);
                tasks.push(generate_task(recipes, seed, difficulty, data.grid_size, gen)?.0);
            }
            let split = split_tasks(&tasks, data.holdout, child_seed(data.seed, "split", 0))?;
            if split.train.len() >= data.demos && split.unseen.len() >= data.eval_tasks {
                return Ok(Self {
                    train: split.train[..data.demos].to_vec(),
                    unseen: split.unseen[..data.eval_tasks].to_vec(),
                });
            }
            if size > 64 * (data.demos + data.eval_tasks) {
                return Err(Error::Config(
                    "could not fill the train and unseen sets from the task pool".into(),
                ));
            }
            size *= 2;
        }
    }

    /// Fails if any evaluation key also occurs among training tasks.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<(String, u64)> = self.train.iter().map(task_key).collect();
        match self.unseen.iter().find(|t| train.contains(&task_key(t))) {
            Some(t) => Err(Error::Leak(format!(
                "{:?} is both a training and an evaluation key",
                task_key(t)
            ))),
            None => Ok(()),
        }
    }
}

pub fn task_key(t: &TaskSpec) -> (String, u64) {
    (t.goal.clone(), t.layout_bucket())
}

pub fn initial_state(recipes: &RecipeGraph, task: &TaskSpec, gen: &GenConfig) -> Result<WorldState> {
    Ok(generate_task(recipes, task.seed, task.difficulty, task.grid_size, gen)?.1)
}

pub fn demonstrations(
    recipes: &RecipeGraph,
    tasks: &[TaskSpec],
    gen: &GenConfig,
    budget: usize,
) -> Result<Vec<Trajectory>> {
    tasks
        .iter()
        .map(|t| Ok(oracle_rollout(recipes, t, &initial_state(recipes, t, gen)?, budget)?))
        .collect()
}

/// Everything a grid cell draws from: the shared pool, expert demonstrations
/// for both sides of the split and one vocabulary.
pub struct Corpus {
    pub recipes: RecipeGraph,
    pub gen: GenConfig,
    pub pool: TaskPool,
    pub train: Vec<Trajectory>,
    /// Expert trajectories of unseen tasks, used only for language metrics.
    pub unseen: Vec<Trajectory>,
    pub vocab: Vocabulary,
    pub budget: usize,
}

impl Corpus {
    pub fn build(data: &DataConfig, window: usize) -> Result<Self> {
        let recipes = RecipeGraph::default();
        let gen = data.gen_config(window);
        let pool = TaskPool::generate(data, &recipes, &gen)?;
        pool.check_disjoint()?;
        let train = demonstrations(&recipes, &pool.train, &gen, data.budget)?;
        let unseen = demonstrations(&recipes, &pool.unseen, &gen, data.budget)?;
        let vocab = Vocabulary::from_trajectories(&train);
        Ok(Self {
            recipes,
            gen,
            pool,
            train,
            unseen,
            vocab,
            budget: data.budget,
        })
    }

    /// `demos` training trajectories drawn by `seed`, with all but
    /// `annotation_fraction` of them stripped of instructions.
    pub fn training_subset(&self, demos: usize, annotation_fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
        if demos == 0 || demos > self.train.len() {
            return Err(Error::Config(format!(
                "cannot draw {demos} demonstrations from a pool of {}",
                self.train.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(seed, "demos", 0)));
        let picked: Vec<Trajectory> = order[..demos].iter().map(|&i| self.train[i].clone()).collect();
        drop_annotations(&picked, annotation_fraction, child_seed(seed, "annotations", 0))
    }
}

pub fn encode_all(trajs: &[Trajectory], vocab: &Vocabulary, spec: &ObsSpec) -> Result<Vec<Example>> {
    trajs.iter().map(|t| encode_trajectory(t, vocab, spec)).collect()
}

/// Fills in the vocabulary- and environment-dependent sizes of `base`.
pub fn size_model(
    base: &ModelConfig,
    vocab: &Vocabulary,
    objective: Objective,
    grid_size: usize,
    budget: usize,
) -> ModelConfig {
    let spec = ObsSpec {
        observability: base.observability,
        window: base.window,
    };
    let items = RecipeGraph::default().item_count();
    let mut cfg = base.clone();
    cfg.obs_vocab_size = OBS_VOCAB;
    cfg.obs_tokens = spec.tokens_per_step(grid_size, items);
    cfg.text_vocab_size = vocab.len();
    cfg.max_seq_len = cfg.max_seq_len.max(budget);
    cfg.decoder_vocab_size = match objective {
        Objective::Forward => ACTION_TOKEN_BASE + cfg.action_count,
        _ => vocab.len(),
    };
    if matches!(objective, Objective::Forward | Objective::Hierarchy) {
        cfg.max_instr_len = cfg.max_instr_len.max(budget + 1);
    }
    if objective == Objective::Hierarchy && cfg.max_plan_len == 0 {
        cfg.max_plan_len = cfg.max_instr_len;
    }
    cfg
}
