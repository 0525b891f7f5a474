use langaux_craftworld::{observe, step, Action, Observability, RecipeGraph, TaskSpec, WorldState};
use langaux_numcore::{Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ObsSpec, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::evaluation::metrics::EpisodeResult;
use crate::model::{
    argmax_rows, greedy_decode, greedy_decode_until, EncoderCache, EncoderInput, EncoderKind, Forward, ModelParams,
};
use crate::training::plan_complete;

/// Chooses actions from the observation tokens seen so far.
pub trait Policy {
    /// `obs` holds `steps` observations of equal width, oldest first.
    fn act(&mut self, obs: &[u16], steps: usize) -> Result<usize>;

    /// Instruction texts produced while acting.
    fn take_notes(&mut self) -> Vec<String> {
        Vec::new()
    }
}

/// Replays a fixed action list.
pub struct ReplayPolicy {
    actions: Vec<usize>,
    next: usize,
}

impl ReplayPolicy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Policy for ReplayPolicy {
    fn act(&mut self, _obs: &[u16], _steps: usize) -> Result<usize> {
        let a = self.actions.get(self.next).copied().unwrap_or(Action::Interact.index());
        self.next += 1;
        Ok(a)
    }
}

/// Greedy policy of a trained model. Histories longer than `max_seq_len`
/// keep only their most recent steps.
///
/// A sequence encoder appends one row per call to a key/value cache while
/// the history grows by one step and fits the window; otherwise the window is
/// re-encoded in full.
pub struct ModelPolicy<'a> {
    params: &'a ModelParams<f32>,
    running: Option<Running<'a>>,
    goal: Vec<usize>,
    plan: Vec<usize>,
    decode: Option<&'a Vocabulary>,
    dropout: Option<ChaCha8Rng>,
    notes: Vec<String>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(params: &'a ModelParams<f32>, goal: Vec<usize>) -> Self {
        Self {
            params,
            running: None,
            goal,
            plan: Vec::new(),
            decode: None,
            dropout: None,
            notes: Vec::new(),
        }
    }

    /// Instruction block fed to a model trained with one.
    pub fn with_plan(mut self, plan: Vec<usize>) -> Self {
        self.plan = plan;
        self
    }

    /// Greedily decodes the current instruction after every step.
    pub fn with_decoding(mut self, vocab: &'a Vocabulary) -> Self {
        self.decode = Some(vocab);
        self
    }

    /// Keeps dropout active while acting.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout = Some(rng);
        self
    }
}

struct Running<'a> {
    tape: Tape<f32>,
    fwd: Forward<'a, f32>,
    cache: EncoderCache,
    rows: Vec<Var>,
}

impl<'a> ModelPolicy<'a> {
    fn note(&mut self, text: String) {
        if self.notes.last() != Some(&text) {
            self.notes.push(text);
        }
    }

    fn act_cached(&mut self, obs: &[u16], steps: usize) -> Result<usize> {
        let width = obs.len() / steps;
        if steps == 1 || self.running.is_none() {
            let mut tape = Tape::new();
            let fwd = Forward::bind(&mut tape, self.params, |_| false);
            let cache = fwd.encode_prefix(&mut tape, &self.goal, &self.plan)?;
            self.running = Some(Running {
                tape,
                fwd,
                cache,
                rows: Vec::new(),
            });
        }
        let run = self.running.as_mut().expect("set above");
        let row = run.fwd.encode_step(
            &mut run.tape,
            &mut run.cache,
            &obs[(steps - 1) * width..],
            self.dropout.as_mut(),
        )?;
        run.rows.push(row);
        let logits = run.fwd.policy_from_latents(&mut run.tape, row)?;
        let action = argmax_rows(run.tape.value(logits).data(), self.params.config.action_count)[0];
        if let Some(vocab) = self.decode {
            let z = run.tape.concat(&run.rows)?;
            let keys: Vec<usize> = (0..run.rows.len()).collect();
            let out = greedy_decode(
                &run.fwd,
                &mut run.tape,
                z,
                &[keys],
                BOS,
                EOS,
                self.params.config.max_instr_len,
            )?;
            let text = vocab.detokenize(&out[0]);
            self.note(text);
        }
        Ok(action)
    }

    fn act_full(&mut self, obs: &[u16], steps: usize) -> Result<usize> {
        self.running = None;
        let cfg = &self.params.config;
        let width = obs.len() / steps;
        // The state encoder reads each step alone, so only the last one matters.
        let keep = match cfg.encoder {
            EncoderKind::State => 1,
            EncoderKind::Sequence => steps.min(cfg.max_seq_len),
        };
        let window = &obs[(steps - keep) * width..];
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, self.params, |_| false);
        let input = EncoderInput {
            goal: &self.goal,
            plan: &self.plan,
            obs: window,
            steps: keep,
        };
        let enc = fwd.encode(&mut tape, &[input], self.dropout.as_mut())?;
        let logits = fwd.policy_logits(&mut tape, &enc)?;
        let a = cfg.action_count;
        let data = tape.value(logits).data();
        let action = argmax_rows(&data[(keep - 1) * a..keep * a], a)[0];
        if let Some(vocab) = self.decode {
            let keys = enc.examples[0].latent_rows(keep - 1);
            let out = greedy_decode(&fwd, &mut tape, enc.z, &[keys], BOS, EOS, cfg.max_instr_len)?;
            let text = vocab.detokenize(&out[0]);
            self.note(text);
        }
        Ok(action)
    }
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &[u16], steps: usize) -> Result<usize> {
        if steps == 0 || obs.len() % steps != 0 {
            return Err(Error::Config(format!(
                "{} observation tokens do not split into {steps} steps",
                obs.len()
            )));
        }
        let cfg = &self.params.config;
        let extends = steps == 1 || self.running.as_ref().is_some_and(|run| run.cache.steps() + 1 == steps);
        if cfg.encoder == EncoderKind::Sequence && steps <= cfg.max_seq_len && extends {
            self.act_cached(obs, steps)
        } else {
            self.act_full(obs, steps)
        }
    }

    fn take_notes(&mut self) -> Vec<String> {
        std::mem::take(&mut self.notes)
    }
}

/// Plans emitted by a planner model from the goal and first observation.
pub fn decode_plan(params: &ModelParams<f32>, goal: &[usize], first_obs: &[u16]) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, params, |_| false);
    let input = EncoderInput {
        goal,
        plan: &[],
        obs: first_obs,
        steps: 1,
    };
    let enc = fwd.encode(&mut tape, &[input], None)?;
    let mut keys = if params.config.goal_keys {
        enc.examples[0].goal_rows()
    } else {
        Vec::new()
    };
    keys.extend(enc.examples[0].latent_rows(0));
    let mut plan = greedy_decode_until(
        &fwd,
        &mut tape,
        enc.z,
        &[keys],
        BOS,
        params.config.max_instr_len,
        plan_complete,
    )?
    .remove(0);
    if !plan_complete(&plan) {
        plan.extend([EOS, EOS]);
    }
    plan.truncate(params.config.max_plan_len.max(1));
    Ok(plan)
}

pub struct Environment<'a> {
    pub recipes: &'a RecipeGraph,
    pub spec: ObsSpec,
    pub budget: usize,
}

impl Environment<'_> {
    /// Model tokens of the current state.
    pub fn tokens(&self, state: &WorldState) -> Result<Vec<u16>> {
        self.spec
            .encode(&observe(state, Observability::Full, self.spec.window)?)
    }

    /// Runs `policy` from `initial` until success or the step budget.
    pub fn rollout(&self, task: &TaskSpec, initial: &WorldState, policy: &mut dyn Policy) -> Result<EpisodeResult> {
        let goal = self
            .recipes
            .item_id(&task.goal)
            .ok_or_else(|| Error::Config(format!("unknown goal item `{}`", task.goal)))?;
        let mut state = initial.clone();
        let mut obs = Vec::new();
        let mut success = false;
        let mut steps = 0;
        while steps < self.budget {
            obs.extend(self.tokens(&state)?);
            steps += 1;
            let a = Action::from_index(policy.act(&obs, steps)?)?;
            let out = step(self.recipes, &state, goal, self.budget, a);
            state = out.state;
            if out.done {
                success = out.success;
                break;
            }
        }
        Ok(EpisodeResult {
            goal: task.goal.clone(),
            layout_bucket: task.layout_bucket(),
            task_seed: task.seed,
            difficulty: task.difficulty,
            success,
            steps,
            predicted: policy.take_notes(),
        })
    }
}
