use std::collections::{BTreeSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::recipes::{ItemId, RecipeGraph, MAX_DEPTH};
use crate::world::{Pos, Symbol, WorldState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub difficulty: u8,
    pub grid_size: usize,
    pub goal: String,
    pub goal_text: String,
}

impl TaskSpec {
    /// Layout bucket used as the second half of the split key.
    pub fn layout_bucket(&self) -> u64 {
        self.seed % LAYOUT_BUCKETS
    }
}

pub const LAYOUT_BUCKETS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub walls: usize,
    pub distractors: usize,
    /// Side of the egocentric window; for difficulty >= 2 at least one
    /// required resource starts outside it.
    pub window: usize,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            walls: 4,
            distractors: 2,
            window: 5,
            max_attempts: 256,
        }
    }
}

pub fn goal_text(recipes: &RecipeGraph, goal: ItemId) -> String {
    format!("make a {}", recipes.item_name(goal))
}

fn connected(state: &WorldState) -> bool {
    let n = state.size;
    let open: Vec<Pos> = (0..n * n)
        .map(|i| (i / n, i % n))
        .filter(|&p| state.cell(p).walkable())
        .collect();
    let Some(&start) = open.first() else {
        return false;
    };
    let mut seen = vec![false; n * n];
    seen[start.0 * n + start.1] = true;
    let mut queue = VecDeque::from([start]);
    let mut count = 1;
    while let Some(p) = queue.pop_front() {
        for d in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if let Some(q) = state.offset(p, d) {
                if state.cell(q).walkable() && !seen[q.0 * n + q.1] {
                    seen[q.0 * n + q.1] = true;
                    count += 1;
                    queue.push_back(q);
                }
            }
        }
    }
    count == open.len()
}

/// Builds the task and initial state for `(seed, difficulty, grid_size)`.
/// The goal is drawn uniformly from items of that depth; one resource cell
/// is placed per raw unit the goal consumes, plus each station it needs.
pub fn generate_task(
    recipes: &RecipeGraph,
    seed: u64,
    difficulty: u8,
    grid_size: usize,
    cfg: &GenConfig,
) -> Result<(TaskSpec, WorldState)> {
    if !(1..=MAX_DEPTH).contains(&difficulty) {
        return Err(CraftError::Generation(format!(
            "difficulty {difficulty} is outside 1..={MAX_DEPTH}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((difficulty as u64) << 32) | grid_size as u64);
    let goals = recipes.items_at_depth(difficulty);
    let &goal = goals
        .choose(&mut rng)
        .ok_or_else(|| CraftError::Generation(format!("no goal item has depth {difficulty}")))?;

    let need = recipes.raw_requirements(goal);
    let mut objects: Vec<Symbol> = Vec::new();
    for (item, &n) in need.iter().enumerate().filter(|&(_, &n)| n > 0) {
        let sym = recipes.source_of(item).expect("raw requirements are gathered items");
        objects.extend(std::iter::repeat_n(sym, n as usize));
    }
    let required = objects.len();
    objects.extend(recipes.stations_needed(goal).into_iter().map(|s| s.symbol()));
    let sources: Vec<Symbol> = recipes.gatherables().iter().map(|&(s, _)| s).collect();
    for _ in 0..cfg.distractors {
        objects.push(*sources.choose(&mut rng).expect("at least one resource kind"));
    }
    let cells = grid_size * grid_size;
    if objects.len() + cfg.walls + 1 > cells {
        return Err(CraftError::Generation(format!(
            "a {grid_size}x{grid_size} grid cannot hold {} objects and {} walls",
            objects.len(),
            cfg.walls
        )));
    }

    let half = cfg.window / 2;
    for _ in 0..cfg.max_attempts {
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut rng);
        let mut state = WorldState {
            size: grid_size,
            grid: vec![Symbol::Empty; cells],
            agent: (0, 0),
            inventory: vec![0; recipes.item_count()],
            steps: 0,
            rng_seed: seed,
        };
        let mut it = order.into_iter();
        for _ in 0..cfg.walls {
            let i = it.next().expect("capacity checked");
            state.grid[i] = Symbol::Wall;
        }
        if !connected(&state) {
            continue;
        }
        let mut required_pos = Vec::with_capacity(required);
        for (k, &sym) in objects.iter().enumerate() {
            let i = it.next().expect("capacity checked");
            state.grid[i] = sym;
            if k < required {
                required_pos.push((i / grid_size, i % grid_size));
            }
        }
        let a = it.next().expect("capacity checked");
        state.agent = (a / grid_size, a % grid_size);
        if difficulty >= 2 {
            let outside = required_pos
                .iter()
                .any(|&(r, c)| r.abs_diff(state.agent.0) > half || c.abs_diff(state.agent.1) > half);
            if !outside {
                continue;
            }
        }
        let task = TaskSpec {
            seed,
            difficulty,
            grid_size,
            goal: recipes.item_name(goal).to_string(),
            goal_text: goal_text(recipes, goal),
        };
        return Ok((task, state));
    }
    Err(CraftError::Generation(format!(
        "no valid layout for seed {seed} after {} attempts",
        cfg.max_attempts
    )))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<TaskSpec>,
    pub unseen: Vec<TaskSpec>,
}

/// Partitions tasks by `(goal, layout bucket)` key. A seeded shuffle of the
/// distinct keys sends `round(holdout * keys)` of them to the unseen side,
/// never all or none.
pub fn split_tasks(tasks: &[TaskSpec], holdout: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
        return Err(CraftError::Config(format!(
            "holdout fraction must lie in (0, 1), got {holdout}"
        )));
    }
    let keys: BTreeSet<(String, u64)> = tasks.iter().map(|t| (t.goal.clone(), t.layout_bucket())).collect();
    if keys.len() < 2 {
        return Err(CraftError::Config(format!(
            "need at least two distinct (goal, layout) keys to split, found {}",
            keys.len()
        )));
    }
    let mut keys: Vec<_> = keys.into_iter().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((holdout * keys.len() as f64).round() as usize).clamp(1, keys.len() - 1);
    let unseen_keys: BTreeSet<_> = keys[..held].iter().cloned().collect();
    let (unseen, train) = tasks
        .iter()
        .cloned()
        .partition(|t| unseen_keys.contains(&(t.goal.clone(), t.layout_bucket())));
    Ok(Split { train, unseen })
}

/// Draws a seed from `rng` that no earlier call in this pool produced.
pub fn fresh_seed<R: Rng>(rng: &mut R, used: &mut BTreeSet<u64>) -> u64 {
    loop {
        let s = rng.random::<u64>() >> 1;
        if used.insert(s) {
            return s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_same_task() {
        let g = RecipeGraph::default();
        let cfg = GenConfig::default();
        let a = generate_task(&g, 42, 3, 7, &cfg).unwrap();
        let b = generate_task(&g, 42, 3, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&g, 43, 3, 7, &cfg).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn goal_depth_matches_difficulty() {
        let g = RecipeGraph::default();
        for d in 1..=5 {
            for seed in 0..20 {
                let (t, s) = generate_task(&g, seed, d, 7, &GenConfig::default()).unwrap();
                assert_eq!(g.depth(g.item_id(&t.goal).unwrap()), d);
                assert!(connected(&s));
                assert!(s.cell(s.agent).walkable());
            }
        }
    }

    #[test]
    fn rejects_bad_difficulty_and_tiny_grids() {
        let g = RecipeGraph::default();
        assert!(generate_task(&g, 0, 0, 7, &GenConfig::default()).is_err());
        assert!(generate_task(&g, 0, 6, 7, &GenConfig::default()).is_err());
        let e = generate_task(&g, 0, 5, 3, &GenConfig::default()).unwrap_err();
        assert!(e.to_string().contains("cannot hold"));
    }

    fn spec(goal: &str, seed: u64) -> TaskSpec {
        TaskSpec {
            seed,
            difficulty: 1,
            grid_size: 7,
            goal: goal.into(),
            goal_text: format!("make a {goal}"),
        }
    }

    #[test]
    fn split_holds_out_a_quarter_of_keys() {
        let goals: Vec<String> = (0..25).map(|i| format!("g{i}")).collect();
        let tasks: Vec<TaskSpec> = goals.iter().flat_map(|g| (0..4).map(move |b| spec(g, b))).collect();
        let split = split_tasks(&tasks, 0.25, 9).unwrap();
        let unseen: BTreeSet<_> = split
            .unseen
            .iter()
            .map(|t| (t.goal.clone(), t.layout_bucket()))
            .collect();
        let train: BTreeSet<_> = split
            .train
            .iter()
            .map(|t| (t.goal.clone(), t.layout_bucket()))
            .collect();
        assert_eq!(unseen.len(), 25);
        assert!(unseen.is_disjoint(&train));
        assert_eq!(split.unseen.len() + split.train.len(), 100);
    }

    #[test]
    fn split_needs_two_keys() {
        let tasks = vec![spec("a", 0), spec("a", 8)];
        assert!(split_tasks(&tasks, 0.5, 0).is_err());
        assert!(split_tasks(&[spec("a", 0), spec("a", 1)], 1.0, 0).is_err());
    }
}
