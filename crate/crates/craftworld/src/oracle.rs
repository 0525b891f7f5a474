//! Scripted expert. It obtains the goal by a post-order walk of the recipe
//! tree, visiting sibling subtrees nearest-first, and narrates each subgoal
//! with a templated instruction.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::generate::TaskSpec;
use crate::recipes::{ItemId, RecipeGraph, Station};
use crate::world::{observe, step, Action, Observability, Pos, Symbol, WorldState};

/// One instruction and the steps it covers, 1-based and half-open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: TaskSpec,
    /// Full observation before each action, in [`crate::Observation::encode`] form.
    pub observations: Vec<String>,
    pub actions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Subgoal {
    GoTo(Symbol),
    Gather(Symbol),
    Craft(ItemId, Station),
}

const GOTO: [&str; 3] = ["go to the", "move to the", "walk to the"];
const GATHER: [&str; 2] = ["mine the", "grab the"];
const CRAFT: [&str; 2] = ["craft", "build"];

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).expect("template list is non-empty")
}

pub fn render_subgoal(recipes: &RecipeGraph, sg: &Subgoal, rng: &mut ChaCha8Rng) -> String {
    match sg {
        Subgoal::GoTo(s) => format!("{} {}", pick(rng, &GOTO), s.name()),
        Subgoal::Gather(s) => format!("{} {}", pick(rng, &GATHER), s.name()),
        Subgoal::Craft(item, st) => format!(
            "{} {} at the {}",
            pick(rng, &CRAFT),
            recipes.item_name(*item),
            st.name()
        ),
    }
}

/// Inverse of [`render_subgoal`] for any template choice.
pub fn parse_instruction(recipes: &RecipeGraph, text: &str) -> Option<Subgoal> {
    let object = |rest: &str| {
        Symbol::ALL
            .into_iter()
            .find(|s| s.is_interactable() && s.name() == rest)
    };
    for verb in GOTO {
        if let Some(rest) = text.strip_prefix(verb).and_then(|r| r.strip_prefix(' ')) {
            return object(rest).map(Subgoal::GoTo);
        }
    }
    for verb in GATHER {
        if let Some(rest) = text.strip_prefix(verb).and_then(|r| r.strip_prefix(' ')) {
            return object(rest).filter(|s| s.is_resource()).map(Subgoal::Gather);
        }
    }
    for verb in CRAFT {
        if let Some(rest) = text.strip_prefix(verb).and_then(|r| r.strip_prefix(' ')) {
            let (item, station) = rest.split_once(" at the ")?;
            return Some(Subgoal::Craft(recipes.item_id(item)?, Station::parse(station)?));
        }
    }
    None
}

/// Shortest walk from `from` to a cell whose interact target is `target`.
/// Neighbours expand in action order, so ties resolve deterministically.
pub fn path_to_target(state: &WorldState, from: Pos, target: Pos) -> Option<Vec<Action>> {
    let n = state.size;
    let mut parent: Vec<Option<(Pos, Action)>> = vec![None; n * n];
    let mut seen = vec![false; n * n];
    seen[from.0 * n + from.1] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        if state.interact_target(p) == Some(target) {
            let mut path = Vec::new();
            let mut cur = p;
            while let Some((prev, a)) = parent[cur.0 * n + cur.1] {
                path.push(a);
                cur = prev;
            }
            path.reverse();
            return Some(path);
        }
        for a in [Action::Up, Action::Down, Action::Left, Action::Right] {
            let d = match a {
                Action::Up => (-1, 0),
                Action::Down => (1, 0),
                Action::Left => (0, -1),
                _ => (0, 1),
            };
            if let Some(q) = state.offset(p, d) {
                if state.cell(q).walkable() && !seen[q.0 * n + q.1] {
                    seen[q.0 * n + q.1] = true;
                    parent[q.0 * n + q.1] = Some((p, a));
                    queue.push_back(q);
                }
            }
        }
    }
    None
}

/// Nearest cell holding `sym`, by walking distance, with the path to it.
fn nearest(state: &WorldState, sym: Symbol) -> Option<(Pos, Vec<Action>)> {
    let n = state.size;
    (0..n * n)
        .map(|i| (i / n, i % n))
        .filter(|&p| state.cell(p) == sym)
        .filter_map(|p| path_to_target(state, state.agent, p).map(|path| (p, path)))
        .min_by_key(|(p, path)| (path.len(), *p))
}

struct Planner<'a> {
    recipes: &'a RecipeGraph,
    goal: ItemId,
    budget: usize,
    state: WorldState,
    observations: Vec<String>,
    actions: Vec<usize>,
    segments: Vec<Segment>,
    rng: ChaCha8Rng,
    success: bool,
}

impl Planner<'_> {
    fn act(&mut self, a: Action) -> Result<()> {
        if self.success {
            return Err(CraftError::Planning("goal reached before the plan finished".into()));
        }
        let obs = observe(&self.state, Observability::Full, 0)?;
        self.observations.push(obs.encode());
        self.actions.push(a.index());
        let out = step(self.recipes, &self.state, self.goal, self.budget, a);
        self.state = out.state;
        self.success = out.success;
        if out.done && !out.success {
            return Err(CraftError::Planning(format!(
                "step budget of {} exhausted",
                self.budget
            )));
        }
        Ok(())
    }

    fn run(&mut self, sg: Subgoal, actions: &[Action]) -> Result<()> {
        if actions.is_empty() {
            return Ok(());
        }
        let start = self.actions.len() + 1;
        let text = render_subgoal(self.recipes, &sg, &mut self.rng);
        for &a in actions {
            self.act(a)?;
        }
        self.segments.push(Segment {
            text,
            start,
            end: self.actions.len() + 1,
        });
        Ok(())
    }

    fn visit(&mut self, sym: Symbol, pos: Pos, path: Vec<Action>) -> Result<()> {
        debug_assert_eq!(
            path_to_target(&self.state, self.state.agent, pos).map(|p| p.len()),
            Some(path.len())
        );
        self.run(Subgoal::GoTo(sym), &path)
    }

    /// Walking distance to the closest resource a subtree still needs.
    fn subtree_distance(&self, item: ItemId) -> usize {
        let need = self.recipes.raw_requirements(item);
        need.iter()
            .enumerate()
            .filter(|&(_, &n)| n > 0)
            .filter_map(|(raw, _)| self.recipes.source_of(raw))
            .filter_map(|sym| nearest(&self.state, sym).map(|(_, p)| p.len()))
            .min()
            .unwrap_or(usize::MAX)
    }

    fn obtain(&mut self, item: ItemId) -> Result<()> {
        let Some(recipe) = self.recipes.recipe(item).cloned() else {
            let sym = self.recipes.source_of(item).expect("non-crafted items are gathered");
            let (pos, path) = nearest(&self.state, sym)
                .ok_or_else(|| CraftError::Planning(format!("no reachable {} left", sym.name())))?;
            self.visit(sym, pos, path)?;
            let before = self.state.inventory[item];
            self.run(Subgoal::Gather(sym), &[Action::Interact])?;
            if self.state.inventory[item] != before + 1 {
                return Err(CraftError::Planning(format!("gathering {} failed", sym.name())));
            }
            return Ok(());
        };
        let mut pending: Vec<ItemId> = recipe
            .inputs
            .iter()
            .flat_map(|&(i, n)| std::iter::repeat_n(i, n as usize))
            .collect();
        while !pending.is_empty() {
            let k = (0..pending.len())
                .min_by_key(|&k| (self.subtree_distance(pending[k]), k))
                .expect("pending is non-empty");
            let child = pending.remove(k);
            self.obtain(child)?;
        }
        let sym = recipe.station.symbol();
        let (pos, path) =
            nearest(&self.state, sym).ok_or_else(|| CraftError::Planning(format!("no reachable {}", sym.name())))?;
        self.visit(sym, pos, path)?;
        let crafted = self
            .recipes
            .craft_at(recipe.station, &self.state.inventory)
            .map(|r| r.output);
        if crafted != Some(item) {
            return Err(CraftError::Planning(format!(
                "{} would craft {:?} instead of {}",
                sym.name(),
                crafted.map(|c| self.recipes.item_name(c)),
                self.recipes.item_name(item)
            )));
        }
        self.run(Subgoal::Craft(item, recipe.station), &[Action::Interact])
    }
}

/// Solves `task` from `initial`, recording the full observation before each
/// action and one segment per subgoal. Navigation subgoals that need no
/// movement are omitted. Template choices are seeded by the task seed.
pub fn oracle_rollout(
    recipes: &RecipeGraph,
    task: &TaskSpec,
    initial: &WorldState,
    budget: usize,
) -> Result<Trajectory> {
    let goal = recipes
        .item_id(&task.goal)
        .ok_or_else(|| CraftError::Planning(format!("unknown goal item `{}`", task.goal)))?;
    let mut p = Planner {
        recipes,
        goal,
        budget,
        state: initial.clone(),
        observations: Vec::new(),
        actions: Vec::new(),
        segments: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(task.seed ^ 0x7e3a_91c5_d2b4_f608),
        success: false,
    };
    p.obtain(goal)?;
    if !p.success {
        return Err(CraftError::Planning("plan finished without the goal".into()));
    }
    Ok(Trajectory {
        task: task.clone(),
        observations: p.observations,
        actions: p.actions,
        segments: p.segments,
        success: true,
    })
}
