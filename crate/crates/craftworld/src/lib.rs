//! Procedurally generated crafting gridworld with a recipe graph, a
//! scripted expert that narrates its subgoals, and a held-out task split.

mod error;
mod generate;
mod oracle;
mod recipes;
mod world;

pub use error::{CraftError, Result};
pub use generate::{fresh_seed, generate_task, goal_text, split_tasks, GenConfig, Split, TaskSpec, LAYOUT_BUCKETS};
pub use oracle::{oracle_rollout, parse_instruction, path_to_target, render_subgoal, Segment, Subgoal, Trajectory};
pub use recipes::{ItemId, Recipe, RecipeGraph, Station, DEFAULT_RECIPES, MAX_DEPTH};
pub use world::{
    observe, step, Action, Observability, Observation, Pos, StepOutcome, Symbol, WorldState, CELL_TOKENS,
    INVENTORY_CLAMP,
};
