use crate::error::{CraftError, Result};
use crate::recipes::{ItemId, RecipeGraph, Station};

/// Cell contents. The alphabet is closed; `Symbol::COUNT` cell kinds exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Empty,
    Wall,
    Tree,
    Rock,
    Grass,
    Ore,
    Coal,
    Workbench,
    Furnace,
    Anvil,
}

impl Symbol {
    pub const COUNT: usize = 10;
    pub const ALL: [Symbol; Symbol::COUNT] = [
        Symbol::Empty,
        Symbol::Wall,
        Symbol::Tree,
        Symbol::Rock,
        Symbol::Grass,
        Symbol::Ore,
        Symbol::Coal,
        Symbol::Workbench,
        Symbol::Furnace,
        Symbol::Anvil,
    ];
    pub const RESOURCES: [Symbol; 5] = [Symbol::Tree, Symbol::Rock, Symbol::Grass, Symbol::Ore, Symbol::Coal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Symbol::Empty => "empty",
            Symbol::Wall => "wall",
            Symbol::Tree => "tree",
            Symbol::Rock => "rock",
            Symbol::Grass => "grass",
            Symbol::Ore => "ore",
            Symbol::Coal => "coal",
            Symbol::Workbench => "workbench",
            Symbol::Furnace => "furnace",
            Symbol::Anvil => "anvil",
        }
    }

    /// Single-character code; the agent-occupied variant is lowercase
    /// (`@` for an empty cell).
    pub fn code(self) -> char {
        match self {
            Symbol::Empty => '.',
            Symbol::Wall => '#',
            Symbol::Tree => 'T',
            Symbol::Rock => 'R',
            Symbol::Grass => 'G',
            Symbol::Ore => 'O',
            Symbol::Coal => 'C',
            Symbol::Workbench => 'W',
            Symbol::Furnace => 'F',
            Symbol::Anvil => 'A',
        }
    }

    pub fn from_code(c: char) -> Option<(Symbol, bool)> {
        if c == '@' {
            return Some((Symbol::Empty, true));
        }
        let upper = c.to_ascii_uppercase();
        let sym = Self::ALL.into_iter().find(|s| s.code() == upper)?;
        Some((sym, c.is_ascii_lowercase()))
    }

    pub fn agent_code(self) -> char {
        match self {
            Symbol::Empty => '@',
            s => s.code().to_ascii_lowercase(),
        }
    }

    pub fn parse_resource(name: &str) -> Option<Symbol> {
        Self::RESOURCES.into_iter().find(|s| s.name() == name)
    }

    pub fn station(self) -> Option<Station> {
        match self {
            Symbol::Workbench => Some(Station::Workbench),
            Symbol::Furnace => Some(Station::Furnace),
            Symbol::Anvil => Some(Station::Anvil),
            _ => None,
        }
    }

    pub fn is_resource(self) -> bool {
        Self::RESOURCES.contains(&self)
    }

    pub fn is_interactable(self) -> bool {
        self.is_resource() || self.station().is_some()
    }

    pub fn walkable(self) -> bool {
        self != Symbol::Wall
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Interact,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; Action::COUNT] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Interact];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CraftError::Action(format!("action index {i} is outside 0..{}", Self::COUNT)))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Interact => "interact",
        }
    }

    fn delta(self) -> Option<(isize, isize)> {
        match self {
            Action::Up => Some((-1, 0)),
            Action::Down => Some((1, 0)),
            Action::Left => Some((0, -1)),
            Action::Right => Some((0, 1)),
            Action::Interact => None,
        }
    }
}

pub type Pos = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldState {
    pub size: usize,
    /// Row-major `size * size` cells.
    pub grid: Vec<Symbol>,
    pub agent: Pos,
    /// Count per item id.
    pub inventory: Vec<u32>,
    pub steps: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub done: bool,
    pub success: bool,
}

impl WorldState {
    pub fn cell(&self, (r, c): Pos) -> Symbol {
        self.grid[r * self.size + c]
    }

    pub fn set_cell(&mut self, (r, c): Pos, s: Symbol) {
        self.grid[r * self.size + c] = s;
    }

    pub fn offset(&self, (r, c): Pos, (dr, dc): (isize, isize)) -> Option<Pos> {
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        (nr < self.size && nc < self.size).then_some((nr, nc))
    }

    /// Cell acted on by `interact` from `pos`: the current cell when it is
    /// interactable, else the first interactable neighbour in reading order
    /// (up, left, right, down).
    pub fn interact_target(&self, pos: Pos) -> Option<Pos> {
        if self.cell(pos).is_interactable() {
            return Some(pos);
        }
        [(-1, 0), (0, -1), (0, 1), (1, 0)]
            .into_iter()
            .filter_map(|d| self.offset(pos, d))
            .find(|&p| self.cell(p).is_interactable())
    }

    pub fn has(&self, item: ItemId) -> bool {
        self.inventory[item] > 0
    }

    /// Grid codes, one line per row.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for r in 0..self.size {
            for c in 0..self.size {
                let sym = self.cell((r, c));
                s.push(if (r, c) == self.agent {
                    sym.agent_code()
                } else {
                    sym.code()
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Applies `action`. Moves into walls or off the grid leave the agent in
/// place. Gathering removes the resource; crafting consumes the inputs of
/// [`RecipeGraph::craft_at`]. Every call consumes one step of the budget.
pub fn step(recipes: &RecipeGraph, state: &WorldState, goal: ItemId, budget: usize, action: Action) -> StepOutcome {
    let mut next = state.clone();
    match action.delta() {
        Some(d) => {
            if let Some(p) = state.offset(state.agent, d) {
                if state.cell(p).walkable() {
                    next.agent = p;
                }
            }
        }
        None => {
            if let Some(target) = state.interact_target(state.agent) {
                let sym = state.cell(target);
                if let Some(item) = recipes.yield_of(sym) {
                    next.inventory[item] += 1;
                    next.set_cell(target, Symbol::Empty);
                } else if let Some(station) = sym.station() {
                    if let Some(r) = recipes.craft_at(station, &state.inventory) {
                        for &(input, n) in &r.inputs {
                            next.inventory[input] -= n;
                        }
                        next.inventory[r.output] += 1;
                    }
                }
            }
        }
    }
    next.steps += 1;
    let success = next.inventory[goal] > 0;
    let done = success || next.steps >= budget;
    StepOutcome {
        state: next,
        done,
        success,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Observability {
    Full,
    Partial,
}

impl Observability {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "partial" => Some(Self::Partial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Partial => "partial",
        }
    }
}

/// Inventory counts above this are reported as this value.
pub const INVENTORY_CLAMP: u32 = 3;

/// Per-cell tokens in `0..2 * Symbol::COUNT`: the symbol index, plus
/// `Symbol::COUNT` when the agent occupies the cell. Inventory tokens are
/// clamped counts in `0..=INVENTORY_CLAMP`, one per item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub side: usize,
    pub cells: Vec<u16>,
    pub inventory: Vec<u16>,
}

pub const CELL_TOKENS: usize = 2 * Symbol::COUNT;

fn cell_token(sym: Symbol, agent: bool) -> u16 {
    (sym.index() + if agent { Symbol::COUNT } else { 0 }) as u16
}

pub fn observe(state: &WorldState, mode: Observability, window: usize) -> Result<Observation> {
    let (side, cells) = match mode {
        Observability::Full => {
            let mut cells = Vec::with_capacity(state.size * state.size);
            for r in 0..state.size {
                for c in 0..state.size {
                    cells.push(cell_token(state.cell((r, c)), (r, c) == state.agent));
                }
            }
            (state.size, cells)
        }
        Observability::Partial => {
            if window == 0 || window % 2 == 0 {
                return Err(CraftError::Config(format!(
                    "observation window must be odd and positive, got {window}"
                )));
            }
            let half = (window / 2) as isize;
            let mut cells = Vec::with_capacity(window * window);
            for dr in -half..=half {
                for dc in -half..=half {
                    let tok = match state.offset(state.agent, (dr, dc)) {
                        Some(p) => cell_token(state.cell(p), p == state.agent),
                        None => cell_token(Symbol::Wall, false),
                    };
                    cells.push(tok);
                }
            }
            (window, cells)
        }
    };
    let inventory = state.inventory.iter().map(|&n| n.min(INVENTORY_CLAMP) as u16).collect();
    Ok(Observation { side, cells, inventory })
}

impl Observation {
    /// Egocentric `window x window` crop of a full observation, filling
    /// off-grid cells with wall.
    pub fn crop(&self, window: usize) -> Result<Observation> {
        if window == 0 || window % 2 == 0 {
            return Err(CraftError::Config(format!(
                "observation window must be odd and positive, got {window}"
            )));
        }
        let agent = self
            .cells
            .iter()
            .position(|&t| t as usize >= Symbol::COUNT)
            .ok_or_else(|| CraftError::Action("observation has no agent cell".into()))?;
        let (ar, ac) = ((agent / self.side) as isize, (agent % self.side) as isize);
        let half = (window / 2) as isize;
        let mut cells = Vec::with_capacity(window * window);
        for r in ar - half..=ar + half {
            for c in ac - half..=ac + half {
                let inside = (0..self.side as isize).contains(&r) && (0..self.side as isize).contains(&c);
                cells.push(if inside {
                    self.cells[r as usize * self.side + c as usize]
                } else {
                    cell_token(Symbol::Wall, false)
                });
            }
        }
        Ok(Observation {
            side: window,
            cells,
            inventory: self.inventory.clone(),
        })
    }

    /// Compact text form: cell codes row by row, then `|` and the
    /// comma-separated inventory counts.
    pub fn encode(&self) -> String {
        let mut s = String::with_capacity(self.cells.len() + 2 * self.inventory.len() + 1);
        for &t in &self.cells {
            let t = t as usize;
            let sym = Symbol::ALL[t % Symbol::COUNT];
            s.push(if t >= Symbol::COUNT {
                sym.agent_code()
            } else {
                sym.code()
            });
        }
        s.push('|');
        let inv: Vec<String> = self.inventory.iter().map(|n| n.to_string()).collect();
        s.push_str(&inv.join(","));
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = || CraftError::Action(format!("malformed observation `{text}`"));
        let (grid, inv) = text.split_once('|').ok_or_else(bad)?;
        let mut cells = Vec::with_capacity(grid.len());
        for ch in grid.chars() {
            let (sym, agent) = Symbol::from_code(ch).ok_or_else(bad)?;
            cells.push(cell_token(sym, agent));
        }
        let side = (cells.len() as f64).sqrt().round() as usize;
        if side * side != cells.len() || side == 0 {
            return Err(bad());
        }
        let inventory = if inv.is_empty() {
            Vec::new()
        } else {
            inv.split(',')
                .map(|v| v.parse::<u16>().map(|n| n.min(INVENTORY_CLAMP as u16)))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?
        };
        Ok(Self { side, cells, inventory })
    }
}
