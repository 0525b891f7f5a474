//! Recipe graph and its text format.
//!
//! ```text
//! # comment
//! [gather]
//! tree = wood                      # resource symbol = yielded item
//! [recipes]
//! plank = wood @ workbench ; depth 2
//! axe = plank ingot @ anvil ; depth 3   # repeat an input to require it twice
//! ```
//!
//! Depth is the length of the longest chain of steps needed to obtain an
//! item: gathered items have depth 1, a crafted item has one more than its
//! deepest input. Declared depths must match.

use std::collections::HashMap;

use crate::error::{CraftError, Result};
use crate::world::Symbol;

pub type ItemId = usize;

pub const MAX_DEPTH: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Station {
    Workbench,
    Furnace,
    Anvil,
}

impl Station {
    pub const ALL: [Station; 3] = [Station::Workbench, Station::Furnace, Station::Anvil];

    pub fn name(self) -> &'static str {
        match self {
            Station::Workbench => "workbench",
            Station::Furnace => "furnace",
            Station::Anvil => "anvil",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn symbol(self) -> Symbol {
        match self {
            Station::Workbench => Symbol::Workbench,
            Station::Furnace => Symbol::Furnace,
            Station::Anvil => Symbol::Anvil,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recipe {
    pub output: ItemId,
    /// Input multiset as (item, count), sorted by item id.
    pub inputs: Vec<(ItemId, u32)>,
    pub station: Station,
}

impl Recipe {
    pub fn input_count(&self) -> u32 {
        self.inputs.iter().map(|&(_, n)| n).sum()
    }

    pub fn satisfied_by(&self, inventory: &[u32]) -> bool {
        self.inputs.iter().all(|&(item, n)| inventory[item] >= n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecipeGraph {
    items: Vec<String>,
    recipes: Vec<Option<Recipe>>,
    gather: Vec<(Symbol, ItemId)>,
    depth: Vec<u8>,
}

pub const DEFAULT_RECIPES: &str = "\
# Gathering: resource symbol = yielded item
[gather]
tree = wood
rock = stone
grass = fiber
ore = iron
coal = coal

# Crafting: output = inputs @ station ; depth n
[recipes]
plank = wood @ workbench ; depth 2
rope = fiber @ workbench ; depth 2
brick = stone @ furnace ; depth 2
ingot = iron coal @ furnace ; depth 2
ladder = plank rope @ workbench ; depth 3
pickaxe = plank stone @ workbench ; depth 3
axe = plank ingot @ anvil ; depth 3
lantern = ingot fiber @ anvil ; depth 3
bridge = ladder brick @ workbench ; depth 4
drill = pickaxe ingot @ anvil ; depth 4
cart = axe brick @ furnace ; depth 4
wagon = cart rope @ workbench ; depth 5
tower = bridge lantern @ anvil ; depth 5
workshop = drill brick @ furnace ; depth 5
";

fn parse_err(line: usize, msg: impl Into<String>) -> CraftError {
    CraftError::Recipe {
        line,
        message: msg.into(),
    }
}

impl Default for RecipeGraph {
    fn default() -> Self {
        Self::parse(DEFAULT_RECIPES).expect("built-in recipe table is valid")
    }
}

impl RecipeGraph {
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Gather,
            Recipes,
        }
        let mut section = Section::None;
        let mut items: Vec<String> = Vec::new();
        let mut index: HashMap<String, ItemId> = HashMap::new();
        let mut intern = |name: &str, items: &mut Vec<String>| -> ItemId {
            *index.entry(name.to_string()).or_insert_with(|| {
                items.push(name.to_string());
                items.len() - 1
            })
        };
        let mut gather: Vec<(Symbol, ItemId)> = Vec::new();
        // (line, output, inputs, station, declared depth)
        let mut raw_recipes: Vec<(usize, ItemId, Vec<ItemId>, Station, u8)> = Vec::new();

        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[gather]" => {
                    section = Section::Gather;
                    continue;
                }
                "[recipes]" => {
                    section = Section::Recipes;
                    continue;
                }
                _ => {}
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            match section {
                Section::None => return Err(parse_err(lineno, "entry outside of a section")),
                Section::Gather => {
                    let symbol = Symbol::parse_resource(key)
                        .ok_or_else(|| parse_err(lineno, format!("unknown resource `{key}`")))?;
                    if gather.iter().any(|&(s, _)| s == symbol) {
                        return Err(parse_err(lineno, format!("resource `{key}` listed twice")));
                    }
                    if value.split_whitespace().count() != 1 {
                        return Err(parse_err(lineno, "a resource yields exactly one item"));
                    }
                    let item = intern(value, &mut items);
                    gather.push((symbol, item));
                }
                Section::Recipes => {
                    let (lhs, depth) = value
                        .split_once(';')
                        .ok_or_else(|| parse_err(lineno, "missing `; depth n`"))?;
                    let depth = depth
                        .trim()
                        .strip_prefix("depth")
                        .and_then(|d| d.trim().parse::<u8>().ok())
                        .ok_or_else(|| parse_err(lineno, "malformed depth"))?;
                    let (inputs, station) = lhs
                        .split_once('@')
                        .ok_or_else(|| parse_err(lineno, "missing `@ station`"))?;
                    let station = Station::parse(station.trim())
                        .ok_or_else(|| parse_err(lineno, format!("unknown station `{}`", station.trim())))?;
                    let output = intern(key, &mut items);
                    let inputs: Vec<ItemId> = inputs.split_whitespace().map(|s| intern(s, &mut items)).collect();
                    if inputs.is_empty() {
                        return Err(parse_err(lineno, "recipe has no inputs"));
                    }
                    raw_recipes.push((lineno, output, inputs, station, depth));
                }
            }
        }

        let mut recipes: Vec<Option<Recipe>> = vec![None; items.len()];
        for (lineno, output, inputs, station, _) in &raw_recipes {
            if gather.iter().any(|&(_, it)| it == *output) {
                return Err(parse_err(
                    *lineno,
                    format!("`{}` is both gathered and crafted", items[*output]),
                ));
            }
            if recipes[*output].is_some() {
                return Err(parse_err(*lineno, format!("second recipe for `{}`", items[*output])));
            }
            let mut counts: Vec<(ItemId, u32)> = Vec::new();
            for &i in inputs {
                match counts.iter_mut().find(|(it, _)| *it == i) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((i, 1)),
                }
            }
            counts.sort_unstable();
            recipes[*output] = Some(Recipe {
                output: *output,
                inputs: counts,
                station: *station,
            });
        }

        for (id, name) in items.iter().enumerate() {
            let gathered = gather.iter().any(|&(_, it)| it == id);
            if !gathered && recipes[id].is_none() {
                return Err(parse_err(
                    0,
                    format!("item `{name}` can be neither gathered nor crafted"),
                ));
            }
        }

        let mut graph = Self {
            items,
            recipes,
            gather,
            depth: Vec::new(),
        };
        graph.depth = graph.compute_depths()?;
        for (lineno, output, _, _, declared) in &raw_recipes {
            if graph.depth[*output] != *declared {
                return Err(parse_err(
                    *lineno,
                    format!(
                        "`{}` declared depth {declared} but its chain depth is {}",
                        graph.items[*output], graph.depth[*output]
                    ),
                ));
            }
        }
        if let Some(id) = (0..graph.items.len()).find(|&i| graph.depth[i] > MAX_DEPTH) {
            return Err(parse_err(
                0,
                format!("`{}` is deeper than {MAX_DEPTH}", graph.items[id]),
            ));
        }
        Ok(graph)
    }

    fn compute_depths(&self) -> Result<Vec<u8>> {
        // 0 = unvisited, 1 = in progress, 2 = done
        fn visit(g: &RecipeGraph, id: ItemId, state: &mut [u8], depth: &mut [u8]) -> Result<u8> {
            match state[id] {
                2 => return Ok(depth[id]),
                1 => {
                    return Err(CraftError::Recipe {
                        line: 0,
                        message: format!("recipe cycle through `{}`", g.items[id]),
                    })
                }
                _ => {}
            }
            state[id] = 1;
            let d = match &g.recipes[id] {
                None => 1,
                Some(r) => {
                    let mut deepest = 0;
                    for &(input, _) in &r.inputs {
                        deepest = deepest.max(visit(g, input, state, depth)?);
                    }
                    deepest.saturating_add(1)
                }
            };
            state[id] = 2;
            depth[id] = d;
            Ok(d)
        }
        let mut state = vec![0u8; self.items.len()];
        let mut depth = vec![0u8; self.items.len()];
        for id in 0..self.items.len() {
            visit(self, id, &mut state, &mut depth)?;
        }
        Ok(depth)
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn item_name(&self, id: ItemId) -> &str {
        &self.items[id]
    }

    pub fn item_id(&self, name: &str) -> Option<ItemId> {
        self.items.iter().position(|n| n == name)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn depth(&self, id: ItemId) -> u8 {
        self.depth[id]
    }

    pub fn recipe(&self, id: ItemId) -> Option<&Recipe> {
        self.recipes[id].as_ref()
    }

    pub fn gatherables(&self) -> &[(Symbol, ItemId)] {
        &self.gather
    }

    pub fn yield_of(&self, symbol: Symbol) -> Option<ItemId> {
        self.gather.iter().find(|&&(s, _)| s == symbol).map(|&(_, i)| i)
    }

    /// Resource symbol that yields `item`, if it is gathered.
    pub fn source_of(&self, item: ItemId) -> Option<Symbol> {
        self.gather.iter().find(|&&(_, i)| i == item).map(|&(s, _)| s)
    }

    pub fn items_at_depth(&self, depth: u8) -> Vec<ItemId> {
        (0..self.items.len()).filter(|&i| self.depth[i] == depth).collect()
    }

    /// The recipe a station produces for this inventory: the deepest
    /// satisfied recipe at that station, ties going to declaration order.
    pub fn craft_at(&self, station: Station, inventory: &[u32]) -> Option<&Recipe> {
        let mut best: Option<&Recipe> = None;
        for r in self.recipes.iter().flatten() {
            if r.station != station || !r.satisfied_by(inventory) {
                continue;
            }
            if best.is_none_or(|b| self.depth[r.output] > self.depth[b.output]) {
                best = Some(r);
            }
        }
        best
    }

    /// Raw resource units (per item) consumed to obtain one `item`.
    pub fn raw_requirements(&self, item: ItemId) -> Vec<u32> {
        let mut need = vec![0u32; self.items.len()];
        self.accumulate_raw(item, 1, &mut need);
        need
    }

    fn accumulate_raw(&self, item: ItemId, times: u32, need: &mut [u32]) {
        match &self.recipes[item] {
            None => need[item] += times,
            Some(r) => {
                for &(input, n) in &r.inputs {
                    self.accumulate_raw(input, times * n, need);
                }
            }
        }
    }

    /// Stations used anywhere in the recipe tree of `item`.
    pub fn stations_needed(&self, item: ItemId) -> Vec<Station> {
        let mut out = Vec::new();
        self.collect_stations(item, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_stations(&self, item: ItemId, out: &mut Vec<Station>) {
        if let Some(r) = &self.recipes[item] {
            out.push(r.station);
            for &(input, _) in &r.inputs {
                self.collect_stations(input, out);
            }
        }
    }

    /// Renders the graph back to its text format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[gather]\n");
        for &(sym, item) in &self.gather {
            s.push_str(&format!("{} = {}\n", sym.name(), self.items[item]));
        }
        s.push_str("[recipes]\n");
        for r in self.recipes.iter().flatten() {
            let inputs: Vec<&str> = r
                .inputs
                .iter()
                .flat_map(|&(i, n)| std::iter::repeat_n(self.items[i].as_str(), n as usize))
                .collect();
            s.push_str(&format!(
                "{} = {} @ {} ; depth {}\n",
                self.items[r.output],
                inputs.join(" "),
                r.station.name(),
                self.depth[r.output]
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_depths_and_goal_counts() {
        let g = RecipeGraph::default();
        for d in 1..=MAX_DEPTH {
            assert!(g.items_at_depth(d).len() >= 3, "depth {d}");
        }
        let plank = g.item_id("plank").unwrap();
        assert_eq!(g.depth(plank), 2);
        assert_eq!(g.depth(g.item_id("wagon").unwrap()), 5);
        assert_eq!(g.recipe(g.item_id("wood").unwrap()), None);
    }

    #[test]
    fn text_roundtrip() {
        let g = RecipeGraph::default();
        assert_eq!(RecipeGraph::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn rejects_cycles_wrong_depths_and_unknown_names() {
        let cyc = "[gather]\ntree = wood\n[recipes]\na = b @ anvil ; depth 2\nb = a @ anvil ; depth 2\n";
        assert!(RecipeGraph::parse(cyc).is_err());
        let depth = "[gather]\ntree = wood\n[recipes]\nplank = wood @ workbench ; depth 3\n";
        assert!(RecipeGraph::parse(depth).unwrap_err().to_string().contains("depth"));
        let station = "[gather]\ntree = wood\n[recipes]\nplank = wood @ kitchen ; depth 2\n";
        assert!(RecipeGraph::parse(station).is_err());
        let orphan = "[gather]\ntree = wood\n[recipes]\nplank = nails @ workbench ; depth 2\n";
        assert!(RecipeGraph::parse(orphan).is_err());
    }

    #[test]
    fn raw_requirements_expand_multisets() {
        let g = RecipeGraph::parse(
            "[gather]\ntree = wood\n[recipes]\nplank = wood wood @ workbench ; depth 2\nbox = plank plank @ workbench ; depth 3\n",
        )
        .unwrap();
        let need = g.raw_requirements(g.item_id("box").unwrap());
        assert_eq!(need[g.item_id("wood").unwrap()], 4);
    }

    #[test]
    fn craft_prefers_deepest_satisfied_recipe() {
        let g = RecipeGraph::default();
        let mut inv = vec![0u32; g.item_count()];
        inv[g.item_id("cart").unwrap()] = 1;
        inv[g.item_id("rope").unwrap()] = 1;
        inv[g.item_id("fiber").unwrap()] = 1;
        let r = g.craft_at(Station::Workbench, &inv).unwrap();
        assert_eq!(g.item_name(r.output), "wagon");
        assert!(g.craft_at(Station::Anvil, &inv).is_none());
    }
}
