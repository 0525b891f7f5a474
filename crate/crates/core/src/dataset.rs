//! Vocabulary, tokenization, trajectory files, annotation dropping and
//! batching.
//!
//! Trajectory files hold one JSON object per line with the fields `task`
//! (`seed`, `difficulty`, `grid_size`, `goal`, `goal_text`),
//! `observations` (full-view symbol strings), `actions`, `segments`
//! (`text`, `start`, `end`, 1-based half-open) and `success`.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use langaux_craftworld::{Observability, Observation, Trajectory, CELL_TOKENS, INVENTORY_CLAMP};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Target value marking a padded action position.
pub const IGNORE: usize = usize::MAX;

/// Distinct observation token values: cell tokens, then clamped inventory counts.
pub const OBS_VOCAB: usize = CELL_TOKENS + INVENTORY_CLAMP as usize + 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocabulary {
    /// Reserved tokens first, then every distinct word in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    /// Goal texts and instruction texts of a corpus.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        Self::build(
            trajs.iter().flat_map(|t| {
                std::iter::once(t.task.goal_text.as_str()).chain(t.segments.iter().map(|s| s.text.as_str()))
            }),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Config("vocabulary file repeats a token".into()));
        }
        Ok(v)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.tokenize(text)
}

pub fn to_jsonl(trajs: &[Trajectory]) -> Result<String> {
    let mut s = String::new();
    for t in trajs {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Trajectory>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Clears the segments of all but `round(keep_fraction * len)` trajectories,
/// chosen by a seeded shuffle.
pub fn drop_annotations(trajs: &[Trajectory], keep_fraction: f64, seed: u64) -> Result<Vec<Trajectory>> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Config(format!(
            "keep fraction must lie in [0, 1], got {keep_fraction}"
        )));
    }
    let keep = (keep_fraction * trajs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let kept: BTreeSet<usize> = order[..keep].iter().copied().collect();
    Ok(trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            if !kept.contains(&i) {
                t.segments.clear();
            }
            t
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSegment {
    /// Word ids without BOS/EOS.
    pub tokens: Vec<usize>,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl InstructionSegment {
    /// `[BOS, x_1..x_l]`.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.tokens.iter().copied()).collect()
    }

    /// `[x_1..x_l, EOS]`.
    pub fn decoder_target(&self) -> Vec<usize> {
        self.tokens.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsSpec {
    pub observability: Observability,
    pub window: usize,
}

impl ObsSpec {
    pub fn side(&self, grid_size: usize) -> usize {
        match self.observability {
            Observability::Full => grid_size,
            Observability::Partial => self.window,
        }
    }

    pub fn tokens_per_step(&self, grid_size: usize, items: usize) -> usize {
        self.side(grid_size).pow(2) + items
    }

    /// Model tokens of one stored full observation.
    pub fn encode(&self, full: &Observation) -> Result<Vec<u16>> {
        let view = match self.observability {
            Observability::Full => full.clone(),
            Observability::Partial => full.crop(self.window)?,
        };
        Ok(view
            .cells
            .iter()
            .copied()
            .chain(view.inventory.iter().map(|&n| CELL_TOKENS as u16 + n))
            .collect())
    }
}

/// A trajectory tokenized for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub goal_name: String,
    pub layout_bucket: u64,
    pub difficulty: u8,
    pub steps: usize,
    pub obs: Vec<u16>,
    pub actions: Vec<usize>,
    pub goal: Vec<usize>,
    /// Empty when the trajectory carries no annotations.
    pub segments: Vec<InstructionSegment>,
}

impl Example {
    pub fn annotated(&self) -> bool {
        !self.segments.is_empty()
    }

    pub fn intervals(&self) -> Vec<(usize, usize)> {
        self.segments.iter().map(|s| (s.start, s.end)).collect()
    }

    pub fn key(&self) -> (String, u64) {
        (self.goal_name.clone(), self.layout_bucket)
    }

    /// Index of the segment active at 1-based step `t`.
    pub fn segment_at(&self, t: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.start <= t && t < s.end)
    }
}

pub fn encode_trajectory(t: &Trajectory, vocab: &Vocabulary, spec: &ObsSpec) -> Result<Example> {
    let mut obs = Vec::new();
    for o in &t.observations {
        obs.extend(spec.encode(&Observation::decode(o)?)?);
    }
    Ok(Example {
        goal_name: t.task.goal.clone(),
        layout_bucket: t.task.layout_bucket(),
        difficulty: t.task.difficulty,
        steps: t.actions.len(),
        obs,
        actions: t.actions.clone(),
        goal: vocab.tokenize(&t.task.goal_text),
        segments: t
            .segments
            .iter()
            .map(|s| InstructionSegment {
                tokens: vocab.tokenize(&s.text),
                start: s.start,
                end: s.end,
                text: s.text.clone(),
            })
            .collect(),
    })
}

/// Index lists for one epoch: a shuffle seeded by `(seed, epoch)` cut into
/// chunks of `batch_size`; the last chunk may be shorter.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Padded view of a batch. Observation and goal padding is [`PAD`]; action
/// padding is [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub max_steps: usize,
    pub obs_tokens: usize,
    pub max_goal: usize,
    /// `[B, max_steps, obs_tokens]`.
    pub obs: Vec<u16>,
    /// `[B, max_steps]`.
    pub actions: Vec<usize>,
    /// `[B, max_goal]`.
    pub goal: Vec<usize>,
    pub step_mask: Vec<bool>,
    pub goal_mask: Vec<bool>,
    /// Per row; rows without annotations skip the language term.
    pub annotated: Vec<bool>,
    pub segments: Vec<Vec<InstructionSegment>>,
}

impl Batch {
    pub fn assemble(examples: &[Example], indices: &[usize]) -> Result<Self> {
        let rows: Vec<&Example> = indices.iter().map(|&i| &examples[i]).collect();
        let first = rows.first().ok_or(Error::Empty("batch"))?;
        let k = first.obs.len() / first.steps.max(1);
        let max_steps = rows.iter().map(|e| e.steps).max().unwrap_or(0);
        let max_goal = rows.iter().map(|e| e.goal.len()).max().unwrap_or(0);
        let b = rows.len();
        let mut batch = Batch {
            indices: indices.to_vec(),
            max_steps,
            obs_tokens: k,
            max_goal,
            obs: vec![PAD as u16; b * max_steps * k],
            actions: vec![IGNORE; b * max_steps],
            goal: vec![PAD; b * max_goal],
            step_mask: vec![false; b * max_steps],
            goal_mask: vec![false; b * max_goal],
            annotated: rows.iter().map(|e| e.annotated()).collect(),
            segments: rows.iter().map(|e| e.segments.clone()).collect(),
        };
        for (r, e) in rows.iter().enumerate() {
            if e.obs.len() != e.steps * k {
                return Err(Error::Config("examples in a batch disagree on tokens per step".into()));
            }
            batch.obs[r * max_steps * k..r * max_steps * k + e.obs.len()].copy_from_slice(&e.obs);
            batch.actions[r * max_steps..r * max_steps + e.steps].copy_from_slice(&e.actions);
            batch.step_mask[r * max_steps..r * max_steps + e.steps].fill(true);
            batch.goal[r * max_goal..r * max_goal + e.goal.len()].copy_from_slice(&e.goal);
            batch.goal_mask[r * max_goal..r * max_goal + e.goal.len()].fill(true);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded steps of row `r`.
    pub fn steps(&self, r: usize) -> usize {
        self.step_mask[r * self.max_steps..(r + 1) * self.max_steps]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_examples() {
        let v = Vocabulary::build(["craft plank"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("craft"), Some(4));
        assert_eq!(v.id("plank"), Some(5));
        assert_eq!(v.tokenize("craft plank"), vec![4, 5]);
        assert_eq!(v.tokenize("Craft Plank"), v.tokenize("craft plank"));
        assert_eq!(v.tokenize(""), Vec::<usize>::new());
        assert_eq!(v.tokenize("craft wood"), vec![4, UNK]);
        assert_eq!(Vocabulary::build(["", "craft plank"]), v);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn batches_cover_each_index_once() {
        let b = make_batches(10, 3, 7, 0).unwrap();
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 3, 7, 0).unwrap());
        assert_ne!(b, make_batches(10, 3, 7, 1).unwrap());
        assert!(make_batches(10, 0, 7, 0).is_err());
    }
}
