use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub goal: String,
    pub layout_bucket: u64,
    pub task_seed: u64,
    /// Crafting depth of the goal.
    pub difficulty: u8,
    pub success: bool,
    pub steps: usize,
    /// Greedy instruction decodes, recorded whenever the prediction changes.
    pub predicted: Vec<String>,
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("episode results"));
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Exact-match fraction over target positions that are not `pad`.
pub fn token_accuracy(predicted: &[usize], target: &[usize], pad: usize) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::Config(format!(
            "prediction has {} positions, target has {}",
            predicted.len(),
            target.len()
        )));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(target) {
        if *t != pad {
            n += 1;
            hit += usize::from(p == t);
        }
    }
    if n == 0 {
        return Err(Error::Empty("non-pad target positions"));
    }
    Ok(hit as f64 / n as f64)
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence-level BLEU without smoothing. Orders `n` for which either side
/// has fewer than `n` tokens are left out of the geometric mean; any
/// remaining order with zero clipped matches gives 0.
pub fn bleu(hypothesis: &[usize], reference: &[usize], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("BLEU reference"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let (h, r) = (hypothesis.len(), reference.len());
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n.max(1) {
        if h < n || r < n {
            continue;
        }
        let hyp = ngrams(hypothesis, n);
        let refs = ngrams(reference, n);
        let clipped: usize = hyp.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / (h - n + 1) as f64).ln();
        orders += 1;
    }
    let bp = if h < r { (1.0 - r as f64 / h as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / orders as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub difficulty: u8,
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
}

/// Success grouped by difficulty, ascending.
pub fn difficulty_breakdown(results: &[EpisodeResult]) -> Vec<DifficultyRow> {
    let mut groups: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for r in results {
        let g = groups.entry(r.difficulty).or_default();
        g.0 += 1;
        g.1 += usize::from(r.success);
    }
    groups
        .into_iter()
        .map(|(difficulty, (episodes, successes))| DifficultyRow {
            difficulty,
            episodes,
            successes,
            rate: successes as f64 / episodes as f64,
        })
        .collect()
}
