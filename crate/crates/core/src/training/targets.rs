//! Decoder inputs and targets for each auxiliary objective.

use crate::dataset::{Example, InstructionSegment, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{cross_cap, validate_intervals, DecodeItem, EncoderKind, ExampleRows, MaskMode, ModelConfig};

/// Decoder id of action `a` for the forward-prediction objective.
pub const ACTION_TOKEN_BASE: usize = 4;

/// What the decoder is trained to emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aux {
    /// Each active instruction, under the configured cross mask.
    Lang,
    /// The demonstrated actions from each segment onset to the end.
    Forward,
    /// The goal text, attending every latent.
    Goal,
    /// Every instruction joined by EOS, from the first latent only.
    Plan,
    /// Every instruction joined by EOS, from goal latents and optionally the
    /// latents of every demonstrated step.
    Probe { observations: bool },
}

/// `[4 + a_start, ..., 4 + a_T, EOS]` for a 1-based segment onset.
pub fn forward_targets(actions: &[usize], start: usize) -> Vec<usize> {
    actions[start - 1..]
        .iter()
        .map(|&a| ACTION_TOKEN_BASE + a)
        .chain(std::iter::once(EOS))
        .collect()
}

/// `x_1 EOS x_2 EOS ... x_n EOS EOS`; the doubled EOS ends the block.
pub fn plan_tokens(segments: &[InstructionSegment]) -> Vec<usize> {
    let mut out = Vec::new();
    for s in segments {
        out.extend_from_slice(&s.tokens);
        out.push(EOS);
    }
    out.push(EOS);
    out
}

/// Whether a generated plan has reached its terminator.
pub fn plan_complete(tokens: &[usize]) -> bool {
    tokens.ends_with(&[EOS, EOS]) || tokens == [EOS]
}

fn shifted(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(target[..target.len() - 1].iter().copied())
        .collect()
}

/// Decoder items and flat targets for one encoded example, or `None` when
/// the example carries nothing to supervise.
pub fn aux_items(
    aux: Aux,
    ex: &Example,
    rows: &ExampleRows,
    cfg: &ModelConfig,
) -> Result<Option<(Vec<DecodeItem>, Vec<usize>)>> {
    let t = ex.steps;
    let needs_segments = !matches!(aux, Aux::Goal);
    if needs_segments && !ex.annotated() {
        return Ok(None);
    }
    if needs_segments {
        validate_intervals(&ex.intervals(), t)?;
    }
    let goal_keys = if cfg.goal_keys { rows.goal_rows() } else { Vec::new() };
    let gk = goal_keys.len();
    let keyed = |latent: Vec<usize>| -> Vec<usize> { goal_keys.iter().copied().chain(latent).collect() };
    let mut items = Vec::new();
    let mut targets = Vec::new();
    match (aux, cfg.encoder) {
        (Aux::Lang | Aux::Forward, EncoderKind::Sequence) => {
            let tgts: Vec<Vec<usize>> = ex
                .segments
                .iter()
                .map(|s| match aux {
                    Aux::Lang => s.decoder_target(),
                    _ => forward_targets(&ex.actions, s.start),
                })
                .collect();
            let inputs: Vec<Vec<usize>> = tgts.iter().map(|x| shifted(x)).collect();
            let caps: Vec<usize> = ex
                .segments
                .iter()
                .map(|s| gk + cross_cap(cfg.mask_mode, (s.start, s.end), t))
                .collect();
            items.push(DecodeItem::from_instructions(
                &inputs,
                keyed(rows.latent_rows(0)),
                &caps,
            ));
            targets = tgts.concat();
        }
        (Aux::Lang | Aux::Forward, EncoderKind::State) => {
            for step in 0..t {
                let i = ex
                    .segment_at(step + 1)
                    .ok_or_else(|| Error::Interval(format!("no segment covers step {}", step + 1)))?;
                let s = &ex.segments[i];
                let target = match aux {
                    Aux::Lang => s.decoder_target(),
                    _ => forward_targets(&ex.actions, s.start),
                };
                let keys = keyed(rows.latent_rows(step));
                let n = keys.len();
                items.push(DecodeItem::from_instructions(&[shifted(&target)], keys, &[n]));
                targets.extend(target);
            }
        }
        (Aux::Goal, _) => {
            if ex.goal.is_empty() {
                return Ok(None);
            }
            let target: Vec<usize> = ex.goal.iter().copied().chain(std::iter::once(EOS)).collect();
            let steps = match cfg.encoder {
                EncoderKind::Sequence => 1,
                EncoderKind::State => t,
            };
            for step in 0..steps {
                let keys = rows.latent_rows(step);
                let n = keys.len();
                items.push(DecodeItem::from_instructions(&[shifted(&target)], keys, &[n]));
                targets.extend(target.iter().copied());
            }
        }
        (Aux::Plan, _) => {
            let target = plan_tokens(&ex.segments);
            let latent = rows.latent_rows(0);
            let cap = match cfg.encoder {
                EncoderKind::Sequence => gk + 1,
                EncoderKind::State => gk + latent.len(),
            };
            items.push(DecodeItem::from_instructions(
                &[shifted(&target)],
                keyed(latent),
                &[cap],
            ));
            targets = target;
        }
        (Aux::Probe { observations }, _) => {
            let target = plan_tokens(&ex.segments);
            let mut keys = rows.goal_rows();
            if keys.is_empty() {
                return Err(Error::Empty("goal tokens for the probe"));
            }
            if observations {
                match rows {
                    ExampleRows::Sequence { .. } => keys.extend(rows.latent_rows(0)),
                    // One CLS summary per step keeps the key count linear in T.
                    ExampleRows::State { base, .. } => keys.extend(base.iter().copied()),
                }
            }
            let n = keys.len();
            items.push(DecodeItem::from_instructions(&[shifted(&target)], keys, &[n]));
            targets = target;
        }
    }
    Ok(Some((items, targets)))
}

/// Cross-attention caps applied to each instruction of a sequence-encoder
/// example under `mode`, counted over latents only.
pub fn instruction_caps(ex: &Example, mode: MaskMode) -> Vec<usize> {
    ex.segments
        .iter()
        .map(|s| cross_cap(mode, (s.start, s.end), ex.steps))
        .collect()
}
