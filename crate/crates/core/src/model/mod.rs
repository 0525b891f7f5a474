//! Encoders, policy head and instruction decoder.

mod config;
mod forward;
mod masks;
mod params;

pub use config::{EncoderKind, MaskMode, ModelConfig, MODEL_KEYS};
pub use forward::{argmax_rows, log_softmax_at, DecodeItem, Encoded, EncoderCache, EncoderInput, ExampleRows, Forward};
pub use masks::{build_causal_mask, build_instruction_cross_mask, cross_cap, validate_intervals, AttentionMask};
pub use params::{param_count, Group, ModelParams, INIT_STD};

use langaux_numcore::{Real, Tape, Var};

use crate::error::Result;

/// Greedy autoregressive decoding of independent sequences. Sequence `i`
/// starts from `bos`, attends the encoder rows `keys[i]`, and stops at `eos`
/// or after `max_len` generated tokens (the `eos` is not returned).
pub fn greedy_decode<F: Real>(
    fwd: &Forward<F>,
    tape: &mut Tape<F>,
    z: Var,
    keys: &[Vec<usize>],
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = greedy_decode_until(fwd, tape, z, keys, bos, max_len, |s| s.last() == Some(&eos))?;
    for s in &mut out {
        if s.last() == Some(&eos) {
            s.pop();
        }
    }
    Ok(out)
}

/// Like [`greedy_decode`], but sequence `i` ends once `stop` holds for its
/// generated tokens, which are returned in full.
pub fn greedy_decode_until<F: Real>(
    fwd: &Forward<F>,
    tape: &mut Tape<F>,
    z: Var,
    keys: &[Vec<usize>],
    bos: usize,
    max_len: usize,
    stop: impl Fn(&[usize]) -> bool,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = vec![vec![bos]; keys.len()];
    let mut done = vec![false; keys.len()];
    let vocab = fwd.params.config.decoder_vocab_size;
    let limit = max_len.min(fwd.params.config.max_instr_len);
    for _ in 0..limit {
        let live: Vec<usize> = (0..keys.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let items: Vec<DecodeItem> = live
            .iter()
            .map(|&i| DecodeItem::from_instructions(&[seqs[i].clone()], keys[i].clone(), &[keys[i].len()]))
            .collect();
        let logits = fwd.decode(tape, z, &items, None)?;
        let data = tape.value(logits).data();
        let mut off = 0;
        for (&i, it) in live.iter().zip(&items) {
            let last = off + it.tokens.len() - 1;
            let next = argmax_rows(&data[last * vocab..(last + 1) * vocab], vocab)[0];
            off += it.tokens.len();
            seqs[i].push(next);
            done[i] = stop(&seqs[i][1..]);
        }
    }
    Ok(seqs.into_iter().map(|s| s[1..].to_vec()).collect())
}
