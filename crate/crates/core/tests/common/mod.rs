#![allow(dead_code)]

use langaux::model::{EncoderKind, MaskMode, ModelConfig, ModelParams};
use langaux_craftworld::Observability;
use langaux_numcore::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two encoder blocks, embed 16, text vocabulary 12.
pub fn tiny_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder,
        encoder_blocks: 2,
        decoder_blocks: 1,
        embed_dim: 16,
        mlp_dim: 32,
        heads: 2,
        dropout: 0.0,
        max_seq_len: 32,
        obs_vocab_size: 7,
        obs_tokens: 5,
        text_vocab_size: 12,
        decoder_vocab_size: 12,
        action_count: 5,
        max_goal_len: 4,
        max_plan_len: 0,
        max_instr_len: 10,
        observability: Observability::Full,
        window: 5,
        mask_mode: MaskMode::Execution,
        goal_keys: false,
    }
}

/// Parameters drawn from N(0, std) everywhere, so that every input visibly
/// moves the outputs (the default init is nearly flat).
pub fn random_params<F: Real>(cfg: &ModelConfig, seed: u64, std: f64) -> ModelParams<F> {
    let mut p = ModelParams::<F>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in &mut p.tensors {
        *t = Tensor::randn(t.shape().to_vec(), std, &mut rng).unwrap();
    }
    p
}

pub fn random_obs(rng: &mut impl Rng, cfg: &ModelConfig, steps: usize) -> Vec<u16> {
    (0..steps * cfg.obs_tokens)
        .map(|_| rng.random_range(0..cfg.obs_vocab_size) as u16)
        .collect()
}

pub fn random_text(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

/// Random 1-based intervals tiling `[1, t + 1)`.
pub fn random_intervals(rng: &mut impl Rng, t: usize, n: usize) -> Vec<(usize, usize)> {
    let n = n.clamp(1, t);
    let mut cuts: Vec<usize> = (2..=t).collect();
    for i in (1..cuts.len()).rev() {
        cuts.swap(i, rng.random_range(0..=i));
    }
    cuts.truncate(n - 1);
    cuts.sort();
    let mut bounds = vec![1];
    bounds.extend(cuts);
    bounds.push(t + 1);
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

pub fn max_abs_diff<F: Real>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

use langaux::model::{cross_cap, DecodeItem, EncoderInput, Forward};
use langaux_numcore::gradcheck::{check_gradients_floored, GradCheckReport};
use langaux_numcore::{Reduction, Tape};

/// Largest change of any `z_t` when one observation after `t` is replaced,
/// over `cases` random sequences.
pub fn causal_worst(cases: usize, seed: u64) -> f64 {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f32> = random_params(&cfg, seed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let steps = rng.random_range(2..=24);
        let glen = rng.random_range(0..=3);
        let goal = random_text(&mut rng, cfg.text_vocab_size, glen);
        let obs = random_obs(&mut rng, &cfg, steps);
        let t = rng.random_range(0..steps - 1);
        let later = rng.random_range(t + 1..steps);
        let mut perturbed = obs.clone();
        for tok in &mut perturbed[later * cfg.obs_tokens..(later + 1) * cfg.obs_tokens] {
            *tok = ((*tok as usize + rng.random_range(1..cfg.obs_vocab_size)) % cfg.obs_vocab_size) as u16;
        }
        let z_a = latents(&params, &goal, &obs, steps);
        let z_b = latents(&params, &goal, &perturbed, steps);
        let d = cfg.embed_dim;
        for s in 0..=t {
            worst = worst.max(max_abs_diff(&z_a[s * d..(s + 1) * d], &z_b[s * d..(s + 1) * d]));
        }
    }
    worst
}

/// Observation latents `z_1..z_T`, row-major.
pub fn latents<F: Real>(params: &ModelParams<F>, goal: &[usize], obs: &[u16], steps: usize) -> Vec<F> {
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, params, |_| false);
    let enc = fwd
        .encode(
            &mut tape,
            &[EncoderInput {
                goal,
                plan: &[],
                obs,
                steps,
            }],
            None,
        )
        .unwrap();
    let rows = enc.examples[0].latent_rows(steps - 1);
    let z = tape.embedding(enc.z, &rows).unwrap();
    tape.value(z).data().to_vec()
}

/// Largest gap between masked full-sequence decoder logits and logits from
/// a decoder handed only `z_1..z_cap`, over `cases` random configurations.
pub fn cross_mask_worst(cases: usize, seed: u64, modes: &[MaskMode]) -> f64 {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f64> = random_params(&cfg, seed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let steps = rng.random_range(1..=24);
        let n = rng.random_range(1..=5);
        let intervals = random_intervals(&mut rng, steps, n);
        let glen = rng.random_range(0..=3);
        let goal = random_text(&mut rng, cfg.text_vocab_size, glen);
        let obs = random_obs(&mut rng, &cfg, steps);
        let instructions: Vec<Vec<usize>> = intervals
            .iter()
            .map(|_| {
                let mut ins = vec![langaux::dataset::BOS];
                let len = rng.random_range(0..=5);
                ins.extend(random_text(&mut rng, cfg.text_vocab_size, len));
                ins
            })
            .collect();
        let z = latents(&params, &goal, &obs, steps);
        let d = cfg.embed_dim;
        for &mode in modes {
            let caps: Vec<usize> = intervals.iter().map(|&iv| cross_cap(mode, iv, steps)).collect();
            let full = {
                let mut tape = Tape::new();
                let fwd = Forward::bind(&mut tape, &params, |_| false);
                let zv = tape.constant(Tensor::new(vec![steps, d], z.clone()).unwrap());
                let item = DecodeItem::from_instructions(&instructions, (0..steps).collect(), &caps);
                let logits = fwd.decode(&mut tape, zv, &[item], None).unwrap();
                tape.value(logits).data().to_vec()
            };
            let vocab = cfg.decoder_vocab_size;
            let mut off = 0;
            for (ins, &cap) in instructions.iter().zip(&caps) {
                let mut tape = Tape::new();
                let fwd = Forward::bind(&mut tape, &params, |_| false);
                let zv = tape.constant(Tensor::new(vec![cap, d], z[..cap * d].to_vec()).unwrap());
                let item = DecodeItem::from_instructions(std::slice::from_ref(ins), (0..cap).collect(), &[cap]);
                let logits = fwd.decode(&mut tape, zv, &[item], None).unwrap();
                let sliced = tape.value(logits).data();
                let rows = &full[off * vocab..(off + ins.len()) * vocab];
                worst = worst.max(max_abs_diff(rows, sliced));
                off += ins.len();
            }
        }
    }
    worst
}

/// Denominator floor for the end-to-end check, well above the ~1e-10
/// resolution of central differences on an O(1) loss.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Finite-difference check of a joint action and instruction loss through
/// every parameter of the tiny model.
pub fn model_gradcheck(seed: u64) -> GradCheckReport {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f64> = random_params(&cfg, seed, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = 4;
    let obs = random_obs(&mut rng, &cfg, steps);
    let goal = random_text(&mut rng, cfg.text_vocab_size, 2);
    let actions: Vec<usize> = (0..steps).map(|_| rng.random_range(0..cfg.action_count)).collect();
    let intervals = [(1, 3), (3, 5)];
    let instructions: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let mut v = vec![langaux::dataset::BOS];
            v.extend(random_text(&mut rng, cfg.text_vocab_size, 2));
            v
        })
        .collect();
    let targets: Vec<usize> = instructions
        .iter()
        .flat_map(|ins| ins[1..].iter().copied().chain([langaux::dataset::EOS]))
        .collect();
    let caps: Vec<usize> = intervals
        .iter()
        .map(|&iv| cross_cap(MaskMode::Execution, iv, steps))
        .collect();
    check_gradients_floored(&params.tensors, 1e-5, GRADCHECK_FLOOR, |tape, vars| {
        let fwd = Forward::with_vars(tape, &params, vars.to_vec()).unwrap();
        let enc = fwd
            .encode(
                tape,
                &[EncoderInput {
                    goal: &goal,
                    plan: &[],
                    obs: &obs,
                    steps,
                }],
                None,
            )
            .unwrap();
        let pi = fwd.policy_logits(tape, &enc).unwrap();
        let a = tape.cross_entropy(pi, &actions, usize::MAX, Reduction::Mean)?;
        let item = DecodeItem::from_instructions(&instructions, enc.examples[0].latent_rows(steps - 1), &caps);
        let lg = fwd.decode(tape, enc.z, &[item], None).unwrap();
        let l = tape.cross_entropy(lg, &targets, usize::MAX, Reduction::Mean)?;
        let l = tape.scale(l, 0.5);
        tape.add(a, l)
    })
    .unwrap()
}

use langaux::dataset::{Example, ObsSpec};
use langaux::pipeline::{encode_all, size_model, Corpus, DataConfig};
use langaux::training::Objective;

/// A few oracle demonstrations with difficulties 1-2.
pub fn small_corpus(demos: usize, seed: u64) -> Corpus {
    let data = DataConfig {
        seed,
        demos,
        eval_tasks: 4,
        max_difficulty: 2,
        ..DataConfig::default()
    };
    Corpus::build(&data, 5).unwrap()
}

/// One encoder block of width 16, sized for `corpus` and `objective`.
pub fn small_model(corpus: &Corpus, objective: Objective) -> ModelConfig {
    let base = ModelConfig {
        encoder_blocks: 1,
        embed_dim: 16,
        mlp_dim: 32,
        heads: 2,
        max_instr_len: 16,
        ..ModelConfig::default()
    };
    size_model(&base, &corpus.vocab, objective, 7, corpus.budget)
}

pub fn examples_of(corpus: &Corpus, model: &ModelConfig) -> Vec<Example> {
    let spec = ObsSpec {
        observability: model.observability,
        window: model.window,
    };
    encode_all(&corpus.train, &corpus.vocab, &spec).unwrap()
}

use langaux::evaluation::ExperimentConfig;

/// Seconds-scale experiment: 8 demonstrations, 6 unseen tasks, a
/// one-block width-16 model and a handful of updates.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.demos = 8;
    cfg.data.eval_tasks = 6;
    cfg.data.max_difficulty = 2;
    cfg.data.budget = 40;
    cfg.model.encoder_blocks = 1;
    cfg.model.embed_dim = 16;
    cfg.model.mlp_dim = 32;
    cfg.model.heads = 2;
    cfg.model.max_instr_len = 16;
    cfg.train.steps = 4;
    cfg.train.batch_size = 4;
    cfg.train.adam.learning_rate = 1e-3;
    cfg.eval.episodes = 6;
    cfg
}

/// Ten sentences with their scores worked out by hand from clipped n-gram
/// counts and the brevity penalty.
pub fn bleu_fixture() -> Vec<(&'static str, Vec<usize>, Vec<usize>, usize, f64)> {
    vec![
        ("identical", vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5], 4, 1.0),
        ("no unigram overlap", vec![6, 7, 8], vec![1, 2, 3], 4, 0.0),
        ("empty hypothesis", vec![], vec![1, 2, 3], 4, 0.0),
        // Every order matches fully; h=4 < r=6.
        (
            "short exact prefix",
            vec![1, 2, 3, 4],
            vec![1, 2, 3, 4, 5, 6],
            4,
            (-0.5f64).exp(),
        ),
        // Unigrams clip to 1/4; no bigram (1,1) in the reference.
        ("repeated unigram", vec![1, 1, 1, 1], vec![1, 2, 3, 4], 4, 0.0),
        // p4 = 0/1 zeroes the score.
        ("missing 4-gram", vec![1, 2, 3, 5], vec![1, 2, 3, 4], 4, 0.0),
        // p = 4/6, 3/5, 2/4, 1/3; product 1/15; h > r.
        (
            "long hypothesis",
            vec![1, 2, 3, 4, 6, 7],
            vec![1, 2, 3, 4, 5],
            4,
            (1.0f64 / 15.0).powf(0.25),
        ),
        // Orders 3 and 4 skipped: p1 = 2/3, p2 = 1/2.
        ("short sentences", vec![2, 1, 2], vec![1, 2], 4, (1.0f64 / 3.0).sqrt()),
        // Order 4 skipped, orders 1-3 exact; bp = exp(1 - 9/3).
        (
            "brevity only",
            vec![1, 2, 3],
            vec![1, 2, 3, 4, 5, 6, 7, 8, 9],
            4,
            (-2.0f64).exp(),
        ),
        // max_n = 2: p1 = 4/5, p2 = 2/4.
        ("bigram cap", vec![1, 2, 3, 9, 4], vec![1, 2, 3, 4], 2, 0.4f64.sqrt()),
    ]
}
