mod common;

use common::*;
use langaux::dataset::BOS;
use langaux::model::{
    build_causal_mask, build_instruction_cross_mask, cross_cap, param_count, DecodeItem, EncoderInput, EncoderKind,
    Forward, MaskMode, ModelConfig, ModelParams,
};
use langaux::Error;
use langaux_numcore::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn causal_mask_matches_predicate_up_to_64() {
    for t in 1..=64 {
        let m = build_causal_mask(t).unwrap();
        for r in 0..t {
            for c in 0..t {
                assert_eq!(m.get(r, c), c <= r, "t={t} r={r} c={c}");
            }
        }
    }
}

#[test]
fn unmasked_mode_allows_every_latent() {
    let m = build_instruction_cross_mask(&[(1, 3), (3, 6)], 5, MaskMode::Unmasked).unwrap();
    assert_eq!((m.cap(0), m.cap(1)), (5, 5));
}

proptest! {
    #[test]
    fn cross_mask_rows_follow_caps(t in 1usize..40, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iv = random_intervals(&mut rng, t, n);
        for mode in [MaskMode::Onset, MaskMode::Execution, MaskMode::Unmasked] {
            let m = build_instruction_cross_mask(&iv, t, mode).unwrap();
            for (i, &(s, e)) in iv.iter().enumerate() {
                let cap = match mode {
                    MaskMode::Onset => if s > 1 { s - 1 } else { 1 },
                    MaskMode::Execution => e - 1,
                    MaskMode::Unmasked => t,
                };
                prop_assert!(cap >= 1);
                for c in 0..t {
                    prop_assert_eq!(m.get(i, c), c < cap);
                }
            }
        }
    }

    #[test]
    fn param_count_matches_materialized(
        blocks in 1usize..3,
        dec in 1usize..3,
        heads in 1usize..4,
        per_head in 1usize..5,
        mlp in 1usize..20,
        plan in 0usize..4,
        state in any::<bool>(),
    ) {
        let mut cfg = tiny_config(if state { EncoderKind::State } else { EncoderKind::Sequence });
        cfg.encoder_blocks = blocks;
        cfg.decoder_blocks = dec;
        cfg.heads = heads;
        cfg.embed_dim = heads * per_head;
        cfg.mlp_dim = mlp;
        cfg.max_plan_len = plan;
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        prop_assert_eq!(param_count(&cfg), p.count());
    }
}

#[test]
fn observation_latents_ignore_the_future() {
    let worst = causal_worst(40, 3);
    assert!(worst < 1e-6, "worst change {worst:e}");
}

#[test]
fn first_latent_ignores_all_later_observations() {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f32> = random_params(&cfg, 5, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = random_obs(&mut rng, &cfg, 10);
    let mut other = random_obs(&mut rng, &cfg, 10);
    other[..cfg.obs_tokens].copy_from_slice(&obs[..cfg.obs_tokens]);
    let a = latents(&params, &[4, 5], &obs, 10);
    let b = latents(&params, &[4, 5], &other, 10);
    let d = cfg.embed_dim;
    assert!(max_abs_diff(&a[..d], &b[..d]) < 1e-6);
    assert!(max_abs_diff(&a[d..], &b[d..]) > 1e-3);
    assert_eq!(a, latents(&params, &[4, 5], &obs, 10));
}

#[test]
fn goal_reaches_every_latent() {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f32> = random_params(&cfg, 6, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = random_obs(&mut rng, &cfg, 3);
    let a = latents(&params, &[4], &obs, 3);
    let b = latents(&params, &[5], &obs, 3);
    let d = cfg.embed_dim;
    for t in 0..3 {
        assert!(max_abs_diff(&a[t * d..(t + 1) * d], &b[t * d..(t + 1) * d]) > 1e-4);
    }
}

#[test]
fn masked_decoding_equals_sliced_decoding() {
    let worst = cross_mask_worst(30, 11, &[MaskMode::Onset, MaskMode::Execution, MaskMode::Unmasked]);
    assert!(worst < 1e-6, "worst gap {worst:e}");
}

#[test]
fn instruction_tokens_see_only_their_own_prefix() {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f64> = random_params(&cfg, 8, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = cfg.embed_dim;
    let z = Tensor::randn(vec![6, d], 1.0, &mut rng).unwrap();
    let decode = |ins: &[Vec<usize>]| {
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, &params, |_| false);
        let zv = tape.constant(z.clone());
        let item = DecodeItem::from_instructions(ins, (0..6).collect(), &[2, 4, 6]);
        let out = fwd.decode(&mut tape, zv, &[item], None).unwrap();
        tape.value(out).data().to_vec()
    };
    let base = vec![vec![BOS, 4, 5, 6], vec![BOS, 7, 8], vec![BOS, 9]];
    let v = cfg.decoder_vocab_size;
    let a = decode(&base);
    // Rewrite instruction 0 after its token 1 and all of instructions 1 and 2
    // except their BOS.
    let changed = vec![vec![BOS, 4, 9, 9], vec![BOS, 4, 4], vec![BOS, 11]];
    let b = decode(&changed);
    for row in [0, 1, 4, 7] {
        assert!(
            max_abs_diff(&a[row * v..(row + 1) * v], &b[row * v..(row + 1) * v]) < 1e-12,
            "row {row}"
        );
    }
    assert!(max_abs_diff(&a[2 * v..3 * v], &b[2 * v..3 * v]) > 1e-6);
}

#[test]
fn bos_prefix_gives_one_distribution_per_instruction() {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f32> = random_params(&cfg, 9, 0.3);
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, &params, |_| false);
    let z = tape.constant(Tensor::zeros(vec![4, cfg.embed_dim]).unwrap());
    let items: Vec<DecodeItem> = (1..=3)
        .map(|cap| DecodeItem::from_instructions(&[vec![BOS]], (0..4).collect(), &[cap]))
        .collect();
    let out = fwd.decode(&mut tape, z, &items, None).unwrap();
    assert_eq!(tape.shape(out), &[3, cfg.decoder_vocab_size]);
}

#[test]
fn state_encoder_shapes_and_sensitivity() {
    let cfg = tiny_config(EncoderKind::State);
    let params: ModelParams<f32> = random_params(&cfg, 10, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let k = cfg.obs_tokens;
    let obs = random_obs(&mut rng, &cfg, 2);
    let goal = [4, 5];
    let cls = |obs: &[u16]| {
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, &params, |_| false);
        let enc = fwd
            .encode(
                &mut tape,
                &[EncoderInput {
                    goal: &goal,
                    plan: &[],
                    obs,
                    steps: 2,
                }],
                None,
            )
            .unwrap();
        assert_eq!(tape.shape(enc.z)[0], 2 * (1 + k + goal.len()));
        assert_eq!(enc.examples[0].latent_rows(1).len(), k + 1);
        let row = enc.examples[0].policy_row(1);
        let pi = fwd.policy_logits(&mut tape, &enc).unwrap();
        assert_eq!(tape.shape(pi), &[2, cfg.action_count]);
        (
            tape.value(enc.z).row(row).to_vec(),
            tape.value(enc.z).row(enc.examples[0].policy_row(0)).to_vec(),
        )
    };
    let (base, first) = cls(&obs);
    assert_eq!(cls(&obs).0, base);
    for j in 0..k {
        let mut o = obs.clone();
        o[k + j] = (o[k + j] + 1) % cfg.obs_vocab_size as u16;
        let (moved, first_again) = cls(&o);
        assert!(max_abs_diff(&base, &moved) > 0.0, "grid token {j} had no effect");
        // Steps are encoded independently.
        assert_eq!(first, first_again);
    }
}

#[test]
fn planned_model_requires_its_instruction_block() {
    let mut cfg = tiny_config(EncoderKind::Sequence);
    cfg.max_plan_len = 4;
    let params: ModelParams<f32> = random_params(&cfg, 12, 0.3);
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, &params, |_| false);
    let obs = vec![0u16; cfg.obs_tokens];
    let input = EncoderInput {
        goal: &[4],
        plan: &[],
        obs: &obs,
        steps: 1,
    };
    assert!(matches!(fwd.encode(&mut tape, &[input], None), Err(Error::Config(_))));
    let input = EncoderInput {
        goal: &[4],
        plan: &[5, 2, 2],
        obs: &obs,
        steps: 1,
    };
    assert!(fwd.encode(&mut tape, &[input], None).is_ok());
}

#[test]
fn overlong_sequences_are_rejected() {
    let cfg = tiny_config(EncoderKind::Sequence);
    let params: ModelParams<f32> = random_params(&cfg, 13, 0.3);
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, &params, |_| false);
    let steps = cfg.max_seq_len + 1;
    let obs = vec![0u16; steps * cfg.obs_tokens];
    let input = EncoderInput {
        goal: &[],
        plan: &[],
        obs: &obs,
        steps,
    };
    assert!(matches!(
        fwd.encode(&mut tape, &[input], None),
        Err(Error::Length { .. })
    ));
}

#[test]
fn cached_steps_match_full_encoding() {
    for plan in [0usize, 3] {
        let mut cfg = tiny_config(EncoderKind::Sequence);
        cfg.max_plan_len = plan;
        let params: ModelParams<f64> = random_params(&cfg, 14, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let steps = 9;
        let obs = random_obs(&mut rng, &cfg, steps);
        let goal = [4, 7];
        let plan_toks: Vec<usize> = (0..plan).map(|_| rng.random_range(4..12)).collect();
        let mut tape = Tape::new();
        let fwd = Forward::bind(&mut tape, &params, |_| false);
        let enc = fwd
            .encode(
                &mut tape,
                &[EncoderInput {
                    goal: &goal,
                    plan: &plan_toks,
                    obs: &obs,
                    steps,
                }],
                None,
            )
            .unwrap();
        let full = fwd.policy_logits(&mut tape, &enc).unwrap();
        let full = tape.value(full).data().to_vec();
        let mut cache = fwd.encode_prefix(&mut tape, &goal, &plan_toks).unwrap();
        let a = cfg.action_count;
        for t in 0..steps {
            let z = fwd
                .encode_step(
                    &mut tape,
                    &mut cache,
                    &obs[t * cfg.obs_tokens..(t + 1) * cfg.obs_tokens],
                    None,
                )
                .unwrap();
            let logits = fwd.policy_from_latents(&mut tape, z).unwrap();
            assert!(max_abs_diff(tape.value(logits).data(), &full[t * a..(t + 1) * a]) < 1e-10);
        }
        assert_eq!(cache.steps(), steps);
    }
}

#[test]
fn cross_cap_examples() {
    assert_eq!(cross_cap(MaskMode::Onset, (1, 3), 5), 1);
    assert_eq!(cross_cap(MaskMode::Onset, (3, 6), 5), 2);
    assert_eq!(cross_cap(MaskMode::Execution, (1, 3), 5), 2);
    assert_eq!(cross_cap(MaskMode::Unmasked, (1, 3), 5), 5);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let report = model_gradcheck(21);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.max_abs_error < 1e-8, "{report:?}");
    assert_eq!(report.checked, param_count(&tiny_config(EncoderKind::Sequence)));
}

#[test]
fn default_config_is_valid() {
    ModelConfig::default().validate().unwrap();
}
