mod common;

use common::*;
use langaux::dataset::{Example, EOS, IGNORE};
use langaux::model::{Forward, Group, ModelParams};
use langaux::training::*;
use langaux::Error;
use langaux_numcore::{Tape, Tensor};

fn quick(objective: Objective, lambda: f64, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::preset("babyai-like").unwrap();
    c.objective = objective;
    c.lambda = lambda;
    c.steps = steps;
    c.batch_size = 4;
    c.adam.learning_rate = 1e-3;
    c.seed = 17;
    c
}

fn zeros(tape: &mut Tape<f64>, rows: usize, cols: usize) -> langaux_numcore::Var {
    tape.constant(Tensor::zeros(vec![rows, cols]).unwrap())
}

#[test]
fn uniform_joint_loss() {
    let mut tape = Tape::<f64>::new();
    let a = zeros(&mut tape, 1, 2);
    let l = zeros(&mut tape, 2, 4);
    let (v, b) = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[1],
        }),
        Some(Term {
            logits: l,
            targets: &[3, 2],
        }),
        0.5,
        Normalization::Mean,
        1,
    )
    .unwrap();
    let expect = 2f64.ln() + 0.5 * 4f64.ln();
    assert!((tape.value(v).item().unwrap() - expect).abs() < 1e-12);
    assert!((b.total - expect).abs() < 1e-12);
    assert!((b.total - (b.action_nll + b.lambda * b.lang_nll)).abs() < 1e-9);
    assert_eq!((b.action_count, b.lang_count), (1, 2));
    assert!((expect - 1.3863).abs() < 1e-4);
}

#[test]
fn uniform_forward_and_goal_terms() {
    let mut tape = Tape::<f64>::new();
    let a = zeros(&mut tape, 1, 5);
    let f = zeros(&mut tape, 4, 5);
    let (_, b) = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[0],
        }),
        Some(Term {
            logits: f,
            targets: &[0, 3, 4, IGNORE],
        }),
        1.0,
        Normalization::Mean,
        1,
    )
    .unwrap();
    assert!((b.lang_nll - 5f64.ln()).abs() < 1e-12);
    assert_eq!(b.lang_count, 3);
    let v = 11;
    let g = zeros(&mut tape, 3, v);
    let (_, b) = joint_loss(
        &mut tape,
        None,
        Some(Term {
            logits: g,
            targets: &[4, 7, 2],
        }),
        1.0,
        Normalization::Mean,
        1,
    )
    .unwrap();
    assert!((b.lang_nll - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn lambda_zero_total_is_action_term() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.1]).unwrap());
    let l = zeros(&mut tape, 2, 4);
    let (bc, _) = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[2, 0],
        }),
        None,
        0.0,
        Normalization::Mean,
        1,
    )
    .unwrap();
    let (joint, _) = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[2, 0],
        }),
        Some(Term {
            logits: l,
            targets: &[1, 1],
        }),
        0.0,
        Normalization::Mean,
        1,
    )
    .unwrap();
    assert_eq!(tape.value(bc).item().unwrap(), tape.value(joint).item().unwrap());
}

#[test]
fn sum_normalization_divides_by_trajectories() {
    let mut tape = Tape::<f64>::new();
    let a = zeros(&mut tape, 4, 2);
    let (_, b) = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[0, 1, 1, IGNORE],
        }),
        None,
        0.0,
        Normalization::Sum,
        2,
    )
    .unwrap();
    assert!((b.action_nll - 1.5 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn negative_lambda_is_a_config_error() {
    let mut tape = Tape::<f64>::new();
    let a = zeros(&mut tape, 1, 2);
    let r = joint_loss(
        &mut tape,
        Some(Term {
            logits: a,
            targets: &[0],
        }),
        None,
        -0.1,
        Normalization::Mean,
        1,
    );
    assert!(matches!(r, Err(Error::Config(_))));
    let mut c = quick(Objective::Lang, -1.0, 1);
    assert!(c.validate().is_err());
    c.lambda = f64::NAN;
    assert!(c.validate().is_err());
}

#[test]
fn forward_target_construction() {
    let (a, b, c) = (0, 3, 2);
    let base = ACTION_TOKEN_BASE;
    assert_eq!(forward_targets(&[a, b, c], 1), vec![base + a, base + b, base + c, EOS]);
    assert_eq!(forward_targets(&[a, b, c], 3), vec![base + c, EOS]);
}

#[test]
fn plan_tokens_double_the_final_eos() {
    let corpus = small_corpus(4, 1);
    let model = small_model(&corpus, Objective::Hierarchy);
    let ex = &examples_of(&corpus, &model)[0];
    let plan = plan_tokens(&ex.segments);
    let words: usize = ex.segments.iter().map(|s| s.tokens.len()).sum();
    assert_eq!(plan.len(), words + ex.segments.len() + 1);
    assert!(plan.ends_with(&[EOS, EOS]));
    assert!(plan_complete(&plan));
    assert!(!plan_complete(&plan[..plan.len() - 1]));
}

#[test]
fn presets_carry_their_values() {
    let b = TrainConfig::preset("babyai-like").unwrap();
    assert_eq!(b.lambda, 0.7);
    assert_eq!(b.batch_size, 32);
    assert_eq!(b.adam.weight_decay, 0.0);
    assert_eq!(b.adam.grad_clip_norm, None);
    assert_eq!(TrainConfig::preset_dropout("babyai-like").unwrap(), 0.0);
    let c = TrainConfig::preset("crafting-like").unwrap();
    assert_eq!(c.lambda, 0.25);
    assert_eq!(c.batch_size, 64);
    assert_eq!(c.adam.weight_decay, 0.05);
    assert_eq!(c.adam.grad_clip_norm, Some(1.0));
    assert_eq!(TrainConfig::preset_dropout("crafting-like").unwrap(), 0.1);
    assert!(TrainConfig::preset("atari").is_err());
}

#[test]
fn train_config_kv_round_trip() {
    let mut c = quick(Objective::Forward, 0.3, 77);
    c.adam.grad_clip_norm = Some(2.5);
    c.normalization = Normalization::Sum;
    let mut d = TrainConfig::preset("crafting-like").unwrap();
    for line in c.to_kv().lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        d.set(k, v).unwrap();
    }
    assert_eq!(c, d);
    assert!(d.set("learning_rat", "1").is_err());
}

#[test]
fn bc_and_lambda_zero_are_bit_identical() {
    let corpus = small_corpus(6, 2);
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    let bc = train_fresh(&quick(Objective::Bc, 0.7, 12), &ex, &model, None).unwrap();
    let lang0 = train_fresh(&quick(Objective::Lang, 0.0, 12), &ex, &model, None).unwrap();
    assert_eq!(bc.params.to_bytes(), lang0.params.to_bytes());
    assert_eq!(bc.history, lang0.history);
    let lang = train_fresh(&quick(Objective::Lang, 0.7, 12), &ex, &model, None).unwrap();
    assert_ne!(bc.params.to_bytes(), lang.params.to_bytes());
}

#[test]
fn runs_are_deterministic_and_logged() {
    let corpus = small_corpus(6, 3);
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    let mut cfg = quick(Objective::Lang, 0.7, 6);
    cfg.checkpoint_every = 4;
    let dir = tempfile::tempdir().unwrap();
    let a = train_fresh(&cfg, &ex, &model, Some(dir.path())).unwrap();
    let b = train_fresh(&cfg, &ex, &model, None).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.history.len(), 6);
    assert_eq!(a.history, b.history);
    for (i, m) in a.history.iter().enumerate() {
        assert_eq!(m.step, i + 1);
        assert!((m.total - (m.action_nll + 0.7 * m.lang_nll)).abs() < 1e-9);
        assert!(m.grad_norm > 0.0);
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,total,action_nll,lang_nll,grad_norm"));
    assert_eq!(lines.count(), 6);
    for stem in ["step_4", "final"] {
        assert!(dir.path().join(format!("{stem}.ckpt")).exists(), "{stem}");
    }
    assert!(!dir.path().join("step_6.ckpt").exists());
    let back = ModelParams::<f32>::load(dir.path(), "final").unwrap();
    assert_eq!(back, a.params);
}

#[test]
fn diverging_runs_stop_with_last_good_checkpoint() {
    let corpus = small_corpus(4, 4);
    let model = small_model(&corpus, Objective::Bc);
    let ex = examples_of(&corpus, &model);
    let mut cfg = quick(Objective::Bc, 0.0, 50);
    cfg.adam.learning_rate = 1e36;
    let dir = tempfile::tempdir().unwrap();
    match train_fresh(&cfg, &ex, &model, Some(dir.path())) {
        Err(Error::NonFiniteLoss { step }) => assert!(step > 0),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e36 stayed finite"),
    }
    assert!(dir.path().join("last_good.ckpt").exists());
    assert!(!dir.path().join("final.ckpt").exists());
}

fn grads_by_group(
    params: &ModelParams<f32>,
    rows: &[&Example],
    role: Role,
    lambda: f64,
) -> (f64, Vec<Option<Vec<f32>>>, f64, usize) {
    let mut tape = Tape::new();
    let fwd = Forward::bind(&mut tape, params, |_| true);
    let b = batch_loss(&fwd, &mut tape, rows, role, lambda, Normalization::Mean, None).unwrap();
    let g = tape.backward(b.loss).unwrap();
    let mut enc = 0.0;
    let mut all = Vec::new();
    for (i, v) in fwd.vars().iter().enumerate() {
        let t = g.get(*v).map(|t| t.data().to_vec());
        if params.group_of(i) == Group::Encoder {
            enc += t.as_ref().map_or(0.0, |d| d.iter().map(|x| (*x as f64).powi(2)).sum());
        }
        all.push(t);
    }
    (
        tape.value(b.loss).item().unwrap() as f64,
        all,
        enc.sqrt(),
        b.breakdown.lang_count,
    )
}

#[test]
fn language_term_alone_reaches_the_encoder() {
    let corpus = small_corpus(4, 5);
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    let params = ModelParams::<f32>::init(&model, 1).unwrap();
    let rows: Vec<&Example> = ex.iter().collect();
    let role = Role {
        actions: false,
        ..Role::joint(Objective::Lang, 0.5)
    };
    let (_, _, enc_norm, count) = grads_by_group(&params, &rows, role, 0.5);
    assert!(count > 0);
    assert!(enc_norm > 0.0, "encoder received no gradient from the language term");
}

#[test]
fn unannotated_batch_matches_behavior_cloning() {
    let corpus = small_corpus(4, 6);
    let model = small_model(&corpus, Objective::Lang);
    let mut ex = examples_of(&corpus, &model);
    for e in &mut ex {
        e.segments.clear();
    }
    let params = ModelParams::<f32>::init(&model, 2).unwrap();
    let rows: Vec<&Example> = ex.iter().collect();
    let (lang_loss, lang_grads, _, count) = grads_by_group(&params, &rows, Role::joint(Objective::Lang, 0.7), 0.7);
    let (bc_loss, bc_grads, _, _) = grads_by_group(&params, &rows, Role::joint(Objective::Bc, 0.0), 0.0);
    assert_eq!(count, 0);
    assert_eq!(lang_loss, bc_loss);
    for (i, (a, b)) in lang_grads.iter().zip(&bc_grads).enumerate() {
        if params.group_of(i) != Group::Decoder {
            assert_eq!(a, b, "tensor {}", params.names[i]);
        } else {
            assert!(a.as_ref().is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        }
    }
    // Training on such data leaves the decoder untouched, as under BC.
    let out = train(&quick(Objective::Lang, 0.7, 3), &ex, params.clone(), None).unwrap();
    let bc = train(&quick(Objective::Bc, 0.0, 3), &ex, params.clone(), None).unwrap();
    assert_eq!(out.params.to_bytes(), bc.params.to_bytes());
    assert!(out.history.iter().all(|m| m.lang_nll == 0.0));
}

#[test]
fn probe_keeps_the_encoder_frozen() {
    let corpus = small_corpus(6, 7);
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    let base = train_fresh(&quick(Objective::Bc, 0.0, 3), &ex, &model, None)
        .unwrap()
        .params;
    let cfg = quick(Objective::ProbeGoalObs, 1.0, 5);
    let a = probe_train(&cfg, &ex[..4], &ex[4..], &base, true).unwrap();
    let b = probe_train(&cfg, &ex[..4], &ex[4..], &base, true).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.history.len(), 5);
    for i in 0..base.tensors.len() {
        match base.group_of(i) {
            Group::Decoder => {}
            _ => assert_eq!(a.params.tensors[i], base.tensors[i], "{} moved", base.names[i]),
        }
    }
    assert!((0.0..=1.0).contains(&a.accuracy));
    let g = probe_train(
        &quick(Objective::ProbeGoalOnly, 1.0, 5),
        &ex[..4],
        &ex[4..],
        &base,
        false,
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&g.accuracy));
}

#[test]
fn hierarchy_needs_full_annotation_and_a_plan_block() {
    let corpus = small_corpus(4, 8);
    let model = small_model(&corpus, Objective::Hierarchy);
    let mut ex = examples_of(&corpus, &model);
    let cfg = quick(Objective::Hierarchy, 1.0, 2);
    let mut flat = model.clone();
    flat.max_plan_len = 0;
    assert!(matches!(hierarchy_train(&cfg, &ex, &flat, None), Err(Error::Config(_))));
    let out = hierarchy_train(&cfg, &ex, &model, None).unwrap();
    assert_eq!(out.high.history.len(), 2);
    assert_eq!(out.low.history.len(), 2);
    assert!(out.high.history.iter().all(|m| m.action_nll == 0.0 && m.lang_nll > 0.0));
    ex[1].segments.clear();
    assert!(matches!(
        hierarchy_train(&cfg, &ex, &model, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn joint_objectives_train_and_others_are_routed_elsewhere() {
    let corpus = small_corpus(4, 9);
    for obj in [Objective::Forward, Objective::GoalPred] {
        let model = small_model(&corpus, obj);
        let ex = examples_of(&corpus, &model);
        let out = train_fresh(&quick(obj, 0.5, 2), &ex, &model, None).unwrap();
        assert!(out.history.iter().all(|m| m.lang_nll > 0.0), "{obj:?}");
    }
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    for obj in [Objective::Hierarchy, Objective::ProbeGoalOnly, Objective::ProbeGoalObs] {
        assert!(train_fresh(&quick(obj, 0.5, 1), &ex, &model, None).is_err());
    }
    assert!(matches!(
        train_fresh(&quick(Objective::Bc, 0.0, 1), &[], &model, None),
        Err(Error::Empty(_))
    ));
}

#[test]
fn language_metrics_count_supervised_tokens() {
    let corpus = small_corpus(4, 10);
    let model = small_model(&corpus, Objective::Lang);
    let ex = examples_of(&corpus, &model);
    let params = ModelParams::<f32>::init(&model, 3).unwrap();
    let m = language_metrics(&params, &ex, Aux::Lang, false).unwrap();
    // Sequence encoder: each instruction once, plus its EOS.
    let per_instruction: usize = ex.iter().flat_map(|e| &e.segments).map(|s| s.tokens.len() + 1).sum();
    assert_eq!(m.tokens, per_instruction);
    assert!(m.correct <= m.tokens);
    assert!((m.nll - (model.decoder_vocab_size as f64).ln()).abs() < 0.5);
    // State encoder: every step carries its active instruction.
    let state = langaux::model::ModelConfig {
        encoder: langaux::model::EncoderKind::State,
        ..model.clone()
    };
    let params = ModelParams::<f32>::init(&state, 3).unwrap();
    let m = language_metrics(&params, &ex, Aux::Lang, false).unwrap();
    let per_step: usize = ex
        .iter()
        .map(|e| {
            e.segments
                .iter()
                .map(|s| (s.tokens.len() + 1) * (s.end - s.start))
                .sum::<usize>()
        })
        .sum();
    assert_eq!(m.tokens, per_step);
}
