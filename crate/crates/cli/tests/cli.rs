use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use langaux_cli::{flag_table, resolve, run, Settings, EXIT_FAILURE, EXIT_USAGE, VERBS};

/// A file value and a flag value for every documented key. The file value
/// differs from the default and the flag value differs from the file value.
const SWEEP: &[(&str, &str, &str)] = &[
    ("data.seed", "3", "7"),
    ("data.demos", "40", "50"),
    ("data.eval_tasks", "300", "400"),
    ("data.difficulty", "1-2", "2-4"),
    ("data.grid_size", "8", "9"),
    ("data.budget", "90", "100"),
    ("data.holdout", "0.2", "0.3"),
    ("data.annotation_fraction", "0.5", "0.25"),
    ("data.walls", "2", "3"),
    ("data.distractors", "0", "1"),
    ("data.min_difficulty", "2", "3"),
    ("data.max_difficulty", "4", "5"),
    ("model.encoder", "state", "sequence"),
    ("model.encoder_blocks", "2", "3"),
    ("model.decoder_blocks", "2", "3"),
    ("model.embed_dim", "64", "256"),
    ("model.mlp_dim", "64", "128"),
    ("model.heads", "2", "8"),
    ("model.dropout", "0.2", "0"),
    ("model.max_seq_len", "64", "256"),
    ("model.obs_vocab_size", "30", "40"),
    ("model.obs_tokens", "10", "20"),
    ("model.text_vocab_size", "30", "40"),
    ("model.decoder_vocab_size", "30", "40"),
    ("model.action_count", "6", "7"),
    ("model.max_goal_len", "4", "6"),
    ("model.max_plan_len", "16", "32"),
    ("model.max_instr_len", "32", "48"),
    ("model.observability", "partial", "full"),
    ("model.window", "3", "7"),
    ("model.mask_mode", "onset", "none"),
    ("model.goal_keys", "true", "false"),
    ("train.objective", "bc", "forward"),
    ("train.lambda", "0.5", "0"),
    ("train.steps", "10", "20"),
    ("train.batch_size", "8", "16"),
    ("train.learning_rate", "0.001", "0.0003"),
    ("train.beta1", "0.8", "0.85"),
    ("train.beta2", "0.99", "0.98"),
    ("train.epsilon", "1e-6", "1e-7"),
    ("train.weight_decay", "0", "0.01"),
    ("train.grad_clip", "none", "2"),
    ("train.seed", "5", "6"),
    ("train.normalization", "sum", "mean"),
    ("train.checkpoint_every", "5", "10"),
    ("train.preset", "babyai-like", "crafting-like"),
    ("eval.episodes", "10", "20"),
    ("eval.eval_dropout", "true", "false"),
    ("eval.decode", "true", "false"),
    ("eval.workers", "2", "3"),
    ("grid.objectives", "bc", "lang,forward"),
    ("grid.demos", "10", "20,30"),
    ("grid.annotation_fractions", "0", "0.5,1"),
    ("grid.mask_modes", "onset", "onset,execution"),
    ("grid.seeds", "1", "2,3"),
    ("report.input", "a.csv", "b.csv"),
    ("report.x", "seed", "annotation_fraction"),
    ("report.y", "bleu", "token_accuracy"),
    ("report.series", "mask_mode", "seed"),
];

fn file_text(key: &str, value: &str) -> String {
    let (section, k) = key.split_once('.').unwrap();
    format!("[{section}]\n{k} = {value}\n")
}

fn capture(argv: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn sweep_covers_every_documented_key() {
    let swept: BTreeSet<&str> = SWEEP.iter().map(|s| s.0).collect();
    let keys = Settings::keys();
    let documented: BTreeSet<&str> = keys.iter().map(String::as_str).collect();
    assert_eq!(swept, documented);
    assert_eq!(SWEEP.len(), keys.len());
}

#[test]
fn every_key_is_settable_from_file_and_flag_and_the_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let default = resolve(None, &[]).unwrap();
    for &(key, a, b) in SWEEP {
        let text = file_text(key, a);
        let from_file = resolve(Some(&text), &[]).unwrap_or_else(|e| panic!("{key} = {a}: {e}"));
        assert_ne!(from_file, default, "{key}: file value left the default");
        let flag = [(key.to_string(), b.to_string())];
        let both = resolve(Some(&text), &flag).unwrap_or_else(|e| panic!("{key} = {b}: {e}"));
        assert_eq!(both, resolve(None, &flag).unwrap(), "{key}: flag did not win");
        assert_ne!(both, from_file, "{key}");

        // The same through argv, with the full flag name on every verb.
        let path = dir.path().join("sweep.conf");
        std::fs::write(&path, &text).unwrap();
        let long = format!("--{key}");
        for verb in VERBS {
            let (code, out, err) = capture(&[
                "langaux",
                verb,
                "--config",
                path.to_str().unwrap(),
                &long,
                b,
                "--dry-run",
            ]);
            assert_eq!(code, 0, "{verb} {key}: {err}");
            assert!(out.ends_with(&both.to_kv()), "{verb} {key}");
        }
    }
}

#[test]
fn each_flag_names_exactly_one_key() {
    let keys: BTreeSet<String> = Settings::keys().into_iter().collect();
    for verb in VERBS {
        let table = flag_table(verb);
        let flags: BTreeSet<&str> = table.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(flags.len(), table.len(), "{verb}: duplicate flag");
        for (flag, key) in &table {
            assert!(keys.contains(key));
            assert!(flag == key || key.ends_with(&format!(".{flag}")), "{flag} -> {key}");
        }
        for key in &keys {
            assert!(table.iter().any(|(f, k)| f == key && k == key), "{verb}: no --{key}");
        }
    }
    let seed = |verb| flag_table(verb).into_iter().find(|(f, _)| f == "seed").unwrap().1;
    assert_eq!(seed("gen-data"), "data.seed");
    assert_eq!(seed("train"), "train.seed");
    let demos = |verb| flag_table(verb).into_iter().find(|(f, _)| f == "demos").unwrap().1;
    assert_eq!(demos("gen-data"), "data.demos");
    assert_eq!(demos("grid"), "grid.demos");
}

#[test]
fn documented_examples_resolve() {
    let (code, out, _) = capture(&[
        "langaux",
        "gen-data",
        "--seed",
        "7",
        "--demos",
        "500",
        "--difficulty",
        "1-3",
        "--dry-run",
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("[data]\nseed = 7\ndemos = 500\n"));
    assert!(out.contains("difficulty = 1-3"));

    let (code, out, _) = capture(&[
        "langaux",
        "train",
        "--preset",
        "crafting-like",
        "--lambda",
        "0",
        "--dry-run",
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("lambda = 0\n"));
    // Flags apply in order, so a later preset replaces an earlier λ.
    let (_, out, _) = capture(&[
        "langaux",
        "train",
        "--lambda",
        "0",
        "--preset",
        "crafting-like",
        "--dry-run",
    ]);
    assert!(out.contains("lambda = 0.25\n"));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let (code, _, err) = capture(&["langaux", "frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"));
    let (code, _, err) = capture(&["langaux", "train", "--no-such-key", "1"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--no-such-key"));
    let (code, _, err) = capture(&["langaux", "train", "--embed_dim", "30", "--dry-run"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("embed_dim"));
    let (code, _, err) = capture(&["langaux", "train", "--lambda", "lots", "--dry-run"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("lambda"));
    let (code, _, _) = capture(&["langaux", "train", "--config", "/no/such/file.conf"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = capture(&["langaux"]);
    assert_eq!(code, EXIT_USAGE);
}

const TINY: &str = "[data]\ndemos = 6\neval_tasks = 4\ndifficulty = 1-2\n\
                    [model]\nencoder_blocks = 1\nembed_dim = 16\nmlp_dim = 32\nheads = 2\nmax_instr_len = 16\n\
                    [train]\nsteps = 2\nbatch_size = 3\n[eval]\nepisodes = 4\n\
                    [grid]\nobjectives = lang,bc\ndemos = 3,6\nseeds = 0\n";

fn run_dir(out: &str) -> std::path::PathBuf {
    let line = out.lines().next().unwrap();
    line.split(" in ").nth(1).unwrap().into()
}

#[test]
fn verbs_write_their_outputs_under_the_hashed_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let root = dir.path().join("runs");
    let base = |verb: &'static str| {
        vec![
            "langaux".to_string(),
            verb.to_string(),
            "--config".into(),
            conf.display().to_string(),
            "--out".into(),
            root.display().to_string(),
        ]
    };
    let go = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        capture(&refs)
    };
    let (code, out, err) = go(base("gen-data"));
    assert_eq!(code, 0, "{err}");
    let run = run_dir(&out);
    assert!(run.starts_with(&root));
    let trajs = langaux::dataset::read_jsonl(&run.join("train.jsonl")).unwrap();
    assert_eq!(trajs.len(), 6);

    // Missing checkpoint: a failure, not a usage error.
    let (code, _, err) = go(base("eval"));
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("train"));

    for verb in ["train", "eval", "probe", "grid", "report"] {
        let (code, out, err) = go(base(verb));
        assert_eq!(code, 0, "{verb}: {err}");
        assert_eq!(run_dir(&out), run, "{verb}");
    }
    for f in [
        "config.txt",
        "final.model",
        "metrics.csv",
        "eval.csv",
        "episodes.jsonl",
        "probe.csv",
        "report.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let (code, _, _) = go(base("train"));
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);
    let report = langaux::evaluation::EvalReport::read_csv(&run.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(run.join("success_rate-by-demos-per-objective.svg").exists());
    assert!(!run.join(".lock").exists());

    // Plot settings share the run directory; anything else moves it.
    let mut args = base("report");
    args.extend(["--y".into(), "token_accuracy".into(), "--dry-run".into()]);
    assert_eq!(run_dir(&go(args).1), run);
    let mut args = base("train");
    args.extend(["--steps".into(), "3".into(), "--dry-run".into()]);
    assert_ne!(run_dir(&go(args).1), run);

    // A held lock refuses a second writer and is left in place.
    std::fs::write(run.join(".lock"), "1").unwrap();
    let (code, _, err) = go(base("grid"));
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("locked"));
    assert!(run.join(".lock").exists());
    std::fs::remove_file(run.join(".lock")).unwrap();

    // Bad plot input: nonzero exit and no plot written.
    let mut args = base("report");
    args.extend([
        "--input".into(),
        dir.path().join("missing.csv").display().to_string(),
        "--x".into(),
        "seed".into(),
    ]);
    let (code, _, _) = go(args);
    assert_eq!(code, EXIT_FAILURE);
    assert!(!run.join("success_rate-by-seed-per-objective.svg").exists());
    let mut args = base("report");
    args.extend(["--x".into(), "nonsense".into()]);
    assert_eq!(go(args).0, EXIT_USAGE);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_langaux"))
}

#[test]
fn config_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("default.conf"), "[train]\nsteps = 11\n").unwrap();
    std::fs::write(dir.path().join("train.conf"), "[train]\nsteps = 12\n").unwrap();
    std::fs::write(dir.path().join("named.conf"), "[train]\nsteps = 13\n").unwrap();
    let steps = |args: &[&str]| {
        let o = binary()
            .args(args)
            .arg("--dry-run")
            .env(langaux_cli::CONFIG_DIR_ENV, dir.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines().find(|l| l.starts_with("steps = ")).unwrap().to_string()
    };
    assert_eq!(steps(&["train"]), "steps = 12");
    assert_eq!(steps(&["eval"]), "steps = 11");
    assert_eq!(steps(&["train", "--config", "named.conf"]), "steps = 13");
    assert_eq!(steps(&["train", "--steps", "14"]), "steps = 14");
    let o = binary().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}

#[test]
fn settings_text_round_trips() {
    let mut s = resolve(Some(TINY), &[]).unwrap();
    s.set("report.input", "x.csv").unwrap();
    assert_eq!(resolve(Some(&s.to_kv()), &[]).unwrap(), s);
    assert!(Path::new("x.csv") == s.report.input.as_deref().unwrap());
    assert!(resolve(None, &[("grid.annotation_fractions".into(), "1.5".into())]).is_err());
    assert!(resolve(None, &[("grid.objectives".into(), "".into())]).is_err());
}
