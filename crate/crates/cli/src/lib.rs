//! Command-line front end: `langaux <verb> [--config FILE] [--out DIR] [--KEY VALUE]...`.
//!
//! Configuration is resolved as defaults, then the config file, then flags
//! in command-line order. Every config key is a flag both as
//! `--section.key` and, where a bare name suffices, as `--key`; a bare name
//! shared by several sections resolves to the verb's own section first.
//! Outputs of one resolved configuration live in `<out>/<hash>/`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use langaux::dataset::{write_jsonl, ObsSpec};
use langaux::evaluation::{
    evaluate_language, evaluate_success, report_row, run_grid, write_svg, Cell, EvalReport, ExperimentConfig, Grid,
    PlanSource, REPORT_HEADER,
};
use langaux::kv;
use langaux::model::{MaskMode, ModelParams};
use langaux::pipeline::{encode_all, size_model, Corpus};
use langaux::training::{hierarchy_train, probe_train, train_fresh, Objective};
use langaux::Error;
use sha2::{Digest, Sha256};

/// Names a directory searched for config files: `--config NAME` falls back
/// to it, and without `--config` `<dir>/<verb>.conf` or `<dir>/default.conf`
/// is loaded when present.
pub const CONFIG_DIR_ENV: &str = "LANGAUX_CONFIG_DIR";

pub const VERBS: [&str; 6] = ["gen-data", "train", "eval", "probe", "grid", "report"];

/// Keys of the `[grid]` and `[report]` sections, which only the CLI reads.
pub const GRID_KEYS: [&str; 5] = ["objectives", "demos", "annotation_fractions", "mask_modes", "seeds"];
pub const REPORT_KEYS: [&str; 4] = ["input", "x", "y", "series"];

/// Usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Failures while running a valid command.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSpec {
    /// CSV to plot; defaults to the run directory's `report.csv`.
    pub input: Option<PathBuf>,
    pub x: String,
    pub y: String,
    pub series: String,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            input: None,
            x: "demos".into(),
            y: "success_rate".into(),
            series: "objective".into(),
        }
    }
}

/// Everything a command reads from its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    pub grid: Grid,
    pub report: ReportSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            grid: Grid {
                objectives: vec![Objective::Lang, Objective::Bc],
                demos: vec![150],
                annotation_fractions: vec![1.0],
                mask_modes: vec![MaskMode::Execution],
                seeds: (0..5).collect(),
            },
            report: ReportSpec::default(),
        }
    }
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> langaux::Result<Vec<T>> {
    let out: Option<Vec<T>> = value.split(',').map(|v| parse(v.trim())).collect();
    match out {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!("`{key}`: cannot parse list `{value}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Every documented `section.key`.
    pub fn keys() -> Vec<String> {
        let mut out = ExperimentConfig::keys();
        out.extend(GRID_KEYS.iter().map(|k| format!("grid.{k}")));
        out.extend(REPORT_KEYS.iter().map(|k| format!("report.{k}")));
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> langaux::Result<()> {
        let g = &mut self.grid;
        let r = &mut self.report;
        match key {
            "grid.objectives" => g.objectives = list(key, value, Objective::parse)?,
            "grid.demos" => g.demos = list(key, value, |v| v.parse().ok())?,
            "grid.annotation_fractions" => g.annotation_fractions = list(key, value, |v| v.parse().ok())?,
            "grid.mask_modes" => g.mask_modes = list(key, value, MaskMode::parse)?,
            "grid.seeds" => g.seeds = list(key, value, |v| v.parse().ok())?,
            "report.input" => r.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            "report.x" => r.x = value.to_string(),
            "report.y" => r.y = value.to_string(),
            "report.series" => r.series = value.to_string(),
            _ => self.experiment.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> langaux::Result<()> {
        self.experiment.validate()?;
        if let Some(f) = self
            .grid
            .annotation_fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return Err(Error::Config(format!(
                "grid.annotation_fractions: {f} is outside [0, 1]"
            )));
        }
        if self.grid.demos.contains(&0) {
            return Err(Error::Config("grid.demos must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_kv(&self) -> String {
        let g = &self.grid;
        let modes: Vec<&str> = g.mask_modes.iter().map(|m| m.name()).collect();
        let objs: Vec<&str> = g.objectives.iter().map(|o| o.name()).collect();
        format!(
            "objectives = {}\ndemos = {}\nannotation_fractions = {}\nmask_modes = {}\nseeds = {}\n",
            objs.join(","),
            join(&g.demos),
            join(&g.annotation_fractions),
            modes.join(","),
            join(&g.seeds)
        )
    }

    pub fn to_kv(&self) -> String {
        let r = &self.report;
        let input = r.input.as_ref().map_or(String::new(), |p| p.display().to_string());
        format!(
            "{}\n[grid]\n{}\n[report]\ninput = {input}\nx = {}\ny = {}\nseries = {}\n",
            self.experiment.to_kv(),
            self.grid_kv(),
            r.x,
            r.y,
            r.series
        )
    }

    /// Names the run directory. Plot settings are excluded so plots of one
    /// grid land next to its report.
    pub fn run_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.experiment.to_kv().as_bytes());
        h.update(self.grid_kv().as_bytes());
        hex::encode(h.finalize())
    }
}

/// The sections a bare flag name is looked up in, most preferred first.
fn section_order(verb: &str) -> [&'static str; 6] {
    match verb {
        "gen-data" => ["data", "model", "train", "eval", "grid", "report"],
        "eval" => ["eval", "train", "model", "data", "grid", "report"],
        "grid" => ["grid", "train", "model", "data", "eval", "report"],
        "report" => ["report", "grid", "train", "model", "data", "eval"],
        _ => ["train", "model", "data", "eval", "grid", "report"],
    }
}

/// `(flag, key)` pairs accepted by `verb`: every key under its full name and
/// under its bare name, which maps to the first section in `section_order`.
pub fn flag_table(verb: &str) -> Vec<(String, String)> {
    let keys = Settings::keys();
    let mut out: Vec<(String, String)> = keys.iter().map(|k| (k.clone(), k.clone())).collect();
    for section in section_order(verb) {
        for key in keys.iter().filter(|k| k.starts_with(&format!("{section}."))) {
            let bare = &key[section.len() + 1..];
            if !out.iter().any(|(f, _)| f == bare) {
                out.push((bare.to_string(), key.clone()));
            }
        }
    }
    out
}

fn about(verb: &str) -> &'static str {
    match verb {
        "gen-data" => "Generate the task pool and expert demonstrations",
        "train" => "Train one model on the configured demonstrations",
        "eval" => "Roll out a trained model on unseen tasks",
        "probe" => "Train goal-only and goal+observation probes on a frozen encoder",
        "grid" => "Train and evaluate every cell of an experiment grid",
        _ => "Plot a grid report as SVG",
    }
}

fn command() -> Command {
    let mut cmd = Command::new("langaux")
        .about("Imitation learning with language prediction as an auxiliary objective")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for verb in VERBS {
        let mut sub = Command::new(verb)
            .about(about(verb))
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("Sectioned `key = value` file"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .default_value("runs")
                    .help("Root of run directories"),
            )
            .arg(
                Arg::new("dry-run")
                    .long("dry-run")
                    .action(ArgAction::SetTrue)
                    .help("Print the resolved configuration and stop"),
            );
        if matches!(verb, "eval" | "probe") {
            sub = sub.arg(
                Arg::new("checkpoint")
                    .long("checkpoint")
                    .value_name("DIR")
                    .help("Directory holding the `final` checkpoint; defaults to the run directory"),
            );
        }
        for (flag, key) in flag_table(verb) {
            let help = if flag == key {
                String::new()
            } else {
                format!("Sets {key}")
            };
            sub = sub.arg(
                Arg::new(flag.clone())
                    .long(flag)
                    .value_name("VALUE")
                    .action(ArgAction::Append)
                    .allow_hyphen_values(true)
                    .help(help),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Flag overrides of `m` as `(key, value)` in command-line order.
fn overrides(verb: &str, m: &ArgMatches) -> Vec<(String, String)> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (flag, key) in flag_table(verb) {
        if let (Some(vals), Some(idx)) = (m.get_many::<String>(&flag), m.indices_of(&flag)) {
            for (v, i) in vals.zip(idx) {
                out.push((i, key.clone(), v.clone()));
            }
        }
    }
    out.sort_by_key(|o| o.0);
    out.into_iter().map(|(_, k, v)| (k, v)).collect()
}

fn config_file(verb: &str, given: Option<&String>) -> Result<Option<PathBuf>, Failure> {
    let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    match given {
        Some(p) => {
            let p = PathBuf::from(p);
            if p.exists() {
                return Ok(Some(p));
            }
            match dir.map(|d| d.join(&p)).filter(|c| p.is_relative() && c.exists()) {
                Some(c) => Ok(Some(c)),
                None => Err(Failure::usage(format!("config file `{}` not found", p.display()))),
            }
        }
        None => Ok(dir.and_then(|d| {
            [format!("{verb}.conf"), "default.conf".into()]
                .into_iter()
                .map(|n| d.join(n))
                .find(|c| c.exists())
        })),
    }
}

/// Resolves settings for `verb` from an optional config text and overrides.
pub fn resolve(config_text: Option<&str>, overrides: &[(String, String)]) -> langaux::Result<Settings> {
    let mut s = Settings::default();
    if let Some(text) = config_text {
        for e in kv::parse(text)? {
            s.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("config line {}: {err}", e.line)))?;
        }
    }
    for (k, v) in overrides {
        s.set(k, v).map_err(|err| Error::Config(format!("--{k}: {err}")))?;
    }
    s.validate()?;
    Ok(s)
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Self {
            code: EXIT_USAGE,
            message,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) {
            EXIT_USAGE
        } else {
            EXIT_FAILURE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure {
                code: EXIT_FAILURE,
                message: format!(
                    "{} is locked by another command (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{text}");
            return code;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(matches: &ArgMatches, out: &mut dyn Write) -> Result<(), Failure> {
    let (verb, m) = matches.subcommand().expect("a verb is required");
    let text = match config_file(verb, m.get_one::<String>("config"))? {
        Some(p) => Some(std::fs::read_to_string(&p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let settings = resolve(text.as_deref(), &overrides(verb, m))?;
    let hash = settings.run_hash();
    let run_dir = PathBuf::from(m.get_one::<String>("out").expect("has a default")).join(&hash[..16]);
    writeln!(out, "# {verb} in {}", run_dir.display())?;
    write!(out, "{}", settings.to_kv())?;
    if m.get_flag("dry-run") {
        return Ok(());
    }
    let _lock = RunLock::acquire(&run_dir)?;
    std::fs::write(run_dir.join("config.txt"), settings.to_kv())?;
    let checkpoint = m
        .try_get_one::<String>("checkpoint")
        .ok()
        .flatten()
        .map_or_else(|| run_dir.clone(), PathBuf::from);
    match verb {
        "gen-data" => gen_data(&settings, &run_dir, out),
        "train" => train(&settings, &run_dir, out),
        "eval" => eval(&settings, &run_dir, &checkpoint, out),
        "probe" => probe(&settings, &run_dir, &checkpoint, out),
        "grid" => grid(&settings, &run_dir, out),
        _ => report(&settings, &run_dir, out),
    }
}

fn corpus(s: &Settings) -> langaux::Result<Corpus> {
    Corpus::build(&s.experiment.data, s.experiment.model.window)
}

fn gen_data(s: &Settings, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let c = corpus(s)?;
    write_jsonl(&dir.join("train.jsonl"), &c.train)?;
    write_jsonl(&dir.join("unseen.jsonl"), &c.unseen)?;
    std::fs::write(dir.join("vocab.txt"), c.vocab.to_text())?;
    writeln!(
        out,
        "wrote {} training and {} unseen demonstrations, vocabulary of {}",
        c.train.len(),
        c.unseen.len(),
        c.vocab.len()
    )?;
    Ok(())
}

fn spec(s: &Settings) -> ObsSpec {
    ObsSpec {
        observability: s.experiment.model.observability,
        window: s.experiment.model.window,
    }
}

fn training_examples(s: &Settings, c: &Corpus) -> langaux::Result<Vec<langaux::dataset::Example>> {
    let e = &s.experiment;
    let trajs = c.training_subset(e.data.demos, e.data.annotation_fraction, e.train.seed)?;
    encode_all(&trajs, &c.vocab, &spec(s))
}

fn train(s: &Settings, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let e = &s.experiment;
    let c = corpus(s)?;
    let examples = training_examples(s, &c)?;
    let model = size_model(&e.model, &c.vocab, e.train.objective, e.data.grid_size, e.data.budget);
    std::fs::write(dir.join("vocab.txt"), c.vocab.to_text())?;
    // Training appends to metrics files; a rerun starts them afresh.
    for sub in ["", "high", "low"] {
        let p = dir.join(sub).join("metrics.csv");
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let last = match e.train.objective {
        Objective::Hierarchy => hierarchy_train(&e.train, &examples, &model, Some(dir))?
            .low
            .history
            .last()
            .cloned(),
        Objective::ProbeGoalOnly | Objective::ProbeGoalObs => {
            return Err(Failure::usage(
                "probe objectives are trained by the `probe` verb".into(),
            ))
        }
        _ => train_fresh(&e.train, &examples, &model, Some(dir))?
            .history
            .last()
            .cloned(),
    };
    if let Some(m) = last {
        writeln!(
            out,
            "step {}: total {:.4}, action nll {:.4}, lang nll {:.4}",
            m.step, m.total, m.action_nll, m.lang_nll
        )?;
    }
    writeln!(out, "checkpoints in {}", dir.display())?;
    Ok(())
}

fn load(dir: &Path) -> Result<ModelParams<f32>, Failure> {
    ModelParams::load(dir, "final").map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("cannot load checkpoint from {} ({e}); run `train` first", dir.display()),
    })
}

fn eval(s: &Settings, dir: &Path, checkpoint: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let e = &s.experiment;
    let c = corpus(s)?;
    let cell = Cell::from_config(e);
    let (params, episodes) = if e.train.objective == Objective::Hierarchy {
        let high = load(&checkpoint.join("high"))?;
        let low = load(&checkpoint.join("low"))?;
        let eps = evaluate_success(&low, PlanSource::Planner(&high), &c, &e.eval, cell.seed)?;
        (low, eps)
    } else {
        let p = load(checkpoint)?;
        let eps = evaluate_success(&p, PlanSource::None, &c, &e.eval, cell.seed)?;
        (p, eps)
    };
    let lang = if e.train.objective == Objective::Lang && e.train.effective_lambda() > 0.0 {
        let n = e.eval.episodes.min(c.unseen.len());
        Some(evaluate_language(
            &params,
            &encode_all(&c.unseen[..n], &c.vocab, &spec(s))?,
        )?)
    } else {
        None
    };
    let row = report_row(&cell, &episodes, lang, &e.hash())?;
    let mut f = File::create(dir.join("episodes.jsonl"))?;
    for ep in &episodes {
        writeln!(f, "{}", serde_json::to_string(ep).map_err(Error::from)?)?;
    }
    let report = EvalReport { rows: vec![row] };
    report.write_csv(&dir.join("eval.csv"))?;
    write!(out, "{}", report.to_csv_string()?)?;
    Ok(())
}

fn probe(s: &Settings, dir: &Path, checkpoint: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let e = &s.experiment;
    let c = corpus(s)?;
    let encoder = load(checkpoint)?;
    let train_set = training_examples(s, &c)?;
    let n = e.eval.episodes.min(c.unseen.len());
    let validation = encode_all(&c.unseen[..n], &c.vocab, &spec(s))?;
    let mut w = csv::Writer::from_path(dir.join("probe.csv")).map_err(Error::from)?;
    w.write_record(["probe", "token_accuracy", "nll", "tokens"])
        .map_err(Error::from)?;
    for (name, with_obs) in [("goal_only", false), ("goal_obs", true)] {
        let p = probe_train(&e.train, &train_set, &validation, &encoder, with_obs)?;
        let row = [
            name.to_string(),
            p.accuracy.to_string(),
            p.metrics.nll.to_string(),
            p.metrics.tokens.to_string(),
        ];
        w.write_record(&row).map_err(Error::from)?;
        writeln!(
            out,
            "{name}: token accuracy {:.4} over {} tokens",
            p.accuracy, p.metrics.tokens
        )?;
    }
    w.flush()?;
    Ok(())
}

fn grid(s: &Settings, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let report = run_grid(&s.experiment, &s.grid, Some(dir))?;
    write!(out, "{}", report.to_csv_string()?)?;
    writeln!(out, "report in {}", dir.join("report.csv").display())?;
    Ok(())
}

fn report(s: &Settings, dir: &Path, out: &mut dyn Write) -> Result<(), Failure> {
    let r = &s.report;
    for key in [&r.x, &r.y, &r.series] {
        if !REPORT_HEADER.contains(&key.as_str()) {
            return Err(Failure::usage(format!(
                "`{key}` is not a report column; expected one of {}",
                REPORT_HEADER.join(", ")
            )));
        }
    }
    let input = r.input.clone().unwrap_or_else(|| dir.join("report.csv"));
    let report = EvalReport::read_csv(&input)?;
    let path = dir.join(format!("{}-by-{}-per-{}.svg", r.y, r.x, r.series));
    write_svg(&report, &r.x, &r.y, &r.series, &path)?;
    writeln!(out, "plot in {}", path.display())?;
    Ok(())
}
