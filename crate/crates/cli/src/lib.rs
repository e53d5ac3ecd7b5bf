//! The `mdcdet` command line: stream generation, continual training,
//! evaluation and ablation sweeps.
//!
//! Every command writes its outputs plus one `manifest_<command>.json` into
//! the `--out` directory. Exit codes: 0 success, 2 usage, 3 input data,
//! 4 invariant violation during test-mode training.

pub mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mdcdet_core::checkpoint::{checkpoint_name, checkpoint_path};
use mdcdet_core::metrics::{ContinualMap, EvalReport, TaskReport};
use mdcdet_core::synth::{default_archetypes, generate_stream, load_stream, save_stream, StreamSpec};
use mdcdet_core::trainer::{evaluate, pretrain_stream, run_from_pretrained, run_tasks, Pretrained, StreamCache};
use mdcdet_core::{Checkpoint, Components, EpochLog, Model, RunOptions, TaskStream, TrainConfig};

use manifest::ManifestBuilder;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

pub const STREAM_FILE: &str = "stream.jsonl";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Bad flags or flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<mdcdet_core::Error>() {
            return match e {
                mdcdet_core::Error::Invariant(_) => EXIT_INVARIANT,
                mdcdet_core::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "mdcdet", version, about = "Memory-augmented continual object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Record every duration as 0 so logs and manifests are byte-reproducible.
    #[arg(long, global = true)]
    pub fixed_clock: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic class-incremental stream.
    Generate(GenerateArgs),
    /// Train over the tasks of a stream, writing a checkpoint per task.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the evaluation splits of a stream.
    Evaluate(EvaluateArgs),
    /// Run one ablation axis and emit a comparison CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory; the stream goes to `stream.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Stream spec file (TOML, fields of the stream spec).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Classes per task.
    #[arg(long)]
    pub per_task: Option<usize>,
    #[arg(long)]
    pub train_per_task: Option<usize>,
    #[arg(long)]
    pub eval_per_task: Option<usize>,
    #[arg(long)]
    pub recurrence_rate: Option<f64>,
}

/// Training settings shared by `train` and `ablate`. Precedence is
/// defaults < `--config` file < flags.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// Flat TOML document with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs per task.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub delta_bt: Option<f64>,
    #[arg(long)]
    pub lambda_q: Option<f64>,
    /// Number of memory units.
    #[arg(long)]
    pub nm: Option<usize>,
    /// Memory length.
    #[arg(long)]
    pub lm: Option<usize>,
    #[arg(long)]
    pub no_bt: bool,
    #[arg(long)]
    pub no_ql: bool,
    #[arg(long)]
    pub no_mem: bool,
}

impl TrainOverrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<TrainConfig>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.pretrain_epochs {
            c.pretrain_epochs = v;
        }
        if let Some(v) = self.delta_bt {
            c.delta_bt = v;
        }
        if let Some(v) = self.lambda_q {
            c.lambda_q = v;
        }
        if let Some(v) = self.nm {
            c.n_units = v;
        }
        if let Some(v) = self.lm {
            c.memory_length = v;
        }
        c.use_bt &= !self.no_bt;
        c.use_ql &= !self.no_ql;
        c.use_memory &= !self.no_mem;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train tasks up to this one (1-based); defaults to every task.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Resume at this task (1-based) from `ckpt_task{N-1}.json` in `--out`.
    #[arg(long, default_value_t = 1)]
    pub start_task: usize,
    /// Assert masking and freezing invariants bit-exactly while training.
    #[arg(long)]
    pub test_mode: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    /// Task (1-based) to evaluate at; defaults to the checkpoint's task.
    #[arg(long)]
    pub task: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// FT, FT+Mem, FT+Mem+BT, FT+Mem+QL, FT+Mem+BT+QL.
    Components,
    /// δ_bt ∈ {0.25, 0.50, 0.65, 0.85} on the full configuration.
    Delta,
    /// (N_m, L_m) ∈ {(50,10), (100,10), (100,20), (200,20)}.
    Memory,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn run(cli: Cli) -> Result<()> {
    let fixed = cli.fixed_clock;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a, fixed).map(drop),
        Command::Train(a) => cmd_train(&a, fixed).map(drop),
        Command::Evaluate(a) => cmd_evaluate(&a, fixed).map(drop),
        Command::Ablate(a) => cmd_ablate(&a, fixed).map(drop),
    }
}

fn resolve_spec(args: &GenerateArgs) -> Result<StreamSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            toml::from_str::<StreamSpec>(&text).with_context(|| format!("parsing spec {}", path.display()))?
        }
        None => StreamSpec::default(),
    };
    if args.tasks.is_some() || args.per_task.is_some() {
        let n = args.tasks.unwrap_or(spec.n_tasks());
        let per = match args.per_task {
            Some(p) => p,
            None => spec.task_classes.first().map_or(0, Vec::len),
        };
        if n == 0 || per == 0 {
            return Err(usage(format!("need at least one task and one class per task, got {n} × {per}")));
        }
        spec.task_classes = (0..n).map(|t| (t * per..(t + 1) * per).collect()).collect();
        spec.archetypes = default_archetypes(n * per);
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.train_per_task {
        spec.train_per_task = v;
    }
    if let Some(v) = args.eval_per_task {
        spec.eval_per_task = v;
    }
    if let Some(v) = args.recurrence_rate {
        spec.recurrence_rate = v;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_generate(args: &GenerateArgs, fixed_clock: bool) -> Result<PathBuf> {
    let spec = resolve_spec(args)?;
    let mut m = ManifestBuilder::new("generate", fixed_clock);
    if let Some(c) = &args.config {
        m.input(c)?;
    }
    let stream = generate_stream(&spec)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join(STREAM_FILE);
    save_stream(&stream, &path)?;
    m.existing_output(&args.out, STREAM_FILE)?;
    m.finish(&args.out, serde_json::to_value(&spec)?, spec.seed)?;
    Ok(path)
}

fn read_stream_input(path: &Path, m: &mut ManifestBuilder) -> Result<TaskStream> {
    if !path.is_file() {
        bail!(mdcdet_core::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("stream file {} not found", path.display())
        )));
    }
    m.input(path)?;
    Ok(load_stream(path)?)
}

fn task_count(requested: Option<usize>, stream: &TaskStream) -> Result<usize> {
    let n = requested.unwrap_or(stream.n_tasks());
    if n == 0 || n > stream.n_tasks() {
        return Err(usage(format!("--tasks {n} outside 1..={}", stream.n_tasks())));
    }
    Ok(n)
}

fn log_lines(logs: &[EpochLog]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn report_outputs(m: &mut ManifestBuilder, dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let mut json = report.to_json()?;
    json.push('\n');
    m.output(dir, &format!("{stem}.json"), json.as_bytes())?;
    m.output(dir, &format!("{stem}.csv"), report.to_csv().as_bytes())
}

/// Everything a training run produced.
#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
}

pub fn cmd_train(args: &TrainArgs, fixed_clock: bool) -> Result<TrainSummary> {
    let config = args.overrides.resolve()?;
    let mut m = ManifestBuilder::new("train", fixed_clock);
    if let Some(c) = &args.overrides.config {
        m.input(c)?;
    }
    let stream = read_stream_input(&args.stream, &mut m)?;
    let n = task_count(args.tasks, &stream)?;
    if args.start_task == 0 || args.start_task > n {
        return Err(usage(format!("--start-task {} outside 1..={n}", args.start_task)));
    }
    let options = RunOptions { test_mode: args.test_mode, fixed_clock };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let (model, cache, mut logs) = if args.start_task == 1 {
        let Pretrained { detector, cache, logs } = pretrain_stream(&stream, &config, options)?;
        (Model::assemble(detector, &config, stream.task_classes())?, cache, logs)
    } else {
        let prev = Checkpoint::load_previous(&args.out, args.start_task)?.expect("task ≥ 2");
        m.input(&checkpoint_path(&args.out, args.start_task - 1))?;
        prev.check_universe(&stream.task_classes())?;
        if prev.config_hash != config.hash() {
            bail!(mdcdet_core::Error::Compatibility(
                "resuming with a config that differs from the checkpoint's".into()
            ));
        }
        let model = prev.to_model()?;
        let cache = StreamCache::build(&model.detector, &stream)?;
        (model, cache, Vec::new())
    };

    let mut checkpoints = Vec::new();
    let out = run_tasks(model, &cache, &config, args.start_task - 1..n, options, |t, model, _| {
        let path = checkpoint_path(&args.out, t + 1);
        Checkpoint::capture(model, &config, t + 1).save(&path)?;
        checkpoints.push(path);
        Ok(())
    })?;
    for t in args.start_task..=n {
        m.existing_output(&args.out, &checkpoint_name(t))?;
    }
    logs.extend(out.logs);

    let mut log_bytes =
        if args.start_task > 1 { fs::read(args.out.join(TRAIN_LOG)).unwrap_or_default() } else { Vec::new() };
    log_bytes.extend(log_lines(&logs)?);
    m.output(&args.out, TRAIN_LOG, &log_bytes)?;

    let report = EvalReport { tasks: out.reports, config_hash: config.hash(), seed: config.seed };
    report_outputs(&mut m, &args.out, "report", &report)?;
    m.finish(&args.out, serde_json::to_value(&config)?, config.seed)?;
    Ok(TrainSummary { checkpoints, logs, report })
}

pub fn cmd_evaluate(args: &EvaluateArgs, fixed_clock: bool) -> Result<EvalReport> {
    let mut m = ManifestBuilder::new("evaluate", fixed_clock);
    let stream = read_stream_input(&args.stream, &mut m)?;
    m.input(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    ckpt.check_universe(&stream.task_classes())?;
    let task = args.task.unwrap_or(ckpt.task);
    if task == 0 || task > ckpt.task {
        return Err(usage(format!("--task {task} outside 1..={} for this checkpoint", ckpt.task)));
    }
    let model = ckpt.to_model()?;
    let cache = StreamCache::build(&model.detector, &stream)?;
    let report = EvalReport {
        tasks: vec![evaluate(&model, &cache, task - 1)?],
        config_hash: ckpt.config_hash.clone(),
        seed: ckpt.seed,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    report_outputs(&mut m, &args.out, &format!("eval_task{task}"), &report)?;
    m.finish(&args.out, serde_json::to_value(&ckpt.config)?, ckpt.seed)?;
    Ok(report)
}

/// One configuration of an ablation axis.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

/// The configurations of `axis` derived from `base`. Memory sizes are
/// rounded down to a multiple of `n_tasks` so every task owns an equal
/// chunk; the label shows the effective size and, when rounded, the
/// requested one.
pub fn variants(axis: Axis, base: &TrainConfig, n_tasks: usize) -> Result<Vec<Variant>> {
    let v = match axis {
        Axis::Components => {
            [Components::Ft, Components::FtMem, Components::FtMemBt, Components::FtMemQl, Components::FtMemBtQl]
                .into_iter()
                .map(|c| {
                    let mut config = base.clone();
                    c.apply(&mut config);
                    Variant { label: c.label().to_string(), config }
                })
                .collect()
        }
        Axis::Delta => [0.25, 0.50, 0.65, 0.85]
            .into_iter()
            .map(|d| {
                let mut config = base.clone();
                Components::FtMemBtQl.apply(&mut config);
                config.delta_bt = d;
                Variant { label: format!("delta_bt={d:.2}"), config }
            })
            .collect(),
        Axis::Memory => {
            let mut out = Vec::new();
            for (nm, lm) in [(50, 10), (100, 10), (100, 20), (200, 20)] {
                let effective = nm - nm % n_tasks;
                if effective == 0 {
                    return Err(usage(format!("N_m={nm} is smaller than {n_tasks} tasks")));
                }
                let mut config = base.clone();
                Components::FtMemBtQl.apply(&mut config);
                config.n_units = effective;
                config.memory_length = lm;
                let label =
                    if effective == nm { format!("nm={nm}/lm={lm}") } else { format!("nm={effective}({nm})/lm={lm}") };
                out.push(Variant { label, config });
            }
            out
        }
    };
    Ok(v)
}

fn metric_rows(out: &mut String, label: &str, reports: &[TaskReport]) {
    for r in reports {
        let ContinualMap { map_p, map_c, map_a } = r.map;
        for (name, v) in [("map_p", map_p), ("map_c", map_c), ("map_a", map_a)] {
            let v = v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{label},{},{name},{v}", r.task);
        }
    }
}

/// Reports per variant label, in axis order.
pub type AblationResults = Vec<(String, Vec<TaskReport>)>;

pub fn cmd_ablate(args: &AblateArgs, fixed_clock: bool) -> Result<AblationResults> {
    let base = args.overrides.resolve()?;
    let mut m = ManifestBuilder::new("ablate", fixed_clock);
    if let Some(c) = &args.overrides.config {
        m.input(c)?;
    }
    let stream = read_stream_input(&args.stream, &mut m)?;
    let n = task_count(args.tasks, &stream)?;
    let options = RunOptions { test_mode: false, fixed_clock };
    let variants = variants(args.axis, &base, stream.n_tasks())?;
    for v in &variants {
        v.config.validate()?;
    }

    // Variants agreeing on everything pretraining depends on share it.
    let mut pretrained: BTreeMap<String, Pretrained> = BTreeMap::new();
    let mut results = Vec::new();
    let mut csv = String::from("config,task,metric,value\n");
    for v in &variants {
        let key = v.config.pretrain_key();
        if !pretrained.contains_key(&key) {
            pretrained.insert(key.clone(), pretrain_stream(&stream, &v.config, options)?);
        }
        let out = run_from_pretrained(&pretrained[&key], &stream, &v.config, n, options, |_, _, _| Ok(()))?;
        metric_rows(&mut csv, &v.label, &out.reports);
        results.push((v.label.clone(), out.reports));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    m.output(&args.out, "ablation.csv", csv.as_bytes())?;
    let configs: BTreeMap<&str, &TrainConfig> = variants.iter().map(|v| (v.label.as_str(), &v.config)).collect();
    let record =
        serde_json::json!({ "axis": format!("{:?}", args.axis).to_lowercase(), "base": base, "variants": configs });
    m.finish(&args.out, record, base.seed)?;
    Ok(results)
}

/// Applies `MDCDET_THREADS` to the global rayon pool.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MDCDET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MDCDET_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}
