//! The `edgequant` command surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 model or state
//! error. Every error message names the offending file or flag.

mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{DataSection, ModelSection, QuantizeSection, RunConfig, SplitSection};

use crate::datakit::{load_image, load_image_dir, load_manifest, split, synth_generate, LabeledDataset};
use crate::engine::{Engine, ExecMode};
use crate::error::Error;
use crate::evalkit::{argmax, compare, evaluate, select_model, EvalReport, SelectionPolicy};
use crate::graph::{self, build_architecture, Family, Graph, QuantTag};
use crate::quantizer::{calibrate, quantize_dynamic_with, quantize_fp16, quantize_full_with, CalibrationStats};
use crate::trainer::{replace_head, train, TrainReport};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_MODEL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn with_path(code: i32, path: &Path, e: Error) -> CliError {
    let message = match e {
        Error::Image { .. } | Error::Data { .. } => e.to_string(),
        _ => format!("{}: {e}", path.display()),
    };
    CliError { code, message }
}

fn data_err(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| with_path(EXIT_DATA, path, e)
}

fn model_err(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| with_path(EXIT_MODEL, path, e)
}

fn state_err(e: Error) -> CliError {
    CliError {
        code: EXIT_MODEL,
        message: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgequant", version, about = "Post-training quantization toolkit for small CNN classifiers")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for initialization, splitting, shuffling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, import into or inspect a model container.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Record activation ranges for full-integer quantization.
    Calibrate(CalibrateArgs),
    /// Quantize a trained model.
    Quantize(QuantizeArgs),
    /// Evaluate a model and write a JSON report.
    Eval(EvalArgs),
    /// Tabulate reports by model and mode.
    Compare(CompareArgs),
    /// Pick one model from a set of reports.
    Select(SelectArgs),
    /// Classify a single image.
    Predict(PredictArgs),
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Build a freshly initialized architecture.
    Build {
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        /// Square side or HxW.
        #[arg(long, value_name = "SIZE")]
        input_size: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Copy weights by name from a donor container.
    Import {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a container's metadata.
    Info {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Class-per-directory image folder, or a tab-separated manifest file.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Synthetic data, e.g. `classes=4,per-class=500,noise=0.1`.
    #[arg(long, value_name = "SPEC")]
    synth: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Reinitialize the classifier head to match the data's class count.
    #[arg(long)]
    replace_head: bool,
    /// Write the training report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split to draw calibration batches from.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// fp16, dynamic or full.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// train, val, test or all.
    #[arg(long, default_value = "all")]
    split: String,
    /// auto reads the model's quantization tag.
    #[arg(long, default_value = "auto")]
    mode: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// `size:<f1 floor>` or `accuracy`.
    #[arg(long)]
    policy: String,
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "auto")]
    mode: String,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: Cli, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("--config: {e}")))?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cfg.threads == Some(0) {
        return Err(usage("--threads must be positive"));
    }
    cfg.train.seed = cfg.seed();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| usage(format!("--threads: {e}")))?;
    pool.install(|| dispatch(cli.command, cfg, out))
}

fn dispatch(command: Command, cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    match command {
        Command::Model(m) => model_command(m, cfg, out),
        Command::Train(a) => train_command(a, cfg, out),
        Command::Calibrate(a) => calibrate_command(a, cfg, out),
        Command::Quantize(a) => quantize_command(a, cfg, out),
        Command::Eval(a) => eval_command(a, cfg, out),
        Command::Compare(a) => compare_command(a, out),
        Command::Select(a) => select_command(a, out),
        Command::Predict(a) => predict_command(a, cfg, out),
    }
}

fn emit(out: &mut (dyn Write + Send), text: impl fmt::Display) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("stdout: {e}"),
    })
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

/// Refuses to overwrite any input with an output.
fn distinct_output(out_flag: &str, out: &Path, inputs: &[&Path]) -> CliResult<()> {
    let canon = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let target = canon(out);
    for input in inputs {
        if canon(input) == target {
            return Err(usage(format!(
                "{out_flag} {} would overwrite an input file",
                out.display()
            )));
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Graph> {
    graph::load(path).map_err(model_err(path))
}

fn save_model(g: &Graph, path: &Path) -> CliResult<()> {
    graph::save(g, path).map_err(|e| with_path(EXIT_DATA, path, e))
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || usage(format!("--input-size: expected N or HxW, got `{s}`"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    Ok((h, w))
}

fn parse_mode(flag: &str, s: &str, g: &Graph) -> CliResult<ExecMode> {
    if s == "auto" {
        return Ok(ExecMode::for_tag(g.meta.quant));
    }
    s.parse().map_err(|e: Error| usage(format!("{flag}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SynthSpec {
    classes: usize,
    per_class: usize,
    size: Option<(usize, usize)>,
    noise: f32,
}

fn parse_synth(s: &str) -> CliResult<SynthSpec> {
    let mut spec = SynthSpec {
        classes: 4,
        per_class: 500,
        size: None,
        noise: 0.1,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || usage(format!("--synth: bad entry `{part}`"));
        let (key, value) = part.split_once('=').ok_or_else(bad)?;
        match key.trim() {
            "classes" => spec.classes = value.trim().parse().map_err(|_| bad())?,
            "per-class" | "per_class" => spec.per_class = value.trim().parse().map_err(|_| bad())?,
            "size" => spec.size = Some(parse_size(value.trim()).map_err(|_| bad())?),
            "noise" => spec.noise = value.trim().parse().map_err(|_| bad())?,
            _ => return Err(usage(format!("--synth: unknown key `{key}` (classes, per-class, size, noise)"))),
        }
    }
    Ok(spec)
}

enum Source {
    Dir(PathBuf),
    Synth(String),
}

/// Loads the dataset named by the flags (or the config) at the model's
/// input size, with optional normalization.
fn load_data(args: &DataArgs, cfg: &RunConfig, size: (usize, usize)) -> CliResult<LabeledDataset> {
    let source = match (&args.data, &args.synth) {
        (Some(path), _) => Source::Dir(path.clone()),
        (None, Some(spec)) => Source::Synth(spec.clone()),
        (None, None) => match (&cfg.data.dir, &cfg.data.synth) {
            (Some(path), _) => Source::Dir(path.clone()),
            (None, Some(spec)) => Source::Synth(spec.clone()),
            (None, None) => return Err(usage("one of --data or --synth is required")),
        },
    };
    let mut ds = match source {
        Source::Dir(path) if path.is_dir() => load_image_dir(&path, size).map_err(data_err(&path))?,
        Source::Dir(path) => load_manifest(&path, size).map_err(data_err(&path))?,
        Source::Synth(spec) => {
            let s = parse_synth(&spec)?;
            if let Some(sz) = s.size {
                if sz != size {
                    return Err(usage(format!(
                        "--synth: size {}x{} differs from the model input {}x{}",
                        sz.0, sz.1, size.0, size.1
                    )));
                }
            }
            synth_generate(s.classes, s.per_class, size, s.noise, cfg.seed())
                .map_err(|e| usage(format!("--synth: {e}")))?
        }
    };
    if let (Some(mean), Some(std)) = (&cfg.data.mean, &cfg.data.std) {
        ds.normalize(mean, std).map_err(|e| usage(format!("--config data.mean/std: {e}")))?;
    }
    Ok(ds)
}

fn input_size(g: &Graph) -> (usize, usize) {
    (g.input.shape[1], g.input.shape[2])
}

struct Selected {
    data: LabeledDataset,
    splits: std::collections::BTreeMap<String, usize>,
}

fn select_split(ds: LabeledDataset, which: &str, cfg: &RunConfig) -> CliResult<Selected> {
    if which == "all" {
        let mut splits = std::collections::BTreeMap::new();
        splits.insert("all".to_string(), ds.len());
        return Ok(Selected { data: ds, splits });
    }
    let (train, val, test) = split(&ds, &cfg.split_spec()).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("splitting data: {e}"),
    })?;
    let splits = [("train", train.len()), ("val", val.len()), ("test", test.len())]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let data = match which {
        "train" => train,
        "val" => val,
        "test" => test,
        other => return Err(usage(format!("--split: expected train, val, test or all, got `{other}`"))),
    };
    Ok(Selected { data, splits })
}

fn model_command(cmd: ModelCommand, cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    match cmd {
        ModelCommand::Build {
            family,
            classes,
            input_size,
            out: path,
        } => {
            let family = family
                .or(cfg.model.family.clone())
                .ok_or_else(|| usage("--family is required"))?;
            let family: Family = family.parse().map_err(|e: Error| usage(format!("--family: {e}")))?;
            let classes = classes
                .or(cfg.model.num_classes)
                .ok_or_else(|| usage("--classes is required"))?;
            let size = match input_size {
                Some(s) => parse_size(&s)?,
                None => cfg
                    .model
                    .input_size
                    .map(|[h, w]| (h, w))
                    .unwrap_or_else(|| family.default_input_size()),
            };
            let g = build_architecture(family, classes, size, cfg.seed())
                .map_err(|e| usage(format!("--family/--classes/--input-size: {e}")))?;
            emit(out, format!("params: {}", g.param_count()))?;
            if let Some(path) = path {
                save_model(&g, &path)?;
                emit(out, format!("wrote {} ({} bytes)", path.display(), graph::serialized_len(&g)))?;
            }
            Ok(())
        }
        ModelCommand::Import { model, from, out: path } => {
            distinct_output("--out", &path, &[&model, &from])?;
            let mut g = load_model(&model)?;
            let donor = load_model(&from)?;
            let summary = graph::import_weights(&mut g, &donor).map_err(model_err(&from))?;
            save_model(&g, &path)?;
            emit(
                out,
                format!("copied {} tensors, skipped {}", summary.copied.len(), summary.skipped.len()),
            )?;
            for s in &summary.skipped {
                emit(out, format!("skipped: {s}"))?;
            }
            Ok(())
        }
        ModelCommand::Info { model } => {
            let g = load_model(&model)?;
            let [_, h, w, c] = g.input.shape;
            emit(out, format!("family: {}", g.meta.family))?;
            emit(out, format!("classes: {}", g.meta.num_classes))?;
            emit(out, format!("input: {h}x{w}x{c}"))?;
            emit(out, format!("quantization: {}", g.meta.quant))?;
            emit(out, format!("nodes: {}", g.nodes.len()))?;
            emit(out, format!("params: {}", g.param_count()))?;
            emit(out, format!("size_bytes: {}", graph::serialized_len(&g)))
        }
    }
}

fn train_command(a: TrainArgs, mut cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    distinct_output("--out", &a.out, &[&a.model])?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr0 = lr;
    }
    cfg.train.validate().map_err(|e| usage(format!("--epochs/--batch-size/--lr: {e}")))?;
    let mut g = load_model(&a.model)?;
    let ds = load_data(&a.data, &cfg, input_size(&g))?;
    if a.replace_head && ds.num_classes() != g.meta.num_classes {
        g = replace_head(&g, ds.num_classes(), cfg.seed()).map_err(model_err(&a.model))?;
    }
    if ds.num_classes() > g.meta.num_classes {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "data has {} classes but {} predicts {}; pass --replace-head",
                ds.num_classes(),
                a.model.display(),
                g.meta.num_classes
            ),
        });
    }
    let (train_set, val_set, _) = split(&ds, &cfg.split_spec()).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("splitting data: {e}"),
    })?;
    let (mut trained, mut report): (Graph, TrainReport) =
        train(&g, &train_set, &val_set, &cfg.train).map_err(model_err(&a.model))?;
    if trained.meta.num_classes == ds.num_classes() {
        trained.meta.class_names = ds.class_names.clone();
    }
    save_model(&trained, &a.out)?;
    report.checkpoint = Some(a.out.clone());
    emit(out, report.to_text().trim_end())?;
    let best = report.best();
    emit(
        out,
        format!("best epoch {} val_acc {:.4} -> {}", best.epoch, best.val_acc, a.out.display()),
    )?;
    if let Some(path) = a.report.as_ref().or(cfg.report.as_ref()) {
        write_file(path, report.to_json().as_bytes())?;
    }
    Ok(())
}

fn calibrate_command(a: CalibrateArgs, cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    distinct_output("--out", &a.out, &[&a.model])?;
    let g = load_model(&a.model)?;
    let ds = load_data(&a.data, &cfg, input_size(&g))?;
    let sel = select_split(ds, &a.split, &cfg)?;
    let batches = a.batches.unwrap_or(cfg.quantize.calibration_batches);
    let batch_size = a.batch_size.unwrap_or(cfg.quantize.calibration_batch_size);
    if batches == 0 || batch_size == 0 {
        return Err(usage("--batches and --batch-size must be positive"));
    }
    let stats = calibrate(&g, sel.data.batches(batch_size), batches).map_err(model_err(&a.model))?;
    stats.save(&a.out).map_err(|e| with_path(EXIT_DATA, &a.out, e))?;
    let used = batches.min(sel.data.len().div_ceil(batch_size));
    emit(
        out,
        format!("recorded {} tensors from {used} batches -> {}", stats.len(), a.out.display()),
    )
}

fn quantize_command(a: QuantizeArgs, cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.stats.as_deref());
    distinct_output("--out", &a.out, &inputs)?;
    let mode = a
        .mode
        .or(cfg.quantize.mode.clone())
        .ok_or_else(|| usage("--mode is required (fp16, dynamic or full)"))?;
    let tag = QuantTag::parse(&mode)
        .filter(|t| *t != QuantTag::None)
        .ok_or_else(|| usage(format!("--mode: expected fp16, dynamic or full, got `{mode}`")))?;
    let qcfg = cfg.quantize.to_config();
    let stats = match (&a.stats, tag) {
        (Some(path), QuantTag::FullInt) => Some(CalibrationStats::load(path).map_err(data_err(path))?),
        (None, QuantTag::FullInt) => {
            return Err(CliError {
                code: EXIT_MODEL,
                message: "calibration stats required: pass --stats FILE written by `calibrate`".into(),
            })
        }
        _ => None,
    };
    let g = load_model(&a.model)?;
    let q = match tag {
        QuantTag::Fp16 => quantize_fp16(&g),
        QuantTag::Dynamic => quantize_dynamic_with(&g, &qcfg),
        _ => quantize_full_with(&g, stats.as_ref().expect("checked above"), &qcfg),
    }
    .map_err(model_err(&a.model))?;
    save_model(&q, &a.out)?;
    let before = graph::serialized_len(&g);
    let after = graph::serialized_len(&q);
    emit(
        out,
        format!(
            "{}: {before} -> {after} bytes (ratio {:.4}) -> {}",
            tag,
            after as f64 / before as f64,
            a.out.display()
        ),
    )
}

fn eval_command(a: EvalArgs, mut cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let g = load_model(&a.model)?;
    let mode = parse_mode("--mode", &a.mode, &g)?;
    cfg.quantize.mode = Some(mode.name().to_string());
    let ds = load_data(&a.data, &cfg, input_size(&g))?;
    let sel = select_split(ds, &a.split, &cfg)?;
    let mut report = evaluate(&g, &sel.data, mode).map_err(|e| match e {
        Error::InvalidArgument(_) => with_path(EXIT_DATA, &a.model, e),
        _ => with_path(EXIT_MODEL, &a.model, e),
    })?;
    report.splits = sel.splits;
    report.config = serde_json::json!({
        "model": a.model,
        "split": a.split,
        "data": a.data.data,
        "synth": a.data.synth,
        "run": cfg,
    });
    emit(
        out,
        format!(
            "{}  size {} bytes  acc {:.4}  pr {:.4}  re {:.4}  f1 {:.4}  ({} samples, {:.3} ms/sample)",
            report.model_id,
            report.size_bytes,
            report.accuracy,
            report.macro_precision,
            report.macro_recall,
            report.macro_f1,
            report.samples,
            report.latency_ms_per_sample
        ),
    )?;
    if let Some(path) = a.report.as_ref().or(cfg.report.as_ref()) {
        distinct_output("--report", path, &[&a.model])?;
        write_file(path, report.to_json().as_bytes())?;
    }
    Ok(())
}

fn read_reports(paths: &[PathBuf]) -> CliResult<Vec<EvalReport>> {
    paths
        .iter()
        .map(|p| EvalReport::from_json(&read_text(p)?).map_err(data_err(p)))
        .collect()
}

fn compare_command(a: CompareArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    if let Some(path) = &a.out {
        let inputs: Vec<&Path> = a.reports.iter().map(PathBuf::as_path).collect();
        distinct_output("--out", path, &inputs)?;
    }
    let table = compare(&read_reports(&a.reports)?);
    emit(out, table.to_text().trim_end())?;
    if let Some(path) = &a.out {
        write_file(path, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn select_command(a: SelectArgs, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let policy: SelectionPolicy = a.policy.parse().map_err(|e: Error| usage(format!("--policy: {e}")))?;
    let reports = read_reports(&a.reports)?;
    let chosen = select_model(&reports, policy).map_err(state_err)?;
    emit(out, &chosen.model_id)
}

fn predict_command(a: PredictArgs, cfg: RunConfig, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let g = load_model(&a.model)?;
    let mode = parse_mode("--mode", &a.mode, &g)?;
    let (h, w) = input_size(&g);
    let mut image = load_image(&a.image, (h, w)).map_err(data_err(&a.image))?;
    if let (Some(mean), Some(std)) = (&cfg.data.mean, &cfg.data.std) {
        let sample = crate::datakit::Sample { image, label: 0 };
        let mut one = LabeledDataset::new(vec![sample], vec!["x".into()]).map_err(state_err)?;
        one.normalize(mean, std).map_err(|e| usage(format!("--config data.mean/std: {e}")))?;
        image = one.samples.remove(0).image;
    }
    let batch = image.reshape(vec![1, h, w, 3]).map_err(data_err(&a.image))?;
    let engine = Engine::new(&g, mode).map_err(model_err(&a.model))?;
    let probs = engine.run(&batch).map_err(model_err(&a.model))?;
    let probs = probs.expect_f32("model output").map_err(state_err)?;
    let name = |c: usize| g.meta.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
    let best = argmax(probs);
    emit(out, format!("prediction: {} ({:.4})", name(best), probs[best]))?;
    for (c, p) in probs.iter().enumerate() {
        emit(out, format!("{}\t{p:.6}", name(c)))?;
    }
    Ok(())
}
