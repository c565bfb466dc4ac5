//! The `mrrn` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{build_model, load_checkpoint, read_checkpoint_header, ArchConfig, Model, ModelKind};
use crate::config::{Preset, ResolvedConfig, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{dsc, emit_table, parse_csv, MethodRow, Structure, TableFormat};
use crate::phantom::{self, generate_corpus, make_splits, read_slice, write_dataset, write_slice, LabeledSlice, Split};
use crate::suite::run_suite;
use crate::tensor::{LabelMask, Precision, Real};
use crate::train::{predict_all, train_observed, BEST_CHECKPOINT};

pub const EVAL_FILE: &str = "eval.csv";
pub const PER_CASE_FILE: &str = "per_case.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "mrrn", version, about = "Multiple resolution residual network for thoracic organ segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom corpus with a train/val/test manifest.
    GenerateData(GenerateArgs),
    /// Train a model; writes history.csv, epoch_<n>.ckpt and best.ckpt.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predictions on one split.
    Eval(EvalArgs),
    /// Write predicted masks and overlay images for one split.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the trainable parameter count of an architecture.
    ParamCount(ParamCountArgs),
    /// Render mean ± std and median (IQR) tables from eval CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Run configuration file (TOML with [data], [arch] and [train] sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, env = "MRRN_SEED")]
    pub seed: Option<u64>,
    /// Element type, f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Worker threads; only 1, the deterministic single-threaded path, is supported.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ArchArgs {
    /// Architecture preset: tiny, desk or reference.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Network family: mrrn or unet.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Number of feature streams.
    #[arg(long)]
    pub streams: Option<usize>,
    /// Channel count of the full-resolution stream.
    #[arg(long)]
    pub base: Option<usize>,
    /// CNN blocks per residual connection unit.
    #[arg(long)]
    pub blocks: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Corpus directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Slice size in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "n-train")]
    pub n_train: Option<usize>,
    #[arg(long = "n-val")]
    pub n_val: Option<usize>,
    #[arg(long = "n-test")]
    pub n_test: Option<usize>,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Split to score.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of predicted `<slice_id>.mrsl` files to score instead.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Method name written to the CSV.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Output directory; masks go to `masks/`, overlays to `overlays/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    /// Random instances per op.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Random instances of each whole tiny network.
    #[arg(long, default_value_t = 3)]
    pub model_instances: usize,
    #[arg(long, env = "MRRN_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// eval.csv files, one or more methods each.
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Merges file values and flag overrides.
fn run_config(common: &CommonArgs, arch: Option<&ArchArgs>, data: Option<&DataArgs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.precision {
        cfg.precision = v;
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    if let Some(d) = data {
        if let Some(v) = &d.data {
            cfg.data.dir = Some(v.clone());
        }
        if let Some(v) = d.size {
            cfg.data.size = v;
            cfg.arch.input_size = Some(v);
        }
    }
    if let Some(a) = arch {
        if let Some(v) = a.preset {
            // A preset on the command line replaces the file's architecture.
            cfg.arch = Default::default();
            cfg.arch.preset = Some(v);
        }
        if let Some(v) = a.model {
            cfg.arch.model = Some(v);
        }
        if let Some(v) = a.streams {
            cfg.arch.num_streams = Some(v);
        }
        if let Some(v) = a.base {
            cfg.arch.base_channels = Some(v);
        }
        if let Some(v) = a.blocks {
            cfg.arch.rcus_per_block = Some(v);
        }
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data.dir.clone().ok_or_else(|| Error::Config(vec!["no corpus directory: pass --data or set [data] dir".into()]))
}

fn read_split(dir: &Path, split: Split) -> Result<Vec<LabeledSlice>> {
    let slices = phantom::read_split(dir, split)?;
    if slices.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` of {} is empty", dir.display())));
    }
    Ok(slices)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(&args.common, None, Some(&args.data))?;
    cfg.data.dir = Some(args.out.clone());
    if let Some(v) = args.n_train {
        cfg.data.train = v;
    }
    if let Some(v) = args.n_val {
        cfg.data.val = v;
    }
    if let Some(v) = args.n_test {
        cfg.data.test = v;
    }
    let resolved = cfg.resolve()?;
    let d = &resolved.data;
    let manifest = make_splits(d.train, d.val, d.test, resolved.seed)?;
    let slices = generate_corpus(&d.phantom_params(), d.train + d.val + d.test, resolved.seed)?;
    write_dataset(&slices, &manifest, &args.out)?;
    resolved.write_to(&args.out)?;
    writeln!(out, "wrote {} slices of {}×{} to {}", slices.len(), d.size, d.size, args.out.display()).ok();
    Ok(())
}

fn train_typed<T: Real>(resolved: &ResolvedConfig, dir: &Path, quiet: bool, out: &mut dyn Write) -> Result<()> {
    let train_set = read_split(dir, Split::Train)?;
    let val_set = read_split(dir, Split::Val)?;
    let model: Model<T> = build_model(&resolved.arch, resolved.seed)?;
    let outcome = train_observed(model, &train_set, &val_set, &resolved.train, |r| {
        if !quiet {
            let dsc = r.dsc_avg().map_or(String::new(), |a| format!("  val dsc {a:.4}"));
            writeln!(out, "epoch {:>4}  loss {:.5}{dsc}", r.epoch, r.train_loss).ok();
        }
    })?;
    let best = resolved.train.checkpoint_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));
    let at = best.map_or(String::new(), |p| format!(", saved to {}", p.display()));
    writeln!(out, "best epoch {} (average validation dsc {:.4}){at}", outcome.best_epoch, outcome.best_avg).ok();
    Ok(())
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = run_config(&args.common, Some(&args.arch), Some(&args.data))?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.checkpoint_dir = Some(args.out.clone());
    let dir = data_dir(&cfg)?;
    let resolved = cfg.resolve()?;
    resolved.write_to(&args.out)?;
    match resolved.precision {
        Precision::F32 => train_typed::<f32>(&resolved, &dir, args.quiet, out),
        Precision::F64 => train_typed::<f64>(&resolved, &dir, args.quiet, out),
    }
}

fn predict_typed<T: Real>(checkpoint: &Path, slices: &[LabeledSlice], batch_size: usize) -> Result<Vec<LabelMask>> {
    let mut model: Model<T> = load_checkpoint(checkpoint)?;
    predict_all(&mut model, slices, batch_size)
}

fn predict_checkpoint(checkpoint: &Path, slices: &[LabeledSlice], batch_size: usize) -> Result<Vec<LabelMask>> {
    match read_checkpoint_header(checkpoint)?.precision {
        Precision::F32 => predict_typed::<f32>(checkpoint, slices, batch_size),
        Precision::F64 => predict_typed::<f64>(checkpoint, slices, batch_size),
    }
}

fn truth(slice: &LabeledSlice) -> Result<LabelMask> {
    LabelMask::new(1, slice.size, slice.size, slice.mask.clone())
}

/// Per-case Dice of every structure.
pub fn per_case_dsc(preds: &[LabelMask], slices: &[LabeledSlice]) -> Result<Vec<[f64; 5]>> {
    preds
        .iter()
        .zip(slices)
        .map(|(p, s)| {
            let gt = truth(s)?;
            let mut row = [0.0; 5];
            for (v, st) in row.iter_mut().zip(Structure::ALL) {
                *v = dsc(p, &gt, st.label())?;
            }
            Ok(row)
        })
        .collect()
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(&CommonArgs::default(), None, Some(&args.data))?;
    let dir = data_dir(&cfg)?;
    let slices = read_split(&dir, args.split)?;
    let (preds, default_method) = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), _) => {
            let header = read_checkpoint_header(ckpt)?;
            let name = match header.arch.model {
                ModelKind::Mrrn => "MRRN",
                ModelKind::Unet => "U-Net",
            };
            (predict_checkpoint(ckpt, &slices, args.batch_size)?, name.to_string())
        }
        (None, Some(pred_dir)) => {
            let preds = slices
                .iter()
                .map(|s| {
                    let p = read_slice(pred_dir.join(format!("{}.mrsl", s.slice_id)))?;
                    LabelMask::new(1, p.size, p.size, p.mask)
                })
                .collect::<Result<Vec<_>>>()?;
            (preds, "predictions".to_string())
        }
        (None, None) => return Err(Error::Invalid("eval needs --checkpoint or --predictions".into())),
    };
    let cases = per_case_dsc(&preds, &slices)?;
    let method = args.method.clone().unwrap_or(default_method);
    let row = MethodRow::from_cases(method, &cases)?;
    let csv = emit_table(std::slice::from_ref(&row), TableFormat::Csv)?;
    write_text(&args.out.join(EVAL_FILE), &csv)?;
    let mut per_case = String::from("slice_id,dsc_1,dsc_2,dsc_3,dsc_4,dsc_5\n");
    for (s, c) in slices.iter().zip(&cases) {
        per_case.push_str(&format!("{},{},{},{},{},{}\n", s.slice_id, c[0], c[1], c[2], c[3], c[4]));
    }
    write_text(&args.out.join(PER_CASE_FILE), &per_case)?;
    write!(out, "{}", emit_table(&[row], TableFormat::Text)?).ok();
    Ok(())
}

const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [66, 133, 244], [0, 188, 212], [219, 68, 55], [244, 180, 0], [15, 157, 88]];

/// Binary PPM with two panels side by side: ground truth on the left,
/// prediction on the right, each blended half-and-half over the grayscale
/// image.
pub fn overlay_ppm(slice: &LabeledSlice, pred: &LabelMask) -> Vec<u8> {
    let s = slice.size;
    let mut out = format!("P6\n{} {}\n255\n", 2 * s, s).into_bytes();
    for y in 0..s {
        for panel in [&slice.mask[..], &pred.labels[..]] {
            for x in 0..s {
                let i = y * s + x;
                let g = (slice.image[i].clamp(0.0, 1.0) * 255.0).round() as u16;
                let l = panel[i] as usize;
                for c in 0..3 {
                    let v = if l == 0 { g } else { (g + PALETTE[l.min(5)][c] as u16) / 2 };
                    out.push(v as u8);
                }
            }
        }
    }
    out
}

fn predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(&CommonArgs::default(), None, Some(&args.data))?;
    let dir = data_dir(&cfg)?;
    let slices = read_split(&dir, args.split)?;
    let preds = predict_checkpoint(&args.checkpoint, &slices, args.batch_size)?;
    let masks = args.out.join("masks");
    let overlays = args.out.join("overlays");
    for d in [&masks, &overlays] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (s, p) in slices.iter().zip(&preds) {
        let predicted = LabeledSlice { mask: p.labels.clone(), ..s.clone() };
        write_slice(&predicted, masks.join(format!("{}.mrsl", s.slice_id)))?;
        let path = overlays.join(format!("{}.ppm", s.slice_id));
        fs::write(&path, overlay_ppm(s, p)).map_err(|e| Error::io(&path, e))?;
    }
    writeln!(out, "wrote {} masks to {} and overlays to {}", preds.len(), masks.display(), overlays.display()).ok();
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let entries = match args.precision {
        Precision::F32 => run_suite::<f32>(args.instances, args.model_instances, args.seed)?,
        Precision::F64 => run_suite::<f64>(args.instances, args.model_instances, args.seed)?,
    };
    writeln!(out, "{:<20} {:>9} {:>14} {:>10}  result", "check", "instances", "max rel error", "tolerance").ok();
    for e in &entries {
        let verdict = if e.passed() { "pass" } else { "FAIL" };
        writeln!(out, "{:<20} {:>9} {:>14.3e} {:>10.0e}  {verdict}", e.name, e.instances, e.max_rel_error, e.tolerance).ok();
    }
    Ok(entries.iter().all(|e| e.passed()))
}

fn param_count(args: &ParamCountArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(&args.common, Some(&args.arch), Some(&args.data))?;
    let arch: ArchConfig = cfg.resolve()?.arch;
    let count = build_model::<f32>(&arch, 0)?.count_params();
    writeln!(out, "{count}").ok();
    if let Some(target) = arch.reference_param_target {
        writeln!(out, "reference count {target}, delta {}", count as i128 - target as i128).ok();
    }
    Ok(())
}

fn report(args: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.csv {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rows.extend(parse_csv(&text)?);
    }
    let text = format!("{}\n{}", emit_table(&rows, TableFormat::Text)?, emit_table(&rows, TableFormat::MedianIqr)?);
    if let Some(dir) = &args.out {
        write_text(&dir.join(REPORT_FILE), &text)?;
    }
    write!(out, "{text}").ok();
    Ok(())
}

/// Runs one command. Returns `Ok(false)` when the command completed but a
/// check it performs failed.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::GenerateData(a) => generate(a, out).map(|_| true),
        Command::Train(a) => train(a, out).map(|_| true),
        Command::Eval(a) => eval(a, out).map(|_| true),
        Command::Predict(a) => predict(a, out).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::ParamCount(a) => param_count(a, out).map(|_| true),
        Command::Report(a) => report(a, out).map(|_| true),
    }
}

/// Parses `argv` and runs the command, writing results to `out` and a
/// single-line diagnostic to `err`. Returns the process exit code.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").ok();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            writeln!(err, "mrrn: {}", first.trim_start_matches("error: ")).ok();
            return 2;
        }
    };
    match execute(&cli, out) {
        Ok(true) => 0,
        Ok(false) => {
            writeln!(err, "mrrn: gradient check failed").ok();
            1
        }
        Err(e) => {
            writeln!(err, "mrrn: {}", e.to_string().replace('\n', " ")).ok();
            1
        }
    }
}
