use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    eval_image_ablation, eval_regret, eval_rmse, read_records, summarize, write_records, write_summary, EvalError,
    EvalOptions,
};
use crate::doorsim::{generate_dataset, load_dataset, save_dataset, Dataset, GenConfig};
use crate::training::{train, ModelKind, TrainConfig, TrainLog, TrainedModel};

pub const TRAIN_FILE: &str = "train.ssnpds";
pub const TEST_FILE: &str = "test.ssnpds";

#[derive(Parser, Debug)]
#[command(name = "ssnp", version, about = "Door-opening reward models from images and few labels")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test datasets into a directory.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set and emit per-door CSV records.
    Eval(EvalArgs),
    /// Aggregate CSV records into per-curve-point summaries.
    Curves(CurvesArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for train.ssnpds and test.ssnpds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    train_doors: usize,
    #[arg(long, default_value_t = 50)]
    test_doors: usize,
    #[arg(long, default_value_t = 10)]
    images_per_door: usize,
    #[arg(long, default_value_t = 10)]
    actions_per_door: usize,
    #[arg(long, default_value_t = 0.1)]
    labeled_frac: f64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset file, or a directory containing train.ssnpds.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ssnp", value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    anneal_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    loss_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    action_kl_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log; defaults to stderr.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum EvalMetric {
    Regret,
    Rmse,
    Ablation,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test dataset file, or a directory containing test.ssnpds.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, default_value_t = 10)]
    max_context: usize,
    #[arg(long, value_enum, default_value_t = EvalMetric::Regret)]
    metric: EvalMetric,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repeat with seeds `seed .. seed + seeds`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Image counts for the ablation metric.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    image_counts: Vec<usize>,
    /// Evaluate doors on one thread.
    #[arg(long)]
    serial: bool,
    /// CSV output path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// Record CSV files (repeatable).
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    /// Summary CSV path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

/// Splice `--config FILE` (key=value lines) into the argument list right
/// after the subcommand, so flags given on the command line win.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut files = Vec::new();
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            let path = iter.next().ok_or("--config needs a file path")?;
            files.push(PathBuf::from(path));
        } else if let Some(path) = s.strip_prefix("--config=") {
            files.push(PathBuf::from(path));
        } else {
            rest.push(arg);
        }
    }
    if files.is_empty() {
        return Ok(rest);
    }
    let mut injected = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim();
            if value == "true" {
                injected.push(OsString::from(format!("--{key}")));
            } else {
                injected.push(OsString::from(format!("--{key}={value}")));
            }
        }
    }
    // argv[0] and the subcommand come first.
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[split..]);
    Ok(out)
}

fn resolve(data: &Path, file: &str) -> PathBuf {
    if data.is_dir() {
        data.join(file)
    } else {
        data.to_path_buf()
    }
}

fn open_out(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cmd: Command) -> Result<(), EvalError> {
    match cmd {
        Command::GenData(a) => {
            let cfg = GenConfig {
                train_doors: a.train_doors,
                test_doors: a.test_doors,
                images_per_door: a.images_per_door,
                actions_per_door: a.actions_per_door,
                image_size: a.image_size,
                labeled_frac: a.labeled_frac,
                seed: a.seed,
            };
            let (train, test) = generate_dataset(&cfg)?;
            std::fs::create_dir_all(&a.out)?;
            save_dataset(&train, &a.out.join(TRAIN_FILE))?;
            save_dataset(&test, &a.out.join(TEST_FILE))?;
            log::info!(
                "wrote {} train ({} labeled) and {} test doors to {}",
                train.len(),
                train.labeled_count(),
                test.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let data: Dataset = load_dataset(&resolve(&a.data, TRAIN_FILE))?;
            let cfg = TrainConfig {
                kind: a.model,
                epochs: a.epochs,
                lr: a.lr,
                anneal_frac: a.anneal_frac,
                seed: a.seed,
                loss_weight: a.loss_weight,
                action_kl_weight: a.action_kl_weight,
            };
            let model = match &a.log {
                Some(path) => {
                    let mut f = BufWriter::new(File::create(path)?);
                    let m = train(&data, &cfg, &mut TrainLog::new(Some(&mut f)))?;
                    f.flush()?;
                    m
                }
                None => {
                    let mut err = io::stderr().lock();
                    train(&data, &cfg, &mut TrainLog::new(Some(&mut err)))?
                }
            };
            model.save(&a.out)?;
        }
        Command::Eval(a) => {
            let model = TrainedModel::load(&a.ckpt)?;
            let test = load_dataset(&resolve(&a.data, TEST_FILE))?;
            let mut records = Vec::new();
            for seed in a.seed..a.seed + a.seeds.max(1) {
                let opts = EvalOptions {
                    candidates: a.candidates,
                    max_context: a.max_context,
                    seed,
                    parallel: !a.serial,
                };
                records.extend(match a.metric {
                    EvalMetric::Regret => eval_regret(&model, &test, &opts)?,
                    EvalMetric::Rmse => eval_rmse(&model, &test, &opts)?,
                    EvalMetric::Ablation => eval_image_ablation(&model, &test, &a.image_counts, &opts)?,
                });
            }
            write_records(&records, open_out(&a.out)?)?;
        }
        Command::Curves(a) => {
            let mut records = Vec::new();
            for path in &a.inputs {
                records.extend(read_records(File::open(path)?)?);
            }
            write_summary(&summarize(&records), open_out(&a.out)?)?;
        }
    }
    Ok(())
}

/// Parse `argv` and run; returns the process exit code (0 ok, 1 runtime
/// failure, 2 usage error).
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = match expand_config(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point for the binary: logging setup plus [`run_cli`] on the real argv.
pub fn cli_main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run_cli(std::env::args_os())
}
