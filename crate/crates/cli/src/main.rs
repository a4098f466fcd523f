mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aecnn::data::{
    convert_bjtu, count_report, preprocess_dataset, split_stratified, synth_generate, ConvertConfig, Dataset,
    DatasetManifest, DiskDataset, InMemoryDataset, Split, CLASS_NAMES,
};
use aecnn::gradcheck;
use aecnn::model::{macs_per_sample, Aecnn};
use aecnn::train::{benchmark_inference, evaluate, export_curves, load_checkpoint, save_checkpoint, train, Evaluation};
use aecnn::Error;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "aecnn",
    version,
    about = "Spectrogram + attention CNN event classifier for distributed acoustic sensing"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields keep their defaults.
    #[arg(long, global = true, env = "AECNN_CONFIG")]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=20`. Repeatable; applied
    /// after the config file.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with a stratified split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for `--set synth.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert BJTU recordings (one directory per class) to containers.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for `--set data.format=...`.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Assign stratified train/test tags to a dataset in place.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Turn raw recordings into stored spectrograms.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and keep the best checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for `--set train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Shortcut for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write the confusion matrix CSV here.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Inference latency, parameter count and MAC estimate.
    Bench {
        /// Checkpoint to time; a freshly initialized model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the merged configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    RawF32,
    RawF64,
}

enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Data(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) => Failure::Data(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn data_root(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.data.root.clone())
        .ok_or_else(|| Failure::Usage("no dataset given: pass --data or set data.root".into()))
}

fn print_counts(manifest: &DatasetManifest) {
    println!("{:<12} {:>7}", "class", "count");
    for (name, n) in manifest.class_names.iter().zip(&manifest.class_counts) {
        println!("{name:<12} {n:>7}");
    }
    println!("{:<12} {:>7}", "total", manifest.samples.len());
}

fn print_evaluation(eval: &Evaluation) {
    let m = &eval.metrics;
    println!(
        "{:<12} {:>9} {:>9} {:>9} {:>8}",
        "class", "precision", "recall", "f1", "support"
    );
    for (c, cm) in m.per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("?");
        println!(
            "{name:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            cm.precision, cm.recall, cm.f1, cm.support
        );
    }
    println!(
        "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
        "macro",
        m.macro_precision,
        m.macro_recall,
        m.macro_f1,
        eval.confusion.total()
    );
    println!("accuracy {:.4}", m.accuracy);
}

/// Train/test splits of a dataset directory. Untagged datasets are split
/// with the configured ratio and seed.
fn load_splits(root: &Path, cfg: &RunConfig) -> Result<(InMemoryDataset, InMemoryDataset), Failure> {
    let mut manifest = DatasetManifest::load(root)?;
    if manifest.samples.iter().any(|s| s.split == Split::Unassigned) {
        manifest = split_stratified(&manifest, cfg.data.train_ratio, cfg.data.split_seed)?;
    }
    let load = |split| -> Result<InMemoryDataset, Error> {
        InMemoryDataset::from_disk(&DiskDataset::with_manifest(root, &manifest, Some(split), &cfg.stft)?)
    };
    Ok((load(Split::Train)?, load(Split::Test)?))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    println!("{}", cfg.to_pretty_json());
    let manifest = synth_generate(&cfg.synth, out)?;
    let manifest = split_stratified(&manifest, cfg.data.train_ratio, cfg.data.split_seed)?;
    manifest.save(out)?;
    print_counts(&manifest);
    Ok(())
}

fn cmd_convert(cfg: &RunConfig, input: &Path, out: &Path) -> CmdResult {
    let convert = ConvertConfig {
        format: cfg.data.format,
        ..ConvertConfig::default()
    };
    let manifest = convert_bjtu(input, out, &convert)?;
    let report = count_report(&manifest);
    println!("{:<12} {:>7} {:>9}", "class", "count", "reference");
    for (c, name) in manifest.class_names.iter().enumerate() {
        println!("{name:<12} {:>7} {:>9}", report.counts[c], report.expected[c]);
    }
    println!(
        "total {} ({})",
        report.total,
        if report.matches_reference {
            "matches reference counts"
        } else {
            "differs from reference counts"
        }
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, root: &Path) -> CmdResult {
    let manifest = split_stratified(&DatasetManifest::load(root)?, cfg.data.train_ratio, cfg.data.split_seed)?;
    manifest.save(root)?;
    let train = manifest.entries(Some(Split::Train)).len();
    println!("train {train}, test {}", manifest.samples.len() - train);
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> CmdResult {
    let report = preprocess_dataset(input, out, &cfg.stft)?;
    print_counts(&report.manifest);
    if report.failures.is_empty() {
        return Ok(());
    }
    eprintln!("{} sample(s) could not be converted:", report.failures.len());
    for (id, err) in &report.failures {
        eprintln!("  {id}: {err}");
    }
    Err(Failure::Data(format!("{} malformed sample(s)", report.failures.len())))
}

fn cmd_train(cfg: &RunConfig, root: &Path, out: &Path) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join("run_config.json"), cfg.to_pretty_json())?;
    let (train_set, test_set) = load_splits(root, cfg)?;
    println!("train {} samples, test {} samples", train_set.len(), test_set.len());
    let mut model = Aecnn::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    println!("parameters {}", model.param_count());

    let log_path = out.join("log.jsonl");
    let timing_path = out.join("timing.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut timing = fs::File::create(&timing_path).map_err(|e| io_err(&timing_path, e))?;
    let mut write_err = None;
    let outcome = train(&mut model, &train_set, &test_set, &cfg.train, |l, t| {
        println!(
            "epoch {:>3}  loss {:.4}  ce {:.4}  triplet {:.4}  test acc {:.4}  ({:.1}s)",
            l.epoch,
            l.train_loss,
            l.train_ce,
            l.train_triplet,
            l.test_accuracy,
            t.train_seconds + t.eval_seconds
        );
        let lines = serde_json::to_string(l)
            .map_err(std::io::Error::other)
            .and_then(|s| writeln!(log, "{s}"))
            .and_then(|_| serde_json::to_string(t).map_err(std::io::Error::other))
            .and_then(|s| writeln!(timing, "{s}"));
        if let Err(e) = lines {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }
    write_file(&out.join("curves.csv"), export_curves(&outcome.logs))?;
    save_checkpoint(
        &outcome.best_model,
        out.join("best"),
        outcome.best_epoch,
        outcome.best_accuracy,
    )?;
    let last = outcome.logs.last().map_or((0, 0.0), |l| (l.epoch, l.test_accuracy));
    save_checkpoint(&model, out.join("final"), last.0, last.1)?;
    write_file(
        &out.join("confusion.csv"),
        outcome.best_evaluation.confusion.to_csv(&CLASS_NAMES),
    )?;
    write_file(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&outcome.best_evaluation).map_err(Error::from)?,
    )?;
    println!(
        "best epoch {} test accuracy {:.4}",
        outcome.best_epoch, outcome.best_accuracy
    );
    print_evaluation(&outcome.best_evaluation);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, root: &Path, split: SplitArg, confusion: Option<&Path>) -> CmdResult {
    let (model, _) = load_checkpoint(checkpoint)?;
    let split = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    let data = InMemoryDataset::load(root, split, &cfg.stft)?;
    let eval = evaluate(&model, &data, cfg.train.eval_batch_size)?;
    print_evaluation(&eval);
    let csv = eval.confusion.to_csv(&CLASS_NAMES);
    println!();
    print!("{csv}");
    if let Some(path) = confusion {
        write_file(path, csv)?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>, batch: usize, warmup: usize, reps: usize) -> CmdResult {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => Aecnn::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let macs = macs_per_sample(model.config());
    let latency = benchmark_inference(&model, batch, warmup, reps, cfg.train.seed)?;
    println!(
        "parameters        {} ({:.2}M)",
        model.param_count(),
        model.param_count() as f64 / 1e6
    );
    println!("MACs per sample   {} ({:.1}M)", macs.total, macs.total as f64 / 1e6);
    println!("median ms/sample  {:.3}", latency.median_ms_per_sample);
    println!("p95 ms/sample     {:.3}", latency.p95_ms_per_sample);
    println!(
        "batch {} x {} repetitions after {} warmup, {} {} with {} thread(s)",
        latency.batch_size,
        latency.repetitions,
        latency.warmup,
        latency.environment.os,
        latency.environment.arch,
        latency.environment.threads_used
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CmdResult {
    let (reports, seconds) = gradcheck::run_timed(seed)?;
    println!(
        "{:<28} {:>11} {:>11} {:>7} {:>8}  result",
        "check", "max rel", "max abs", "probes", "skipped"
    );
    for r in &reports {
        println!(
            "{:<28} {:>11.3e} {:>11.3e} {:>7} {:>8}  {}",
            r.name,
            r.max_rel_err,
            r.max_abs_err,
            r.probes,
            r.skipped,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {seconds:.2}s", reports.len());
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let mut overrides = cli.common.overrides.clone();
    match &cli.command {
        Command::Synth { seed: Some(s), .. } => overrides.push(format!("synth.seed={s}")),
        Command::Train { seed, epochs, .. } => {
            overrides.extend(seed.map(|s| format!("train.seed={s}")));
            overrides.extend(epochs.map(|e| format!("train.epochs={e}")));
        }
        Command::Convert { format: Some(f), .. } => {
            let name = match f {
                FormatArg::Text => "text",
                FormatArg::RawF32 => "raw_f32",
                FormatArg::RawF64 => "raw_f64",
            };
            overrides.push(format!("data.format={name}"));
        }
        _ => {}
    }
    let cfg = config::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { out, .. } => cmd_synth(&cfg, &out),
        Command::Convert { input, out, .. } => cmd_convert(&cfg, &input, &out),
        Command::Split { data } => cmd_split(&cfg, &data_root(data, &cfg)?),
        Command::Preprocess { input, out } => cmd_preprocess(&cfg, &input, &out),
        Command::Train { data, out, .. } => cmd_train(&cfg, &data_root(data, &cfg)?, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            confusion,
        } => cmd_eval(&cfg, &checkpoint, &data_root(data, &cfg)?, split, confusion.as_deref()),
        Command::Bench {
            checkpoint,
            batch_size,
            warmup,
            repetitions,
        } => cmd_bench(&cfg, checkpoint.as_deref(), batch_size, warmup, repetitions),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Config => {
            println!("{}", cfg.to_pretty_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let reference = config::reference();
    let mut command = Cli::command().after_help(reference.clone());
    for sub in command.get_subcommands_mut() {
        *sub = sub.clone().after_help(reference.clone());
    }
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().trim_end());
            ExitCode::from(f.code())
        }
    }
}
