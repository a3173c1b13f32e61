//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::classify::{evaluate, Method};
use crate::data::{
    apply_supervision, make_synthetic, parse_ts_file, serialize_ts, write_embedding_csv,
    EmbeddingRow, MtsDataset, Normalization, SplitSpec, SyntheticSpec,
};
use crate::error::{Result, SmateError};
use crate::gradcheck::{format_table, run_suite, GradcheckOptions};
use crate::model::{
    default_pool, load_checkpoint, save_checkpoint, BatchPolicy, EpochLog, SmateConfig,
    TrainedModel,
};

#[derive(Parser, Debug)]
#[command(name = "smate", version, about = "Semi-supervised spatio-temporal representation learning for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an encoder and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Classify a split with a trained checkpoint and report accuracy.
    Eval(EvalArgs),
    /// Write flattened embeddings (and class centroids) as CSV.
    ExportEmbeddings(ExportArgs),
    /// Finite-difference check of every op, layer and loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic coupled-sinusoid dataset in `.ts` format.
    Generate(GenerateArgs),
}

fn ratio(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("{r} is outside [0, 1]"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be >= 0"))
    }
}

fn positive_real(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be > 0"))
    }
}

fn positive_int(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("not a positive integer: {s}"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    /// Directory holding `<name>/<name>_TRAIN.ts` (or `<name>_TRAIN.ts`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub dataset: String,
}

#[derive(Args, Debug, Default)]
pub struct HyperArgs {
    /// Fraction of training labels kept visible.
    #[arg(long, value_parser = ratio)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = positive_int)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = positive_real)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = positive_int)]
    pub pool: Option<usize>,
    #[arg(long, value_parser = positive_int)]
    pub embed_dim: Option<usize>,
    #[arg(long, value_parser = positive_int)]
    pub gru_dim: Option<usize>,
    #[arg(long, value_parser = positive_int)]
    pub conv_filters: Option<usize>,
    /// Window of the convolutions and of SMB.
    #[arg(long, value_parser = positive_int)]
    pub window: Option<usize>,
    #[arg(long, value_parser = non_negative)]
    pub lambda: Option<f64>,
    /// Per-variable z-normalization of the inputs.
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Disable the spatial modeling blocks.
    #[arg(long)]
    pub no_smb: bool,
    /// Stratified mini-batches of this size instead of full batches.
    #[arg(long, value_parser = positive_int)]
    pub batch_size: Option<usize>,
    /// Unlabeled samples scoring below this are not propagated.
    #[arg(long, value_parser = ratio)]
    pub min_score: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// TOML file with hyperparameters; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path (default: checkpoint path with extension `log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Centroid,
    Knn,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = MethodArg::Centroid)]
    pub method: MethodArg,
    /// Neighbours for `--method knn`.
    #[arg(long, default_value_t = 1, value_parser = positive_int)]
    pub k: usize,
    /// Supervision ratio of the kNN reference (training) set.
    #[arg(long, value_parser = ratio, default_value_t = 1.0)]
    pub ratio: f64,
    /// Seed of the reference mask (default: the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    /// Supervision ratio used to mark `is_labeled` on the training split.
    #[arg(long, value_parser = ratio, default_value_t = 1.0)]
    pub ratio: f64,
    /// Mask seed (default: the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 10, value_parser = positive_int)]
    pub cases: usize,
    /// Include an op with a deliberately wrong backward rule.
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 3, value_parser = positive_int)]
    pub classes: usize,
    /// Samples per split.
    #[arg(long, default_value_t = 120, value_parser = positive_int)]
    pub samples: usize,
    #[arg(long, default_value_t = 64, value_parser = positive_int)]
    pub length: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_int)]
    pub dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
    pub jitter: f64,
    #[arg(long, default_value = "Synthetic")]
    pub name: String,
    /// Output directory; files go to `<out>/<name>/<name>_{TRAIN,TEST}.ts`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Hyperparameters accepted in a `--config` TOML file.
#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub pool: Option<usize>,
    pub embed_dim: Option<usize>,
    pub head_dim: Option<usize>,
    pub gru_dim: Option<usize>,
    pub conv_filters: Option<usize>,
    pub window: Option<usize>,
    pub lambda: Option<f64>,
    pub normalize: Option<bool>,
    pub smb: Option<bool>,
    pub batch_size: Option<usize>,
    pub min_score: Option<f64>,
}

/// Everything a training run needs after merging defaults, the config file
/// and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub dataset: String,
    pub ratio: f64,
    pub model: SmateConfig,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunConfig {
    pub fn resolve(args: &TrainArgs, file: &FileConfig, t: usize, m: usize) -> Result<RunConfig> {
        let h = &args.hyper;
        let mut c = SmateConfig::new(t, m);
        c.pool = default_pool(t);
        macro_rules! pick {
            ($flag:expr, $file:expr, $target:expr) => {
                if let Some(v) = $flag.or($file) {
                    $target = v;
                }
            };
        }
        pick!(h.seed, file.seed, c.seed);
        pick!(h.epochs, file.epochs, c.epochs);
        pick!(h.lr, file.lr, c.lr);
        pick!(h.pool, file.pool, c.pool);
        pick!(h.gru_dim, file.gru_dim, c.gru_dim);
        pick!(h.conv_filters, file.conv_filters, c.conv_filters);
        pick!(h.lambda, file.lambda, c.lambda);
        if let Some(d) = h.embed_dim.or(file.embed_dim) {
            c.embed_dim = d;
            c.head_dim = d;
        }
        pick!(None, file.head_dim, c.head_dim);
        if let Some(w) = h.window.or(file.window) {
            c.conv_window = w;
            c.smb_window = w;
        }
        if let Some(n) = h.normalize.or(file.normalize) {
            c.normalization = if n { Normalization::PerVariableGlobal } else { Normalization::None };
        }
        c.use_smb = if h.no_smb { false } else { file.smb.unwrap_or(true) };
        if let Some(size) = h.batch_size.or(file.batch_size) {
            c.batch = BatchPolicy::Stratified { size };
        }
        c.min_score = h.min_score.or(file.min_score);
        if c.epochs == 0 {
            return Err(SmateError::Config("epochs must be at least 1".into()));
        }
        c.validate()?;
        let ratio = h.ratio.or(file.ratio).unwrap_or(1.0);
        if !(0.0..=1.0).contains(&ratio) {
            return Err(SmateError::Config(format!("ratio {ratio} outside [0, 1]")));
        }
        let log = args
            .log
            .clone()
            .unwrap_or_else(|| args.out.with_extension("log.csv"));
        Ok(RunConfig {
            data: args.dataset.data.clone(),
            dataset: args.dataset.dataset.clone(),
            ratio,
            model: c,
            checkpoint: args.out.clone(),
            log,
        })
    }
}

/// `<dir>/<name>/<name>_<SPLIT>.ts`, falling back to `<dir>/<name>_<SPLIT>.ts`.
pub fn dataset_path(dir: &Path, name: &str, split: Split) -> PathBuf {
    let suffix = match split {
        Split::Train => "TRAIN",
        Split::Test => "TEST",
    };
    let file = format!("{name}_{suffix}.ts");
    let nested = dir.join(name).join(&file);
    if nested.exists() {
        nested
    } else {
        dir.join(file)
    }
}

fn load_split(args: &DatasetArgs, split: Split) -> Result<MtsDataset> {
    let path = dataset_path(&args.data, &args.dataset, split);
    parse_ts_file(&path).map_err(|e| match e {
        SmateError::Parse { line, message } => SmateError::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        SmateError::Unsupported { line, message } => SmateError::Unsupported {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| SmateError::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| SmateError::io(path, e))
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| SmateError::io(path, e);
    writeln!(w, "epoch,L_R,L_Reg,total").map_err(io)?;
    for e in log {
        writeln!(w, "{},{:?},{:?},{:?}", e.epoch, e.reconstruction, e.regularization, e.total)
            .map_err(io)?;
    }
    w.flush().map_err(io)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| SmateError::io(path, e))?;
            toml::from_str(&text)
                .map_err(|e| SmateError::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let train = load_split(&args.dataset, Split::Train)?;
    let run = match RunConfig::resolve(args, &file, train.series_length(), train.dims()) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    let train = apply_supervision(&train, &SplitSpec::new(run.ratio, run.model.seed))?;
    log::info!(
        "training on {} ({} samples, {} labeled, T={}, M={}, L={})",
        train.name(),
        train.len(),
        train.training_view().labeled_indices().len(),
        train.series_length(),
        train.dims(),
        run.model.embedding_length()
    );
    let (tm, log) = TrainedModel::fit(&train, run.model.clone())?;
    save_checkpoint(&tm, &run.checkpoint)?;
    write_loss_log(&run.log, &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} epochs: total loss {:.6} -> {:.6}",
            log.len(),
            first.total,
            last.total
        );
    }
    println!("checkpoint: {}", run.checkpoint.display());
    println!("loss log: {}", run.log.display());
    Ok(0)
}

fn reference_set(args: &DatasetArgs, ratio: f64, seed: u64) -> Result<MtsDataset> {
    let train = load_split(args, Split::Train)?;
    apply_supervision(&train, &SplitSpec::new(ratio, seed))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let tm = load_checkpoint(&args.checkpoint)?;
    let ds = load_split(&args.dataset, args.split)?;
    let (method, reference) = match args.method {
        MethodArg::Centroid => (Method::Centroid, None),
        MethodArg::Knn => {
            let seed = args.seed.unwrap_or(tm.model.config.seed);
            (Method::Knn { k: args.k }, Some(reference_set(&args.dataset, args.ratio, seed)?))
        }
    };
    let (report, _) = evaluate(&tm, &ds, method, reference.as_ref())?;
    println!("accuracy: {:.4} ({} samples)", report.accuracy, report.n_test);
    if let Some(path) = &args.out {
        let mut w = create(path)?;
        w.write_all(report.to_json().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| SmateError::io(path, e))?;
        println!("report: {}", path.display());
    } else {
        println!("{}", report.to_json());
    }
    Ok(())
}

/// Embedding rows for `ds` followed by one row per centroid.
pub fn embedding_rows(tm: &TrainedModel, ds: &MtsDataset) -> Result<Vec<EmbeddingRow>> {
    let embeddings = tm.embed(ds)?;
    let mut rows: Vec<EmbeddingRow> = embeddings
        .iter()
        .enumerate()
        .map(|(i, h)| EmbeddingRow {
            sample_id: i.to_string(),
            label: ds.label_name(ds.true_label(i)).to_string(),
            is_labeled: ds.supervision_mask()[i],
            values: h.data().to_vec(),
        })
        .collect();
    for (k, c) in tm.centroids.centroids.iter().enumerate() {
        rows.push(EmbeddingRow {
            sample_id: format!("centroid_{}", tm.label_set[k]),
            label: tm.label_set[k].clone(),
            is_labeled: false,
            values: c.data().to_vec(),
        });
    }
    Ok(rows)
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let tm = load_checkpoint(&args.checkpoint)?;
    let ds = match args.split {
        Split::Train => reference_set(&args.dataset, args.ratio, args.seed.unwrap_or(tm.model.config.seed))?,
        Split::Test => {
            let test = load_split(&args.dataset, Split::Test)?;
            let n = test.len();
            test.with_mask(vec![false; n])
        }
    };
    let rows = embedding_rows(&tm, &ds)?;
    let w = create(&args.out)?;
    write_embedding_csv(w, &rows)?;
    println!(
        "wrote {} rows ({} samples, {} centroids) to {}",
        rows.len(),
        ds.len(),
        tm.centroids.k(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let opts = GradcheckOptions {
        seed: args.seed,
        cases: args.cases,
        include_corrupted: args.corrupt,
        ..GradcheckOptions::default()
    };
    let rows = run_suite(&opts)?;
    print!("{}", format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(0)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(1)
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec =
        SyntheticSpec::new(args.classes, args.samples, args.length, args.dims, args.seed);
    spec.noise = args.noise;
    spec.jitter = args.jitter;
    let dir = args.out.join(&args.name);
    for (split, spec) in [("TRAIN", spec.clone()), ("TEST", spec.held_out())] {
        let ds = make_synthetic(&spec)?.renamed(&args.name);
        let path = dir.join(format!("{}_{split}.ts", args.name));
        let mut w = create(&path)?;
        w.write_all(serialize_ts(&ds).as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| SmateError::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::ExportEmbeddings(a) => cmd_export(a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Generate(a) => cmd_generate(a).map(|_| 0),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
