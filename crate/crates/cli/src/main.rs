//! Command-line front end. Subcommands: synth, train, encode, eval, sweep,
//! gradcheck, baseline.
//!
//! Exit codes: 0 ok, 2 usage error, 3 data error, 4 check failure. The env
//! var `CIBHASH_THREADS` caps parallelism (sweep cells, batch query scans).

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use cibhash::baselines::{lsh, naive_cl};
use cibhash::dataio::{
    generate_synthetic, ingest_csv, load_features, load_labels, save_features, save_labels,
    FeatureDataset, LabelSet, SyntheticSpec,
};
use cibhash::encoder::{load_checkpoint, save_checkpoint};
use cibhash::retrieval::{map_at_n, pr_curve, precision_at_n, PackedCodes, Relevance};
use cibhash::trainer::{encode_dataset, gradcheck, train, GradCheckConfig, Mode, TrainConfig};
use cibhash::Error as CoreError;

use report::{Metrics, Report, SweepRow};

#[derive(Parser)]
#[command(
    name = "cibhash",
    version,
    about = "Learned binary hash codes with contrastive training, an information-bottleneck \
             regularizer, and bit-packed Hamming retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered feature dataset.
    Synth(SynthArgs),
    /// Train a hashing model and save a checkpoint.
    Train(TrainArgs),
    /// Encode a feature file into packed hash codes with a checkpoint.
    Encode(EncodeArgs),
    /// Evaluate retrieval metrics of query codes against database codes.
    Eval(EvalArgs),
    /// Sweep one hyperparameter over several values and seeds.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Produce baseline codes (random hyperplanes or contrastive+threshold).
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long = "per-cluster", default_value_t = 500)]
    per_cluster: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output feature file (CIBF).
    #[arg(long)]
    out: PathBuf,
    /// Optional output label file (CIBL).
    #[arg(long = "labels-out")]
    labels_out: Option<PathBuf>,
}

/// Training hyperparameters: an optional JSON config file, overridden by
/// individual flags.
#[derive(Args, Clone)]
struct TrainOverrides {
    /// Flat JSON config file mirroring the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "code-bits")]
    code_bits: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "mask-prob")]
    mask_prob: Option<f64>,
    #[arg(long = "noise-sigma")]
    noise_sigma: Option<f64>,
    #[arg(long = "scale-lo")]
    scale_lo: Option<f64>,
    #[arg(long = "scale-hi")]
    scale_hi: Option<f64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("cannot read {}: {}", path.display(), e)))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::data(format!("invalid config {}: {}", path.display(), e))
                })?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.code_bits {
            cfg.code_bits = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.beta {
            cfg.loss.beta = v;
        }
        if let Some(v) = self.tau {
            cfg.loss.temperature = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mask_prob {
            cfg.views.mask_prob = v;
        }
        if let Some(v) = self.noise_sigma {
            cfg.views.noise_sigma = v;
        }
        if let Some(v) = self.scale_lo {
            cfg.views.scale_range.0 = v;
        }
        if let Some(v) = self.scale_hi {
            cfg.views.scale_range.1 = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Cibhash,
    Clhash,
    #[value(name = "naive-cl")]
    NaiveCl,
}

#[derive(Args)]
struct TrainArgs {
    /// Input feature file (CIBF, or CSV when the extension is .csv).
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value = "cibhash")]
    mode: TrainMode,
    /// Output checkpoint (CIBM).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Output packed-code file (CIBC).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    Map,
    Precision,
    Pr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RelevanceArg {
    Single,
    Multi,
}

impl From<RelevanceArg> for Relevance {
    fn from(r: RelevanceArg) -> Self {
        match r {
            RelevanceArg::Single => Relevance::Single,
            RelevanceArg::Multi => Relevance::Multi,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long = "query-labels")]
    query_labels: PathBuf,
    #[arg(long = "db-labels")]
    db_labels: PathBuf,
    #[arg(long, value_enum, default_value = "map")]
    metric: MetricKind,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value = "single")]
    relevance: RelevanceArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Beta,
    Tau,
    Batch,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::Beta => write!(f, "beta"),
            SweepParam::Tau => write!(f, "tau"),
            SweepParam::Batch => write!(f, "batch"),
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated parameter values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Number of seeds per value (seeds are base_seed, base_seed+1, ...).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_enum, default_value = "single")]
    relevance: RelevanceArg,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long = "input-dim", default_value_t = 6)]
    input_dim: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long = "code-bits", default_value_t = 6)]
    code_bits: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    beta: f64,
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    /// Corrupt one gradient coordinate; the check must then fail.
    #[arg(long = "inject-fault")]
    inject_fault: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineMethod {
    Lsh,
    #[value(name = "naive-cl")]
    NaiveCl,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    features: PathBuf,
    /// Output packed-code file (CIBC).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::InvalidConfig(_) | CoreError::BatchTooSmall(_) => 2,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CIBHASH_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Baseline(args) => cmd_baseline(args),
    }
}

/// Load features from CIBF, or from CSV when the extension is .csv.
fn load_feature_file(path: &Path) -> Result<FeatureDataset, CliError> {
    let by_ext = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let ds = if by_ext { ingest_csv(path)? } else { load_features(path)? };
    Ok(ds)
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        clusters: args.clusters,
        dim: args.dim,
        per_cluster: args.per_cluster,
        separation: args.separation,
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec)?;
    save_features(&ds, &args.out)?;
    if let Some(labels_out) = &args.labels_out {
        save_labels(ds.labels(), labels_out)?;
    }
    println!(
        "wrote {} items x {} dims to {}",
        ds.n(),
        ds.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = args.overrides.resolve()?;
    cfg.mode = match args.mode {
        TrainMode::Clhash => Mode::ClHash,
        _ => Mode::CibHash,
    };
    let ds = load_feature_file(&args.features)?;

    let (params, adam, epoch_losses, method) = match args.mode {
        TrainMode::Cibhash | TrainMode::Clhash => {
            let out = train(&ds, &cfg)?;
            (out.params, Some(out.adam), out.report.epoch_losses, cfg.mode.to_string())
        }
        TrainMode::NaiveCl => {
            let out = naive_cl(&ds, &cfg)?;
            (out.params, None, out.report.epoch_losses, "naive-cl".to_string())
        }
    };
    save_checkpoint(&args.out, &params, adam.as_ref())?;

    // Echo the effective config: clhash pins beta to zero.
    let mut echo = cfg.clone();
    echo.loss.beta = cfg.effective_beta();

    let mut report = Report::new("train");
    report.seed = Some(echo.seed);
    report.method = Some(method);
    report.config = Some(echo);
    report.epoch_losses = Some(epoch_losses);
    report.checkpoint = Some(args.out.display().to_string());
    report.finalize_run_id();
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &args.report {
        report.write(path).map_err(|e| CliError::data(e.to_string()))?;
    }
    let last = report.epoch_losses.as_ref().unwrap().last().cloned();
    println!(
        "trained {} epochs, final loss {}, checkpoint {}",
        cfg.epochs,
        last.map(|l| format!("{:.4}", l.total)).unwrap_or_default(),
        args.out.display()
    );
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<(), CliError> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let ds = load_feature_file(&args.features)?;
    let codes = encode_dataset(&params, ds.features())?;
    let packed = PackedCodes::pack(&codes);
    packed.save(&args.out)?;
    println!(
        "encoded {} items to {}-bit codes at {}",
        packed.len(),
        packed.bits(),
        args.out.display()
    );
    Ok(())
}

/// Single-label relevance needs exactly one class per item; turn violations
/// into a data error instead of a panic.
fn check_single_labels(labels: &LabelSet, what: &str) -> Result<(), CliError> {
    for i in 0..labels.len() {
        if labels.single_class(i).is_none() {
            return Err(CliError::data(format!(
                "{} item {} does not have exactly one label; \
                 use --relevance multi for label sets",
                what, i
            )));
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let queries = PackedCodes::load(&args.queries)?;
    let db = PackedCodes::load(&args.db)?;
    let qlabels = load_labels(&args.query_labels)?;
    let dblabels = load_labels(&args.db_labels)?;
    let relevance: Relevance = args.relevance.into();
    if relevance == Relevance::Single {
        check_single_labels(&qlabels, "query")?;
        check_single_labels(&dblabels, "database")?;
    }

    let mut metrics = Metrics::default();
    match args.metric {
        MetricKind::Map => {
            let v = map_at_n(&queries, &db, &qlabels, &dblabels, args.n, relevance)?;
            println!("map_at_{} = {:.6}", args.n, v);
            metrics.map_at_n = Some(v);
        }
        MetricKind::Precision => {
            let v = precision_at_n(&queries, &db, &qlabels, &dblabels, args.n, relevance)?;
            println!("precision_at_{} = {:.6}", args.n, v);
            metrics.precision_at_n = Some(v);
        }
        MetricKind::Pr => {
            let curve = pr_curve(&queries, &db, &qlabels, &dblabels, relevance)?;
            println!("pr curve with {} radii", curve.len());
            metrics.pr_curve = Some(curve);
        }
    }

    let mut report = Report::new("eval");
    report.metrics = Some(metrics);
    report.finalize_run_id();
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &args.report {
        report.write(path).map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let base = args.overrides.resolve()?;
    let ds = load_feature_file(&args.features)?;
    let labels = load_labels(&args.labels)?;
    if labels.len() != ds.n() {
        return Err(CliError::data(format!(
            "label file has {} items, features have {}",
            labels.len(),
            ds.n()
        )));
    }
    let ds = ds.with_labels(labels)?;
    let relevance: Relevance = args.relevance.into();
    if relevance == Relevance::Single {
        check_single_labels(ds.labels(), "dataset")?;
    }
    if args.seeds == 0 {
        return Err(CliError::usage("--seeds must be >= 1"));
    }

    // Pre-validate every cell config so a bad value fails fast.
    let mut cell_cfgs = Vec::new();
    for &value in &args.values {
        let mut cfg = base.clone();
        match args.param {
            SweepParam::Beta => cfg.loss.beta = value,
            SweepParam::Tau => cfg.loss.temperature = value,
            SweepParam::Batch => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(CliError::usage(format!(
                        "batch values must be integers >= 2, got {}",
                        value
                    )));
                }
                cfg.batch = value as usize;
            }
        }
        for i in 0..args.seeds {
            let mut cfg = cfg.clone();
            cfg.seed = base.seed + i;
            cfg.validate()?;
            cell_cfgs.push((value, cfg));
        }
    }

    // Cells are independent; run them in parallel and collect in order.
    let cell_maps: Vec<Result<f64, CoreError>> = cell_cfgs
        .par_iter()
        .map(|(_, cfg)| {
            let out = train(&ds, cfg)?;
            let codes = encode_dataset(&out.params, ds.features())?;
            let packed = PackedCodes::pack(&codes);
            map_at_n(&packed, &packed, ds.labels(), ds.labels(), args.n, relevance)
        })
        .collect();

    let mut rows = Vec::new();
    for (vi, &value) in args.values.iter().enumerate() {
        let mut maps = Vec::new();
        for si in 0..args.seeds as usize {
            let cell = &cell_maps[vi * args.seeds as usize + si];
            match cell {
                Ok(m) => maps.push(*m),
                Err(e) => return Err(CliError::from(clone_core_error(e))),
            }
        }
        let mut sorted = maps.clone();
        sorted.sort_by(f64::total_cmp);
        let median_map = sorted[(sorted.len() - 1) / 2];
        println!("{} = {:<10} median map_at_{} = {:.4}", args.param, value, args.n, median_map);
        rows.push(SweepRow {
            value,
            maps,
            median_map,
        });
    }

    let mut report = Report::new("sweep");
    report.seed = Some(base.seed);
    report.param = Some(args.param.to_string());
    report.config = Some(base);
    report.rows = Some(rows);
    report.finalize_run_id();
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &args.report {
        report.write(path).map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(())
}

// Core errors are not Clone; rebuild enough of them to classify the exit code.
fn clone_core_error(e: &CoreError) -> CoreError {
    match e {
        CoreError::InvalidConfig(s) => CoreError::InvalidConfig(s.clone()),
        CoreError::BatchTooSmall(n) => CoreError::BatchTooSmall(*n),
        other => CoreError::Malformed(other.to_string()),
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        input_dim: args.input_dim,
        hidden: args.hidden,
        code_bits: args.code_bits,
        batch: args.batch,
        seed: args.seed,
        temperature: args.tau,
        beta: args.beta,
        inject_fault: args.inject_fault,
    };
    let check = gradcheck(&cfg)?;
    println!(
        "soft max rel err {:.3e} at {}, st max rel err {:.3e} at {} ({} coords, tolerance {:.0e})",
        check.soft_max_rel_err,
        check.soft_worst_coord,
        check.st_max_rel_err,
        check.st_worst_coord,
        check.coords_checked,
        check.tolerance
    );
    let passed = check.passed;
    let mut report = Report::new("gradcheck");
    report.seed = Some(args.seed);
    report.gradcheck = Some(check);
    report.finalize_run_id();
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &args.report {
        report.write(path).map_err(|e| CliError::data(e.to_string()))?;
    }
    if passed {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(CliError::check("gradient check failed"))
    }
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = args.overrides.resolve()?;
    let ds = load_feature_file(&args.features)?;

    let (codes, method) = match args.method {
        BaselineMethod::Lsh => (lsh(ds.features(), cfg.code_bits, cfg.seed), "lsh"),
        BaselineMethod::NaiveCl => {
            let out = naive_cl(&ds, &cfg)?;
            (out.codes, "naive-cl")
        }
    };
    let packed = PackedCodes::pack(&codes);
    packed.save(&args.out)?;
    println!(
        "{}: wrote {} items x {} bits to {}",
        method,
        packed.len(),
        packed.bits(),
        args.out.display()
    );

    let mut report = Report::new("baseline");
    report.seed = Some(cfg.seed);
    report.method = Some(method.to_string());
    report.config = Some(cfg);
    report.finalize_run_id();
    report.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(path) = &args.report {
        report.write(path).map_err(|e| CliError::data(e.to_string()))?;
    }
    Ok(())
}
