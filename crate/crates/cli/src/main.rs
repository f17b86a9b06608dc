//! `s2ga` command line.
//!
//! Subcommands cover the whole workflow on one dataset/model file pair:
//! `synth` writes a synthetic dataset, `train` fits a model on its seen
//! classes, `eval` and `retrieve` score zero-shot accuracy and retrieval
//! mAP, `gradcheck` compares analytic gradients against finite
//! differences, and `ablate` retrains across several attention depths.
//!
//! Exit codes: 0 on success, 1 when a requested check fails (a gradient
//! check outside tolerance), 2 on usage, parse, io or validation errors.
//! All file output is byte-deterministic for fixed inputs and flags;
//! wall-clock timing goes to stderr only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use s2ga::dataio::{synth_generate, SplitKind, SynthSpec, ZslDataset};
use s2ga::eval::{evaluate_accuracy, retrieval_map, DepthMode, DistanceKind};
use s2ga::matcher::ClassSemanticTable;
use s2ga::model::{LossWeights, ZslModel};
use s2ga::sga::SgaConfig;
use s2ga::tensor::Matrix;
use s2ga::trainer::{
    grad_check, train, GradCheckConfig, IterationRecord, TrainConfig, TrainReport,
};

#[derive(Parser)]
#[command(
    name = "s2ga",
    version,
    about = "Zero-shot learning with stacked semantics-guided attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known seen/unseen split.
    Synth(SynthArgs),
    /// Train a model on the seen classes of a dataset.
    Train(TrainArgs),
    /// Zero-shot classification accuracy of a trained model.
    Eval(EvalArgs),
    /// Zero-shot retrieval mean average precision.
    Retrieve(RetrieveArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per attention depth and compare.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Unseen classes keep seen siblings in their super-category.
    Scs,
    /// Whole super-categories are held out.
    Sce,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolArg {
    /// Unseen classes and their images (zero-shot).
    Unseen,
    /// Seen classes and their images (sanity check).
    Seen,
    /// Every class and every image.
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DepthArg {
    /// Score the top half of each class's relevant-image count.
    #[value(name = "50")]
    Half,
    /// Score as many ranks as the class has relevant images.
    #[value(name = "100")]
    Full,
}

impl PoolArg {
    fn as_str(self) -> &'static str {
        match self {
            PoolArg::Unseen => "unseen",
            PoolArg::Seen => "seen",
            PoolArg::All => "all",
        }
    }
}

impl MetricArg {
    fn kind(self) -> DistanceKind {
        match self {
            MetricArg::Euclidean => DistanceKind::Euclidean,
            MetricArg::Cosine => DistanceKind::Cosine,
        }
    }
}

impl DepthArg {
    fn mode(self) -> DepthMode {
        match self {
            DepthArg::Half => DepthMode::Half,
            DepthArg::Full => DepthMode::Full,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Where to write the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 6)]
    regions: usize,
    /// Region feature dimension.
    #[arg(long, default_value_t = 16)]
    region_dim: usize,
    /// Class semantic vector dimension.
    #[arg(long, default_value_t = 8)]
    semantic_dim: usize,
    /// Regions per image that carry the class signal.
    #[arg(long, default_value_t = 2)]
    signal_regions: usize,
    /// Noise on top of signal regions.
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    /// Share of classes held out as unseen.
    #[arg(long, default_value_t = 0.25)]
    unseen_fraction: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Scs)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training options shared by `train` and `ablate`. Every option can also
/// come from a `key=value` config file; an explicit flag wins over the
/// file, and the file wins over built-in defaults.
#[derive(Args, Clone)]
struct TrainOpts {
    /// Config file with `key=value` lines (keys spelled like the flags).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// RMSProp moving-average factor for squared gradients.
    #[arg(long)]
    decay: Option<f64>,
    /// RMSProp denominator fudge term.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Validation checks without improvement before stopping early.
    #[arg(long)]
    patience: Option<usize>,
    /// Share of training images held out for validation; zero disables
    /// early stopping.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Weight of the image/class embedding alignment loss.
    #[arg(long)]
    lambda_align: Option<f64>,
    /// Weight of the semantic guide loss inside each attention layer.
    #[arg(long)]
    lambda_guide: Option<f64>,
    /// Latent dimension of the attention layers.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Number of stacked attention layers.
    #[arg(long)]
    k_layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset to train on.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
    /// Training log, one line per logged iteration.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Summary metrics as `key=value` lines.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Log every n-th iteration (the first and last always log).
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Candidate classes and the images scored against them.
    #[arg(long, value_enum, default_value_t = PoolArg::Unseen)]
    pool: PoolArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    /// Metrics file with overall and per-class accuracy.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Query classes and the image pool they retrieve from.
    #[arg(long, value_enum, default_value_t = PoolArg::Unseen)]
    pool: PoolArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    /// Scored ranking depth as a percentage of each class's image count.
    #[arg(long, value_enum, default_value_t = DepthArg::Full)]
    depth: DepthArg,
    /// Metrics file with mAP and per-class average precision.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Region feature dimension.
    #[arg(long, default_value_t = 8)]
    region_dim: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 4)]
    regions: usize,
    /// Class semantic vector dimension.
    #[arg(long, default_value_t = 5)]
    semantic_dim: usize,
    /// Latent dimension of the attention layers.
    #[arg(long, default_value_t = 6)]
    latent_dim: usize,
    /// Number of stacked attention layers.
    #[arg(long, default_value_t = 2)]
    k_layers: usize,
    /// Classes in the random semantic table.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Examples per random batch.
    #[arg(long, default_value_t = 6)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Largest allowed relative error per parameter.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_align: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_guide: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated attention depths to train, e.g. `0,1,2,3`.
    /// Overrides --k-layers.
    #[arg(long, default_value = "0,1,2")]
    k_list: String,
    #[arg(long, value_enum, default_value_t = PoolArg::Unseen)]
    pool: PoolArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    /// Metrics file with per-depth accuracy.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Retrieve(args) => cmd_retrieve(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

// ---------------------------------------------------------------- config

/// Reads a `key=value` file: one pair per line, `#` comments and blank
/// lines allowed, later duplicates win. Keys may use `-` or `_`.
fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(
                "{}: line {}: expected key=value, got {raw:?}",
                path.display(),
                i + 1
            );
        };
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

fn take_key<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|e| anyhow!("config key {key}: {e}")),
    }
}

/// Everything `train` needs beyond the dataset: the optimizer settings
/// plus the two model dimensions not fixed by the data.
struct ResolvedTrain {
    train: TrainConfig,
    latent_dim: usize,
    k_layers: usize,
}

impl TrainOpts {
    fn resolve(&self) -> Result<ResolvedTrain> {
        let mut file = match &self.config {
            Some(path) => read_kv_file(path)?,
            None => BTreeMap::new(),
        };
        let d = TrainConfig::default();
        let pick = ResolvedTrain {
            train: TrainConfig {
                learning_rate: self
                    .learning_rate
                    .or(take_key(&mut file, "learning_rate")?)
                    .unwrap_or(d.learning_rate),
                decay: self
                    .decay
                    .or(take_key(&mut file, "decay")?)
                    .unwrap_or(d.decay),
                eps: self.eps.or(take_key(&mut file, "eps")?).unwrap_or(d.eps),
                batch_size: self
                    .batch_size
                    .or(take_key(&mut file, "batch_size")?)
                    .unwrap_or(d.batch_size),
                max_iterations: self
                    .max_iterations
                    .or(take_key(&mut file, "max_iterations")?)
                    .unwrap_or(d.max_iterations),
                patience: self
                    .patience
                    .or(take_key(&mut file, "patience")?)
                    .unwrap_or(d.patience),
                val_fraction: self
                    .val_fraction
                    .or(take_key(&mut file, "val_fraction")?)
                    .unwrap_or(d.val_fraction),
                weights: LossWeights {
                    lambda_align: self
                        .lambda_align
                        .or(take_key(&mut file, "lambda_align")?)
                        .unwrap_or(d.weights.lambda_align),
                    lambda_guide: self
                        .lambda_guide
                        .or(take_key(&mut file, "lambda_guide")?)
                        .unwrap_or(d.weights.lambda_guide),
                },
                seed: self.seed.or(take_key(&mut file, "seed")?).unwrap_or(d.seed),
            },
            latent_dim: self
                .latent_dim
                .or(take_key(&mut file, "latent_dim")?)
                .unwrap_or(128),
            k_layers: self
                .k_layers
                .or(take_key(&mut file, "k_layers")?)
                .unwrap_or(2),
        };
        if let Some(key) = file.keys().next() {
            bail!("unknown config key {key:?}");
        }
        Ok(pick)
    }
}

// ---------------------------------------------------------------- output

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_kv_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k}={v}");
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// -------------------------------------------------------------- commands

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        classes: args.classes,
        images_per_class: args.per_class,
        regions: args.regions,
        region_dim: args.region_dim,
        semantic_dim: args.semantic_dim,
        signal_regions: args.signal_regions,
        noise_sigma: args.noise_sigma,
        unseen_fraction: args.unseen_fraction,
        seed: args.seed,
    };
    let split = match args.split {
        SplitArg::Scs => SplitKind::Scs,
        SplitArg::Sce => SplitKind::Sce,
    };
    let ds = synth_generate(&spec, split)?;
    ds.save(&args.out)?;
    println!(
        "wrote {}: classes={} images={} p={} m={} q={} seen={} unseen={} split={}",
        args.out.display(),
        ds.classes.len(),
        ds.images.len(),
        ds.p,
        ds.m,
        ds.q,
        ds.seen.len(),
        ds.unseen.len(),
        split.as_str()
    );
    Ok(ExitCode::SUCCESS)
}

fn iteration_line(rec: &IterationRecord) -> String {
    let mut line = format!(
        "iter={} classify={} align={} guide={} total={}",
        rec.iteration,
        fmt6(rec.loss.classify),
        fmt6(rec.loss.align),
        fmt6(rec.loss.guide),
        fmt6(rec.loss.total)
    );
    if let Some(acc) = rec.val_accuracy {
        let _ = write!(line, " val_acc={}", fmt6(acc));
    }
    line
}

fn train_once(
    ds: &ZslDataset,
    resolved: &ResolvedTrain,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<(ZslModel, TrainReport)> {
    let (table, examples) = ds.training_set()?;
    let model_cfg = SgaConfig {
        p: ds.p,
        m: ds.m,
        q: ds.q,
        d: resolved.latent_dim,
        k_layers: resolved.k_layers,
    };
    Ok(train(
        model_cfg,
        &table,
        &examples,
        &resolved.train,
        on_iteration,
    )?)
}

fn train_metrics(report: &TrainReport) -> Vec<(String, String)> {
    let mut pairs = vec![
        ("iterations".to_string(), report.iterations.to_string()),
        (
            "stop_reason".to_string(),
            report.stop_reason.as_str().to_string(),
        ),
        ("train_size".to_string(), report.train_size.to_string()),
        ("val_size".to_string(), report.val_size.to_string()),
    ];
    if let Some(acc) = report.best_val_accuracy {
        pairs.push(("best_val_accuracy".to_string(), fmt6(acc)));
    }
    pairs.push(("final_classify".to_string(), fmt6(report.final_loss.classify)));
    pairs.push(("final_align".to_string(), fmt6(report.final_loss.align)));
    pairs.push(("final_guide".to_string(), fmt6(report.final_loss.guide)));
    pairs.push(("final_total".to_string(), fmt6(report.final_loss.total)));
    pairs
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let resolved = args.opts.resolve()?;
    let ds = ZslDataset::load(&args.data)?;
    let every = args.log_every.max(1);
    let started = Instant::now();

    let mut log = String::new();
    let mut last_logged = 0usize;
    let (model, report) = train_once(&ds, &resolved, |rec| {
        if rec.iteration == 1 || rec.iteration % every == 0 {
            log.push_str(&iteration_line(rec));
            log.push('\n');
            last_logged = rec.iteration;
        }
    })?;
    // Always close the log with the final iteration.
    if report.iterations != last_logged {
        if let Some(rec) = report.history.last() {
            log.push_str(&iteration_line(rec));
            log.push('\n');
        }
    }

    model.save(&args.out)?;
    if let Some(path) = &args.log {
        fs::write(path, &log).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.metrics {
        write_kv_file(path, &train_metrics(&report))?;
    }
    eprintln!("trained in {:.1}s", started.elapsed().as_secs_f64());
    let best = report
        .best_val_accuracy
        .map(|a| format!(" best_val_accuracy={}", fmt6(a)))
        .unwrap_or_default();
    println!(
        "wrote {}: iterations={} stop={} final_total={}{}",
        args.out.display(),
        report.iterations,
        report.stop_reason.as_str(),
        fmt6(report.final_loss.total),
        best
    );
    Ok(ExitCode::SUCCESS)
}

/// Candidate class table plus the images evaluated against it.
fn eval_pool(ds: &ZslDataset, pool: PoolArg) -> Result<(ClassSemanticTable, Vec<(&Matrix, u32)>)> {
    let table = match pool {
        PoolArg::Unseen => ds.unseen_table(),
        PoolArg::Seen => ds.seen_table(),
        PoolArg::All => ds.full_table(),
    }
    .with_context(|| format!("building the {} class table", pool.as_str()))?;
    let images = ds.eval_pool(table.ids());
    Ok((table, images))
}

fn check_compat(model: &ZslModel, ds: &ZslDataset) -> Result<()> {
    let c = &model.cfg;
    if (c.p, c.m, c.q) != (ds.p, ds.m, ds.q) {
        bail!(
            "model expects p={} m={} q={} but the dataset has p={} m={} q={}",
            c.p,
            c.m,
            c.q,
            ds.p,
            ds.m,
            ds.q
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let ds = ZslDataset::load(&args.data)?;
    let model = ZslModel::load(&args.model)?;
    check_compat(&model, &ds)?;
    let (table, images) = eval_pool(&ds, args.pool)?;
    let result = evaluate_accuracy(&model, &table, &images, args.metric.kind())?;

    if let Some(path) = &args.metrics {
        let mut pairs = vec![
            ("pool".to_string(), args.pool.as_str().to_string()),
            ("metric".to_string(), args.metric.kind().as_str().to_string()),
            ("total".to_string(), result.total.to_string()),
            ("correct".to_string(), result.correct.to_string()),
            ("accuracy".to_string(), fmt6(result.accuracy)),
        ];
        for (id, (correct, total)) in &result.per_class {
            pairs.push((
                format!("class.{id}.accuracy"),
                fmt6(*correct as f64 / *total as f64),
            ));
            pairs.push((format!("class.{id}.correct"), correct.to_string()));
            pairs.push((format!("class.{id}.total"), total.to_string()));
        }
        write_kv_file(path, &pairs)?;
    }
    println!(
        "accuracy={} correct={} total={} classes={} pool={} metric={}",
        fmt6(result.accuracy),
        result.correct,
        result.total,
        table.len(),
        args.pool.as_str(),
        args.metric.kind().as_str()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_retrieve(args: &RetrieveArgs) -> Result<ExitCode> {
    let ds = ZslDataset::load(&args.data)?;
    let model = ZslModel::load(&args.model)?;
    check_compat(&model, &ds)?;
    let (table, images) = eval_pool(&ds, args.pool)?;
    let depth = args.depth.mode();
    let result = retrieval_map(&model, &table, &images, args.metric.kind(), depth)?;

    if let Some(path) = &args.metrics {
        let mut pairs = vec![
            ("pool".to_string(), args.pool.as_str().to_string()),
            ("metric".to_string(), args.metric.kind().as_str().to_string()),
            ("depth".to_string(), depth.as_str().to_string()),
            ("map".to_string(), fmt6(result.mean_ap)),
        ];
        for (id, ap) in &result.per_class {
            pairs.push((format!("class.{id}.ap"), fmt6(*ap)));
        }
        write_kv_file(path, &pairs)?;
    }
    println!(
        "map={} classes={} images={} depth={} pool={} metric={}",
        fmt6(result.mean_ap),
        table.len(),
        images.len(),
        depth.as_str(),
        args.pool.as_str(),
        args.metric.kind().as_str()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        p: args.region_dim,
        m: args.regions,
        q: args.semantic_dim,
        d: args.latent_dim,
        k_layers: args.k_layers,
        classes: args.classes,
        batch: args.batch,
        trials: args.trials,
        tolerance: args.tolerance,
        seed: args.seed,
        weights: LossWeights {
            lambda_align: args.lambda_align,
            lambda_guide: args.lambda_guide,
        },
        ..GradCheckConfig::default()
    };
    let report = grad_check(&cfg)?;
    for trial in &report.trials {
        println!(
            "trial={} worst={:.3e} block={} {}",
            trial.trial,
            trial.worst_rel,
            trial.worst_block,
            if trial.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "gradient check: {} worst={:.3e} block={} params={} trials={} tolerance={:.1e}",
        if report.passed { "PASS" } else { "FAIL" },
        report.worst_rel,
        report.worst_block,
        report.params_per_trial,
        report.trials.len(),
        cfg.tolerance
    );
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_ablate(args: &AblateArgs) -> Result<ExitCode> {
    let depths: Vec<usize> = args
        .k_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad depth {s:?} in --k-list: {e}"))
        })
        .collect::<Result<_>>()?;
    if depths.is_empty() {
        bail!("--k-list must name at least one depth");
    }
    let base = args.opts.resolve()?;
    let ds = ZslDataset::load(&args.data)?;
    let (table, images) = eval_pool(&ds, args.pool)?;

    let mut pairs = vec![
        ("pool".to_string(), args.pool.as_str().to_string()),
        ("metric".to_string(), args.metric.kind().as_str().to_string()),
    ];
    for &k in &depths {
        let resolved = ResolvedTrain {
            train: base.train.clone(),
            latent_dim: base.latent_dim,
            k_layers: k,
        };
        let started = Instant::now();
        let (model, report) = train_once(&ds, &resolved, |_| {})?;
        let result = evaluate_accuracy(&model, &table, &images, args.metric.kind())?;
        eprintln!("k={k} trained in {:.1}s", started.elapsed().as_secs_f64());
        println!(
            "k={} accuracy={} iterations={} stop={}",
            k,
            fmt6(result.accuracy),
            report.iterations,
            report.stop_reason.as_str()
        );
        pairs.push((format!("k.{k}.accuracy"), fmt6(result.accuracy)));
        pairs.push((format!("k.{k}.iterations"), report.iterations.to_string()));
        pairs.push((
            format!("k.{k}.stop_reason"),
            report.stop_reason.as_str().to_string(),
        ));
    }
    if let Some(path) = &args.metrics {
        write_kv_file(path, &pairs)?;
    }
    Ok(ExitCode::SUCCESS)
}
