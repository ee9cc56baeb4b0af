//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or convergence
//! errors. Diagnostics go to stderr; data goes to files or stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    self, denormalize_prediction, LabeledDataset, PredictionScale, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, DatasetVariant, EvaluationReport, ExperimentConfig, ExperimentData, LevelBreakdown,
    Method, ReportRow,
};
use crate::feature_store::{self, Modality};
use crate::fusion::{self, FusionStrategy, FusionWeights};
use crate::svr::{self, KernelConfig, KernelKind, SvrParams};

#[derive(Debug, Parser)]
#[command(
    name = "cohesion",
    version,
    about = "Multi-modal group-cohesion regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (labels, splits, feature files).
    Synth(SynthArgs),
    /// Downsample one cohesion level in the training split.
    Balance(BalanceArgs),
    /// Train one regressor per feature file and write `<modality>.model`.
    Train(TrainArgs),
    /// Predict every image of each feature file with its saved model.
    Predict(PredictArgs),
    /// Fuse per-modality predictions by uniform averaging or grid search.
    Fuse(FuseArgs),
    /// Score a predictions file against labels.
    Evaluate(EvaluateArgs),
    /// Run the full experiment matrix and write a report.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_val: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 32)]
    scene_dim: usize,
    #[arg(long, default_value_t = 64)]
    face_dim: usize,
    #[arg(long, default_value_t = 24)]
    skeleton_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    scene_sigma: f64,
    #[arg(long, default_value_t = 0.10)]
    face_sigma: f64,
    #[arg(long, default_value_t = 0.15)]
    skeleton_sigma: f64,
    /// Faces per image are drawn from `0..=face-count-max`.
    #[arg(long, default_value_t = 4)]
    face_count_max: usize,
    #[arg(long, default_value_t = 0.05)]
    p_zero_faces: f64,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Labels file (`#cohesion-labels v1`).
    #[arg(long)]
    labels: PathBuf,
    /// Splits file (`#cohesion-splits v1`).
    #[arg(long)]
    splits: PathBuf,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    #[arg(long)]
    features_scene: Option<PathBuf>,
    #[arg(long)]
    features_face: Option<PathBuf>,
    #[arg(long)]
    features_skeleton: Option<PathBuf>,
    /// Additional feature files; the modality is read from the header.
    #[arg(long = "features")]
    features: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SvrArgs {
    #[arg(long, default_value = "rbf")]
    kernel: KernelKind,
    /// RBF width; defaults to 1/dim.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "C", default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
}

#[derive(Debug, Args)]
struct BalanceOpts {
    #[arg(long, default_value_t = 0.3)]
    balance_ratio: f64,
    #[arg(long, default_value_t = 2)]
    balance_level: i64,
    /// Share of train+val held out for weight selection in `*_plus_val` variants.
    #[arg(long, default_value_t = evaluation::DEFAULT_HOLDOUT_FRACTION)]
    holdout: f64,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    balance: BalanceOpts,
    /// Output directory for the balanced `labels.tsv` and `splits.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    svr: SvrArgs,
    #[command(flatten)]
    balance: BalanceOpts,
    #[arg(long, default_value = "train")]
    variant: DatasetVariant,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for model files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    features: FeatureArgs,
    /// Directory holding `<modality>.model` files.
    #[arg(long)]
    models: PathBuf,
    /// Output directory for `<modality>.predictions`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Normalized-scale predictions as `<modality>=<path>`; repeat per modality.
    #[arg(long = "predictions", required = true, value_parser = parse_modality_path)]
    predictions: Vec<(Modality, PathBuf)>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "grid_search")]
    strategy: FusionStrategy,
    #[arg(long, default_value_t = fusion::DEFAULT_GRID_STEP)]
    grid_step: f64,
    /// Apply these weights instead of selecting new ones.
    #[arg(long, conflicts_with = "strategy")]
    weights: Option<PathBuf>,
    #[command(flatten)]
    balance: BalanceOpts,
    #[arg(long, default_value = "train")]
    variant: DatasetVariant,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for `weights.tsv` and `fused.predictions`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Predictions file on either scale.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "val")]
    eval_split: Split,
    /// Method name written in the report row.
    #[arg(long, default_value = "fusion_grid")]
    method: Method,
    /// Dataset variant written in the report row.
    #[arg(long, default_value = "train")]
    variant: DatasetVariant,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for `report.tsv`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    svr: SvrArgs,
    #[command(flatten)]
    balance: BalanceOpts,
    #[arg(long, default_value_t = fusion::DEFAULT_GRID_STEP)]
    grid_step: f64,
    /// Dataset variants to run; defaults to train and balanced_train.
    #[arg(long = "variant")]
    variants: Vec<DatasetVariant>,
    #[arg(long, default_value = "val")]
    eval_split: Split,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for `report.tsv`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_modality_path(s: &str) -> std::result::Result<(Modality, PathBuf), String> {
    let (m, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected <modality>=<path>, got `{s}`"))?;
    let m = m.parse::<Modality>().map_err(|e| e.to_string())?;
    Ok((m, PathBuf::from(p)))
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Balance(a) => balance(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

/// Writes a file in one shot after rendering it to memory.
fn write_file(path: &Path, render: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    render(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn load_data(a: &DataArgs) -> Result<LabeledDataset> {
    dataset::load_dataset(&a.labels, &a.splits)
}

/// Reads every feature file and returns one vector per image per modality.
fn load_features(a: &FeatureArgs) -> Result<BTreeMap<Modality, BTreeMap<String, Vec<f64>>>> {
    let flagged = [
        (Some(Modality::Scene), a.features_scene.as_ref()),
        (Some(Modality::Face), a.features_face.as_ref()),
        (Some(Modality::Skeleton), a.features_skeleton.as_ref()),
    ];
    let extra = a.features.iter().map(|p| (None, Some(p)));
    let mut out = BTreeMap::new();
    for (expected, path) in flagged.into_iter().chain(extra) {
        let Some(path) = path else { continue };
        let (spec, records) = feature_store::read_feature_file(path)?;
        if let Some(m) = expected {
            if spec.modality() != &m {
                return Err(Error::ModalityMismatch(format!(
                    "{} holds `{}` features, expected `{m}`",
                    path.display(),
                    spec.modality()
                )));
            }
        }
        let vectors = feature_store::per_image_vectors(&records, &spec)?;
        if out.insert(spec.modality().clone(), vectors).is_some() {
            return Err(Error::InvalidConfig(format!(
                "modality `{}` given more than once",
                spec.modality()
            )));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no feature files given".into()));
    }
    Ok(out)
}

fn experiment_config(
    seed: u64,
    svr: &SvrArgs,
    balance: &BalanceOpts,
    grid_step: f64,
    eval_split: Split,
) -> Result<ExperimentConfig> {
    let params = SvrParams {
        c: svr.c,
        epsilon: svr.epsilon,
        tol: svr.tol,
        max_iter: svr.max_iter,
        ..SvrParams::default()
    };
    params
        .validate()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(ExperimentConfig {
        seed,
        kernel: KernelConfig {
            kind: svr.kernel,
            gamma: svr.gamma,
        },
        svr: params,
        grid_step,
        balance_level: balance.balance_level,
        balance_ratio: balance.balance_ratio,
        holdout_fraction: balance.holdout,
        eval_split,
        cells: Vec::new(),
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        scene_dim: a.scene_dim,
        face_dim: a.face_dim,
        skeleton_dim: a.skeleton_dim,
        scene_sigma: a.scene_sigma,
        face_sigma: a.face_sigma,
        skeleton_sigma: a.skeleton_sigma,
        face_count_max: a.face_count_max,
        p_zero_faces: a.p_zero_faces,
    };
    cfg.validate()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    dataset::synth_generate(&cfg)?.write_to_dir(&a.out)
}

fn balance(a: BalanceArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let balanced = dataset::balance_downsample(
        &ds,
        a.balance.balance_level,
        a.balance.balance_ratio,
        a.seed,
    )?;
    create_dir(&a.out)?;
    let labels = a.out.join("labels.tsv");
    let splits = a.out.join("splits.tsv");
    for (target, input) in [(&labels, &a.data.labels), (&splits, &a.data.splits)] {
        if same_file(target, input) {
            return Err(Error::InvalidConfig(format!(
                "refusing to overwrite input {}",
                input.display()
            )));
        }
    }
    write_file(&labels, |w| dataset::write_labels(w, balanced.labels()))?;
    write_file(&splits, |w| dataset::write_splits(w, balanced.splits()))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let features = load_features(&a.features)?;
    let dataset = load_data(&a.data)?;
    let cfg = experiment_config(
        a.seed,
        &a.svr,
        &a.balance,
        fusion::DEFAULT_GRID_STEP,
        Split::Test,
    )?;
    let split = evaluation::prepare_variant(&dataset, a.variant, &cfg)?;
    let modalities: Vec<Modality> = features.keys().cloned().collect();
    let data = ExperimentData { dataset, features };
    let models =
        evaluation::train_modalities(&data, &split.dataset, &split.fit_ids, &modalities, &cfg)?;
    create_dir(&a.out)?;
    for (m, model) in &models {
        write_file(&a.out.join(format!("{m}.model")), |w| {
            svr::write_model(w, model)
        })?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let features = load_features(&a.features)?;
    create_dir(&a.out)?;
    for (m, vectors) in &features {
        let model = svr::read_model(&a.models.join(format!("{m}.model")))?;
        let preds = vectors
            .iter()
            .map(|(id, v)| model.predict(v).map(|p| (id.clone(), p)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        write_file(&a.out.join(format!("{m}.predictions")), |w| {
            dataset::write_predictions(w, &preds, PredictionScale::Normalized)
        })?;
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let dataset = load_data(&a.data)?;
    let mut partial = BTreeMap::new();
    for (m, path) in &a.predictions {
        let (scale, preds) = dataset::parse_predictions(open(path)?)?;
        if scale != PredictionScale::Normalized {
            return Err(Error::InvalidConfig(format!(
                "{} is on the raw scale; fusion needs normalized predictions",
                path.display()
            )));
        }
        if partial.insert(m.clone(), preds).is_some() {
            return Err(Error::InvalidConfig(format!(
                "modality `{m}` given more than once"
            )));
        }
    }
    let cfg = ExperimentConfig {
        seed: a.seed,
        grid_step: a.grid_step,
        balance_level: a.balance.balance_level,
        balance_ratio: a.balance.balance_ratio,
        holdout_fraction: a.balance.holdout,
        ..ExperimentConfig::default()
    };
    let split = evaluation::prepare_variant(&dataset, a.variant, &cfg)?;
    let image_ids: Vec<String> = dataset.splits().keys().cloned().collect();
    let preds = fusion::impute_missing(partial, &split.fit_ids, &image_ids)?;

    let weights = match (&a.weights, a.strategy) {
        (Some(path), _) => fusion::parse_weights(open(path)?)?,
        (None, FusionStrategy::Average) => FusionWeights::uniform(preds.modalities())?,
        (None, FusionStrategy::GridSearch) => {
            let select = preds.restrict(&split.select_ids)?;
            let truth = split.dataset.labels_for(&split.select_ids)?;
            let (w, e) = fusion::grid_search_weights(&select, &truth, a.grid_step)?;
            eprintln!(
                "selected weights with raw-scale MSE {e:.6} on {} images",
                truth.len()
            );
            w
        }
    };
    let fused = fusion::fuse_weighted(&preds, &weights)?;
    let raw = fused
        .iter()
        .map(|(id, v)| denormalize_prediction(*v).map(|r| (id.clone(), r)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    create_dir(&a.out)?;
    write_file(&a.out.join("weights.tsv"), |w| {
        fusion::write_weights(w, &weights)
    })?;
    write_file(&a.out.join("fused.predictions"), |w| {
        dataset::write_predictions(w, &raw, PredictionScale::Raw)
    })
}

fn emit_report(out: Option<&Path>, report: &EvaluationReport) -> Result<()> {
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("report.tsv"), |w| {
                evaluation::render_report(w, report)
            })
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            evaluation::render_report(&mut lock, report)?;
            lock.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let dataset = load_data(&a.data)?;
    let (scale, preds) = dataset::parse_predictions(open(&a.predictions)?)?;
    let raw = match scale {
        PredictionScale::Raw => preds,
        PredictionScale::Normalized => preds
            .iter()
            .map(|(id, v)| denormalize_prediction(*v).map(|r| (id.clone(), r)))
            .collect::<Result<_>>()?,
    };
    let truth = dataset.labels_for(&dataset.ids(a.eval_split))?;
    let per_level: LevelBreakdown = evaluation::per_level_mse(&raw, &truth)?;
    let report = EvaluationReport {
        seed: a.seed,
        rows: vec![ReportRow {
            method: a.method,
            variant: a.variant,
            split: a.eval_split,
            mse: evaluation::mse(&raw, &truth)?,
            per_level,
            seed: a.seed,
            hyperparams: format!("predictions={}", a.predictions.display()),
        }],
        weights: Vec::new(),
    };
    emit_report(a.out.as_deref(), &report)
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let features = load_features(&a.features)?;
    let dataset = load_data(&a.data)?;
    let mut cfg = experiment_config(a.seed, &a.svr, &a.balance, a.grid_step, a.eval_split)?;
    let variants = if a.variants.is_empty() {
        vec![DatasetVariant::Train, DatasetVariant::BalancedTrain]
    } else {
        a.variants
    };
    let modalities: Vec<Modality> = features.keys().cloned().collect();
    cfg.cells = ExperimentConfig::full_cells(&modalities, &variants);
    let report = evaluation::run_experiment_matrix(&ExperimentData { dataset, features }, &cfg)?;
    emit_report(a.out.as_deref(), &report)
}
