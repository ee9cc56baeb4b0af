//! MSE metrics, the experiment matrix and report rendering.
//!
//! All errors are measured on the raw `[0, 3]` label scale: predictions are
//! denormalized (and clamped) before they are compared with integer levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    balance_downsample, denormalize_prediction, CohesionLabel, LabeledDataset, Split, NUM_LEVELS,
};
use crate::error::{Error, Result};
use crate::feature_store::Modality;
use crate::fusion::{self, FusionWeights};
use crate::svr::{self, KernelConfig, SvrModel, SvrParams};

pub const REPORT_MAGIC: &str = "#cohesion-report";
pub const REPORT_COLUMNS: &str = "method\tdataset\tsplit\tn\tmse\tmse_l0\tmse_l1\tmse_l2\tmse_l3";

/// Share of the merged train+val set held out for fusion-weight selection.
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

/// Mean of `(pred - level)^2` over the images in `truth`.
pub fn mse(pred: &BTreeMap<String, f64>, truth: &BTreeMap<String, CohesionLabel>) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    let mut sum = 0.0;
    for (id, label) in truth {
        let p = pred
            .get(id)
            .ok_or_else(|| Error::MissingPrediction(id.clone()))?;
        let d = p - label.level() as f64;
        sum += d * d;
    }
    Ok(sum / truth.len() as f64)
}

/// MSE restricted to each true level. Levels with no images are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelBreakdown {
    pub mse: [Option<f64>; NUM_LEVELS],
    pub counts: [usize; NUM_LEVELS],
}

impl LevelBreakdown {
    /// Count-weighted recombination of the per-level errors.
    pub fn overall(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        let total: f64 = self
            .mse
            .iter()
            .zip(&self.counts)
            .filter_map(|(m, c)| m.map(|m| m * *c as f64))
            .sum();
        total / n as f64
    }
}

pub fn per_level_mse(
    pred: &BTreeMap<String, f64>,
    truth: &BTreeMap<String, CohesionLabel>,
) -> Result<LevelBreakdown> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    let mut sums = [0.0; NUM_LEVELS];
    let mut counts = [0usize; NUM_LEVELS];
    for (id, label) in truth {
        let p = pred
            .get(id)
            .ok_or_else(|| Error::MissingPrediction(id.clone()))?;
        let l = label.level() as usize;
        let d = p - l as f64;
        sums[l] += d * d;
        counts[l] += 1;
    }
    let mse = std::array::from_fn(|l| (counts[l] > 0).then(|| sums[l] / counts[l] as f64));
    Ok(LevelBreakdown { mse, counts })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Predicts the mean training label for every image.
    Baseline,
    Single(Modality),
    FusionAverage,
    FusionGrid,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline => f.write_str("baseline"),
            Method::Single(m) => write!(f, "{m}"),
            Method::FusionAverage => f.write_str("fusion_average"),
            Method::FusionGrid => f.write_str("fusion_grid"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "fusion_average" => Ok(Method::FusionAverage),
            "fusion_grid" => Ok(Method::FusionGrid),
            other => other
                .parse::<Modality>()
                .map(Method::Single)
                .map_err(|_| Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetVariant {
    Train,
    BalancedTrain,
    TrainPlusVal,
    BalancedTrainPlusVal,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 4] = [
        DatasetVariant::Train,
        DatasetVariant::BalancedTrain,
        DatasetVariant::TrainPlusVal,
        DatasetVariant::BalancedTrainPlusVal,
    ];

    pub fn balanced(self) -> bool {
        matches!(
            self,
            DatasetVariant::BalancedTrain | DatasetVariant::BalancedTrainPlusVal
        )
    }

    pub fn merges_val(self) -> bool {
        matches!(
            self,
            DatasetVariant::TrainPlusVal | DatasetVariant::BalancedTrainPlusVal
        )
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetVariant::Train => "train",
            DatasetVariant::BalancedTrain => "balanced_train",
            DatasetVariant::TrainPlusVal => "train_plus_val",
            DatasetVariant::BalancedTrainPlusVal => "balanced_train_plus_val",
        })
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset variant `{s}`")))
    }
}

/// Everything that shapes one run of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub kernel: KernelConfig,
    pub svr: SvrParams,
    pub grid_step: f64,
    pub balance_level: i64,
    pub balance_ratio: f64,
    pub holdout_fraction: f64,
    pub eval_split: Split,
    /// Cells in report order.
    pub cells: Vec<(Method, DatasetVariant)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            kernel: KernelConfig::default(),
            svr: SvrParams::default(),
            grid_step: fusion::DEFAULT_GRID_STEP,
            balance_level: 2,
            balance_ratio: 0.3,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            eval_split: Split::Val,
            cells: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Baseline, every modality, and both fusion methods for each variant.
    pub fn full_cells(
        modalities: &[Modality],
        variants: &[DatasetVariant],
    ) -> Vec<(Method, DatasetVariant)> {
        let mut cells = Vec::new();
        for &v in variants {
            cells.push((Method::Baseline, v));
            cells.extend(modalities.iter().map(|m| (Method::Single(m.clone()), v)));
            cells.push((Method::FusionAverage, v));
            cells.push((Method::FusionGrid, v));
        }
        cells
    }

    pub fn hyperparams_summary(&self) -> String {
        let gamma = match (self.kernel.kind, self.kernel.gamma) {
            (svr::KernelKind::Linear, _) => "-".to_string(),
            (_, Some(g)) => g.to_string(),
            (_, None) => "1/dim".to_string(),
        };
        format!(
            "kernel={} gamma={gamma} C={} epsilon={} tol={} max_iter={} grid_step={} balance_level={} balance_ratio={} holdout={}",
            self.kernel.kind,
            self.svr.c,
            self.svr.epsilon,
            self.svr.tol,
            self.svr.max_iter,
            self.grid_step,
            self.balance_level,
            self.balance_ratio,
            self.holdout_fraction
        )
    }
}

/// Inputs shared by every cell: labels/splits and one vector per image per
/// modality (faces already averaged).
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub dataset: LabeledDataset,
    pub features: BTreeMap<Modality, BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub variant: DatasetVariant,
    pub split: Split,
    pub mse: f64,
    pub per_level: LevelBreakdown,
    pub seed: u64,
    pub hyperparams: String,
}

impl ReportRow {
    pub fn n(&self) -> usize {
        self.per_level.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    /// Fusion weights chosen per variant, in first-use order.
    pub weights: Vec<(DatasetVariant, FusionWeights)>,
}

impl EvaluationReport {
    pub fn find(&self, method: &Method, variant: DatasetVariant) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| &r.method == method && r.variant == variant)
    }
}

/// Which images train the regressors and which pick the fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSplit {
    pub dataset: LabeledDataset,
    pub fit_ids: Vec<String>,
    pub select_ids: Vec<String>,
}

/// Applies a dataset variant: optional downsampling of the training split,
/// and for `*_plus_val` variants a merge of validation into training with a
/// seeded holdout for weight selection.
pub fn prepare_variant(
    ds: &LabeledDataset,
    variant: DatasetVariant,
    cfg: &ExperimentConfig,
) -> Result<VariantSplit> {
    let dataset = if variant.balanced() {
        balance_downsample(ds, cfg.balance_level, cfg.balance_ratio, cfg.seed)?
    } else {
        ds.clone()
    };
    let train = dataset.ids(Split::Train);
    let val = dataset.ids(Split::Val);
    if !variant.merges_val() {
        return Ok(VariantSplit {
            dataset,
            fit_ids: train,
            select_ids: val,
        });
    }

    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {} not in [0, 1)",
            cfg.holdout_fraction
        )));
    }
    let merged: Vec<String> = train
        .into_iter()
        .chain(val)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_hold = ((cfg.holdout_fraction * merged.len() as f64).floor() as usize).max(1);
    if n_hold >= merged.len() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let held: BTreeSet<usize> = index::sample(&mut rng, merged.len(), n_hold)
        .into_iter()
        .collect();
    let (select_ids, fit_ids) = merged
        .into_iter()
        .enumerate()
        .partition::<Vec<_>, _>(|(i, _)| held.contains(i));
    Ok(VariantSplit {
        dataset,
        fit_ids: fit_ids.into_iter().map(|(_, id)| id).collect(),
        select_ids: select_ids.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Feature vectors and normalized targets for the `fit_ids` that have a
/// vector for modality `m`, in `fit_ids` order.
pub fn modality_training_set(
    data: &ExperimentData,
    labels: &LabeledDataset,
    fit_ids: &[String],
    m: &Modality,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let vectors = data
        .features
        .get(m)
        .ok_or_else(|| Error::NoFeaturesForModality(m.to_string()))?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for id in fit_ids {
        if let Some(v) = vectors.get(id) {
            let label = labels
                .label(id)
                .ok_or_else(|| Error::MissingLabel(id.clone()))?;
            x.push(v.clone());
            y.push(label.normalized());
        }
    }
    if x.is_empty() {
        return Err(Error::NoFeaturesForModality(m.to_string()));
    }
    Ok((x, y))
}

/// Trains one regressor per modality on the `fit_ids` that have a vector for
/// it. Modalities train on separate threads; each solve is sequential.
pub fn train_modalities(
    data: &ExperimentData,
    labels: &LabeledDataset,
    fit_ids: &[String],
    modalities: &[Modality],
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<Modality, SvrModel>> {
    let train_one = |m: &Modality| -> Result<SvrModel> {
        let (x, y) = modality_training_set(data, labels, fit_ids, m)?;
        svr::train_standardized(&x, &y, &cfg.kernel, &cfg.svr)
    };

    let results: Vec<Result<SvrModel>> = std::thread::scope(|s| {
        let handles: Vec<_> = modalities
            .iter()
            .map(|m| s.spawn(move || train_one(m)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    modalities
        .iter()
        .cloned()
        .zip(results)
        .map(|(m, r)| r.map(|model| (m, model)))
        .collect()
}

fn denormalize_all(preds: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    preds
        .iter()
        .map(|(id, v)| denormalize_prediction(*v).map(|r| (id.clone(), r)))
        .collect()
}

fn restrict(preds: &BTreeMap<String, f64>, ids: &[String]) -> Result<BTreeMap<String, f64>> {
    ids.iter()
        .map(|id| {
            preds
                .get(id)
                .map(|v| (id.clone(), *v))
                .ok_or_else(|| Error::MissingPrediction(id.clone()))
        })
        .collect()
}

/// Raw-scale predictions of every method for one variant.
struct VariantOutcome {
    raw: BTreeMap<Method, BTreeMap<String, f64>>,
    weights: Option<FusionWeights>,
}

fn run_variant(
    data: &ExperimentData,
    variant: DatasetVariant,
    methods: &BTreeSet<Method>,
    eval_ids: &[String],
    cfg: &ExperimentConfig,
) -> Result<VariantOutcome> {
    let split = prepare_variant(&data.dataset, variant, cfg)?;
    let fusing = methods.contains(&Method::FusionAverage) || methods.contains(&Method::FusionGrid);
    let modalities: Vec<Modality> = if fusing {
        data.features.keys().cloned().collect()
    } else {
        methods
            .iter()
            .filter_map(|m| match m {
                Method::Single(m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    };

    let models = train_modalities(data, &split.dataset, &split.fit_ids, &modalities, cfg)?;
    let all_ids: Vec<String> = split
        .select_ids
        .iter()
        .chain(eval_ids)
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let preds = fusion::build_predictions(&models, &data.features, &split.fit_ids, &all_ids)?;
    let eval_preds = preds.restrict(eval_ids)?;

    let mut raw = BTreeMap::new();
    let mut weights = None;
    for method in methods {
        let normalized = match method {
            Method::Baseline => {
                let labels = split.dataset.labels_for(&split.fit_ids)?;
                if labels.is_empty() {
                    return Err(Error::EmptyTrainingSet);
                }
                let mean =
                    labels.values().map(|l| l.normalized()).sum::<f64>() / labels.len() as f64;
                eval_ids.iter().map(|id| (id.clone(), mean)).collect()
            }
            Method::Single(m) => {
                let p = eval_preds
                    .get(m)
                    .ok_or_else(|| Error::NoFeaturesForModality(m.to_string()))?;
                restrict(p, eval_ids)?
            }
            Method::FusionAverage => fusion::fuse_average(&eval_preds)?,
            Method::FusionGrid => {
                let select = preds.restrict(&split.select_ids)?;
                let truth = split.dataset.labels_for(&split.select_ids)?;
                let (w, _) = fusion::grid_search_weights(&select, &truth, cfg.grid_step)?;
                let fused = fusion::fuse_weighted(&eval_preds, &w)?;
                weights = Some(w);
                fused
            }
        };
        raw.insert(method.clone(), denormalize_all(&normalized)?);
    }
    Ok(VariantOutcome { raw, weights })
}

/// Runs every configured cell and returns rows in configured order.
///
/// Per variant: downsample if requested, train one regressor per modality,
/// predict, fuse, denormalize, and score on the evaluation split.
pub fn run_experiment_matrix(
    data: &ExperimentData,
    cfg: &ExperimentConfig,
) -> Result<EvaluationReport> {
    let mut report = EvaluationReport {
        seed: cfg.seed,
        rows: Vec::new(),
        weights: Vec::new(),
    };
    if cfg.cells.is_empty() {
        return Ok(report);
    }
    if cfg.eval_split == Split::Train {
        return Err(Error::InvalidConfig(
            "evaluation split must be val or test".into(),
        ));
    }
    let eval_ids = data.dataset.ids(cfg.eval_split);
    let truth = data.dataset.labels_for(&eval_ids)?;

    let mut variants: Vec<DatasetVariant> = Vec::new();
    let mut methods: BTreeMap<DatasetVariant, BTreeSet<Method>> = BTreeMap::new();
    for (m, v) in &cfg.cells {
        if v.merges_val() && cfg.eval_split == Split::Val {
            return Err(Error::InvalidConfig(format!(
                "variant {v} trains on the validation split; evaluate it on test"
            )));
        }
        if !variants.contains(v) {
            variants.push(*v);
        }
        methods.entry(*v).or_default().insert(m.clone());
    }

    let mut outcomes = BTreeMap::new();
    for v in variants {
        let outcome = run_variant(data, v, &methods[&v], &eval_ids, cfg)?;
        if let Some(w) = &outcome.weights {
            report.weights.push((v, w.clone()));
        }
        outcomes.insert(v, outcome);
    }

    let hyperparams = cfg.hyperparams_summary();
    for (method, variant) in &cfg.cells {
        let raw = &outcomes[variant].raw[method];
        report.rows.push(ReportRow {
            method: method.clone(),
            variant: *variant,
            split: cfg.eval_split,
            mse: mse(raw, &truth)?,
            per_level: per_level_mse(raw, &truth)?,
            seed: cfg.seed,
            hyperparams: hyperparams.clone(),
        });
    }
    Ok(report)
}

fn fmt6(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Renders the report as a tab-separated table. Trailing `#` lines record
/// hyperparameters and chosen fusion weights.
pub fn render_report<W: Write>(mut out: W, r: &EvaluationReport) -> Result<()> {
    let io = |e| Error::io("<report output>", e);
    writeln!(out, "{REPORT_MAGIC} v1 seed={} scale=raw", r.seed).map_err(io)?;
    writeln!(out, "{REPORT_COLUMNS}").map_err(io)?;
    for row in &r.rows {
        let levels: Vec<String> = row.per_level.mse.iter().map(|m| fmt6(*m)).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            row.method,
            row.variant,
            row.split,
            row.n(),
            fmt6(Some(row.mse)),
            levels.join("\t")
        )
        .map_err(io)?;
    }
    let params: BTreeSet<&str> = r.rows.iter().map(|row| row.hyperparams.as_str()).collect();
    for p in params {
        writeln!(out, "# params {p}").map_err(io)?;
    }
    for (v, w) in &r.weights {
        let parts: Vec<String> = w
            .modalities()
            .iter()
            .zip(w.weights())
            .map(|(m, x)| format!("{m}={x:.6}"))
            .collect();
        writeln!(out, "# weights {v} {}", parts.join(" ")).map_err(io)?;
    }
    Ok(())
}

pub fn render_report_string(r: &EvaluationReport) -> String {
    let mut buf = Vec::new();
    render_report(&mut buf, r).expect("writing to memory");
    String::from_utf8(buf).expect("report is UTF-8")
}

/// A report row as read back from text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub method: Method,
    pub variant: DatasetVariant,
    pub split: Split,
    pub n: usize,
    pub mse: f64,
    pub mse_per_level: [Option<f64>; NUM_LEVELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub seed: u64,
    pub rows: Vec<ParsedRow>,
}

pub fn parse_report<R: BufRead>(reader: R) -> Result<ParsedReport> {
    let mut lines = reader.lines();
    let mut next = |n: usize| {
        lines
            .next()
            .map(|l| l.map_err(|e| Error::malformed(n, e.to_string())))
    };
    let header = next(1).ok_or(Error::EmptyFile)??;
    let seed = header
        .strip_prefix(REPORT_MAGIC)
        .and_then(|h| h.strip_prefix(" v1 seed="))
        .and_then(|h| h.strip_suffix(" scale=raw"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::HeaderMismatch(format!("not a report header: `{header}`")))?;
    let cols = next(2).ok_or(Error::EmptyFile)??;
    if cols != REPORT_COLUMNS {
        return Err(Error::HeaderMismatch(format!(
            "unexpected columns `{cols}`"
        )));
    }

    let mut rows = Vec::new();
    let mut lineno = 2;
    while let Some(line) = next(lineno + 1) {
        lineno += 1;
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::malformed(
                lineno,
                format!("expected 9 fields, found {}", f.len()),
            ));
        }
        let bad = |what: &str| Error::malformed(lineno, format!("bad {what}"));
        let num = |s: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                crate::numfmt::parse_finite(s)
                    .map(Some)
                    .ok_or_else(|| bad("number"))
            }
        };
        rows.push(ParsedRow {
            method: f[0].parse().map_err(|_| bad("method"))?,
            variant: f[1].parse().map_err(|_| bad("dataset"))?,
            split: f[2].parse().map_err(|_| bad("split"))?,
            n: f[3].parse().map_err(|_| bad("n"))?,
            mse: num(f[4])?.ok_or_else(|| bad("mse"))?,
            mse_per_level: [num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?],
        });
    }
    Ok(ParsedReport { seed, rows })
}
