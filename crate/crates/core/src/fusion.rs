//! Late fusion of per-modality predictions.
//!
//! Weight vectors are indexed by modality in `Modality` order (scene, face,
//! skeleton, then custom modalities by name).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::dataset::{denormalize_prediction, CohesionLabel};
use crate::error::{Error, Result};
use crate::evaluation::mse;
use crate::feature_store::Modality;
use crate::numfmt;
use crate::svr::SvrModel;

pub const WEIGHTS_MAGIC: &str = "#cohesion-weights";
pub const DEFAULT_GRID_STEP: f64 = 0.05;

/// Normalized-scale predictions for every modality over a common image set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPredictions {
    preds: BTreeMap<Modality, BTreeMap<String, f64>>,
    imputation: BTreeMap<Modality, f64>,
    imputed: BTreeMap<Modality, usize>,
}

impl ModalityPredictions {
    /// Assembles predictions that already cover one common image set.
    pub fn from_parts(
        preds: BTreeMap<Modality, BTreeMap<String, f64>>,
        imputation: BTreeMap<Modality, f64>,
    ) -> Result<Self> {
        let mut sets = preds.values().map(|m| m.keys().collect::<Vec<_>>());
        if let Some(first) = sets.next() {
            if sets.any(|s| s != first) {
                return Err(Error::ModalityMismatch(
                    "modalities cover different image sets".into(),
                ));
            }
        }
        if preds.keys().ne(imputation.keys()) {
            return Err(Error::ModalityMismatch(
                "imputation values do not match modalities".into(),
            ));
        }
        let imputed = preds.keys().map(|m| (m.clone(), 0)).collect();
        Ok(Self {
            preds,
            imputation,
            imputed,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.preds.keys().cloned().collect()
    }

    pub fn num_modalities(&self) -> usize {
        self.preds.len()
    }

    pub fn get(&self, m: &Modality) -> Option<&BTreeMap<String, f64>> {
        self.preds.get(m)
    }

    pub fn imputation_value(&self, m: &Modality) -> Option<f64> {
        self.imputation.get(m).copied()
    }

    /// How many images of modality `m` received the imputation value.
    pub fn imputed_count(&self, m: &Modality) -> usize {
        self.imputed.get(m).copied().unwrap_or(0)
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.preds
            .values()
            .next()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Restriction to a subset of images. Unknown ids are an error.
    pub fn restrict(&self, ids: &[String]) -> Result<Self> {
        let mut preds = BTreeMap::new();
        for (m, p) in &self.preds {
            let sub = ids
                .iter()
                .map(|id| {
                    p.get(id)
                        .map(|v| (id.clone(), *v))
                        .ok_or_else(|| Error::MissingPrediction(id.clone()))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            preds.insert(m.clone(), sub);
        }
        Ok(Self {
            preds,
            imputation: self.imputation.clone(),
            imputed: self.imputed.clone(),
        })
    }
}

/// Predicts every image in `image_ids` with every model.
///
/// Images without a vector for some modality (for example zero detected
/// faces) get that modality's imputation value: the mean prediction over the
/// training images that do have the modality.
pub fn build_predictions(
    models: &BTreeMap<Modality, SvrModel>,
    features: &BTreeMap<Modality, BTreeMap<String, Vec<f64>>>,
    train_ids: &[String],
    image_ids: &[String],
) -> Result<ModalityPredictions> {
    let mut partial = BTreeMap::new();
    for (modality, model) in models {
        let vectors = features
            .get(modality)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::NoFeaturesForModality(modality.to_string()))?;
        let mut out = BTreeMap::new();
        for id in train_ids.iter().chain(image_ids) {
            if out.contains_key(id) {
                continue;
            }
            if let Some(v) = vectors.get(id) {
                out.insert(id.clone(), model.predict(v)?);
            }
        }
        partial.insert(modality.clone(), out);
    }
    impute_missing(partial, train_ids, image_ids)
}

/// Completes per-modality predictions that may lack some images.
///
/// Each modality's fill value is the mean of its predictions over the
/// `train_ids` it covers; the result covers exactly `image_ids`.
pub fn impute_missing(
    partial: BTreeMap<Modality, BTreeMap<String, f64>>,
    train_ids: &[String],
    image_ids: &[String],
) -> Result<ModalityPredictions> {
    let mut preds = BTreeMap::new();
    let mut imputation = BTreeMap::new();
    let mut imputed = BTreeMap::new();

    for (modality, known) in partial {
        let mut train_sum = 0.0;
        let mut train_n = 0usize;
        for id in train_ids {
            if let Some(p) = known.get(id) {
                train_sum += p;
                train_n += 1;
            }
        }
        if train_n == 0 {
            return Err(Error::NoFeaturesForModality(modality.to_string()));
        }
        let fill = train_sum / train_n as f64;

        let mut out = BTreeMap::new();
        let mut n_imputed = 0;
        for id in image_ids {
            let value = known.get(id).copied().unwrap_or_else(|| {
                n_imputed += 1;
                fill
            });
            out.insert(id.clone(), value);
        }
        imputation.insert(modality.clone(), fill);
        imputed.insert(modality.clone(), n_imputed);
        preds.insert(modality, out);
    }
    Ok(ModalityPredictions {
        preds,
        imputation,
        imputed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Average,
    GridSearch,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Average => "average",
            FusionStrategy::GridSearch => "grid_search",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionStrategy::Average),
            "grid_search" => Ok(FusionStrategy::GridSearch),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion strategy `{other}`"
            ))),
        }
    }
}

/// Simplex weights over modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    modalities: Vec<Modality>,
    weights: Vec<f64>,
    strategy: FusionStrategy,
    /// Grid step used to produce the weights, if any.
    step: Option<f64>,
}

impl FusionWeights {
    pub fn new(
        modalities: Vec<Modality>,
        weights: Vec<f64>,
        strategy: FusionStrategy,
        step: Option<f64>,
    ) -> Result<Self> {
        if modalities.len() != weights.len() || modalities.is_empty() {
            return Err(Error::ModalityMismatch(format!(
                "{} modalities but {} weights",
                modalities.len(),
                weights.len()
            )));
        }
        if modalities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ModalityMismatch(
                "modalities must be sorted and unique".into(),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvariantViolation(
                "weights must be non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvariantViolation(format!(
                "weights sum to {sum}, not 1"
            )));
        }
        Ok(Self {
            modalities,
            weights,
            strategy,
            step,
        })
    }

    /// Equal weights `1/M` over `modalities`.
    pub fn uniform(modalities: Vec<Modality>) -> Result<Self> {
        let w = uniform_vector(modalities.len());
        Self::new(modalities, w, FusionStrategy::Average, None)
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    pub fn step(&self) -> Option<f64> {
        self.step
    }

    pub fn weight_of(&self, m: &Modality) -> Option<f64> {
        self.modalities
            .iter()
            .position(|x| x == m)
            .map(|i| self.weights[i])
    }
}

fn uniform_vector(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// `fused(img) = sum_m w_m * pred_m(img)`.
pub fn fuse_weighted(p: &ModalityPredictions, w: &FusionWeights) -> Result<BTreeMap<String, f64>> {
    if !p.preds.keys().eq(w.modalities.iter()) {
        return Err(Error::ModalityMismatch(format!(
            "weights cover {:?}, predictions cover {:?}",
            w.modalities,
            p.modalities()
        )));
    }
    Ok(fuse_vector(p, &w.weights))
}

fn fuse_vector(p: &ModalityPredictions, weights: &[f64]) -> BTreeMap<String, f64> {
    let mut fused: BTreeMap<String, f64> = p.image_ids().into_iter().map(|id| (id, 0.0)).collect();
    for (preds, w) in p.preds.values().zip(weights) {
        for (id, acc) in fused.iter_mut() {
            *acc += w * preds[id];
        }
    }
    fused
}

/// Uniform-weight fusion.
pub fn fuse_average(p: &ModalityPredictions) -> Result<BTreeMap<String, f64>> {
    if p.num_modalities() == 0 {
        return Err(Error::ModalityMismatch("no modalities to fuse".into()));
    }
    fuse_weighted(p, &FusionWeights::uniform(p.modalities())?)
}

/// Number of grid intervals `1/step`, if `step` divides 1.
fn grid_divisions(step: f64) -> Result<usize> {
    if !(step.is_finite() && step > 0.0 && step <= 1.0) {
        return Err(Error::BadStep(step));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::BadStep(step));
    }
    Ok(n as usize)
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(total - k, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Every weight vector on the `step` lattice of the simplex, plus the exact
/// uniform vector, sorted lexicographically ascending.
pub fn grid_candidates(m: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    let n = grid_divisions(step)?;
    if m == 0 {
        return Err(Error::ModalityMismatch("grid over zero modalities".into()));
    }
    let mut ks = Vec::new();
    compositions(n, m, &mut Vec::with_capacity(m), &mut ks);
    let mut candidates: Vec<Vec<f64>> = ks
        .into_iter()
        .map(|k| k.into_iter().map(|c| c as f64 / n as f64).collect())
        .collect();
    let uniform = uniform_vector(m);
    if !candidates.contains(&uniform) {
        candidates.push(uniform);
    }
    candidates.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(candidates)
}

/// Raw-scale validation MSE of fusing `p` with `weights`.
fn candidate_mse(
    p: &ModalityPredictions,
    weights: &[f64],
    truth: &BTreeMap<String, CohesionLabel>,
) -> Result<f64> {
    let raw = fuse_vector(p, weights)
        .into_iter()
        .map(|(id, v)| denormalize_prediction(v).map(|r| (id, r)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    mse(&raw, truth)
}

/// Picks the candidate with the lowest raw-scale MSE on `truth`. Ties go to
/// the earliest candidate in lexicographic order. Returns the weights and
/// their MSE.
pub fn grid_search_weights(
    p: &ModalityPredictions,
    truth: &BTreeMap<String, CohesionLabel>,
    step: f64,
) -> Result<(FusionWeights, f64)> {
    if truth.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let candidates = grid_candidates(p.num_modalities(), step)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, w) in candidates.iter().enumerate() {
        let e = candidate_mse(p, w, truth)?;
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    let (i, e) = best.expect("at least one candidate");
    let weights = FusionWeights::new(
        p.modalities(),
        candidates[i].clone(),
        FusionStrategy::GridSearch,
        Some(step),
    )?;
    Ok((weights, e))
}

pub fn write_weights<W: Write>(mut out: W, w: &FusionWeights) -> Result<()> {
    let io = |e| Error::io("<weights output>", e);
    let step = w.step.map_or_else(|| "-".to_string(), |s| s.to_string());
    writeln!(
        out,
        "{WEIGHTS_MAGIC} v1 strategy={} step={step}",
        w.strategy
    )
    .map_err(io)?;
    for (m, v) in w.modalities.iter().zip(&w.weights) {
        writeln!(out, "{m}\t{}", numfmt::full(*v)).map_err(io)?;
    }
    Ok(())
}

pub fn parse_weights<R: BufRead>(reader: R) -> Result<FusionWeights> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(Error::EmptyFile)?
        .map_err(|e| Error::malformed(1, e.to_string()))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some(WEIGHTS_MAGIC) || fields.next() != Some("v1") {
        return Err(Error::HeaderMismatch(format!(
            "not a weights header: `{header}`"
        )));
    }
    let strategy: FusionStrategy = fields
        .next()
        .and_then(|f| f.strip_prefix("strategy="))
        .ok_or_else(|| Error::HeaderMismatch("missing strategy=".into()))?
        .parse()?;
    let step = match fields.next().and_then(|f| f.strip_prefix("step=")) {
        Some("-") => None,
        Some(s) => Some(
            numfmt::parse_finite(s)
                .ok_or_else(|| Error::HeaderMismatch(format!("bad step `{s}`")))?,
        ),
        None => return Err(Error::HeaderMismatch("missing step=".into())),
    };

    let mut entries = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (m, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(lineno, "expected `<modality>\\t<weight>`"))?;
        let modality: Modality = m
            .parse()
            .map_err(|_| Error::malformed(lineno, format!("bad modality `{m}`")))?;
        let v = numfmt::parse_finite(v)
            .ok_or_else(|| Error::malformed(lineno, format!("bad weight `{v}`")))?;
        if entries.insert(modality, v).is_some() {
            return Err(Error::malformed(
                lineno,
                format!("duplicate modality `{m}`"),
            ));
        }
    }
    let (modalities, weights) = entries.into_iter().unzip();
    FusionWeights::new(modalities, weights, strategy, step)
}
