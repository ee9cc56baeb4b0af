//! Cohesion labels, split assignment, label scaling, level downsampling and
//! a seeded synthetic multi-modal generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feature_store::{self, valid_token, FeatureRecord, Modality, ModalitySpec};
use crate::numfmt;

pub const LABELS_HEADER: &str = "#cohesion-labels v1";
pub const SPLITS_HEADER: &str = "#cohesion-splits v1";
pub const PREDICTIONS_MAGIC: &str = "#cohesion-predictions";

/// Highest cohesion level; labels live in `0..=MAX_LEVEL`.
pub const MAX_LEVEL: u8 = 3;
pub const NUM_LEVELS: usize = 4;

/// One of the four cohesion levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CohesionLabel(u8);

impl CohesionLabel {
    pub fn new(level: i64) -> Result<Self> {
        if (0..=MAX_LEVEL as i64).contains(&level) {
            Ok(Self(level as u8))
        } else {
            Err(Error::LevelOutOfRange(level))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn normalized(self) -> f64 {
        self.0 as f64 / MAX_LEVEL as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// Labels plus split membership. Test images may be unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    labels: BTreeMap<String, CohesionLabel>,
    splits: BTreeMap<String, Split>,
}

impl LabeledDataset {
    pub fn new(
        labels: BTreeMap<String, CohesionLabel>,
        splits: BTreeMap<String, Split>,
    ) -> Result<Self> {
        for id in labels.keys() {
            if !splits.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "labeled image `{id}` has no split"
                )));
            }
        }
        for (id, split) in &splits {
            if *split != Split::Test && !labels.contains_key(id) {
                return Err(Error::MissingLabel(id.clone()));
            }
        }
        Ok(Self { labels, splits })
    }

    pub fn labels(&self) -> &BTreeMap<String, CohesionLabel> {
        &self.labels
    }

    pub fn splits(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    pub fn label(&self, id: &str) -> Option<CohesionLabel> {
        self.labels.get(id).copied()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    /// Image ids of one split in sorted order.
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    /// Number of images per level within a split.
    pub fn level_counts(&self, split: Split) -> [usize; NUM_LEVELS] {
        let mut counts = [0; NUM_LEVELS];
        for (id, s) in &self.splits {
            if *s == split {
                if let Some(l) = self.labels.get(id) {
                    counts[l.level() as usize] += 1;
                }
            }
        }
        counts
    }

    /// Labels for `ids`; every id must be labeled.
    pub fn labels_for(&self, ids: &[String]) -> Result<BTreeMap<String, CohesionLabel>> {
        ids.iter()
            .map(|id| {
                self.label(id)
                    .map(|l| (id.clone(), l))
                    .ok_or_else(|| Error::MissingLabel(id.clone()))
            })
            .collect()
    }
}

fn check_header<R: BufRead>(lines: &mut std::io::Lines<R>, header: &str) -> Result<()> {
    match lines.next() {
        None => Err(Error::EmptyFile),
        Some(line) => {
            let line = line.map_err(|e| Error::malformed(1, e.to_string()))?;
            if line.trim_end_matches('\r') != header {
                return Err(Error::HeaderMismatch(format!(
                    "expected `{header}`, found `{line}`"
                )));
            }
            Ok(())
        }
    }
}

/// Iterates `(line number, [id, value])` over data lines of a two-column file.
fn two_column_rows<R: BufRead>(
    lines: std::io::Lines<R>,
) -> impl Iterator<Item = Result<(usize, String, String)>> {
    lines.enumerate().filter_map(|(i, line)| {
        let lineno = i + 2;
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::malformed(lineno, e.to_string()))),
        };
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let mut fields = line.split('\t');
        let (Some(id), Some(value), None) = (fields.next(), fields.next(), fields.next()) else {
            return Some(Err(Error::malformed(
                lineno,
                "expected 2 tab-separated fields",
            )));
        };
        if !valid_token(id) {
            return Some(Err(Error::malformed(
                lineno,
                "image id is empty or has whitespace",
            )));
        }
        Some(Ok((lineno, id.to_string(), value.to_string())))
    })
}

/// Parses a labels file into `image_id -> level`.
pub fn parse_labels<R: BufRead>(reader: R) -> Result<BTreeMap<String, CohesionLabel>> {
    let mut lines = reader.lines();
    check_header(&mut lines, LABELS_HEADER)?;
    let mut out = BTreeMap::new();
    for row in two_column_rows(lines) {
        let (lineno, id, value) = row?;
        let level: i64 = value
            .parse()
            .map_err(|_| Error::malformed(lineno, format!("bad level `{value}`")))?;
        let label = CohesionLabel::new(level)?;
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn write_labels<W: Write>(mut out: W, labels: &BTreeMap<String, CohesionLabel>) -> Result<()> {
    let io = |e| Error::io("<labels output>", e);
    writeln!(out, "{LABELS_HEADER}").map_err(io)?;
    for (id, l) in labels {
        writeln!(out, "{id}\t{}", l.level()).map_err(io)?;
    }
    Ok(())
}

/// Parses a splits file into `image_id -> split`.
pub fn parse_splits<R: BufRead>(reader: R) -> Result<BTreeMap<String, Split>> {
    let mut lines = reader.lines();
    check_header(&mut lines, SPLITS_HEADER)?;
    let mut out = BTreeMap::new();
    for row in two_column_rows(lines) {
        let (lineno, id, value) = row?;
        let split = value
            .parse()
            .map_err(|_| Error::malformed(lineno, format!("bad split `{value}`")))?;
        if out.insert(id.clone(), split).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn write_splits<W: Write>(mut out: W, splits: &BTreeMap<String, Split>) -> Result<()> {
    let io = |e| Error::io("<splits output>", e);
    writeln!(out, "{SPLITS_HEADER}").map_err(io)?;
    for (id, s) in splits {
        writeln!(out, "{id}\t{s}").map_err(io)?;
    }
    Ok(())
}

/// Loads a labels file and a splits file into one dataset.
pub fn load_dataset(labels_path: &Path, splits_path: &Path) -> Result<LabeledDataset> {
    let open = |p: &Path| {
        std::fs::File::open(p)
            .map(std::io::BufReader::new)
            .map_err(|e| Error::io(p, e))
    };
    let labels = parse_labels(open(labels_path)?)?;
    let splits = parse_splits(open(splits_path)?)?;
    LabeledDataset::new(labels, splits)
}

/// Maps a level in `0..=3` linearly onto `[0, 1]`.
pub fn normalize_label(level: i64) -> Result<f64> {
    Ok(CohesionLabel::new(level)?.normalized())
}

/// Maps a normalized prediction back onto the `[0, 3]` label scale,
/// clamping to the valid range first.
pub fn denormalize_prediction(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    Ok(y.clamp(0.0, 1.0) * MAX_LEVEL as f64)
}

/// Removes `floor(ratio * n)` training images of `level`, chosen uniformly
/// without replacement from a generator seeded with `seed`. Validation and
/// test images and other levels are untouched.
pub fn balance_downsample(
    ds: &LabeledDataset,
    level: i64,
    ratio: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let target = CohesionLabel::new(level)?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!(
            "balance ratio {ratio} not in [0, 1]"
        )));
    }
    let candidates: Vec<&String> = ds
        .splits
        .iter()
        .filter(|(id, s)| **s == Split::Train && ds.labels.get(*id) == Some(&target))
        .map(|(id, _)| id)
        .collect();
    let n_remove = (ratio * candidates.len() as f64).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: BTreeSet<&String> = index::sample(&mut rng, candidates.len(), n_remove)
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    let labels = ds
        .labels
        .iter()
        .filter(|(id, _)| !removed.contains(id))
        .map(|(id, l)| (id.clone(), *l))
        .collect();
    let splits = ds
        .splits
        .iter()
        .filter(|(id, _)| !removed.contains(id))
        .map(|(id, s)| (id.clone(), *s))
        .collect();
    Ok(LabeledDataset { labels, splits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionScale {
    Normalized,
    Raw,
}

impl fmt::Display for PredictionScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionScale::Normalized => "normalized",
            PredictionScale::Raw => "raw",
        })
    }
}

pub fn write_predictions<W: Write>(
    mut out: W,
    preds: &BTreeMap<String, f64>,
    scale: PredictionScale,
) -> Result<()> {
    let io = |e| Error::io("<predictions output>", e);
    writeln!(out, "{PREDICTIONS_MAGIC} v1 scale={scale}").map_err(io)?;
    for (id, v) in preds {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        writeln!(out, "{id}\t{}", numfmt::full(*v)).map_err(io)?;
    }
    Ok(())
}

pub fn parse_predictions<R: BufRead>(
    reader: R,
) -> Result<(PredictionScale, BTreeMap<String, f64>)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => return Err(Error::EmptyFile),
        Some(l) => l.map_err(|e| Error::malformed(1, e.to_string()))?,
    };
    let scale = match header.trim_end_matches('\r') {
        "#cohesion-predictions v1 scale=normalized" => PredictionScale::Normalized,
        "#cohesion-predictions v1 scale=raw" => PredictionScale::Raw,
        other => {
            return Err(Error::HeaderMismatch(format!(
                "not a predictions header: `{other}`"
            )))
        }
    };
    let mut out = BTreeMap::new();
    for row in two_column_rows(lines) {
        let (lineno, id, value) = row?;
        let v = numfmt::parse_finite(&value)
            .ok_or_else(|| Error::malformed(lineno, format!("bad value `{value}`")))?;
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok((scale, out))
}

/// Parameters of the synthetic one-factor generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scene_dim: usize,
    pub face_dim: usize,
    pub skeleton_dim: usize,
    pub scene_sigma: f64,
    pub face_sigma: f64,
    pub skeleton_sigma: f64,
    /// Upper end of the face-count range `[0, face_count_max]`.
    pub face_count_max: usize,
    pub p_zero_faces: f64,
}

/// Standard deviation of the per-image latent around `level / 3`.
pub const LATENT_SIGMA: f64 = 0.02;

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_train: 600,
            n_val: 200,
            n_test: 200,
            scene_dim: 32,
            face_dim: 64,
            skeleton_dim: 24,
            scene_sigma: 0.05,
            face_sigma: 0.10,
            skeleton_sigma: 0.15,
            face_count_max: 4,
            p_zero_faces: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive");
        }
        if self.scene_dim == 0 || self.face_dim == 0 || self.skeleton_dim == 0 {
            return bad("modality dims must be positive");
        }
        if [self.scene_sigma, self.face_sigma, self.skeleton_sigma]
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return bad("noise sigmas must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_zero_faces) {
            return bad("p_zero_faces must be a probability");
        }
        Ok(())
    }

    /// Modality specs in generation order: scene, face, skeleton.
    pub fn specs(&self) -> [ModalitySpec; 3] {
        [
            ModalitySpec::new(Modality::Scene, self.scene_dim),
            ModalitySpec::new(Modality::Face, self.face_dim),
            ModalitySpec::new(Modality::Skeleton, self.skeleton_dim),
        ]
        .map(|s| s.expect("validated dims"))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: LabeledDataset,
    /// One feature file per modality (scene, face, skeleton).
    pub features: Vec<(ModalitySpec, Vec<FeatureRecord>)>,
}

impl SynthOutput {
    /// Writes `labels.tsv`, `splits.tsv` and `<modality>.features` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        write_labels(create("labels.tsv")?, self.dataset.labels())?;
        write_splits(create("splits.tsv")?, self.dataset.splits())?;
        for (spec, records) in &self.features {
            let mut w = create(&format!("{}.features", spec.modality()))?;
            feature_store::write_feature_file(&mut w, records, spec)?;
            w.flush().map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a labeled dataset with one-factor features.
///
/// Each image draws a level uniformly from `0..=3` and a latent
/// `z = level/3 + N(0, 0.02)`. Every instance of modality `m` is
/// `z * a_m + sigma_m * noise`, where `a_m` is a seeded unit direction.
/// Faces get `k` instances: `k = 0` with probability `p_zero_faces`, otherwise
/// `k` is uniform on `1..=face_count_max`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = cfg.specs();
    let sigmas = [cfg.scene_sigma, cfg.face_sigma, cfg.skeleton_sigma];
    let directions: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| unit_direction(&mut rng, s.dim()))
        .collect();

    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    let width = n.to_string().len().max(5);
    let mut labels = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut features: Vec<Vec<FeatureRecord>> = vec![Vec::new(); 3];

    for i in 0..n {
        let id = format!("img{i:0width$}");
        let split = if i < cfg.n_train {
            Split::Train
        } else if i < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let level: u8 = rng.random_range(0..=MAX_LEVEL);
        let noise: f64 = StandardNormal.sample(&mut rng);
        let z = level as f64 / MAX_LEVEL as f64 + LATENT_SIGMA * noise;

        for (m, spec) in specs.iter().enumerate() {
            let instances = if spec.multi_instance() {
                if cfg.face_count_max == 0 || rng.random_bool(cfg.p_zero_faces) {
                    0
                } else {
                    rng.random_range(1..=cfg.face_count_max)
                }
            } else {
                1
            };
            for k in 0..instances {
                let values = directions[m]
                    .iter()
                    .map(|a| {
                        let eta: f64 = StandardNormal.sample(&mut rng);
                        z * a + sigmas[m] * eta
                    })
                    .collect();
                features[m].push(FeatureRecord::new(id.clone(), k, values));
            }
        }
        labels.insert(id.clone(), CohesionLabel(level));
        splits.insert(id, split);
    }

    Ok(SynthOutput {
        dataset: LabeledDataset { labels, splits },
        features: specs.into_iter().zip(features).collect(),
    })
}
