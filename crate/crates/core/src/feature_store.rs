//! Canonical feature files, multi-face collapsing and per-dimension
//! standardization.
//!
//! A feature file is UTF-8 text with one header line followed by one record
//! per line:
//!
//! ```text
//! #cohesion-features v1 modality=face dim=4096
//! img001<TAB>0<TAB>0.12 -1.5 ...
//! img001<TAB>1<TAB>0.07 0.33 ...
//! ```
//!
//! Lines starting with `#` after the header are comments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numfmt;

pub const FEATURE_MAGIC: &str = "#cohesion-features";

pub const SCENE_DIM: usize = 2208;
pub const FACE_DIM: usize = 4096;
pub const SKELETON_DIM: usize = 1536;

/// Smallest standard deviation treated as non-degenerate.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Scene,
    Face,
    Skeleton,
    Custom(String),
}

impl Modality {
    /// The built-in modalities, in the same order as `Ord`.
    pub const BUILTIN: [Modality; 3] = [Modality::Scene, Modality::Face, Modality::Skeleton];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Scene => f.write_str("scene"),
            Modality::Face => f.write_str("face"),
            Modality::Skeleton => f.write_str("skeleton"),
            Modality::Custom(name) => write!(f, "custom:{name}"),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(Modality::Scene),
            "face" => Ok(Modality::Face),
            "skeleton" => Ok(Modality::Skeleton),
            other => match other.strip_prefix("custom:") {
                Some(name) if !name.is_empty() && !name.chars().any(char::is_whitespace) => {
                    Ok(Modality::Custom(name.to_string()))
                }
                _ => Err(Error::HeaderMismatch(format!("unknown modality `{other}`"))),
            },
        }
    }
}

/// Name, vector length and instance policy of one feature source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    modality: Modality,
    dim: usize,
}

impl ModalitySpec {
    /// Holistic scene embedding, 2208-d.
    pub fn scene() -> Self {
        Self {
            modality: Modality::Scene,
            dim: SCENE_DIM,
        }
    }

    /// Per-face embedding, 4096-d, several instances per image.
    pub fn face() -> Self {
        Self {
            modality: Modality::Face,
            dim: FACE_DIM,
        }
    }

    /// Skeleton-rendering embedding, 1536-d.
    pub fn skeleton() -> Self {
        Self {
            modality: Modality::Skeleton,
            dim: SKELETON_DIM,
        }
    }

    pub fn custom(name: &str, dim: usize) -> Result<Self> {
        let modality = Modality::from_str(&format!("custom:{name}"))?;
        Self::new(modality, dim)
    }

    /// Built-in spec for `modality` at its standard width.
    pub fn builtin(modality: &Modality) -> Option<Self> {
        match modality {
            Modality::Scene => Some(Self::scene()),
            Modality::Face => Some(Self::face()),
            Modality::Skeleton => Some(Self::skeleton()),
            Modality::Custom(_) => None,
        }
    }

    /// Any modality at an explicit width. Used for reduced-width (synthetic)
    /// data that keeps the built-in names.
    pub fn new(modality: Modality, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvariantViolation(
                "modality dim must be positive".into(),
            ));
        }
        Ok(Self { modality, dim })
    }

    pub fn with_dim(self, dim: usize) -> Result<Self> {
        Self::new(self.modality, dim)
    }

    pub fn modality(&self) -> &Modality {
        &self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Only faces may contribute several vectors per image.
    pub fn multi_instance(&self) -> bool {
        self.modality == Modality::Face
    }

    pub fn header(&self) -> String {
        format!(
            "{FEATURE_MAGIC} v1 modality={} dim={}",
            self.modality, self.dim
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub instance_index: usize,
    pub values: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(image_id: impl Into<String>, instance_index: usize, values: Vec<f64>) -> Self {
        Self {
            image_id: image_id.into(),
            instance_index,
            values,
        }
    }
}

pub(crate) fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// Parses the header line of a feature file.
pub fn parse_feature_header(line: &str) -> Result<ModalitySpec> {
    let mut fields = line.split_ascii_whitespace();
    if fields.next() != Some(FEATURE_MAGIC) {
        return Err(Error::HeaderMismatch(format!(
            "not a feature file header: `{line}`"
        )));
    }
    if fields.next() != Some("v1") {
        return Err(Error::HeaderMismatch(
            "unsupported feature file version".into(),
        ));
    }
    let modality = fields
        .next()
        .and_then(|f| f.strip_prefix("modality="))
        .ok_or_else(|| Error::HeaderMismatch("missing modality=".into()))?;
    let dim = fields
        .next()
        .and_then(|f| f.strip_prefix("dim="))
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| Error::HeaderMismatch("missing or invalid dim=".into()))?;
    if fields.next().is_some() {
        return Err(Error::HeaderMismatch("trailing fields in header".into()));
    }
    ModalitySpec::new(modality.parse()?, dim).map_err(|e| Error::HeaderMismatch(e.to_string()))
}

/// Parses a feature file, taking the modality and width from its header.
pub fn parse_feature_file_any<R: BufRead>(reader: R) -> Result<(ModalitySpec, Vec<FeatureRecord>)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => return Err(Error::EmptyFile),
        Some(line) => line.map_err(|e| Error::malformed(1, e.to_string()))?,
    };
    let spec = parse_feature_header(header.trim_end_matches('\r'))?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = parse_record(line, lineno, &spec)?;
        if !seen.insert((record.image_id.clone(), record.instance_index)) {
            return Err(Error::malformed(
                lineno,
                format!(
                    "duplicate key ({}, {})",
                    record.image_id, record.instance_index
                ),
            ));
        }
        records.push(record);
    }
    Ok((spec, records))
}

fn parse_record(line: &str, lineno: usize, spec: &ModalitySpec) -> Result<FeatureRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::malformed(
            lineno,
            format!("expected 3 tab-separated fields, found {}", fields.len()),
        ));
    }
    let image_id = fields[0];
    if !valid_token(image_id) {
        return Err(Error::malformed(
            lineno,
            "image id is empty or has whitespace",
        ));
    }
    let instance_index: usize = fields[1]
        .parse()
        .map_err(|_| Error::malformed(lineno, format!("bad instance index `{}`", fields[1])))?;
    if instance_index != 0 && !spec.multi_instance() {
        return Err(Error::malformed(
            lineno,
            format!("modality {} allows only instance 0", spec.modality()),
        ));
    }
    let values = fields[2]
        .split_ascii_whitespace()
        .map(|t| {
            numfmt::parse_finite(t)
                .ok_or_else(|| Error::malformed(lineno, format!("bad value `{t}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != spec.dim() {
        return Err(Error::malformed(
            lineno,
            format!("expected {} values, found {}", spec.dim(), values.len()),
        ));
    }
    Ok(FeatureRecord::new(image_id, instance_index, values))
}

/// Parses a feature file and checks its header against `expected`.
pub fn parse_feature_file<R: BufRead>(
    reader: R,
    expected: &ModalitySpec,
) -> Result<Vec<FeatureRecord>> {
    let mut lines = reader;
    let mut header = String::new();
    let n = lines
        .read_line(&mut header)
        .map_err(|e| Error::malformed(1, e.to_string()))?;
    if n == 0 {
        return Err(Error::EmptyFile);
    }
    let found = parse_feature_header(header.trim_end_matches(['\n', '\r']))?;
    if &found != expected {
        return Err(Error::HeaderMismatch(format!(
            "expected modality={} dim={}, found modality={} dim={}",
            expected.modality(),
            expected.dim(),
            found.modality(),
            found.dim()
        )));
    }
    let (_, records) = parse_feature_file_any(header.as_bytes().chain(lines))?;
    Ok(records)
}

pub fn read_feature_file(path: &Path) -> Result<(ModalitySpec, Vec<FeatureRecord>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_feature_file_any(std::io::BufReader::new(file))
}

fn validate_records(records: &[FeatureRecord], spec: &ModalitySpec) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !valid_token(&r.image_id) {
            return Err(Error::InvariantViolation(format!(
                "bad image id `{}`",
                r.image_id
            )));
        }
        if r.instance_index != 0 && !spec.multi_instance() {
            return Err(Error::InvariantViolation(format!(
                "{}: modality {} allows only instance 0",
                r.image_id,
                spec.modality()
            )));
        }
        if r.values.len() != spec.dim() {
            return Err(Error::InvariantViolation(format!(
                "{}: expected {} values, found {}",
                r.image_id,
                spec.dim(),
                r.values.len()
            )));
        }
        if r.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "{}: non-finite value",
                r.image_id
            )));
        }
        if !seen.insert((r.image_id.as_str(), r.instance_index)) {
            return Err(Error::InvariantViolation(format!(
                "duplicate key ({}, {})",
                r.image_id, r.instance_index
            )));
        }
    }
    Ok(())
}

/// Writes `records` in the canonical format. Input is validated in full
/// before anything is written.
pub fn write_feature_file<W: Write>(
    mut out: W,
    records: &[FeatureRecord],
    spec: &ModalitySpec,
) -> Result<()> {
    validate_records(records, spec)?;
    let io = |e| Error::io("<feature output>", e);
    writeln!(out, "{}", spec.header()).map_err(io)?;
    let mut line = String::new();
    for r in records {
        line.clear();
        line.push_str(&r.image_id);
        line.push('\t');
        line.push_str(&r.instance_index.to_string());
        line.push('\t');
        for (j, v) in r.values.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&numfmt::full(*v));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io)?;
    }
    Ok(())
}

/// Collapses multi-face images to the arithmetic mean of their face vectors.
///
/// Instances are summed in `instance_index` order, so the result does not
/// depend on record order.
pub fn average_face_vectors(records: &[FeatureRecord]) -> Result<BTreeMap<String, Vec<f64>>> {
    let Some(first) = records.first() else {
        return Ok(BTreeMap::new());
    };
    let dim = first.values.len();
    let mut grouped: BTreeMap<&str, Vec<&FeatureRecord>> = BTreeMap::new();
    for r in records {
        if r.values.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: r.values.len(),
            });
        }
        grouped.entry(&r.image_id).or_default().push(r);
    }

    let mut out = BTreeMap::new();
    for (id, mut instances) in grouped {
        instances.sort_by_key(|r| r.instance_index);
        let mut mean = vec![0.0; dim];
        for r in &instances {
            for (m, v) in mean.iter_mut().zip(&r.values) {
                *m += v;
            }
        }
        let k = instances.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        out.insert(id.to_string(), mean);
    }
    Ok(out)
}

/// One vector per image: face instances are averaged, other modalities are
/// passed through.
pub fn per_image_vectors(
    records: &[FeatureRecord],
    spec: &ModalitySpec,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if spec.multi_instance() {
        return average_face_vectors(records);
    }
    let mut out = BTreeMap::new();
    for r in records {
        if r.values.len() != spec.dim() {
            return Err(Error::DimMismatch {
                expected: spec.dim(),
                found: r.values.len(),
            });
        }
        if out.insert(r.image_id.clone(), r.values.clone()).is_some() {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
    }
    Ok(out)
}

/// Per-dimension z-score transform fitted on training vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Rebuilds a standardizer from stored statistics.
    pub fn from_parts(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(Error::DimMismatch {
                expected: mean.len(),
                found: scale.len(),
            });
        }
        if mean.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if scale.iter().any(|&s| s < SCALE_FLOOR) {
            return Err(Error::InvariantViolation(
                "standardizer scale below floor".into(),
            ));
        }
        Ok(Self { mean, scale })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| x * s + m)
            .collect())
    }
}

/// Fits per-dimension mean and population standard deviation. Dimensions
/// whose deviation falls below [`SCALE_FLOOR`] get scale 1.0.
pub fn fit_standardizer(vectors: &[Vec<f64>]) -> Result<Standardizer> {
    let first = vectors.first().ok_or(Error::EmptyInput)?;
    let dim = first.len();
    let n = vectors.len() as f64;

    let mut mean = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = vec![0.0; dim];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            let d = x - m;
            *s += d * d;
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < SCALE_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    if mean.iter().any(|m: &f64| !m.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(Standardizer { mean, scale })
}
