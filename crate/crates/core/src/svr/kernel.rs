//! Kernels and the on-demand Gram-matrix row cache.

use std::fmt;
use std::num::NonZeroUsize;
use std::rc::Rc;
use std::str::FromStr;

use lru::LruCache;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Linear,
    Rbf,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A fully resolved kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    /// `exp(-gamma * |x - y|^2)`
    Rbf {
        gamma: f64,
    },
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(KernelSpec::Rbf { gamma })
        } else {
            Err(Error::InvalidConfig(format!(
                "rbf gamma must be positive, got {gamma}"
            )))
        }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Linear => KernelKind::Linear,
            KernelSpec::Rbf { .. } => KernelKind::Rbf,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            KernelSpec::Linear => None,
            KernelSpec::Rbf { gamma } => Some(*gamma),
        }
    }

    /// Kernel value without length checks; callers guarantee equal lengths.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| {
                        let d = a - b;
                        d * d
                    })
                    .sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// Kernel choice before the feature width is known: rbf gamma defaults to
/// `1 / dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub gamma: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kind: KernelKind::Rbf,
            gamma: None,
        }
    }
}

impl KernelConfig {
    pub fn resolve(&self, dim: usize) -> Result<KernelSpec> {
        match self.kind {
            KernelKind::Linear => Ok(KernelSpec::Linear),
            KernelKind::Rbf => KernelSpec::rbf(self.gamma.unwrap_or(1.0 / dim.max(1) as f64)),
        }
    }
}

pub fn kernel_eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(k.eval_unchecked(x, y))
}

/// Gram matrix over a fixed training set, computed row by row and kept in an
/// LRU cache of bounded size.
pub(crate) struct KernelMatrix<'a> {
    spec: KernelSpec,
    points: &'a [Vec<f64>],
    diag: Vec<f64>,
    cache: LruCache<usize, Rc<[f64]>>,
}

impl<'a> KernelMatrix<'a> {
    pub(crate) fn new(spec: KernelSpec, points: &'a [Vec<f64>], cache_rows: usize) -> Self {
        let diag = points.iter().map(|x| spec.eval_unchecked(x, x)).collect();
        let cap = NonZeroUsize::new(cache_rows.max(2)).unwrap();
        Self {
            spec,
            points,
            diag,
            cache: LruCache::new(cap),
        }
    }

    pub(crate) fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub(crate) fn row(&mut self, i: usize) -> Rc<[f64]> {
        if let Some(row) = self.cache.get(&i) {
            return Rc::clone(row);
        }
        let xi = &self.points[i];
        let row: Rc<[f64]> = self
            .points
            .iter()
            .map(|xj| self.spec.eval_unchecked(xi, xj))
            .collect();
        self.cache.put(i, Rc::clone(&row));
        row
    }
}
