//! Epsilon-insensitive support vector regression.
//!
//! [`train_svr`] solves the dual on already-standardized inputs;
//! [`train_standardized`] fits a [`Standardizer`] on raw features first and
//! stores it in the model so that [`SvrModel::predict`] accepts raw vectors.

mod io;
mod kernel;
mod smo;

pub use io::{parse_model, read_model, write_model, MODEL_MAGIC};
pub use kernel::{kernel_eval, KernelConfig, KernelKind, KernelSpec};
pub use smo::SolveStats;

use crate::error::{Error, Result};
use crate::feature_store::{fit_standardizer, Standardizer};

/// Coefficients at or below this magnitude are not kept as support vectors.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvrParams {
    /// Box constraint.
    pub c: f64,
    /// Half-width of the insensitive tube.
    pub epsilon: f64,
    /// Stop once the maximal KKT violation is at most this.
    pub tol: f64,
    /// Budget of pairwise updates.
    pub max_iter: usize,
    /// Gram-matrix rows kept in the LRU cache.
    pub cache_rows: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            epsilon: 0.1,
            tol: 1e-3,
            max_iter: 1_000_000,
            cache_rows: 512,
        }
    }
}

impl SvrParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad(format!("C must be positive, got {}", self.c));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            ));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        Ok(())
    }
}

/// A trained regressor. Support vectors live in standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub kernel: KernelSpec,
    pub support_vectors: Vec<Vec<f64>>,
    /// Signed dual coefficients `alpha_i - alpha_i*`, one per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
}

impl SvrModel {
    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Decision function on a raw feature vector. Not clamped.
    pub fn predict(&self, x_raw: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(x_raw)?;
        Ok(self.predict_standardized(&z))
    }

    fn predict_standardized(&self, z: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, b)| b * self.kernel.eval_unchecked(sv, z))
            .sum::<f64>()
            + self.bias
    }
}

pub fn predict_svr(m: &SvrModel, x_raw: &[f64]) -> Result<f64> {
    m.predict(x_raw)
}

fn check_training_set(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let dim = x[0].len();
    for v in x {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
    }
    if y.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(dim)
}

/// Solves the dual and returns the full coefficient vector alongside the
/// model. Inputs are used as given (identity standardizer).
pub fn train_svr_with_stats(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: KernelSpec,
    params: &SvrParams,
) -> Result<(SvrModel, SolveStats)> {
    params.validate()?;
    let dim = check_training_set(x, y)?;
    let mut km = kernel::KernelMatrix::new(kernel, x, params.cache_rows);
    let stats = smo::solve(&mut km, y, params);

    let (support_vectors, dual_coefs) = x
        .iter()
        .zip(&stats.betas)
        .filter(|(_, b)| b.abs() > SUPPORT_THRESHOLD)
        .map(|(v, b)| (v.clone(), *b))
        .unzip();
    let model = SvrModel {
        kernel,
        support_vectors,
        dual_coefs,
        bias: stats.bias,
        standardizer: Standardizer::identity(dim),
    };
    Ok((model, stats))
}

/// Trains on inputs that are already standardized.
pub fn train_svr(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: KernelSpec,
    params: &SvrParams,
) -> Result<SvrModel> {
    let (model, stats) = train_svr_with_stats(x, y, kernel, params)?;
    if !stats.converged {
        return Err(Error::DidNotConverge {
            iterations: stats.iterations,
            violation: stats.violation,
            model: Box::new(model),
        });
    }
    Ok(model)
}

/// Fits a standardizer on raw `x`, resolves the kernel against the feature
/// width and trains on the standardized data. Does not check convergence.
pub fn train_standardized_with_stats(
    x_raw: &[Vec<f64>],
    y: &[f64],
    kernel: &KernelConfig,
    params: &SvrParams,
) -> Result<(SvrModel, SolveStats)> {
    if x_raw.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let standardizer = fit_standardizer(x_raw)?;
    let z = x_raw
        .iter()
        .map(|v| standardizer.apply(v))
        .collect::<Result<Vec<_>>>()?;
    let spec = kernel.resolve(standardizer.dim())?;
    let (mut model, stats) = train_svr_with_stats(&z, y, spec, params)?;
    model.standardizer = standardizer;
    Ok((model, stats))
}

/// As [`train_standardized_with_stats`], failing with `DidNotConverge` when
/// the update budget runs out.
pub fn train_standardized(
    x_raw: &[Vec<f64>],
    y: &[f64],
    kernel: &KernelConfig,
    params: &SvrParams,
) -> Result<SvrModel> {
    let (model, stats) = train_standardized_with_stats(x_raw, y, kernel, params)?;
    if !stats.converged {
        return Err(Error::DidNotConverge {
            iterations: stats.iterations,
            violation: stats.violation,
            model: Box::new(model),
        });
    }
    Ok(model)
}

/// Dual objective `-1/2 b'Kb - eps*sum|b| + y'b` at a feasible point.
pub fn dual_objective(
    x: &[Vec<f64>],
    y: &[f64],
    kernel: &KernelSpec,
    params: &SvrParams,
    betas: &[f64],
) -> Result<f64> {
    check_training_set(x, y)?;
    if betas.len() != x.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            found: betas.len(),
        });
    }
    let sum: f64 = betas.iter().sum();
    if sum.abs() > 1e-9 {
        return Err(Error::InfeasiblePoint(format!(
            "coefficients sum to {sum:e}"
        )));
    }
    if let Some(b) = betas
        .iter()
        .find(|b| !b.is_finite() || b.abs() > params.c + 1e-12)
    {
        return Err(Error::InfeasiblePoint(format!(
            "|{b}| exceeds C = {}",
            params.c
        )));
    }
    let mut quad = 0.0;
    for (i, xi) in x.iter().enumerate() {
        if betas[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (j, xj) in x.iter().enumerate() {
            row += betas[j] * kernel.eval_unchecked(xi, xj);
        }
        quad += betas[i] * row;
    }
    let l1: f64 = betas.iter().map(|b| b.abs()).sum();
    let lin: f64 = betas.iter().zip(y).map(|(b, t)| b * t).sum();
    Ok(-0.5 * quad - params.epsilon * l1 + lin)
}
