#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use cohesion::dataset::{synth_generate, SynthConfig, SynthOutput};
use cohesion::evaluation::ExperimentData;
use cohesion::feature_store::{per_image_vectors, Modality};

/// Kernel written out independently of the library.
#[derive(Debug, Clone, Copy)]
pub enum OracleKernel {
    Linear,
    Rbf(f64),
}

impl OracleKernel {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            OracleKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            OracleKernel::Rbf(g) => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-g * d2).exp()
            }
        }
    }
}

pub fn gram(k: OracleKernel, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|a| x.iter().map(|b| k.eval(a, b)).collect())
        .collect()
}

fn matvec(k: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    k.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Solution of the two-variable-per-point epsilon-SVR dual.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    /// Dual objective (maximization form).
    pub objective: f64,
    /// Primal objective at the recovered `(w, b)`.
    pub primal: f64,
    pub bias: f64,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn beta(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.alpha_star)
            .map(|(a, s)| a - s)
            .collect()
    }

    pub fn gap(&self) -> f64 {
        self.primal - self.objective
    }
}

/// Euclidean projection onto `{0 <= a, s <= C, sum(a) - sum(s) = 0}` by
/// bisection on the multiplier of the equality constraint.
fn project(va: &[f64], vs: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
    let phi = |lam: f64| -> f64 {
        va.iter().map(|v| (v - lam).clamp(0.0, c)).sum::<f64>()
            - vs.iter().map(|v| (v + lam).clamp(0.0, c)).sum::<f64>()
    };
    let span = va.iter().chain(vs).fold(0.0f64, |m, v| m.max(v.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    (
        va.iter().map(|v| (v - lam).clamp(0.0, c)).collect(),
        vs.iter().map(|v| (v + lam).clamp(0.0, c)).collect(),
    )
}

fn dual_value(k: &[Vec<f64>], y: &[f64], eps: f64, a: &[f64], s: &[f64]) -> f64 {
    let beta: Vec<f64> = a.iter().zip(s).map(|(a, s)| a - s).collect();
    let kb = matvec(k, &beta);
    let quad: f64 = beta.iter().zip(&kb).map(|(b, v)| b * v).sum();
    let lin: f64 = y.iter().zip(&beta).map(|(t, b)| t * b).sum();
    let l1: f64 = a.iter().chain(s).sum();
    -0.5 * quad - eps * l1 + lin
}

fn hinge(r: &[f64], b: f64, eps: f64) -> f64 {
    r.iter().map(|ri| ((ri - b).abs() - eps).max(0.0)).sum()
}

/// Midpoint of the minimizing interval of `sum max(0, |r_i - b| - eps)`,
/// which is the set of primal-optimal offsets for a fixed `w`.
fn primal_bias(r: &[f64], eps: f64) -> f64 {
    let knots: Vec<f64> = r.iter().flat_map(|v| [v - eps, v + eps]).collect();
    let vals: Vec<f64> = knots.iter().map(|b| hinge(r, *b, eps)).collect();
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * (1.0 + best);
    let flat: Vec<f64> = knots
        .iter()
        .zip(&vals)
        .filter(|(_, v)| **v <= best + slack)
        .map(|(k, _)| *k)
        .collect();
    let lo = flat.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lo + hi)
}

/// Accelerated projected gradient with adaptive restart on
/// `min 1/2 b'Kb + eps*sum(a + s) - y'b`, `b = a - s`.
pub fn solve_oracle(
    k: OracleKernel,
    x: &[Vec<f64>],
    y: &[f64],
    c: f64,
    eps: f64,
) -> OracleSolution {
    let n = x.len();
    let kmat = gram(k, x);
    let row_bound = kmat
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (2.0 * row_bound.max(1e-12));

    let grad = |a: &[f64], s: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let beta: Vec<f64> = a.iter().zip(s).map(|(a, s)| a - s).collect();
        let kb = matvec(&kmat, &beta);
        (
            (0..n).map(|i| kb[i] + eps - y[i]).collect(),
            (0..n).map(|i| -kb[i] + eps + y[i]).collect(),
        )
    };

    let (mut a, mut s) = (vec![0.0; n], vec![0.0; n]);
    let (mut ya, mut ys) = (a.clone(), s.clone());
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut still = 0;
    while iterations < 400_000 {
        iterations += 1;
        let (ga, gs) = grad(&ya, &ys);
        let va: Vec<f64> = (0..n).map(|i| ya[i] - step * ga[i]).collect();
        let vs: Vec<f64> = (0..n).map(|i| ys[i] - step * gs[i]).collect();
        let (na, ns) = project(&va, &vs, c);

        let moved = (0..n)
            .map(|i| (na[i] - a[i]).abs().max((ns[i] - s[i]).abs()))
            .fold(0.0, f64::max);
        // Restart momentum when it points uphill.
        let uphill: f64 = (0..n)
            .map(|i| (ya[i] - na[i]) * (na[i] - a[i]) + (ys[i] - ns[i]) * (ns[i] - s[i]))
            .sum();
        let t_next = if uphill > 0.0 {
            1.0
        } else {
            0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
        };
        let mom = if uphill > 0.0 {
            0.0
        } else {
            (t - 1.0) / t_next
        };
        ya = (0..n).map(|i| na[i] + mom * (na[i] - a[i])).collect();
        ys = (0..n).map(|i| ns[i] + mom * (ns[i] - s[i])).collect();
        a = na;
        s = ns;
        t = t_next;

        if moved < 1e-15 {
            still += 1;
            if still >= 50 {
                break;
            }
        } else {
            still = 0;
        }
    }

    let objective = dual_value(&kmat, y, eps, &a, &s);
    let beta: Vec<f64> = a.iter().zip(&s).map(|(a, s)| a - s).collect();
    let kb = matvec(&kmat, &beta);
    let r: Vec<f64> = (0..n).map(|i| y[i] - kb[i]).collect();
    let bias = primal_bias(&r, eps);
    let quad: f64 = beta.iter().zip(&kb).map(|(b, v)| b * v).sum();
    let primal = 0.5 * quad + c * hinge(&r, bias, eps);
    OracleSolution {
        alpha: a,
        alpha_star: s,
        objective,
        primal,
        bias,
        iterations,
    }
}

pub fn oracle_predict(k: OracleKernel, x: &[Vec<f64>], sol: &OracleSolution, q: &[f64]) -> f64 {
    sol.beta()
        .iter()
        .zip(x)
        .map(|(b, xi)| b * k.eval(xi, q))
        .sum::<f64>()
        + sol.bias
}

/// The synthetic configuration used by the fusion acceptance checks.
pub fn acceptance_synth() -> SynthConfig {
    SynthConfig {
        seed: 42,
        n_train: 600,
        n_val: 200,
        n_test: 200,
        scene_sigma: 0.05,
        face_sigma: 0.10,
        skeleton_sigma: 0.15,
        face_count_max: 4,
        p_zero_faces: 0.05,
        ..SynthConfig::default()
    }
}

/// Per-image vectors of a generated dataset.
pub fn experiment_data(out: &SynthOutput) -> ExperimentData {
    let features: BTreeMap<Modality, BTreeMap<String, Vec<f64>>> = out
        .features
        .iter()
        .map(|(spec, records)| {
            (
                spec.modality().clone(),
                per_image_vectors(records, spec).expect("synthetic records are valid"),
            )
        })
        .collect();
    ExperimentData {
        dataset: out.dataset.clone(),
        features,
    }
}

pub fn synth_data(cfg: &SynthConfig) -> ExperimentData {
    experiment_data(&synth_generate(cfg).expect("valid synthetic config"))
}

/// Feature, label and split flags for a directory written by `synth`.
pub fn data_flags(dir: &Path) -> Vec<String> {
    let p = |name: &str| dir.join(name).display().to_string();
    vec![
        "--features-scene".into(),
        p("scene.features"),
        "--features-face".into(),
        p("face.features"),
        "--features-skeleton".into(),
        p("skeleton.features"),
        "--labels".into(),
        p("labels.tsv"),
        "--splits".into(),
        p("splits.tsv"),
    ]
}
