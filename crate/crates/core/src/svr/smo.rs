//! SMO solver for the epsilon-SVR dual in the signed parameterization.
//!
//! We minimize
//!
//! ```text
//! f(b) = 1/2 b'Kb - y'b + eps * sum |b_i|   s.t.  sum b_i = 0,  -C <= b_i <= C
//! ```
//!
//! which is the negated dual objective. Each step moves one coefficient up
//! and another down by the same amount, so the equality constraint holds
//! throughout. Writing `g = Kb - y`, the one-sided derivatives are
//!
//! ```text
//! up_i   = g_i + eps * (b_i >= 0 ? 1 : -1)     (defined when b_i < C)
//! down_j = -g_j + eps * (b_j <= 0 ? 1 : -1)    (defined when b_j > -C)
//! ```
//!
//! The pair minimizing `up_i + down_j` is the maximal violating pair; the
//! iteration stops once `-(up_i + down_j) <= tol`. The step length comes from
//! an exact line search over the piecewise quadratic restriction of `f`.

use super::kernel::KernelMatrix;
use super::SvrParams;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    /// One signed coefficient per training point.
    pub betas: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub violation: f64,
    pub converged: bool,
}

struct Solver<'k, 'a> {
    kernel: &'k mut KernelMatrix<'a>,
    c: f64,
    eps: f64,
    beta: Vec<f64>,
    grad: Vec<f64>,
}

#[inline]
fn sign_up(b: f64) -> f64 {
    if b >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn sign_down(b: f64) -> f64 {
    if b <= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Two smallest entries (value, index); ties keep the lower index.
#[derive(Clone, Copy)]
struct Best2 {
    first: (f64, usize),
    second: (f64, usize),
}

impl Best2 {
    fn new() -> Self {
        Self {
            first: (f64::INFINITY, usize::MAX),
            second: (f64::INFINITY, usize::MAX),
        }
    }

    fn push(&mut self, v: f64, i: usize) {
        if v < self.first.0 {
            self.second = self.first;
            self.first = (v, i);
        } else if v < self.second.0 {
            self.second = (v, i);
        }
    }
}

impl<'k, 'a> Solver<'k, 'a> {
    fn up(&self, i: usize) -> Option<f64> {
        (self.beta[i] < self.c).then(|| self.grad[i] + self.eps * sign_up(self.beta[i]))
    }

    fn down(&self, j: usize) -> Option<f64> {
        (self.beta[j] > -self.c).then(|| -self.grad[j] + self.eps * sign_down(self.beta[j]))
    }

    /// Maximal violating pair `(i, j, violation)`, `i` moving up and `j` down.
    fn select_pair(&self) -> Option<(usize, usize, f64)> {
        let mut ups = Best2::new();
        let mut downs = Best2::new();
        for k in 0..self.beta.len() {
            if let Some(u) = self.up(k) {
                ups.push(u, k);
            }
            if let Some(d) = self.down(k) {
                downs.push(d, k);
            }
        }
        let candidates = if ups.first.1 != downs.first.1 {
            vec![(ups.first, downs.first)]
        } else {
            vec![(ups.first, downs.second), (ups.second, downs.first)]
        };
        candidates
            .into_iter()
            .filter(|(u, d)| u.1 != usize::MAX && d.1 != usize::MAX)
            .map(|(u, d)| (u.1, d.1, -(u.0 + d.0)))
            .fold(None, |best: Option<(usize, usize, f64)>, cand| match best {
                Some(b) if b.2 >= cand.2 => Some(b),
                _ => Some(cand),
            })
    }

    /// Change in `f` when `beta_i += t` and `beta_j -= t`.
    fn step_delta(&self, i: usize, j: usize, eta: f64, t: f64) -> f64 {
        let (bi, bj) = (self.beta[i], self.beta[j]);
        t * (self.grad[i] - self.grad[j])
            + 0.5 * eta * t * t
            + self.eps * ((bi + t).abs() - bi.abs() + (bj - t).abs() - bj.abs())
    }

    /// Exact minimizer of the convex piecewise quadratic step function on
    /// `[0, t_max]`. Kinks sit where either coefficient crosses zero.
    fn line_search(&self, i: usize, j: usize, eta: f64) -> f64 {
        let (bi, bj) = (self.beta[i], self.beta[j]);
        let t_max = (self.c - bi).min(bj + self.c);
        let mut knots = vec![0.0, t_max];
        for k in [-bi, bj] {
            if k > 0.0 && k < t_max {
                knots.push(k);
            }
        }
        knots.sort_by(f64::total_cmp);

        let mut candidates = knots.clone();
        if eta > 0.0 {
            let lin = self.grad[i] - self.grad[j];
            for w in knots.windows(2) {
                let mid = 0.5 * (w[0] + w[1]);
                let slope = self.eps * (sign_up(bi + mid) - sign_up(bj - mid));
                let t = -(lin + slope) / eta;
                if t > w[0] && t < w[1] {
                    candidates.push(t);
                }
            }
        }
        let mut best = (0.0, 0.0);
        for t in candidates {
            let d = self.step_delta(i, j, eta, t);
            if d < best.1 {
                best = (t, d);
            }
        }
        best.0
    }

    fn apply_step(&mut self, i: usize, j: usize, t: f64) {
        let (bi, bj) = (self.beta[i], self.beta[j]);
        // Land exactly on bounds and zero crossings so the active-set
        // bookkeeping stays exact.
        self.beta[i] = if t == self.c - bi {
            self.c
        } else if t == -bi {
            0.0
        } else {
            bi + t
        };
        self.beta[j] = if t == bj + self.c {
            -self.c
        } else if t == bj {
            0.0
        } else {
            bj - t
        };
        let ki = self.kernel.row(i);
        let kj = self.kernel.row(j);
        for ((g, a), b) in self.grad.iter_mut().zip(ki.iter()).zip(kj.iter()) {
            *g += t * (a - b);
        }
    }

    /// Bias from the KKT conditions: the mean over free coefficients, or the
    /// midpoint of the feasible interval when every coefficient is at a bound
    /// or zero.
    fn bias(&self) -> f64 {
        let mut sum = 0.0;
        let mut free = 0usize;
        for (b, g) in self.beta.iter().zip(&self.grad) {
            if *b != 0.0 && b.abs() < self.c {
                sum += -(g + self.eps * b.signum());
                free += 1;
            }
        }
        if free > 0 {
            return sum / free as f64;
        }
        let lower = (0..self.beta.len())
            .filter_map(|i| self.up(i).map(|u| -u))
            .fold(f64::NEG_INFINITY, f64::max);
        let upper = (0..self.beta.len())
            .filter_map(|j| self.down(j))
            .fold(f64::INFINITY, f64::min);
        match (lower.is_finite(), upper.is_finite()) {
            (true, true) => 0.5 * (lower + upper),
            (true, false) => lower,
            (false, true) => upper,
            (false, false) => 0.0,
        }
    }
}

pub(crate) fn solve(kernel: &mut KernelMatrix<'_>, y: &[f64], params: &SvrParams) -> SolveStats {
    let n = y.len();
    let mut s = Solver {
        kernel,
        c: params.c,
        eps: params.epsilon,
        beta: vec![0.0; n],
        grad: y.iter().map(|v| -v).collect(),
    };

    let mut iterations = 0;
    let mut violation = 0.0;
    let mut converged = false;
    loop {
        let Some((i, j, v)) = s.select_pair() else {
            converged = true;
            break;
        };
        violation = v.max(0.0);
        if v <= params.tol {
            converged = true;
            break;
        }
        if iterations >= params.max_iter {
            break;
        }
        let eta = (s.kernel.diag(i) + s.kernel.diag(j) - 2.0 * s.kernel.row(i)[j]).max(0.0);
        let t = s.line_search(i, j, eta);
        if t <= 0.0 {
            // Violation above tol but no numerical progress possible.
            break;
        }
        s.apply_step(i, j, t);
        iterations += 1;
    }

    let bias = s.bias();
    SolveStats {
        betas: s.beta,
        bias,
        iterations,
        violation,
        converged,
    }
}
