//! SVM dual quadratic programs for a fixed kernel matrix.
//!
//! Both tasks are reduced to the generic box QP
//!
//! ```text
//! min  1/2 b^T Q b + p^T b   s.t.  s^T b = 0,  0 <= b <= C,
//! Q_uv = s_u s_v K[pi(u), pi(v)]
//! ```
//!
//! For classification `b = alpha`, `s = y`, `p = -1`. For regression the
//! variables are the split `b = [alpha+, alpha-]` with `s = [+1, -1]`,
//! `p = [eps - y, eps + y]`, and `alpha = alpha+ - alpha-`. The solver is
//! first-order maximal-violating-pair SMO.

use ndarray::ArrayView2;

use crate::error::{Result, TklError};

/// Learning task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = TklError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "c" => Ok(Task::Classification),
            "regression" | "r" => Ok(Task::Regression),
            other => Err(TklError::Config(format!(
                "unknown task '{other}' (expected classification or regression)"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dual QP instance. The kernel matrix is borrowed read-only.
#[derive(Clone, Copy, Debug)]
pub struct DualProblem<'a> {
    pub kernel: ArrayView2<'a, f64>,
    pub y: &'a [f64],
    pub c: f64,
    /// Tube half-width, ignored for classification.
    pub eps_tube: f64,
    pub task: Task,
}

impl<'a> DualProblem<'a> {
    pub fn classification(kernel: ArrayView2<'a, f64>, y: &'a [f64], c: f64) -> Self {
        DualProblem { kernel, y, c, eps_tube: 0.0, task: Task::Classification }
    }

    pub fn regression(kernel: ArrayView2<'a, f64>, y: &'a [f64], c: f64, eps_tube: f64) -> Self {
        DualProblem { kernel, y, c, eps_tube, task: Task::Regression }
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.kernel.dim() != (m, m) {
            return Err(TklError::DimensionMismatch { expected: m, got: self.kernel.nrows() });
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(TklError::Config(format!("C must be finite and >= 0, got {}", self.c)));
        }
        if self.task == Task::Regression && !(self.eps_tube >= 0.0) {
            return Err(TklError::Config(format!("tube width must be >= 0, got {}", self.eps_tube)));
        }
        if self.task == Task::Classification {
            if let Some(bad) = self.y.iter().find(|v| **v != 1.0 && **v != -1.0) {
                return Err(TklError::Config(format!("classification label {bad} is not +-1")));
            }
            let pos = self.y.iter().any(|v| *v > 0.0);
            let neg = self.y.iter().any(|v| *v < 0.0);
            if !(pos && neg) {
                let label = if pos { 1.0 } else { -1.0 };
                return Err(TklError::SingleClass { label });
            }
        }
        Ok(())
    }

    /// `alpha (.) y` for classification, `alpha` for regression.
    pub fn alpha_tilde(&self, alpha: &[f64]) -> Vec<f64> {
        match self.task {
            Task::Classification => alpha.iter().zip(self.y).map(|(a, y)| a * y).collect(),
            Task::Regression => alpha.to_vec(),
        }
    }
}

/// Result of a dual solve.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    /// Nonnegative multipliers (classification) or signed coefficients
    /// (regression).
    pub alpha: Vec<f64>,
    /// Offset added to `sum_i alpha~_i k(x_i, .)`.
    pub bias: f64,
    /// Dual objective value (to be maximized).
    pub objective: f64,
    /// Maximal KKT violation at return.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solver controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoParams {
    /// Stop once the maximal violating pair gap is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams { tol: 1e-3, max_iter: 10_000_000 }
    }
}

/// Value of the dual objective at `alpha`:
/// `sum alpha - 1/2 (alpha y)^T K (alpha y)` or
/// `-1/2 alpha^T K alpha - eps sum|alpha| + y^T alpha`.
pub fn dual_objective(prob: &DualProblem, alpha: &[f64]) -> f64 {
    let at = prob.alpha_tilde(alpha);
    let quad = quadratic_form(prob.kernel, &at);
    match prob.task {
        Task::Classification => alpha.iter().sum::<f64>() - 0.5 * quad,
        Task::Regression => {
            let l1: f64 = alpha.iter().map(|a| a.abs()).sum();
            let lin: f64 = alpha.iter().zip(prob.y).map(|(a, y)| a * y).sum();
            -0.5 * quad - prob.eps_tube * l1 + lin
        }
    }
}

fn quadratic_form(k: ArrayView2<f64>, v: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = k.row(i);
        let mut acc = 0.0;
        for (j, &vj) in v.iter().enumerate() {
            acc += row[j] * vj;
        }
        total += vi * acc;
    }
    total
}

/// Bias recovered from the KKT conditions at `alpha`: the average over free
/// variables, or the midpoint of the feasible interval when none is free.
pub fn compute_bias(prob: &DualProblem, alpha: &[f64]) -> f64 {
    let qp = GenericQp::new(prob);
    let beta = qp.split(alpha);
    let grad = qp.gradient(&beta);
    -qp.rho(&beta, &grad)
}

pub fn solve_dual_classification(
    prob: &DualProblem,
    params: &SmoParams,
    warm_start: Option<&[f64]>,
) -> Result<DualSolution> {
    if prob.task != Task::Classification {
        return Err(TklError::Config("solve_dual_classification needs a classification problem".into()));
    }
    solve_dual(prob, params, warm_start)
}

pub fn solve_dual_regression(
    prob: &DualProblem,
    params: &SmoParams,
    warm_start: Option<&[f64]>,
) -> Result<DualSolution> {
    if prob.task != Task::Regression {
        return Err(TklError::Config("solve_dual_regression needs a regression problem".into()));
    }
    solve_dual(prob, params, warm_start)
}

/// Dispatches on the task. On iteration exhaustion the best iterate is
/// returned inside [`TklError::NonConvergence`].
pub fn solve_dual(prob: &DualProblem, params: &SmoParams, warm_start: Option<&[f64]>) -> Result<DualSolution> {
    prob.validate()?;
    let qp = GenericQp::new(prob);
    let beta0 = warm_start
        .filter(|w| w.len() == prob.m())
        .map(|w| qp.split(w))
        .filter(|b| qp.feasible(b));
    let (mut beta, mut grad, iterations, residual, converged) = qp.smo(beta0, params);
    if qp.enforce_complementarity(&mut beta) {
        grad = qp.gradient(&beta);
    }
    let alpha = qp.fold(&beta);
    let bias = -qp.rho(&beta, &grad);
    let solution = DualSolution {
        objective: dual_objective(prob, &alpha),
        alpha,
        bias,
        kkt_residual: residual,
        iterations,
    };
    if converged {
        Ok(solution)
    } else {
        Err(TklError::NonConvergence { best: Box::new(solution) })
    }
}

const TAU: f64 = 1e-12;

struct GenericQp<'p, 'a> {
    prob: &'p DualProblem<'a>,
    /// Number of generic variables (m or 2m).
    len: usize,
    sign: Vec<f64>,
    linear: Vec<f64>,
    diag: Vec<f64>,
}

impl<'p, 'a> GenericQp<'p, 'a> {
    fn new(prob: &'p DualProblem<'a>) -> Self {
        let m = prob.m();
        let (sign, linear) = match prob.task {
            Task::Classification => (prob.y.to_vec(), vec![-1.0; m]),
            Task::Regression => {
                let mut s = vec![1.0; m];
                s.extend(std::iter::repeat_n(-1.0, m));
                let mut p: Vec<f64> = prob.y.iter().map(|y| prob.eps_tube - y).collect();
                p.extend(prob.y.iter().map(|y| prob.eps_tube + y));
                (s, p)
            }
        };
        let len = sign.len();
        let diag = (0..len).map(|u| prob.kernel[[u % m, u % m]]).collect();
        GenericQp { prob, len, sign, linear, diag }
    }

    #[inline]
    fn src(&self, u: usize) -> usize {
        u % self.prob.m()
    }

    fn split(&self, alpha: &[f64]) -> Vec<f64> {
        let c = self.prob.c;
        match self.prob.task {
            Task::Classification => alpha.iter().map(|a| a.clamp(0.0, c)).collect(),
            Task::Regression => {
                let mut b: Vec<f64> = alpha.iter().map(|a| a.max(0.0).min(c)).collect();
                b.extend(alpha.iter().map(|a| (-a).max(0.0).min(c)));
                b
            }
        }
    }

    fn fold(&self, beta: &[f64]) -> Vec<f64> {
        let m = self.prob.m();
        match self.prob.task {
            Task::Classification => beta.to_vec(),
            Task::Regression => (0..m).map(|i| beta[i] - beta[m + i]).collect(),
        }
    }

    /// Removes the common part of `alpha+_i` and `alpha-_i`; this keeps the
    /// equality constraint and the box and never lowers the dual value.
    fn enforce_complementarity(&self, beta: &mut [f64]) -> bool {
        if self.prob.task != Task::Regression {
            return false;
        }
        let m = self.prob.m();
        let mut changed = false;
        for i in 0..m {
            let common = beta[i].min(beta[m + i]);
            if common > 0.0 {
                beta[i] -= common;
                beta[m + i] -= common;
                changed = true;
            }
        }
        changed
    }

    fn feasible(&self, beta: &[f64]) -> bool {
        let residual: f64 = beta.iter().zip(&self.sign).map(|(b, s)| b * s).sum();
        residual.abs() <= 1e-9 * self.prob.c.max(1.0) * self.prob.m() as f64
    }

    /// `Q beta + p`.
    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut grad = self.linear.clone();
        for (v, &bv) in beta.iter().enumerate() {
            if bv == 0.0 {
                continue;
            }
            let row = self.prob.kernel.row(self.src(v));
            let sv = self.sign[v] * bv;
            for u in 0..self.len {
                grad[u] += self.sign[u] * row[self.src(u)] * sv;
            }
        }
        grad
    }

    #[inline]
    fn in_up(&self, u: usize, b: f64) -> bool {
        if self.sign[u] > 0.0 {
            b < self.prob.c
        } else {
            b > 0.0
        }
    }

    #[inline]
    fn in_low(&self, u: usize, b: f64) -> bool {
        if self.sign[u] > 0.0 {
            b > 0.0
        } else {
            b < self.prob.c
        }
    }

    /// Maximal violating pair, lowest index on ties. Returns
    /// `(i, j, violation)`.
    fn select_pair(&self, beta: &[f64], grad: &[f64]) -> Option<(usize, usize, f64)> {
        let mut up = f64::NEG_INFINITY;
        let mut up_idx = None;
        let mut low = f64::NEG_INFINITY;
        let mut low_idx = None;
        for u in 0..self.len {
            let sg = -self.sign[u] * grad[u];
            if self.in_up(u, beta[u]) && sg > up {
                up = sg;
                up_idx = Some(u);
            }
            if self.in_low(u, beta[u]) && -sg > low {
                low = -sg;
                low_idx = Some(u);
            }
        }
        match (up_idx, low_idx) {
            (Some(i), Some(j)) => Some((i, j, up + low)),
            _ => None,
        }
    }

    #[allow(clippy::type_complexity)]
    fn smo(&self, warm: Option<Vec<f64>>, params: &SmoParams) -> (Vec<f64>, Vec<f64>, usize, f64, bool) {
        let c = self.prob.c;
        let mut beta = warm.unwrap_or_else(|| vec![0.0; self.len]);
        let mut grad = self.gradient(&beta);
        if c == 0.0 {
            return (beta, grad, 0, 0.0, true);
        }
        let kernel = self.prob.kernel;
        let mut iter = 0;
        loop {
            let Some((i, j, violation)) = self.select_pair(&beta, &grad) else {
                return (beta, grad, iter, 0.0, true);
            };
            if violation <= params.tol {
                return (beta, grad, iter, violation.max(0.0), true);
            }
            if iter >= params.max_iter {
                return (beta, grad, iter, violation, false);
            }
            iter += 1;

            let (si, sj) = (self.sign[i], self.sign[j]);
            let kij = kernel[[self.src(i), self.src(j)]];
            let qij = si * sj * kij;
            let (old_i, old_j) = (beta[i], beta[j]);
            let (mut ai, mut aj) = (old_i, old_j);

            if si != sj {
                let mut quad = self.diag[i] + self.diag[j] + 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = ai - aj;
                ai += delta;
                aj += delta;
                if diff > 0.0 {
                    if aj < 0.0 {
                        aj = 0.0;
                        ai = diff;
                    }
                } else if ai < 0.0 {
                    ai = 0.0;
                    aj = -diff;
                }
                if diff > 0.0 {
                    if ai > c {
                        ai = c;
                        aj = c - diff;
                    }
                } else if aj > c {
                    aj = c;
                    ai = c + diff;
                }
            } else {
                let mut quad = self.diag[i] + self.diag[j] - 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (grad[i] - grad[j]) / quad;
                let sum = ai + aj;
                ai -= delta;
                aj += delta;
                if sum > c {
                    if ai > c {
                        ai = c;
                        aj = sum - c;
                    }
                } else if aj < 0.0 {
                    aj = 0.0;
                    ai = sum;
                }
                if sum > c {
                    if aj > c {
                        aj = c;
                        ai = sum - c;
                    }
                } else if ai < 0.0 {
                    ai = 0.0;
                    aj = sum;
                }
            }
            beta[i] = ai;
            beta[j] = aj;

            let di = ai - old_i;
            let dj = aj - old_j;
            debug_assert!(
                {
                    let change = grad[i] * di
                        + grad[j] * dj
                        + 0.5 * (self.diag[i] * di * di + 2.0 * qij * di * dj + self.diag[j] * dj * dj);
                    change <= 1e-12 * (1.0 + grad[i].abs() + grad[j].abs()) * (1.0 + ai.abs() + aj.abs())
                },
                "SMO step increased the objective"
            );
            let row_i = kernel.row(self.src(i));
            let row_j = kernel.row(self.src(j));
            let (wi, wj) = (si * di, sj * dj);
            for u in 0..self.len {
                let s = self.src(u);
                grad[u] += self.sign[u] * (row_i[s] * wi + row_j[s] * wj);
            }
        }
    }

    fn rho(&self, beta: &[f64], grad: &[f64]) -> f64 {
        let c = self.prob.c;
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        let mut free_sum = 0.0;
        let mut free = 0usize;
        for u in 0..self.len {
            let yg = self.sign[u] * grad[u];
            if beta[u] >= c {
                if self.sign[u] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if beta[u] <= 0.0 {
                if self.sign[u] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                free_sum += yg;
            }
        }
        if free > 0 {
            free_sum / free as f64
        } else {
            match (ub.is_finite(), lb.is_finite()) {
                (true, true) => 0.5 * (ub + lb),
                (true, false) => ub,
                (false, true) => lb,
                (false, false) => 0.0,
            }
        }
    }
}
