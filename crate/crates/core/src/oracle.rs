//! Self-checks of the closed-form kernel against quadrature and of the
//! analytic kernel step against random feasible matrices and a dense
//! eigendecomposition.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{DomainBox, TkBasis};
use crate::dual::{dual_objective, DualProblem, Task};
use crate::error::Result;
use crate::kernel::{eval_kernel, kernel_quadrature, random_psd, KernelParams};
use crate::kernel_step::{assemble_m, solve_opt_p, ContractionMatrix};
use crate::linalg;

/// Default quadrature grid for an `n`-dimensional case.
pub fn default_grid(n: usize) -> usize {
    if n == 1 {
        1000
    } else {
        400
    }
}

/// Accepted `|closed - quadrature| / (1 + |quadrature|)` for dimension `n`.
pub fn kernel_tolerance(n: usize) -> f64 {
    if n == 1 {
        1e-3
    } else {
        1e-2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCase {
    pub n: usize,
    pub d: usize,
    pub grid: usize,
    pub p: Array2<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub closed: f64,
    pub quadrature: f64,
}

impl KernelCase {
    pub fn rel_err(&self) -> f64 {
        (self.closed - self.quadrature).abs() / (1.0 + self.quadrature.abs())
    }

    pub fn passes(&self) -> bool {
        self.rel_err() <= kernel_tolerance(self.n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelOracleReport {
    pub cases: Vec<KernelCase>,
}

impl KernelOracleReport {
    /// Case with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&KernelCase> {
        self.cases
            .iter()
            .max_by(|a, b| (a.rel_err() / kernel_tolerance(a.n)).total_cmp(&(b.rel_err() / kernel_tolerance(b.n))))
    }

    pub fn max_rel_err(&self, n: usize) -> f64 {
        self.cases.iter().filter(|c| c.n == n).map(KernelCase::rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.cases.iter().all(KernelCase::passes)
    }
}

/// Compares the closed form with quadrature on `cases` random instances with
/// `d <= max_d`, `n <= max_n`, a random PSD `P` of trace `qp` and random
/// points inside `[a, b]`. `grid` overrides [`default_grid`].
pub fn kernel_oracle_suite(
    seed: u64,
    cases: usize,
    max_d: usize,
    max_n: usize,
    grid: Option<usize>,
) -> Result<KernelOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        // Cycle through every (n, d) pair so each is covered.
        let n = 1 + case % max_n.max(1);
        let d = (case / max_n.max(1)) % (max_d + 1);
        let delta = rng.gen_range(0.05..0.5);
        let domain = DomainBox::unit_with_margin(n, delta)?;
        let basis = TkBasis::new(n, d);
        let p = random_psd(&mut rng, basis.qp());
        let x: Vec<f64> = (0..n).map(|k| rng.gen_range(domain.a()[k]..domain.b()[k])).collect();
        let y: Vec<f64> = (0..n).map(|k| rng.gen_range(domain.a()[k]..domain.b()[k])).collect();
        let params = KernelParams::new(basis, domain, p.clone())?;
        let grid = grid.unwrap_or_else(|| default_grid(n));
        let closed = eval_kernel(&params, &x, &y);
        let quadrature = kernel_quadrature(&params, &x, &y, grid)?;
        out.push(KernelCase { n, d, grid, p, x, y, closed, quadrature });
    }
    Ok(KernelOracleReport { cases: out })
}

/// Slack allowed when the analytic value is compared with sampled values.
pub const OPT_P_SAMPLE_SLACK: f64 = 1e-10;
/// Relative agreement required with the dense reference.
pub const OPT_P_REFERENCE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct OptPCase {
    pub n: usize,
    pub d: usize,
    pub qp: usize,
    pub m: Array2<f64>,
    /// `-1/2 <M, P*>` from the analytic step.
    pub analytic: f64,
    /// Smallest `-1/2 <M, P>` over the sampled feasible `P`.
    pub sampled_min: f64,
    /// `-1/2 qp lambda_max(M)` from a Jacobi eigendecomposition.
    pub reference: f64,
}

impl OptPCase {
    pub fn sample_violation(&self) -> f64 {
        (self.analytic - self.sampled_min).max(0.0)
    }

    pub fn reference_rel_diff(&self) -> f64 {
        (self.analytic - self.reference).abs() / self.reference.abs().max(f64::MIN_POSITIVE)
    }

    pub fn passes(&self) -> bool {
        self.analytic <= self.sampled_min + OPT_P_SAMPLE_SLACK && self.reference_rel_diff() <= OPT_P_REFERENCE_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptPOracleReport {
    pub cases: Vec<OptPCase>,
}

impl OptPOracleReport {
    pub fn passes(&self) -> bool {
        self.cases.iter().all(OptPCase::passes)
    }

    pub fn max_reference_rel_diff(&self) -> f64 {
        self.cases.iter().map(OptPCase::reference_rel_diff).fold(0.0, f64::max)
    }

    pub fn max_sample_violation(&self) -> f64 {
        self.cases.iter().map(OptPCase::sample_violation).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&OptPCase> {
        self.cases.iter().find(|c| !c.passes()).or_else(|| {
            self.cases.iter().max_by(|a, b| a.reference_rel_diff().total_cmp(&b.reference_rel_diff()))
        })
    }
}

/// `(n, d)` pairs whose `qp` is at most 12.
const SMALL_SHAPES: [(usize, usize); 5] = [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)];

/// Builds contraction matrices from random points and coefficients, then
/// checks the analytic step against `samples` random feasible matrices
/// (rank-one `qp v v^T` and mixtures `A A^T` scaled to trace `qp`).
pub fn opt_p_oracle_suite(seed: u64, cases: usize, samples: usize) -> Result<OptPOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let (n, d) = SMALL_SHAPES[case % SMALL_SHAPES.len()];
        let basis = TkBasis::new(n, d);
        let qp = basis.qp();
        let domain = DomainBox::unit_with_margin(n, rng.gen_range(0.05..0.5))?;
        let m_points = rng.gen_range(2..12);
        let points = Array2::from_shape_fn((m_points, n), |_| rng.gen_range(0.0..1.0));
        let alpha: Vec<f64> = (0..m_points).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = assemble_m(&basis, &domain, points.view(), &alpha);
        let step = solve_opt_p(&m, qp)?;
        let sampled_min = sampled_minimum(&mut rng, &m, qp, samples);
        let reference = -0.5 * qp as f64 * linalg::jacobi_eigen(m.view()).max();
        out.push(OptPCase { n, d, qp, m: m.0, analytic: step.inner_value, sampled_min, reference });
    }
    Ok(OptPOracleReport { cases: out })
}

fn sampled_minimum<R: Rng>(rng: &mut R, m: &ContractionMatrix, qp: usize, samples: usize) -> f64 {
    let mut best = f64::INFINITY;
    for s in 0..samples {
        let p = if s % 2 == 0 {
            let v: Vec<f64> = (0..qp).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm2: f64 = v.iter().map(|x| x * x).sum();
            Array2::from_shape_fn((qp, qp), |(i, j)| qp as f64 * v[i] * v[j] / norm2)
        } else {
            random_psd(rng, qp)
        };
        best = best.min(-0.5 * linalg::frobenius_dot(m.view(), p.view()));
    }
    best
}

/// Reference maximizer of the dual QP by accelerated projected gradient on
/// the box-and-hyperplane feasible set, independent of the SMO working-set
/// logic. Returns the coefficients (signed for regression) and the best dual
/// objective reached.
pub fn dual_reference(prob: &DualProblem, iterations: usize) -> (Vec<f64>, f64) {
    let m = prob.m();
    let (q, p, s) = match prob.task {
        Task::Classification => {
            let q = Array2::from_shape_fn((m, m), |(i, j)| prob.y[i] * prob.y[j] * prob.kernel[[i, j]]);
            (q, vec![-1.0; m], prob.y.to_vec())
        }
        Task::Regression => {
            let q = Array2::from_shape_fn((2 * m, 2 * m), |(i, j)| {
                let sign = if (i < m) == (j < m) { 1.0 } else { -1.0 };
                sign * prob.kernel[[i % m, j % m]]
            });
            let p = (0..2 * m)
                .map(|i| if i < m { prob.eps_tube - prob.y[i] } else { prob.eps_tube + prob.y[i - m] })
                .collect();
            let s = (0..2 * m).map(|i| if i < m { 1.0 } else { -1.0 }).collect();
            (q, p, s)
        }
    };
    let fold = |beta: &[f64]| -> Vec<f64> {
        match prob.task {
            Task::Classification => beta.to_vec(),
            Task::Regression => (0..m).map(|i| beta[i] - beta[i + m]).collect(),
        }
    };
    let dim = p.len();
    let lipschitz = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let project = |v: &[f64]| project_box_hyperplane(v, &s, prob.c);

    let mut x = vec![0.0; dim];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut best = (fold(&x), dual_objective(prob, &fold(&x)));
    for _ in 0..iterations {
        let grad = q.dot(&ndarray::ArrayView1::from(&z[..]));
        let step: Vec<f64> = (0..dim).map(|i| z[i] - (grad[i] + p[i]) / lipschitz).collect();
        let next = project(&step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        z = (0..dim).map(|i| next[i] + momentum * (next[i] - x[i])).collect();
        x = next;
        t = t_next;
        let alpha = fold(&x);
        let value = dual_objective(prob, &alpha);
        if value > best.1 {
            best = (alpha, value);
        }
    }
    best
}

/// Euclidean projection onto `{0 <= v <= c, s^T v = 0}` for `s` in `{+-1}^n`.
/// The hyperplane residual is piecewise linear and non-increasing in the
/// multiplier, so the root is found exactly between two sorted breakpoints.
fn project_box_hyperplane(v: &[f64], s: &[f64], c: f64) -> Vec<f64> {
    let at = |lambda: f64| -> Vec<f64> { v.iter().zip(s).map(|(vi, si)| (vi - lambda * si).clamp(0.0, c)).collect() };
    let residual = |lambda: f64| -> f64 {
        v.iter().zip(s).map(|(vi, si)| si * (vi - lambda * si).clamp(0.0, c)).sum()
    };
    let mut breaks: Vec<f64> = v.iter().zip(s).flat_map(|(vi, si)| [vi * si, (vi - c) * si]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let values: Vec<f64> = breaks.iter().map(|&b| residual(b)).collect();
    if values[0] <= 0.0 {
        return at(breaks[0]);
    }
    for k in 1..breaks.len() {
        if values[k] <= 0.0 {
            let (l0, l1, g0, g1) = (breaks[k - 1], breaks[k], values[k - 1], values[k]);
            let lambda = if g0 == g1 { l1 } else { l0 + (l1 - l0) * g0 / (g0 - g1) };
            return at(lambda);
        }
    }
    at(*breaks.last().expect("nonempty"))
}
