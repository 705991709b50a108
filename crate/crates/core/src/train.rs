//! The alternating two-step kernel learning loop and the trained predictor.
//!
//! Each outer iteration solves the dual QP for the current `P`, computes the
//! analytic minimizer `P^` of the common objective for the resulting
//! coefficients, and moves to `(P + t P^) / (1 + t)` with `t` chosen by line
//! search on the QP value. The update is a convex combination of matrices
//! with trace `qp`, so every iterate stays PSD with trace `qp`. Termination is
//! on the relative duality gap `OPT_A(P) - OPT_P(alpha)`.

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};

use crate::basis::{DomainBox, TkBasis};
use crate::data::{apply_scaler, make_domain, raw_label, Dataset, Scaler};
use crate::dual::{solve_dual, DualProblem, DualSolution, SmoParams, Task};
use crate::error::{Result, TklError};
use crate::kernel::{contract, row_vec, BlockEvaluator, KernelParams};
use crate::kernel_step::{kappa, solve_opt_p, PairBlocks, DEFAULT_CACHE_BYTES};
use crate::linalg;

/// Training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    /// Polynomial degree of the monomial basis.
    pub d: usize,
    pub c: f64,
    /// Regression tube half-width.
    pub eps_tube: f64,
    /// Domain margin: the kernel integrates over `[-delta, 1 + delta]^n`.
    pub delta: f64,
    /// Relative duality-gap tolerance.
    pub gap_tol: f64,
    pub max_outer_iters: usize,
    pub smo_tol: f64,
    pub smo_max_iter: usize,
    /// Seed values for the step-size search; must contain 0.
    pub line_search_grid: Vec<f64>,
    /// Golden-section refinements after the grid scan.
    pub line_search_refine: usize,
    pub seed: u64,
    /// Memory budget for memoized G blocks.
    pub cache_bytes: usize,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            d: 1,
            c: 1.0,
            eps_tube: 0.1,
            delta: 0.1,
            gap_tol: 1e-2,
            max_outer_iters: 100,
            smo_tol: 1e-3,
            smo_max_iter: 10_000_000,
            line_search_grid: vec![0.0, 0.1, 0.5, 1.0, 2.0, 10.0],
            line_search_refine: 8,
            seed: 0,
            cache_bytes: DEFAULT_CACHE_BYTES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gap_tol > 0.0) {
            problems.push(format!("gap_tol must be > 0 (got {})", self.gap_tol));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            problems.push(format!("C must be > 0 (got {})", self.c));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            problems.push(format!("delta must be > 0 (got {})", self.delta));
        }
        if !(self.eps_tube >= 0.0) || !self.eps_tube.is_finite() {
            problems.push(format!("eps must be >= 0 (got {})", self.eps_tube));
        }
        if !(self.smo_tol > 0.0) {
            problems.push(format!("smo_tol must be > 0 (got {})", self.smo_tol));
        }
        if !self.line_search_grid.contains(&0.0) {
            problems.push("line search grid must contain 0".into());
        }
        if self.line_search_grid.iter().filter(|t| **t > 0.0 && t.is_finite()).count() < 3 {
            problems.push("line search grid needs at least 3 positive values".into());
        }
        if self.line_search_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            problems.push("line search grid values must be finite and >= 0".into());
        }
        if self.d > 6 {
            problems.push(format!("degree {} is above the supported maximum of 6", self.d));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TklError::Config(problems.join("; ")))
        }
    }

    fn smo(&self, tol: f64) -> SmoParams {
        SmoParams { tol, max_iter: self.smo_max_iter }
    }
}

/// One outer iteration of the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// QP value at the current `P`.
    pub opt_a: f64,
    /// Analytic lower bound for the coefficients of that QP.
    pub opt_p: f64,
    pub gap: f64,
    /// Step size taken after this record (`None` on the terminal record).
    pub step: Option<f64>,
    pub trace_p: f64,
    pub min_eig_p: f64,
}

impl TraceRecord {
    pub fn relative_gap(&self) -> f64 {
        self.gap / (1.0 + self.opt_a.abs())
    }
}

/// Wall-clock split of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    /// Dual QP solves, including line-search evaluations.
    pub qp: Duration,
    /// G-block evaluation, Gram matrices and contraction matrices.
    pub assembly: Duration,
    /// Extremal eigenvector computations.
    pub eigen: Duration,
    pub total: Duration,
}

/// Gap `OPT_A - OPT_P`, nonnegative up to solver accuracy.
pub fn duality_gap(opt_a: f64, opt_p: f64) -> f64 {
    opt_a - opt_p
}

/// Trained tessellated kernel predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct TkModel {
    pub params: KernelParams,
    /// Coefficients of the support points (`alpha y` or `alpha`).
    pub alpha_tilde: Vec<f64>,
    /// Scaled support points, one per row.
    pub support_x: Array2<f64>,
    pub bias: f64,
    pub scaler: Scaler,
    pub label_values: Option<[f64; 2]>,
    pub config: TrainConfig,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    /// Not persisted.
    pub timings: PhaseTimings,
}

/// Raw decision values and a count of clamped coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub values: Vec<f64>,
    pub clamped: usize,
}

impl TkModel {
    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn n(&self) -> usize {
        self.params.basis.n()
    }

    pub fn final_record(&self) -> &TraceRecord {
        self.trace.last().expect("training records at least one iterate")
    }

    /// `f(z) = sum_i alpha~_i k(s_i, z) + bias` for already scaled queries;
    /// coordinates outside the domain are clamped.
    pub fn decision_scaled(&self, queries: ArrayView2<f64>) -> Result<Decision> {
        if queries.ncols() != self.n() {
            return Err(TklError::DimensionMismatch { expected: self.n(), got: queries.ncols() });
        }
        let mut ev = BlockEvaluator::new(&self.params.basis, &self.params.domain);
        let mut buf = vec![0.0; ev.block_len()];
        let p = self.params.p_slice();
        let support: Vec<Vec<f64>> = self.support_x.rows().into_iter().map(row_vec).collect();
        let mut clamped = 0;
        let mut values = Vec::with_capacity(queries.nrows());
        for q in queries.rows() {
            let mut z = row_vec(q);
            clamped += self.params.domain.clamp(&mut z);
            let mut f = 0.0;
            for (s, &a) in support.iter().zip(&self.alpha_tilde) {
                ev.fill(s, &z, &mut buf);
                f += a * contract(p, &buf);
            }
            values.push(f + self.bias);
        }
        Ok(Decision { values, clamped })
    }

    /// Decision values for unscaled queries.
    pub fn decision_function(&self, queries: ArrayView2<f64>) -> Result<Decision> {
        let (scaled, scaler_clamped) = apply_scaler(&self.scaler, queries)?;
        let mut out = self.decision_scaled(scaled.view())?;
        out.clamped += scaler_clamped;
        Ok(out)
    }

    /// `+-1` labels (sign, with 0 mapped to +1) or regression values.
    pub fn predict(&self, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        let dec = self.decision_function(queries)?;
        Ok(match self.task() {
            Task::Classification => dec.values.iter().map(|&f| sign(f)).collect(),
            Task::Regression => dec.values,
        })
    }

    /// Maps a `+-1` prediction back to the raw label value seen in training.
    pub fn raw_label(&self, label: f64) -> f64 {
        raw_label(self.label_values, label)
    }
}

pub fn sign(f: f64) -> f64 {
    if f >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `(K + t K^) / (1 + t)`.
fn combine(k: &Array2<f64>, k_hat: &Array2<f64>, t: f64) -> Array2<f64> {
    let scale = 1.0 / (1.0 + t);
    let mut out = k.clone();
    out.zip_mut_with(k_hat, |a, &b| *a = (*a + t * b) * scale);
    out
}

struct Solver<'a> {
    y: &'a [f64],
    config: &'a TrainConfig,
    qp_time: Duration,
}

impl<'a> Solver<'a> {
    fn problem<'k>(&self, k: &'k Array2<f64>) -> DualProblem<'k>
    where
        'a: 'k,
    {
        DualProblem {
            kernel: k.view(),
            y: self.y,
            c: self.config.c,
            eps_tube: self.config.eps_tube,
            task: self.config.task,
        }
    }

    /// Solves the QP; on iteration exhaustion the best iterate is used.
    fn solve(&mut self, k: &Array2<f64>, tol: f64, warm: Option<&[f64]>) -> Result<DualSolution> {
        let start = Instant::now();
        let prob = self.problem(k);
        let out = match solve_dual(&prob, &self.config.smo(tol), warm) {
            Ok(sol) => Ok(sol),
            Err(TklError::NonConvergence { best }) => Ok(*best),
            Err(e) => Err(e),
        };
        self.qp_time += start.elapsed();
        out
    }

    /// Chooses `t` minimizing the QP value along `(K + t K^) / (1 + t)`.
    /// Candidates are scanned at 10x looser solver tolerance; the winner is
    /// re-solved at full tolerance and kept only if it improves on `t = 0`.
    fn line_search(
        &mut self,
        k: &Array2<f64>,
        k_hat: &Array2<f64>,
        current: &DualSolution,
    ) -> Result<(f64, DualSolution)> {
        let loose = self.config.smo_tol * 10.0;
        let mut grid: Vec<f64> = self.config.line_search_grid.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();

        let mut evaluated: Vec<(f64, f64, DualSolution)> = Vec::new();
        let mut eval = |solver: &mut Self, t: f64| -> Result<f64> {
            let sol = solver.solve(&combine(k, k_hat, t), loose, Some(&current.alpha))?;
            let v = sol.objective;
            evaluated.push((t, v, sol));
            Ok(v)
        };

        let mut values = Vec::with_capacity(grid.len());
        for &t in &grid {
            values.push(if t == 0.0 { current.objective } else { eval(self, t)? });
        }
        let best = (0..grid.len()).min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b))).unwrap();

        let lo = if best == 0 { grid[0] } else { grid[best - 1] };
        let hi = if best + 1 < grid.len() { grid[best + 1] } else { grid[best] };
        let (mut best_t, mut best_v) = (grid[best], values[best]);
        if hi > lo {
            let ratio = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = (lo, hi);
            let mut c = b - ratio * (b - a);
            let mut d = a + ratio * (b - a);
            let mut fc = eval(self, c)?;
            let mut fd = eval(self, d)?;
            for _ in 0..self.config.line_search_refine {
                if fc <= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - ratio * (b - a);
                    fc = eval(self, c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + ratio * (b - a);
                    fd = eval(self, d)?;
                }
            }
            for (t, v) in [(c, fc), (d, fd)] {
                if v < best_v {
                    best_t = t;
                    best_v = v;
                }
            }
        }

        if best_t == 0.0 {
            return Ok((0.0, current.clone()));
        }
        let warm = evaluated.iter().find(|(t, _, _)| *t == best_t).map(|(_, _, s)| s.alpha.clone());
        let refined = self.solve(&combine(k, k_hat, best_t), self.config.smo_tol, warm.as_deref())?;
        if refined.objective < current.objective {
            Ok((best_t, refined))
        } else {
            Ok((0.0, current.clone()))
        }
    }
}

fn min_eigenvalue(p: &Array2<f64>) -> f64 {
    linalg::jacobi_eigen(p.view()).min()
}

/// Runs the alternating kernel learning loop on a scaled dataset.
///
/// `max_outer_iters = 0` returns the model for the initial kernel `P = I`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TkModel> {
    config.validate()?;
    if dataset.task != config.task {
        return Err(TklError::Config(format!(
            "dataset task {} does not match configured task {}",
            dataset.task, config.task
        )));
    }
    if dataset.m() == 0 {
        return Err(TklError::EmptyFile("training set is empty".into()));
    }
    let started = Instant::now();
    let basis = TkBasis::new(dataset.n(), config.d);
    let domain: DomainBox = make_domain(&dataset.scaler, config.delta)?;
    let qp = basis.qp();
    let mut timings = PhaseTimings::default();

    let tic = Instant::now();
    let blocks = PairBlocks::new(&basis, &domain, dataset.x.view(), config.cache_bytes);
    let mut p = Array2::<f64>::eye(qp);
    let mut k = blocks.gram(p.view());
    timings.assembly += tic.elapsed();

    let mut solver = Solver { y: &dataset.y, config, qp_time: Duration::ZERO };
    let mut sol = solver.solve(&k, config.smo_tol, None)?;

    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 0.. {
        let prob = solver.problem(&k);
        let alpha_tilde = prob.alpha_tilde(&sol.alpha);
        let kap = kappa(&prob, &sol.alpha);

        let tic = Instant::now();
        let m = blocks.contraction(&alpha_tilde);
        timings.assembly += tic.elapsed();
        let tic = Instant::now();
        let step = solve_opt_p(&m, qp)?;
        timings.eigen += tic.elapsed();

        let opt_a = sol.objective;
        let opt_p = step.inner_value + kap;
        let gap = duality_gap(opt_a, opt_p);
        trace.push(TraceRecord {
            iteration,
            opt_a,
            opt_p,
            gap,
            step: None,
            trace_p: linalg::trace(p.view()),
            min_eig_p: min_eigenvalue(&p),
        });
        if gap <= config.gap_tol * (1.0 + opt_a.abs()) {
            converged = true;
            break;
        }
        if iteration >= config.max_outer_iters {
            break;
        }

        let tic = Instant::now();
        let k_hat = blocks.gram(step.p_star.view());
        timings.assembly += tic.elapsed();
        let (t, next) = solver.line_search(&k, &k_hat, &sol)?;
        trace.last_mut().expect("pushed").step = Some(t);
        if t == 0.0 {
            // No step improves the QP value at the solver's resolution.
            break;
        }
        let scale = 1.0 / (1.0 + t);
        p.zip_mut_with(&step.p_star, |a, &b| *a = (*a + t * b) * scale);
        linalg::symmetrize(&mut p);
        k = combine(&k, &k_hat, t);
        sol = next;
    }
    timings.qp = solver.qp_time;

    let prob = solver.problem(&k);
    let alpha_tilde = prob.alpha_tilde(&sol.alpha);
    let support: Vec<usize> = (0..dataset.m()).filter(|&i| alpha_tilde[i] != 0.0).collect();
    let support_x = dataset.x.select(ndarray::Axis(0), &support);
    let alpha_tilde: Vec<f64> = support.iter().map(|&i| alpha_tilde[i]).collect();
    timings.total = started.elapsed();

    Ok(TkModel {
        params: KernelParams::from_parts(basis, domain, p),
        alpha_tilde,
        support_x,
        bias: sol.bias,
        scaler: dataset.scaler.clone(),
        label_values: dataset.label_values,
        config: config.clone(),
        trace,
        converged,
        timings,
    })
}

/// Fraction of correct signs (classification) or mean squared error.
pub fn score(task: Task, predicted: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if truth.is_empty() {
        return f64::NAN;
    }
    match task {
        Task::Classification => {
            predicted.iter().zip(truth).filter(|(p, t)| sign(**p) == sign(**t)).count() as f64 / truth.len() as f64
        }
        Task::Regression => {
            predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / truth.len() as f64
        }
    }
}
