//! Analytic minimization over the kernel parameter matrix.
//!
//! For fixed coefficients `alpha~` the common objective is
//! `-1/2 alpha~^T K(P) alpha~ = -1/2 trace(M^T P)` with the contraction matrix
//! `M = sum_kl alpha~_k alpha~_l G(x_k, x_l)`. `M` is positive semidefinite
//! (it is the Gram integral of `w(z) = sum_k alpha~_k N(z, x_k)`), so over
//! `{P >= 0, trace(P) = qp}` the minimum is `-1/2 qp lambda_max(M)`, attained
//! at `P* = qp u u^T` for a top unit eigenvector `u`.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::basis::{DomainBox, TkBasis};
use crate::dual::{DualProblem, Task};
use crate::error::{Result, TklError};
use crate::kernel::{contract, row_vec, BlockEvaluator};
use crate::linalg;

/// Default memory budget for memoized G blocks.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

/// Rows per parallel work unit when streaming over pairs.
const CHUNK_ROWS: usize = 16;

/// Symmetric `qp x qp` contraction matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionMatrix(pub Array2<f64>);

impl ContractionMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn qp(&self) -> usize {
        self.0.nrows()
    }
}

/// Access to `G(x_k, x_l)` for a fixed point set, memoized when the upper
/// triangle fits in the memory budget.
pub struct PairBlocks<'a> {
    basis: &'a TkBasis,
    domain: &'a DomainBox,
    points: Vec<Vec<f64>>,
    cache: Option<Vec<f64>>,
}

impl<'a> PairBlocks<'a> {
    pub fn new(basis: &'a TkBasis, domain: &'a DomainBox, points: ArrayView2<f64>, cache_bytes: usize) -> Self {
        let points: Vec<Vec<f64>> = points.rows().into_iter().map(row_vec).collect();
        let m = points.len();
        let block = basis.qp() * basis.qp();
        let pairs = m * (m + 1) / 2;
        let needed = pairs.saturating_mul(block).saturating_mul(std::mem::size_of::<f64>());
        let mut cache = None;
        if needed <= cache_bytes {
            let rows: Vec<Vec<f64>> = (0..m)
                .into_par_iter()
                .map_init(
                    || BlockEvaluator::new(basis, domain),
                    |ev, k| {
                        let mut row = vec![0.0; (m - k) * block];
                        for l in k..m {
                            let off = (l - k) * block;
                            ev.fill(&points[k], &points[l], &mut row[off..off + block]);
                        }
                        row
                    },
                )
                .collect();
            cache = Some(rows.concat());
        }
        PairBlocks { basis, domain, points, cache }
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }

    fn offset(&self, k: usize, l: usize) -> usize {
        debug_assert!(k <= l);
        let m = self.m();
        let block = self.basis.qp() * self.basis.qp();
        (k * m - k * k.saturating_sub(1) / 2 + l - k) * block
    }

    /// Calls `f(k, l, G(x_k, x_l))` for every `l >= k` of the rows in
    /// `rows`, from cache or freshly evaluated.
    fn for_row_pairs<F>(&self, ev: &mut BlockEvaluator, buf: &mut [f64], k: usize, cols: &[usize], mut f: F)
    where
        F: FnMut(usize, &[f64]),
    {
        let block = buf.len();
        match &self.cache {
            Some(cache) => {
                for &l in cols {
                    let off = self.offset(k, l);
                    f(l, &cache[off..off + block]);
                }
            }
            None => {
                for &l in cols {
                    ev.fill(&self.points[k], &self.points[l], buf);
                    f(l, buf);
                }
            }
        }
    }

    /// `K(P)_kl = sum_IJ P_IJ G_IJ(x_k, x_l)`.
    pub fn gram(&self, p: ArrayView2<f64>) -> Array2<f64> {
        let p = p.as_standard_layout().into_owned();
        let p = p.as_slice().expect("standard layout");
        let m = self.m();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map_init(
                || {
                    let ev = BlockEvaluator::new(self.basis, self.domain);
                    let buf = vec![0.0; ev.block_len()];
                    (ev, buf)
                },
                |(ev, buf), k| {
                    let cols: Vec<usize> = (k..m).collect();
                    let mut row = Vec::with_capacity(m - k);
                    self.for_row_pairs(ev, buf, k, &cols, |_, g| row.push(contract(p, g)));
                    row
                },
            )
            .collect();
        let mut gram = Array2::zeros((m, m));
        for (k, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                gram[[k, k + off]] = v;
                gram[[k + off, k]] = v;
            }
        }
        gram
    }

    /// `M = sum_kl a_k a_l G(x_k, x_l)`, explicitly symmetrized. Zero
    /// coefficients are skipped.
    pub fn contraction(&self, alpha_tilde: &[f64]) -> ContractionMatrix {
        assert_eq!(alpha_tilde.len(), self.m(), "one coefficient per point");
        let qp = self.basis.qp();
        let block = qp * qp;
        let support: Vec<usize> = (0..self.m()).filter(|&k| alpha_tilde[k] != 0.0).collect();

        // Fixed-size chunks summed in order keep the result independent of
        // thread scheduling.
        let partials: Vec<Vec<f64>> = support
            .par_chunks(CHUNK_ROWS)
            .enumerate()
            .map(|(chunk_idx, chunk)| {
                let mut ev = BlockEvaluator::new(self.basis, self.domain);
                let mut buf = vec![0.0; block];
                let mut acc = vec![0.0; block];
                for (pos, &k) in chunk.iter().enumerate() {
                    let start = chunk_idx * CHUNK_ROWS + pos;
                    let cols = &support[start..];
                    let ak = alpha_tilde[k];
                    self.for_row_pairs(&mut ev, &mut buf, k, cols, |l, g| {
                        let w = if l == k { 0.5 * ak * ak } else { ak * alpha_tilde[l] };
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += w * v;
                        }
                    });
                }
                acc
            })
            .collect();

        let mut half = vec![0.0; block];
        for part in &partials {
            for (h, v) in half.iter_mut().zip(part) {
                *h += v;
            }
        }
        let half = Array2::from_shape_vec((qp, qp), half).expect("square");
        let m = &half + &half.t();
        ContractionMatrix(m)
    }
}

/// Streams `M = sum_kl a_k a_l G(x_k, x_l)` over all pairs without caching.
pub fn assemble_m(
    basis: &TkBasis,
    domain: &DomainBox,
    points: ArrayView2<f64>,
    alpha_tilde: &[f64],
) -> ContractionMatrix {
    PairBlocks::new(basis, domain, points, 0).contraction(alpha_tilde)
}

/// Output of the analytic kernel step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptPStep {
    /// `qp u u^T`, trace normalized to `qp`.
    pub p_star: Array2<f64>,
    /// `min_P -1/2 trace(M^T P)` over the feasible set.
    pub inner_value: f64,
    pub lambda_max: f64,
    /// Unit eigenvector with first nonzero coordinate positive.
    pub eigenvector: Array1<f64>,
}

const POWER_TOL: f64 = 1e-14;
const POWER_MAX_ITER: usize = 100_000;
const DENSE_LIMIT: usize = 64;
const DEGENERACY_GAP: f64 = 1e-10;

/// Solves `min { -1/2 trace(M^T P) : P >= 0, trace(P) = qp }` analytically.
pub fn solve_opt_p(m: &ContractionMatrix, qp: usize) -> Result<OptPStep> {
    let mat = m.view();
    if mat.dim() != (qp, qp) {
        return Err(TklError::DimensionMismatch { expected: qp, got: mat.nrows() });
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(TklError::EigenFailure("contraction matrix has non-finite entries".into()));
    }
    let scale = mat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    let mut eigenvector = if scale == 0.0 {
        canonical_top_vector(mat, scale)?
    } else {
        let start = Array1::from_iter((0..qp).map(|i| 1.0 + (i as f64 + 1.0) / qp as f64));
        let top = linalg::power_iteration(mat, &start, POWER_TOL, POWER_MAX_ITER);
        if !top.converged || is_degenerate(mat, &top, &start, scale) {
            canonical_top_vector(mat, scale)?
        } else {
            top.vector
        }
    };
    orient(&mut eigenvector);

    let mut p_star = Array2::from_shape_fn((qp, qp), |(i, j)| qp as f64 * eigenvector[i] * eigenvector[j]);
    let tr = linalg::trace(p_star.view());
    p_star *= qp as f64 / tr;
    let lambda_max = eigenvector.dot(&mat.dot(&eigenvector));
    let inner_value = -0.5 * linalg::frobenius_dot(mat, p_star.view());
    Ok(OptPStep { p_star, inner_value, lambda_max, eigenvector })
}

/// Runs a power iteration on the deflated matrix to estimate the second
/// eigenvalue.
fn is_degenerate(mat: ArrayView2<f64>, top: &linalg::PowerResult, start: &Array1<f64>, scale: f64) -> bool {
    let qp = mat.nrows();
    if qp == 1 {
        return false;
    }
    let v = &top.vector;
    let deflated = Array2::from_shape_fn((qp, qp), |(i, j)| mat[[i, j]] - top.value * v[i] * v[j]);
    let mut s = start.clone();
    let proj = s.dot(v);
    s.scaled_add(-proj, v);
    if s.dot(&s) < 1e-20 {
        s = Array1::from_iter((0..qp).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        let proj = s.dot(v);
        s.scaled_add(-proj, v);
    }
    let second = linalg::power_iteration(deflated.view(), &s, POWER_TOL, POWER_MAX_ITER);
    let threshold = DEGENERACY_GAP * top.value.abs().max(scale * f64::EPSILON);
    top.value - second.value < threshold
}

/// Lowest-index unit vector of the top invariant subspace, from a dense
/// decomposition.
fn canonical_top_vector(mat: ArrayView2<f64>, scale: f64) -> Result<Array1<f64>> {
    let qp = mat.nrows();
    if qp > DENSE_LIMIT {
        return Err(TklError::EigenFailure(format!(
            "power iteration did not converge and qp = {qp} exceeds the dense fallback limit"
        )));
    }
    let eig = linalg::jacobi_eigen(mat);
    let top = eig.max();
    let threshold = DEGENERACY_GAP * top.abs().max(scale * f64::EPSILON);
    let basis: Vec<usize> = (0..qp).filter(|&k| top - eig.values[k] <= threshold).collect();
    for e in 0..qp {
        let mut proj = Array1::<f64>::zeros(qp);
        for &k in &basis {
            let col = eig.vectors.column(k);
            proj.scaled_add(col[e], &col);
        }
        let norm = proj.dot(&proj).sqrt();
        if norm > 1e-8 {
            return Ok(proj / norm);
        }
    }
    Err(TklError::EigenFailure("empty top invariant subspace".into()))
}

fn orient(v: &mut Array1<f64>) {
    let peak = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * peak) {
        if *first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
}

/// Task-specific part of the objective: `sum alpha` or
/// `-eps sum|alpha| + y^T alpha`.
pub fn kappa(prob: &DualProblem, alpha: &[f64]) -> f64 {
    match prob.task {
        Task::Classification => alpha.iter().sum(),
        Task::Regression => {
            let l1: f64 = alpha.iter().map(|a| a.abs()).sum();
            let lin: f64 = alpha.iter().zip(prob.y).map(|(a, y)| a * y).sum();
            lin - prob.eps_tube * l1
        }
    }
}

/// Lower bound `min_P O(alpha, P) + kappa(alpha)` for the current
/// coefficients, given their contraction matrix.
pub fn opt_p_value(prob: &DualProblem, alpha: &[f64], m: &ContractionMatrix) -> Result<f64> {
    let step = solve_opt_p(m, m.qp())?;
    Ok(step.inner_value + kappa(prob, alpha))
}
