//! Small dense symmetric linear algebra on `ndarray` matrices.
//!
//! The matrices handled here are kernel parameter matrices and contraction
//! matrices, whose dimension is a few tens, so plain cyclic Jacobi is fast
//! enough to serve as the dense reference decomposition.

use ndarray::{Array1, Array2, ArrayView2};

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(a[[i, j]].abs());
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

/// Replaces `a` with `(a + a^T) / 2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

pub fn trace(a: ArrayView2<f64>) -> f64 {
    a.diag().sum()
}

/// Frobenius inner product `trace(a^T b)`.
pub fn frobenius_dot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Ascending eigenvalues.
    pub values: Array1<f64>,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: Array2<f64>,
}

impl SymmetricEigen {
    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }
}

/// Cyclic Jacobi eigen-decomposition. Only the upper triangle is read after
/// symmetrization of a working copy.
pub fn jacobi_eigen(a: ArrayView2<f64>) -> SymmetricEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi_eigen needs a square matrix");
    let mut m = a.to_owned();
    symmetrize(&mut m);
    let mut v = Array2::<f64>::eye(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += m[[i, i]] * m[[i, i]];
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off <= 1e-32 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(src));
    }
    SymmetricEigen { values, vectors }
}

/// Outcome of a power iteration.
#[derive(Clone, Debug)]
pub struct PowerResult {
    pub value: f64,
    pub vector: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Shifted power iteration for the largest eigenvalue of a symmetric matrix.
///
/// The shift makes the matrix positive semidefinite (Gershgorin bound), so the
/// dominant eigenvalue in magnitude is the algebraically largest one.
/// Convergence is declared when the residual `|A v - lambda v|` is at most
/// `rel_tol` times the largest entry magnitude of `A`.
pub fn power_iteration(
    a: ArrayView2<f64>,
    start: &Array1<f64>,
    rel_tol: f64,
    max_iter: usize,
) -> PowerResult {
    let n = a.nrows();
    let mut shift = 0.0f64;
    for i in 0..n {
        let radius: f64 = (0..n).filter(|&j| j != i).map(|j| a[[i, j]].abs()).sum();
        shift = shift.max(radius - a[[i, i]]);
    }

    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut v = start.clone();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut value = v.dot(&a.dot(&v));
    for it in 1..=max_iter {
        let mut w = a.dot(&v);
        w.scaled_add(shift, &v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            // a + shift*I annihilates v; v is an eigenvector of a for -shift
            return PowerResult { value: -shift, vector: v, iterations: it, converged: true };
        }
        w /= wn;
        let aw = a.dot(&w);
        value = w.dot(&aw);
        let residual = aw.iter().zip(&w).map(|(p, q)| (p - value * q).powi(2)).sum::<f64>().sqrt();
        v = w;
        if residual <= rel_tol * scale {
            return PowerResult { value, vector: v, iterations: it, converged: true };
        }
    }
    PowerResult { value, vector: v, iterations: max_iter, converged: false }
}
