//! Closed-form evaluation of tessellated kernels.
//!
//! For a pair of points the kernel is `sum_{IJ} P_IJ G_IJ(x, y)` where
//! `G_IJ(x, y) = integral over [a, b] of N_I(z, x) N_J(z, y) dz`. Because the
//! indicators are products over axes, every block entry factors into a
//! monomial prefactor `x^delta_i y^delta_j` times a product of one-dimensional
//! power integrals over the interval where both indicators are active:
//!
//! | block            | per-axis interval         |
//! |------------------|---------------------------|
//! | forward/forward  | `[max(x, y), b]`          |
//! | forward/backward | `[x, max(x, y)]`          |
//! | backward/forward | `[y, max(x, y)]`          |
//! | backward/backward| `[a, min(x, y)]`          |

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::basis::{ipow, monomial, DomainBox, TkBasis};
use crate::error::{Result, TklError};
use crate::linalg;

/// `prod_j (y_j^zeta_j - x_j^zeta_j) / zeta_j`, the integral of
/// `z^(zeta - 1)` over the box `[x, y]`.
pub fn t_function(x: &[f64], y: &[f64], zeta: &[u32]) -> f64 {
    debug_assert!(zeta.iter().all(|&z| z >= 1));
    x.iter()
        .zip(y)
        .zip(zeta)
        .fold(1.0, |acc, ((&lo, &hi), &z)| acc * axis_integral(lo, hi, z))
}

#[inline]
fn axis_integral(lo: f64, hi: f64, zeta: u32) -> f64 {
    (ipow(hi, zeta) - ipow(lo, zeta)) / zeta as f64
}

/// The four closed-form block values for basis indices `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gth {
    /// Forward/forward entry.
    pub g: f64,
    /// Forward/backward entry, region `x <= z <= y`.
    pub t_xy: f64,
    /// Backward/forward entry, region `y <= z <= x`.
    pub t_yx: f64,
    /// Backward/backward entry.
    pub h: f64,
}

/// Closed-form `g`, `t`, `h` values for one pair of basis indices, computed
/// directly through [`t_function`].
pub fn eval_gth(basis: &TkBasis, i: usize, j: usize, x: &[f64], y: &[f64], domain: &DomainBox) -> Gth {
    let zeta: Vec<u32> = basis.gamma(i).iter().zip(basis.gamma(j)).map(|(a, b)| a + b + 1).collect();
    let pre = monomial(x, basis.delta(i)) * monomial(y, basis.delta(j));
    let upper: Vec<f64> = x.iter().zip(y).map(|(a, b)| a.max(*b)).collect();
    let lower: Vec<f64> = x.iter().zip(y).map(|(a, b)| a.min(*b)).collect();
    Gth {
        g: pre * t_function(&upper, domain.b(), &zeta),
        t_xy: pre * t_function(x, &upper, &zeta),
        t_yx: pre * t_function(y, &upper, &zeta),
        h: pre * t_function(domain.a(), &lower, &zeta),
    }
}

/// Reusable scratch space for filling G blocks without allocation.
pub(crate) struct BlockEvaluator<'a> {
    basis: &'a TkBasis,
    domain: &'a DomainBox,
    /// `[quadrant][axis][exponent]` one-dimensional integrals.
    axis: Vec<f64>,
    /// `[quadrant][gamma_sum]` products over axes.
    prods: Vec<f64>,
    mono_x: Vec<f64>,
    mono_y: Vec<f64>,
}

impl<'a> BlockEvaluator<'a> {
    pub(crate) fn new(basis: &'a TkBasis, domain: &'a DomainBox) -> Self {
        let n = basis.n();
        let e = 2 * basis.d() + 1;
        BlockEvaluator {
            basis,
            domain,
            axis: vec![0.0; 4 * n * e],
            prods: vec![0.0; 4 * basis.gamma_sums().len()],
            mono_x: vec![0.0; basis.qz()],
            mono_y: vec![0.0; basis.qz()],
        }
    }

    pub(crate) fn block_len(&self) -> usize {
        self.basis.qp() * self.basis.qp()
    }

    /// Writes the row-major `qp x qp` block `G(x, y)` into `out`.
    pub(crate) fn fill(&mut self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let basis = self.basis;
        let n = basis.n();
        let ne = 2 * basis.d() + 1;
        let qz = basis.qz();
        let qp = basis.qp();
        debug_assert_eq!(out.len(), qp * qp);
        let (a, b) = (self.domain.a(), self.domain.b());

        for k in 0..n {
            let (xk, yk) = (x[k], y[k]);
            let hi = xk.max(yk);
            let lo = xk.min(yk);
            let bounds = [(hi, b[k]), (xk, hi), (yk, hi), (a[k], lo)];
            for (q, &(l, h)) in bounds.iter().enumerate() {
                let base = (q * n + k) * ne;
                for e in 0..ne {
                    self.axis[base + e] = axis_integral(l, h, e as u32 + 1);
                }
            }
        }
        let sums = basis.gamma_sums();
        let ns = sums.len();
        for q in 0..4 {
            for (s, exps) in sums.iter().enumerate() {
                let mut acc = 1.0;
                for k in 0..n {
                    acc *= self.axis[(q * n + k) * ne + exps[k] as usize];
                }
                self.prods[q * ns + s] = acc;
            }
        }
        basis.monomials(x, &mut self.mono_x);
        basis.monomials(y, &mut self.mono_y);

        for i in 0..qz {
            let mx = self.mono_x[i];
            let row_f = &mut out[i * qp..(i + 1) * qp];
            let (fwd, bwd) = row_f.split_at_mut(qz);
            for j in 0..qz {
                let pre = mx * self.mono_y[j];
                let s = basis.gamma_sum_index(i, j);
                fwd[j] = pre * self.prods[s];
                bwd[j] = pre * self.prods[ns + s];
            }
            let row_b = &mut out[(qz + i) * qp..(qz + i + 1) * qp];
            let (fwd, bwd) = row_b.split_at_mut(qz);
            for j in 0..qz {
                let pre = mx * self.mono_y[j];
                let s = basis.gamma_sum_index(i, j);
                fwd[j] = pre * self.prods[2 * ns + s];
                bwd[j] = pre * self.prods[3 * ns + s];
            }
        }
    }
}

/// `sum_IJ p_IJ g_IJ` over row-major slices, accumulated in index order.
#[inline]
pub(crate) fn contract(p: &[f64], g: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), g.len());
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(g) {
        acc += a * b;
    }
    acc
}

/// The `qp x qp` matrix of basis integrals for one data pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GBlock {
    qp: usize,
    data: Vec<f64>,
}

impl GBlock {
    pub fn qp(&self) -> usize {
        self.qp
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.qp + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.qp, self.qp), self.data.clone()).expect("square block")
    }

    /// `sum_IJ P_IJ G_IJ`.
    pub fn contract(&self, p: ArrayView2<f64>) -> f64 {
        let owned;
        let slice = match p.as_slice() {
            Some(s) => s,
            None => {
                owned = p.to_owned();
                owned.as_slice().expect("standard layout")
            }
        };
        contract(slice, &self.data)
    }
}

/// Builds the G block for the pair `(x_k, x_l)`.
pub fn g_block(basis: &TkBasis, domain: &DomainBox, xk: &[f64], xl: &[f64]) -> GBlock {
    let mut ev = BlockEvaluator::new(basis, domain);
    let mut data = vec![0.0; ev.block_len()];
    ev.fill(xk, xl, &mut data);
    GBlock { qp: basis.qp(), data }
}

/// Everything needed to evaluate one tessellated kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub basis: TkBasis,
    pub domain: DomainBox,
    /// Symmetric PSD `qp x qp` matrix in standard layout.
    p: Array2<f64>,
}

impl KernelParams {
    /// Validates shape, symmetry and positive semidefiniteness of `p`.
    pub fn new(basis: TkBasis, domain: DomainBox, p: Array2<f64>) -> Result<Self> {
        let qp = basis.qp();
        if p.dim() != (qp, qp) {
            return Err(TklError::Config(format!(
                "P must be {qp}x{qp}, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if domain.n() != basis.n() {
            return Err(TklError::DimensionMismatch { expected: basis.n(), got: domain.n() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(TklError::Config("P has non-finite entries".into()));
        }
        if linalg::asymmetry(p.view()) > 1e-12 {
            return Err(TklError::Config("P is not symmetric".into()));
        }
        let eig = linalg::jacobi_eigen(p.view());
        if eig.min() < -1e-8 * eig.max().abs().max(f64::MIN_POSITIVE) {
            return Err(TklError::Config(format!(
                "P is not positive semidefinite (smallest eigenvalue {:.3e})",
                eig.min()
            )));
        }
        Ok(Self::from_parts(basis, domain, p))
    }

    /// Identity parameters, which already satisfy `trace(P) = qp`.
    pub fn identity(basis: TkBasis, domain: DomainBox) -> Self {
        let qp = basis.qp();
        Self::from_parts(basis, domain, Array2::eye(qp))
    }

    pub(crate) fn from_parts(basis: TkBasis, domain: DomainBox, p: Array2<f64>) -> Self {
        let p = p.as_standard_layout().into_owned();
        KernelParams { basis, domain, p }
    }

    pub fn p(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub(crate) fn p_slice(&self) -> &[f64] {
        self.p.as_slice().expect("standard layout")
    }

    pub fn qp(&self) -> usize {
        self.basis.qp()
    }
}

/// Closed-form kernel value `k(x, y)`.
pub fn eval_kernel(params: &KernelParams, x: &[f64], y: &[f64]) -> f64 {
    g_block(&params.basis, &params.domain, x, y).contract(params.p())
}

/// Gram matrix `K_ij = k(x_i, x_j)` for the rows of `points`.
pub fn gram_matrix(params: &KernelParams, points: ArrayView2<f64>) -> Array2<f64> {
    let m = points.nrows();
    let p = params.p_slice();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map_init(
            || {
                let ev = BlockEvaluator::new(&params.basis, &params.domain);
                let buf = vec![0.0; ev.block_len()];
                (ev, buf)
            },
            |(ev, buf), k| {
                let xk = row_vec(points.row(k));
                (k..m)
                    .map(|l| {
                        let xl = row_vec(points.row(l));
                        ev.fill(&xk, &xl, buf);
                        contract(p, buf)
                    })
                    .collect()
            },
        )
        .collect();
    let mut gram = Array2::zeros((m, m));
    for (k, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let l = k + off;
            gram[[k, l]] = v;
            gram[[l, k]] = v;
        }
    }
    gram
}

pub(crate) fn row_vec(row: ArrayView1<f64>) -> Vec<f64> {
    row.iter().copied().collect()
}

/// Midpoint-rule tensor-grid approximation of
/// `integral over [a, b] of N(z, x)^T P N(z, y) dz`, evaluated straight from
/// the indicator feature map. Used as an independent check of the closed form.
///
/// Each axis is split into `grid` equal cells, and cells containing `x_k` or
/// `y_k` are cut at that coordinate, so no midpoint straddles a jump of the
/// indicators and the rule keeps its second-order accuracy.
pub fn kernel_quadrature(params: &KernelParams, x: &[f64], y: &[f64], grid: usize) -> Result<f64> {
    let basis = &params.basis;
    let n = basis.n();
    if n > 3 {
        return Err(TklError::QuadratureTooLarge(n));
    }
    if grid < 2 {
        return Err(TklError::Config(format!("quadrature grid must be >= 2, got {grid}")));
    }
    let (a, b) = (params.domain.a(), params.domain.b());
    let axes: Vec<Vec<(f64, f64)>> = (0..n).map(|k| axis_nodes(a[k], b[k], grid, &[x[k], y[k]])).collect();
    let qz = basis.qz();
    let qp = basis.qp();
    let p = params.p();

    let mono_x: Vec<f64> = (0..qz).map(|i| monomial(x, basis.delta(i))).collect();
    let mono_y: Vec<f64> = (0..qz).map(|i| monomial(y, basis.delta(i))).collect();
    let mut nx = vec![0.0; qp];
    let mut ny = vec![0.0; qp];
    let mut z = vec![0.0; n];
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    let cells: usize = axes.iter().map(Vec::len).product();
    for _ in 0..cells {
        let mut weight = 1.0;
        for k in 0..n {
            let (node, w) = axes[k][idx[k]];
            z[k] = node;
            weight *= w;
        }
        feature_map(basis, &mono_x, x, &z, &mut nx);
        feature_map(basis, &mono_y, y, &z, &mut ny);
        let mut val = 0.0;
        for (i, &ni) in nx.iter().enumerate() {
            if ni == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (j, &nj) in ny.iter().enumerate() {
                row += p[[i, j]] * nj;
            }
            val += ni * row;
        }
        total += weight * val;
        for k in 0..n {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(total)
}

/// Midpoints and widths of `grid` equal cells on `[lo, hi]`, further cut at
/// every interior breakpoint.
fn axis_nodes(lo: f64, hi: f64, grid: usize, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut edges: Vec<f64> = (0..=grid).map(|i| lo + (hi - lo) * i as f64 / grid as f64).collect();
    edges.extend(breaks.iter().copied().filter(|v| *v > lo && *v < hi));
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges.windows(2).filter(|w| w[1] > w[0]).map(|w| (0.5 * (w[0] + w[1]), w[1] - w[0])).collect()
}

/// `N(z, x)`: monomials gated by `z >= x` (first half) and `z <= x`
/// (second half).
fn feature_map(basis: &TkBasis, mono_x: &[f64], x: &[f64], z: &[f64], out: &mut [f64]) {
    let qz = basis.qz();
    let forward = z.iter().zip(x).all(|(zi, xi)| zi >= xi);
    let backward = z.iter().zip(x).all(|(zi, xi)| xi >= zi);
    for i in 0..qz {
        let v = mono_x[i] * monomial(z, basis.gamma(i));
        out[i] = if forward { v } else { 0.0 };
        out[qz + i] = if backward { v } else { 0.0 };
    }
}

/// Random PSD matrix `A A^T` rescaled to `trace = qp`.
pub fn random_psd<R: Rng>(rng: &mut R, qp: usize) -> Array2<f64> {
    let cols = rng.gen_range(1..=qp);
    let a = Array2::from_shape_fn((qp, cols), |_| rng.gen_range(-1.0..1.0));
    let mut p = a.dot(&a.t());
    linalg::symmetrize(&mut p);
    let tr = linalg::trace(p.view());
    p *= qp as f64 / tr;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_d0() -> KernelParams {
        KernelParams::identity(TkBasis::new(1, 0), DomainBox::new(vec![0.0], vec![1.0]).unwrap())
    }

    #[test]
    fn t_function_examples() {
        assert_eq!(t_function(&[0.0], &[1.0], &[2]), 0.5);
        assert_eq!(t_function(&[0.0, 0.0], &[1.0, 2.0], &[1, 1]), 2.0);
        assert_eq!(t_function(&[0.4, -0.2], &[0.4, -0.2], &[3, 2]), 0.0);
    }

    #[test]
    fn gth_hand_values() {
        let params = unit_d0();
        let gth = eval_gth(&params.basis, 0, 0, &[0.3], &[0.5], &params.domain);
        assert!((gth.g - 0.5).abs() < 1e-15);
        assert!((gth.t_xy - 0.2).abs() < 1e-15);
        assert_eq!(gth.t_yx, 0.0);
        assert!((gth.h - 0.3).abs() < 1e-15);

        let gth = eval_gth(&params.basis, 0, 0, &[0.0], &[1.0], &params.domain);
        assert_eq!(gth.g, 0.0);
        assert_eq!(gth.h, 0.0);

        let gth = eval_gth(&params.basis, 0, 0, &[0.7], &[0.7], &params.domain);
        assert_eq!(gth.t_xy, gth.t_yx);
    }

    #[test]
    fn g_block_hand_values() {
        let params = unit_d0();
        let g = g_block(&params.basis, &params.domain, &[0.3], &[0.5]).to_array();
        let want = array![[0.5, 0.2], [0.0, 0.3]];
        for (a, b) in g.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn g_block_agrees_with_gth() {
        let basis = TkBasis::new(2, 2);
        let domain = DomainBox::unit_with_margin(2, 0.1).unwrap();
        let (x, y) = ([0.2, 0.9], [0.6, 0.1]);
        let g = g_block(&basis, &domain, &x, &y);
        let qz = basis.qz();
        for i in 0..qz {
            for j in 0..qz {
                let gth = eval_gth(&basis, i, j, &x, &y, &domain);
                assert_eq!(g.get(i, j), gth.g);
                assert_eq!(g.get(i, qz + j), gth.t_xy);
                assert_eq!(g.get(qz + i, j), gth.t_yx);
                assert_eq!(g.get(qz + i, qz + j), gth.h);
            }
        }
    }

    #[test]
    fn kernel_hand_value() {
        let params = unit_d0();
        assert!((eval_kernel(&params, &[0.3], &[0.5]) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gram_hand_value() {
        let params = unit_d0();
        let gram = gram_matrix(&params, array![[0.2], [0.8]].view());
        let want = array![[1.0, 0.4], [0.4, 1.0]];
        for (a, b) in gram.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = gram_matrix(&params, array![[0.4]].view());
        assert!(single[[0, 0]] >= 0.0);
    }

    #[test]
    fn quadrature_hand_value() {
        let params = unit_d0();
        let q = kernel_quadrature(&params, &[0.3], &[0.5], 1000).unwrap();
        assert!((q - 0.8).abs() < 2e-3);
        let q = kernel_quadrature(&params, &[0.45], &[0.45], 1000).unwrap();
        assert!((q - eval_kernel(&params, &[0.45], &[0.45])).abs() < 2e-3);
    }

    #[test]
    fn quadrature_refuses_large_n() {
        let basis = TkBasis::new(4, 0);
        let params = KernelParams::identity(basis, DomainBox::unit_with_margin(4, 0.1).unwrap());
        let x = [0.5; 4];
        assert!(matches!(
            kernel_quadrature(&params, &x, &x, 10),
            Err(TklError::QuadratureTooLarge(4))
        ));
    }

    #[test]
    fn quadrature_two_dim_degree_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = TkBasis::new(2, 1);
        let domain = DomainBox::unit_with_margin(2, 0.1).unwrap();
        let p = random_psd(&mut rng, basis.qp());
        let params = KernelParams::new(basis, domain, p).unwrap();
        let (x, y) = ([0.31, 0.72], [0.55, 0.18]);
        let closed = eval_kernel(&params, &x, &y);
        let quad = kernel_quadrature(&params, &x, &y, 400).unwrap();
        assert!((closed - quad).abs() <= 1e-2 * (1.0 + quad.abs()), "{closed} vs {quad}");
    }

    #[test]
    fn negative_kernel_value_exists() {
        // P couples the forward block of x with the backward block of y with a
        // negative sign; for x < y the forward/backward overlap is nonempty.
        let basis = TkBasis::new(1, 0);
        let domain = DomainBox::new(vec![0.0], vec![1.0]).unwrap();
        let p = array![[1.0, -1.0], [-1.0, 1.0]];
        let params = KernelParams::new(basis, domain, p).unwrap();
        let k = eval_kernel(&params, &[0.1], &[0.9]);
        assert!(k < 0.0, "k = {k}");
    }

    #[test]
    fn rejects_bad_params() {
        let basis = TkBasis::new(1, 0);
        let domain = DomainBox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(KernelParams::new(basis.clone(), domain.clone(), array![[1.0, 0.5], [0.0, 1.0]]).is_err());
        assert!(KernelParams::new(basis.clone(), domain.clone(), array![[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(KernelParams::new(basis, domain, Array2::eye(3)).is_err());
    }
}
