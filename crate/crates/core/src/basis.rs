//! Monomial basis and domain box for tessellated kernels.
//!
//! Each basis element is an exponent pair `(delta, gamma)` with
//! `|delta|_1 + |gamma|_1 <= d`. The element evaluates the monomial
//! `x^delta * z^gamma`, where `x` is the data point and `z` the integration
//! variable. The feature map stacks the monomial vector twice, once gated by
//! the forward orthant `z >= x` and once by the backward orthant `z <= x`, so
//! the kernel matrix `P` has dimension `2 * qz`.

use crate::error::{Result, TklError};

/// Tag written to model files so readers can reject other orderings.
pub const ORDERING_TAG: &str = "grlex";

/// Enumerated monomial exponent pairs of total degree at most `d` in `2n`
/// variables, in graded lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct TkBasis {
    n: usize,
    d: usize,
    /// `qz` rows of `n` exponents on the data point.
    deltas: Vec<Vec<u32>>,
    /// `qz` rows of `n` exponents on the integration variable.
    gammas: Vec<Vec<u32>>,
    /// Distinct exponent vectors `gamma_i + gamma_j`.
    gamma_sums: Vec<Vec<u32>>,
    /// Row-major `qz x qz` lookup into `gamma_sums`.
    gamma_sum_index: Vec<usize>,
}

impl TkBasis {
    pub fn new(n: usize, d: usize) -> Self {
        assert!(n >= 1, "feature dimension must be at least 1");
        let mut pairs = Vec::new();
        for degree in 0..=d {
            let mut current = vec![0u32; 2 * n];
            enumerate_degree(&mut current, 0, degree as u32, &mut pairs);
        }
        let deltas: Vec<Vec<u32>> = pairs.iter().map(|p| p[..n].to_vec()).collect();
        let gammas: Vec<Vec<u32>> = pairs.iter().map(|p| p[n..].to_vec()).collect();

        let qz = pairs.len();
        let mut gamma_sums: Vec<Vec<u32>> = Vec::new();
        let mut gamma_sum_index = vec![0usize; qz * qz];
        for i in 0..qz {
            for j in 0..qz {
                let sum: Vec<u32> = gammas[i].iter().zip(&gammas[j]).map(|(a, b)| a + b).collect();
                let idx = match gamma_sums.iter().position(|s| *s == sum) {
                    Some(idx) => idx,
                    None => {
                        gamma_sums.push(sum);
                        gamma_sums.len() - 1
                    }
                };
                gamma_sum_index[i * qz + j] = idx;
            }
        }

        TkBasis { n, d, deltas, gammas, gamma_sums, gamma_sum_index }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of monomial pairs.
    pub fn qz(&self) -> usize {
        self.deltas.len()
    }

    /// Dimension of the kernel parameter matrix `P`.
    pub fn qp(&self) -> usize {
        2 * self.qz()
    }

    pub fn delta(&self, i: usize) -> &[u32] {
        &self.deltas[i]
    }

    pub fn gamma(&self, i: usize) -> &[u32] {
        &self.gammas[i]
    }

    /// Exponent pair `i` as a concatenated `(delta, gamma)` vector.
    pub fn pair(&self, i: usize) -> Vec<u32> {
        let mut p = self.deltas[i].clone();
        p.extend_from_slice(&self.gammas[i]);
        p
    }

    pub(crate) fn gamma_sums(&self) -> &[Vec<u32>] {
        &self.gamma_sums
    }

    #[inline]
    pub(crate) fn gamma_sum_index(&self, i: usize, j: usize) -> usize {
        self.gamma_sum_index[i * self.qz() + j]
    }

    /// Fills `out[i] = x^delta_i` for every basis element.
    pub(crate) fn monomials(&self, x: &[f64], out: &mut [f64]) {
        for (o, delta) in out.iter_mut().zip(&self.deltas) {
            *o = monomial(x, delta);
        }
    }
}

/// Lexicographically descending enumeration of exponent vectors with a fixed
/// total degree.
fn enumerate_degree(current: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        enumerate_degree(current, pos + 1, remaining - e, out);
    }
    current[pos] = 0;
}

/// `base^exp` by repeated multiplication for small exponents.
#[inline]
pub(crate) fn ipow(base: f64, exp: u32) -> f64 {
    match exp {
        0 => 1.0,
        1 => base,
        2 => base * base,
        3 => base * base * base,
        4 => {
            let sq = base * base;
            sq * sq
        }
        5 => {
            let sq = base * base;
            sq * sq * base
        }
        6 => {
            let cube = base * base * base;
            cube * cube
        }
        _ => base.powi(exp as i32),
    }
}

#[inline]
pub(crate) fn monomial(x: &[f64], exps: &[u32]) -> f64 {
    x.iter().zip(exps).fold(1.0, |acc, (&v, &e)| acc * ipow(v, e))
}

/// Axis-aligned box `[a, b]` over which the feature map is integrated.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBox {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl DomainBox {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(TklError::Config(format!(
                "domain corners must have equal, nonzero length (got {} and {})",
                a.len(),
                b.len()
            )));
        }
        for (k, (lo, hi)) in a.iter().zip(&b).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(TklError::Config(format!(
                    "domain axis {k} requires a < b, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(DomainBox { a, b })
    }

    /// The box `[-delta, 1 + delta]^n` around the unit cube.
    pub fn unit_with_margin(n: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(TklError::Config(format!("domain margin must be > 0, got {delta}")));
        }
        DomainBox::new(vec![-delta; n], vec![1.0 + delta; n])
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Clamps `x` into the box in place, returning how many coordinates moved.
    pub fn clamp(&self, x: &mut [f64]) -> usize {
        let mut moved = 0;
        for ((v, lo), hi) in x.iter_mut().zip(&self.a).zip(&self.b) {
            if *v < *lo {
                *v = *lo;
                moved += 1;
            } else if *v > *hi {
                *v = *hi;
                moved += 1;
            }
        }
        moved
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn constant_basis() {
        let basis = TkBasis::new(1, 0);
        assert_eq!(basis.qz(), 1);
        assert_eq!(basis.pair(0), vec![0, 0]);
        assert_eq!(basis.qp(), 2);
    }

    #[test]
    fn small_counts() {
        assert_eq!(TkBasis::new(1, 1).qz(), 3);
        assert_eq!(TkBasis::new(2, 1).qz(), 5);
    }

    #[test]
    fn counts_match_binomial_and_enumerate_exactly() {
        for n in 1..=4 {
            for d in 0..=3 {
                let basis = TkBasis::new(n, d);
                assert_eq!(basis.qz(), binomial(2 * n + d, d), "n={n} d={d}");
                let set: HashSet<Vec<u32>> = (0..basis.qz()).map(|i| basis.pair(i)).collect();
                assert_eq!(set.len(), basis.qz(), "duplicates for n={n} d={d}");
                assert!(set.iter().all(|p| p.iter().sum::<u32>() as usize <= d));
            }
        }
    }

    #[test]
    fn graded_order() {
        let basis = TkBasis::new(2, 2);
        let degrees: Vec<u32> = (0..basis.qz()).map(|i| basis.pair(i).iter().sum()).collect();
        assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
        for w in (0..basis.qz()).collect::<Vec<_>>().windows(2) {
            let (p, q) = (basis.pair(w[0]), basis.pair(w[1]));
            if degrees[w[0]] == degrees[w[1]] {
                assert!(p > q, "same-degree block must be lex descending");
            }
        }
        assert_eq!(basis, TkBasis::new(2, 2));
    }

    #[test]
    fn gamma_sum_lookup() {
        let basis = TkBasis::new(2, 2);
        for i in 0..basis.qz() {
            for j in 0..basis.qz() {
                let expected: Vec<u32> =
                    basis.gamma(i).iter().zip(basis.gamma(j)).map(|(a, b)| a + b).collect();
                assert_eq!(basis.gamma_sums()[basis.gamma_sum_index(i, j)], expected);
            }
        }
    }

    #[test]
    fn ipow_matches_powi() {
        for e in 0..9 {
            for &v in &[-1.3, -0.1, 0.0, 0.7, 1.1] {
                let got = ipow(v, e);
                let want = f64::powi(v, e as i32);
                assert!((got - want).abs() <= 1e-15 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn domain_validation() {
        assert!(DomainBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(DomainBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(DomainBox::unit_with_margin(2, 0.0).is_err());
        let dom = DomainBox::unit_with_margin(3, 0.1).unwrap();
        assert_eq!(dom.a(), &[-0.1; 3]);
        assert_eq!(dom.b(), &[1.1; 3]);
        let mut x = vec![-1.0, 0.5, 2.0];
        assert_eq!(dom.clamp(&mut x), 2);
        assert_eq!(x, vec![-0.1, 0.5, 1.1]);
    }
}
