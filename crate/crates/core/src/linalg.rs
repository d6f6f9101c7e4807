//! Dense row-major `f64` matrices and the handful of norms the rest of the
//! crate needs.
//!
//! Everything here is deliberately small: shapes stay at desk scale (d <= 64),
//! and bit-for-bit reproducibility matters more than throughput. Row products
//! are always accumulated left to right, so computing a subset of rows with
//! [`Matrix::matmul_rows`] gives exactly the same bits as the matching rows of
//! [`Matrix::matmul`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DareError, Result};

const POWER_ITER_SEED: u64 = 0x5eed_2a11_0f1e;
const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 1_000_000;
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DareError::DimensionMismatch {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DareError::NonFinite("from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DareError::DimensionMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Overwrites row `r` with `src`.
    pub fn copy_row_from(&mut self, r: usize, src: &[f64]) {
        self.row_mut(r).copy_from_slice(src);
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let all: Vec<usize> = (0..self.rows).collect();
        let picked = self.matmul_rows(&all, other)?;
        Ok(picked)
    }

    /// Product restricted to the listed rows of `self`; output row `k` is
    /// `self.row(rows[k]) * other`.
    pub fn matmul_rows(&self, rows: &[usize], other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DareError::DimensionMismatch {
                op: "matmul",
                detail: format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let mut out = Matrix::zeros(rows.len(), other.cols);
        for (k, &r) in rows.iter().enumerate() {
            if r >= self.rows {
                return Err(DareError::DimensionMismatch {
                    op: "matmul_rows",
                    detail: format!("row {r} of a {}-row matrix", self.rows),
                });
            }
            row_times(self.row(r), other, out.row_mut(k));
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(DareError::DimensionMismatch {
                op: "sub",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(DareError::DimensionMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix {
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DareError::NonFinite(op))
        }
    }
}

fn row_times(lhs: &[f64], rhs: &Matrix, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, a) in lhs.iter().enumerate() {
            acc += a * rhs.data[k * rhs.cols + c];
        }
        *o = acc;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax of a single row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Rescales every row to Euclidean norm `sqrt(cols)`.
pub fn row_normalize_sqrt_d(m: &Matrix) -> Result<Matrix> {
    let target = (m.cols as f64).sqrt();
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = l2(row);
        if n == 0.0 || !n.is_finite() {
            return Err(DareError::Degenerate(format!("row {r} has norm {n}")));
        }
        let s = target / n;
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DareError::DimensionMismatch {
            op: "cosine",
            detail: format!("{} vs {}", u.len(), v.len()),
        });
    }
    let (nu2, nv2) = (dot(u, u), dot(v, v));
    if nu2 == 0.0 || nv2 == 0.0 {
        return Err(DareError::Degenerate("cosine of a zero vector".into()));
    }
    // one square root: identical inputs give exactly 1
    Ok((dot(u, v) / (nu2 * nv2).sqrt()).clamp(-1.0, 1.0))
}

/// Largest singular value via power iteration on `MᵀM`.
///
/// Stops once the eigen-residual `‖MᵀM v − λ v‖` falls below `1e-10 · λ`,
/// which bounds the relative error of λ (and hence of σ) by the same amount.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.rows == 0 || m.cols == 0 || m.data.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let gram = m.transpose().matmul(m).expect("gram shape");
    let n = gram.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITER_MAX {
        sym_apply(&gram, &v, &mut w);
        lambda = dot(&v, &w);
        let resid = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if lambda > 0.0 && resid <= POWER_ITER_TOL * lambda {
            break;
        }
        let nw = l2(&w);
        if nw == 0.0 {
            // started orthogonal to the range; restart along a basis vector
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
            continue;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    lambda.max(0.0).sqrt()
}

fn sym_apply(a: &Matrix, v: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(a.row(r), v);
    }
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    dm.singular_values().iter().copied().collect()
}

/// Smallest singular value; requires full column rank.
pub fn min_singular(m: &Matrix) -> Result<f64> {
    if m.rows < m.cols {
        return Err(DareError::Singular { sigma_min: 0.0, sigma_max: spectral_norm(m) });
    }
    let sv = singular_values(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin >= RANK_TOL * smax) || smax == 0.0 {
        return Err(DareError::Singular { sigma_min: smin, sigma_max: smax });
    }
    Ok(smin)
}

/// `σ_max / σ_min`, never below 1.
pub fn condition_kappa(m: &Matrix) -> Result<f64> {
    let smin = min_singular(m)?;
    Ok((spectral_norm(m) / smin).max(1.0))
}

/// Maximum Euclidean row norm; the exact `‖·‖_{2→∞}` operator norm.
pub fn norm_2_to_inf(m: &Matrix) -> f64 {
    m.row_iter().map(l2).fold(0.0, f64::max)
}

/// Sum of Euclidean row norms. The exact `‖·‖_{2→1}` norm is NP-hard in
/// general; this is an upper bound, so inequalities that use it stay valid.
pub fn norm_2_to_1_upper(m: &Matrix) -> f64 {
    m.row_iter().map(l2).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b.cols()]; a.rows()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i][j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    /// One-sided Jacobi SVD; returns singular values.
    fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
        let (r, c) = m.shape();
        let mut u: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| m.get(i, j)).collect()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..c {
                for q in p + 1..c {
                    let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                    let beta: f64 = u[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = u[p].iter().zip(&u[q]).map(|(a, b)| a * b).sum();
                    if gamma.abs() < 1e-300 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (1.0 + t * t).sqrt();
                    let sn = cs * t;
                    for i in 0..r {
                        let a = u[p][i];
                        let b = u[q][i];
                        u[p][i] = cs * a - sn * b;
                        u[q][i] = sn * a + cs * b;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut sv: Vec<f64> = u.iter().map(|col| l2(col)).collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    #[test]
    fn identity_is_left_neutral() {
        let m = random_matrix(3, 4, 7);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn zeros_annihilate() {
        let m = random_matrix(3, 4, 7);
        assert_eq!(m.matmul(&Matrix::zeros(4, 2)).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random_matrix(4, 5, 1);
        let b = random_matrix(5, 3, 2);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for i in 0..4 {
            for j in 0..3 {
                assert!((got.get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, DareError::DimensionMismatch { .. }));
    }

    #[test]
    fn matmul_rows_is_bitwise_row_subset() {
        let a = random_matrix(5, 4, 3);
        let b = random_matrix(4, 6, 4);
        let full = a.matmul(&b).unwrap();
        let part = a.matmul_rows(&[4, 1], &b).unwrap();
        assert_eq!(part.row(0), full.row(4));
        assert_eq!(part.row(1), full.row(1));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let s = row_softmax(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-300 + f64::EPSILON);
        assert!(s.get(1, 1) >= 0.0 && s.get(1, 1) < 1e-300);

        let s = softmax(&[1.0, 2.0, 3.0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s[i] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = row_normalize_sqrt_d(&m).unwrap();
        let r2 = 2f64.sqrt();
        assert!((n.get(0, 0) - 0.6 * r2).abs() < 1e-12);
        assert!((n.get(0, 1) - 0.8 * r2).abs() < 1e-12);
        let again = row_normalize_sqrt_d(&n).unwrap();
        for (a, b) in again.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(row_normalize_sqrt_d(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(DareError::Degenerate(_))));
    }

    #[test]
    fn singular_value_examples() {
        let i4 = Matrix::identity(4);
        assert!((spectral_norm(&i4) - 1.0).abs() < 1e-12);
        assert!((min_singular(&i4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(condition_kappa(&i4).unwrap(), 1.0);

        let d = Matrix::diag(&[3.0, 1.0]);
        assert!((spectral_norm(&d) - 3.0).abs() < 1e-9);
        assert!((condition_kappa(&d).unwrap() - 3.0).abs() < 1e-9);

        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(min_singular(&sing), Err(DareError::Singular { .. })));
        assert!(condition_kappa(&sing).is_err());
    }

    #[test]
    fn singular_values_match_jacobi_oracle() {
        for seed in 0..5 {
            let m = random_matrix(8, 8, 100 + seed);
            let sv = jacobi_singular_values(&m);
            let smax = sv[0];
            let smin = *sv.last().unwrap();
            assert!((spectral_norm(&m) - smax).abs() <= 1e-8 * smax, "seed {seed}");
            assert!((min_singular(&m).unwrap() - smin).abs() <= 1e-8 * smax, "seed {seed}");
            let kappa = condition_kappa(&m).unwrap();
            assert!((kappa - smax / smin).abs() <= 1e-8 * smax / smin);
        }
    }

    #[test]
    fn operator_norm_examples() {
        let i3 = Matrix::identity(3);
        assert_eq!(norm_2_to_inf(&i3), 1.0);
        assert_eq!(norm_2_to_1_upper(&i3), 3.0);

        let one = Matrix::from_rows(&[vec![1.0, 2.0, 2.0]]).unwrap();
        assert_eq!(norm_2_to_inf(&one), 3.0);
        assert_eq!(norm_2_to_1_upper(&one), 3.0);

        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(norm_2_to_inf(&m), 5.0);
        assert_eq!(norm_2_to_1_upper(&m), 10.0);
    }

    #[test]
    fn norms_dominate_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = random_matrix(6, 5, 42);
        let sn = spectral_norm(&m);
        let n21 = norm_2_to_1_upper(&m);
        for _ in 0..1000 {
            let mut v: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut v);
            let mv: Vec<f64> = (0..6).map(|r| dot(m.row(r), &v)).collect();
            assert!(l2(&mv) <= sn + 1e-9);
            assert!(mv.iter().map(|x| x.abs()).sum::<f64>() <= n21 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let s = softmax(&row);
            prop_assert!(s.iter().all(|p| *p >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_ignores_positive_scale(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 1e-3f64..1e3,
            b in 1e-3f64..1e3,
        ) {
            prop_assume!(l2(&u) > 1e-6 && l2(&v) > 1e-6);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            let c0 = cosine(&u, &v).unwrap();
            let c1 = cosine(&su, &sv).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
        }
    }
}
