//! Dense matrix/vector primitives, distances and divergences, span pooling,
//! and a finite-difference gradient oracle used by verification code.
//!
//! Everything is `f64`, row-major, and immutable-by-convention: operations
//! return fresh values, mutation happens only through explicit `*_mut`
//! accessors on named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Identity, `n x n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vec(&self, r: usize) -> Vector {
        Vector::from_slice(self.row(r))
    }

    pub fn set_row(&mut self, r: usize, v: &[f64]) {
        assert_eq!(v.len(), self.cols, "row width mismatch");
        self.row_mut(r).copy_from_slice(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * v` (matrix-vector product).
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.dim(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v.data());
        }
        Vector { data: out }
    }

    /// `self^T * v`.
    pub fn matvec_transposed(&self, v: &Vector) -> Vector {
        assert_eq!(self.rows, v.dim(), "matvec_transposed dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let w = v.data()[r];
            if w != 0.0 {
                for (o, x) in out.iter_mut().zip(self.row(r)) {
                    *o += w * x;
                }
            }
        }
        Vector { data: out }
    }

    /// `self * other^T`, the cache-friendly core product: both operands are
    /// traversed along contiguous rows.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            let orow = out.row_mut(r);
            for (c, o) in orow.iter_mut().enumerate() {
                *o = dot(a, other.row(c));
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av != 0.0 {
                    let brow = other.row(k);
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        out
    }

    /// `self^T * other`: both operands share their row index, so the product
    /// accumulates rank-1 contributions row by row.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for t in 0..self.rows {
            let a = self.row(t);
            let b = other.row(t);
            for (m, &av) in a.iter().enumerate() {
                if av != 0.0 {
                    let orow = out.row_mut(m);
                    for (o, &bv) in orow.iter_mut().zip(b) {
                        *o += av * bv;
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Rank-1 update `self += a * u v^T`.
    pub fn add_outer(&mut self, a: f64, u: &Vector, v: &Vector) {
        assert_eq!(self.rows, u.dim());
        assert_eq!(self.cols, v.dim());
        for r in 0..self.rows {
            let s = a * u.data()[r];
            if s != 0.0 {
                for (o, &x) in self.row_mut(r).iter_mut().zip(v.data()) {
                    *o += s * x;
                }
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Exact bit-level equality, used by atomicity checks.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Vector { data: s.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dot dimension mismatch");
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim());
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Vector) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four lanes keep the FP adds independent so LLVM vectorizes them.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Euclidean (Frobenius) distance between two equally shaped matrices.
pub fn l2_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::Dimension(format!(
            "l2_distance shapes differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// KL divergence `sum_i p_i ln(p_i / q_i)` between two probability vectors.
///
/// Both inputs must sum to 1 within 1e-6 and `q` must be positive wherever
/// `p` is.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension("kl_divergence length mismatch".into()));
    }
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if (sp - 1.0).abs() > 1e-6 || (sq - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "distributions must sum to 1 (got {sp} and {sq})"
        )));
    }
    if p.iter().any(|v| *v < 0.0) || q.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("negative probability mass".into()));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Domain("q has zero mass where p > 0".into()));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Arithmetic mean of rows `span.0..span.1` of a per-token matrix.
pub fn pool_span(per_token: &Matrix, span: (usize, usize)) -> Result<Vector> {
    let (start, end) = span;
    if start >= end || end > per_token.rows() {
        return Err(Error::Span(format!(
            "span [{start},{end}) invalid for {} rows",
            per_token.rows()
        )));
    }
    let mut out = vec![0.0; per_token.cols()];
    for r in start..end {
        for (o, &x) in out.iter_mut().zip(per_token.row(r)) {
            *o += x;
        }
    }
    let inv = 1.0 / (end - start) as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(Vector::from_vec(out))
}

/// Central finite differences `(f(x+h e_i) - f(x-h e_i)) / 2h`.
///
/// Verification oracle: deliberately independent of every analytic gradient
/// path in this crate.
pub fn finite_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; x.dim()];
    let mut probe = x.clone();
    for i in 0..x.dim() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(Vector::from_vec(grad))
}

/// Cholesky factorization of a symmetric positive-definite matrix; returns
/// the lower factor `L` with `L L^T = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension("cholesky requires a square matrix".into()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let lj = &l.data()[j * n..j * n + j];
            let li = &l.data()[i * n..i * n + j];
            let s = dot(li, lj);
            if i == j {
                let d = a.get(i, i) - s;
                if d <= 0.0 || !d.is_finite() {
                    return Err(Error::Algebra(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l.set(i, j, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve `A x = b` given the Cholesky factor `L` of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Vector) -> Vector {
    let n = l.rows();
    assert_eq!(b.dim(), n, "cholesky_solve dimension mismatch");
    // Forward substitution: L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s = dot(&l.data()[i * n..i * n + i], &y[..i]);
        y[i] = (b.data()[i] - s) / l.get(i, i);
    }
    // Back substitution: L^T x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = 0.0;
        for j in i + 1..n {
            s += l.get(j, i) * x[j];
        }
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Vector::from_vec(x)
}

/// Softmax of a slice, numerically stabilized.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Log-softmax of a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn l2_distance_identity_is_zero() {
        let a = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 3, 4);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn l2_distance_identity_vs_zero() {
        let i2 = Matrix::identity(2);
        let z = Matrix::zeros(2, 2);
        assert_relative_eq!(l2_distance(&i2, &z).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn l2_distance_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 4, 3);
            assert_eq!(l2_distance(&a, &b).unwrap(), l2_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn l2_distance_shape_mismatch_errors() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(l2_distance(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn l2_distance_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 3);
            let c = random_matrix(&mut rng, 3, 3);
            let ab = l2_distance(&a, &b).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let p = vec![0.3, 0.2, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_term_closed_form() {
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, 0.143841, epsilon = 1e-6);
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sp: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sp).collect();
            let raw2: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sq: f64 = raw2.iter().sum();
            let q: Vec<f64> = raw2.iter().map(|v| v / sq).collect();
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= -1e-15, "KL must be non-negative, got {kl}");
            let maxdiff = p
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if maxdiff < 1e-12 {
                assert!(kl.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_rejects_invalid_distributions() {
        assert!(matches!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn pool_span_single_row_is_identity() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = pool_span(&m, (1, 2)).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0]);
    }

    #[test]
    fn pool_span_identical_rows() {
        let m = Matrix::from_vec(2, 2, vec![7.0, -1.0, 7.0, -1.0]).unwrap();
        let v = pool_span(&m, (0, 2)).unwrap();
        assert_eq!(v.data(), &[7.0, -1.0]);
    }

    #[test]
    fn pool_span_hand_mean() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 3.0, 2.0]).unwrap();
        let v = pool_span(&m, (0, 2)).unwrap();
        assert_eq!(v.data(), &[2.0, 1.0]);
    }

    #[test]
    fn pool_span_full_range_matches_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 6, 4);
        let v = pool_span(&m, (0, 6)).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..6).map(|r| m.get(r, c)).sum::<f64>() / 6.0;
            assert_relative_eq!(v.data()[c], mean, epsilon = 1e-14);
        }
    }

    #[test]
    fn pool_span_rejects_bad_spans() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(pool_span(&m, (1, 1)), Err(Error::Span(_))));
        assert!(matches!(pool_span(&m, (2, 4)), Err(Error::Span(_))));
    }

    #[test]
    fn finite_diff_quadratic() {
        let f = |x: &Vector| x.data()[0] * x.data()[0];
        let g = finite_diff_grad(f, &Vector::from_vec(vec![3.0]), 1e-4).unwrap();
        assert_relative_eq!(g.data()[0], 6.0, epsilon = 1e-4);
    }

    #[test]
    fn finite_diff_constant_and_linear() {
        let c = |_: &Vector| 42.0;
        let g = finite_diff_grad(c, &Vector::from_vec(vec![1.0, 2.0]), 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);

        let lin = |x: &Vector| 2.0 * x.data()[0];
        let g = finite_diff_grad(lin, &Vector::from_vec(vec![5.0]), 1e-3).unwrap();
        assert_relative_eq!(g.data()[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn finite_diff_matches_degree_two_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = {
                let a = a.clone();
                let b = b.clone();
                move |x: &Vector| {
                    let mut s = 0.0;
                    for i in 0..3 {
                        s += a[i] * x.data()[i] * x.data()[i] + b[i] * x.data()[i];
                    }
                    s
                }
            };
            let x = Vector::from_vec((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let h = 1e-5;
            let g = finite_diff_grad(f, &x, h).unwrap();
            for i in 0..3 {
                let analytic = 2.0 * a[i] * x.data()[i] + b[i];
                assert_relative_eq!(g.data()[i], analytic, epsilon = 1e-7, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn cholesky_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 5);
        // SPD by construction: A A^T + I.
        let mut spd = a.matmul_nt(&a);
        for i in 0..5 {
            spd.set(i, i, spd.get(i, i) + 1.0);
        }
        let l = cholesky(&spd).unwrap();
        let b = Vector::from_vec((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x = cholesky_solve(&l, &b);
        let back = spd.matvec(&x);
        for (u, v) in back.data().iter().zip(b.data()) {
            assert_relative_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::Algebra(_))));
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[0.5, -1.0, 3.0]);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let lp = log_softmax(&[0.5, -1.0, 3.0]);
        for (a, b) in p.iter().zip(&lp) {
            assert_relative_eq!(a.ln(), b, epsilon = 1e-12);
        }
    }
}
