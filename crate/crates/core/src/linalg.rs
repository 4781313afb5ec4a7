//! Small dense matrices and a one-sided Jacobi SVD.
//!
//! Sizes here are kernel unfoldings (a handful of rows, at most a few hundred
//! columns), so the implementation favors accuracy over speed.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(alloc::format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// First `k` rows.
    pub fn top_rows(&self, k: usize) -> Matrix {
        Matrix { rows: k, cols: self.cols, data: self.data[..k * self.cols].to_vec() }
    }

    pub fn frobenius(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, math::abs(a - b)))
    }
}

/// Thin SVD `A = U diag(s) V^T` with `k = min(rows, cols)` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows, k, |r, c| self.u.get(r, c) * self.s[c]);
        us.matmul(&self.v.transpose())
    }
}

pub const MAX_SWEEPS: usize = 100;
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// One-sided Jacobi SVD.
///
/// Rotations act on the columns of whichever of `A` / `A^T` is tall, so the
/// implicit Gram matrix has the smaller dimension. Each left singular vector
/// is signed so that its largest-magnitude component is nonnegative.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    let transposed = a.rows < a.cols;
    let mut w = if transposed { a.transpose() } else { a.clone() };
    let (p, q) = (w.rows, w.cols);
    let mut v = Matrix::identity(q);

    let mut converged = q < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        for i in 0..q {
            for j in i + 1..q {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..p {
                    let (x, y) = (w.get(r, i), w.get(r, j));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = math::abs(gamma) / math::sqrt(alpha * beta);
                residual = residual.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (math::abs(zeta) + math::hypot(1.0, zeta));
                let c = 1.0 / math::hypot(1.0, t);
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        converged = residual <= OFF_DIAGONAL_TOL;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS, residual });
    }

    let norms: Vec<f64> = (0..q)
        .map(|c| {
            math::sqrt(
                (0..p)
                    .map(|r| {
                        let x = w.get(r, c);
                        x * x
                    })
                    .sum(),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms.iter().copied().fold(0.0, f64::max);
    let floor = smax * 1e-13;

    let mut left = Matrix::zeros(p, q);
    let mut valid = vec![false; q];
    let mut right = Matrix::zeros(q, q);
    let mut s = Vec::with_capacity(q);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        if sigma > floor && sigma > 0.0 {
            for r in 0..p {
                left.set(r, dst, w.get(r, src) / sigma);
            }
            valid[dst] = true;
        }
        for r in 0..q {
            right.set(r, dst, v.get(r, src));
        }
    }
    fill_orthonormal_columns(&mut left, &mut valid);

    let (mut u, mut vv) = if transposed { (right, left) } else { (left, right) };
    for c in 0..q {
        let col = u.col(c);
        let lead = col.iter().copied().fold(0.0f64, |best, x| if math::abs(x) > math::abs(best) { x } else { best });
        if lead < 0.0 {
            for r in 0..u.rows {
                u.set(r, c, -u.get(r, c));
            }
            for r in 0..vv.rows {
                vv.set(r, c, -vv.get(r, c));
            }
        }
    }
    Ok(Svd { u, s, v: vv })
}

fn rotate(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.rows {
        let (x, y) = (m.get(r, i), m.get(r, j));
        m.set(r, i, c * x - s * y);
        m.set(r, j, s * x + c * y);
    }
}

/// Replaces every column not flagged `valid` by a unit vector orthogonal to all
/// valid columns, drawn from the standard basis by Gram-Schmidt.
fn fill_orthonormal_columns(m: &mut Matrix, valid: &mut [bool]) {
    let p = m.rows;
    for target in 0..m.cols {
        if valid[target] {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..p {
            let mut cand = vec![0.0; p];
            cand[e] = 1.0;
            for _ in 0..2 {
                for c in (0..m.cols).filter(|&c| valid[c]) {
                    let dot: f64 = (0..p).map(|r| m.get(r, c) * cand[r]).sum();
                    for (r, x) in cand.iter_mut().enumerate() {
                        *x -= dot * m.get(r, c);
                    }
                }
            }
            let norm = math::sqrt(cand.iter().map(|x| x * x).sum());
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("at least one basis vector");
        for (r, x) in cand.iter().enumerate() {
            m.set(r, target, x / norm);
        }
        valid[target] = true;
    }
}

/// Extends `q` (`p x k`, orthonormal columns, `k <= p`) to a `p x p` orthogonal matrix.
pub fn complete_basis(q: &Matrix) -> Matrix {
    let p = q.rows;
    assert!(q.cols <= p, "complete_basis: more columns than rows");
    let mut out = Matrix::zeros(p, p);
    let mut valid = vec![false; p];
    for (c, v) in valid.iter_mut().enumerate().take(q.cols) {
        for r in 0..p {
            out.set(r, c, q.get(r, c));
        }
        *v = true;
    }
    fill_orthonormal_columns(&mut out, &mut valid);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut r = rng::seeded(seed);
        let t = rng::uniform(&mut r, &[rows, cols], -1.0, 1.0);
        Matrix::from_vec(rows, cols, t.into_data()).unwrap()
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        m.transpose().matmul(m).max_abs_diff(&Matrix::identity(m.cols()))
    }

    /// Eigenvalues of a symmetric PSD matrix by power iteration with deflation.
    fn power_iteration_eigenvalues(g: &Matrix) -> Vec<f64> {
        let n = g.rows();
        let mut g = g.clone();
        let mut out = Vec::new();
        for k in 0..n {
            let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i + k) as f64)).collect();
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let y: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g.get(i, j) * x[j]).sum()).collect();
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                let next: Vec<f64> = y.iter().map(|v| v / norm).collect();
                let delta: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
                x = next;
                lambda = norm;
                if delta < 1e-15 {
                    break;
                }
            }
            out.push(lambda);
            g = Matrix::from_fn(n, n, |i, j| g.get(i, j) - lambda * x[i] * x[j]);
        }
        out
    }

    #[test]
    fn identity_and_diagonal() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.s, vec![1.0, 1.0, 1.0]);
        let d = Matrix::from_fn(3, 3, |r, c| if r == c { [1.0, 3.0, 2.0][r] } else { 0.0 });
        let s = svd(&d).unwrap();
        assert_eq!(s.s, vec![3.0, 2.0, 1.0]);
        assert!(s.reconstruct().max_abs_diff(&d) < 1e-15);
    }

    #[test]
    fn random_wide_matrix() {
        let a = random(42, 4, 7);
        let s = svd(&a).unwrap();
        assert_eq!((s.u.rows(), s.u.cols(), s.v.rows(), s.v.cols()), (4, 4, 7, 4));
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
        let rel = Matrix::from_fn(4, 7, |r, c| s.reconstruct().get(r, c) - a.get(r, c)).frobenius() / a.frobenius();
        assert!(rel < 1e-10);
        assert!(s.s.windows(2).all(|w| w[0] >= w[1]));

        let gram = a.matmul(&a.transpose());
        let eig = power_iteration_eigenvalues(&gram);
        for (sig, lam) in s.s.iter().zip(&eig) {
            assert!((sig * sig - lam).abs() < 1e-8, "{sig}^2 vs {lam}");
        }
    }

    #[test]
    fn tall_and_rank_deficient() {
        let a = random(3, 9, 3);
        let s = svd(&a).unwrap();
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(s.reconstruct().max_abs_diff(&a) < 1e-12);

        // rank 1 outer product: completion must still give orthonormal factors
        let r1 = Matrix::from_fn(3, 5, |r, c| (r as f64 + 1.0) * (c as f64 - 2.0));
        let s = svd(&r1).unwrap();
        assert!(s.s[1] < 1e-12 && s.s[2] < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
        assert!(s.reconstruct().max_abs_diff(&r1) < 1e-12);

        let z = svd(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(z.s, vec![0.0; 3]);
        assert!(orthonormality_error(&z.u) < 1e-15);
    }

    #[test]
    fn sign_convention() {
        let a = random(5, 5, 6);
        let s = svd(&a).unwrap();
        for c in 0..s.u.cols() {
            let col = s.u.col(c);
            let lead = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(lead >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a.set(0, 1, f64::NAN);
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn completion_is_orthogonal() {
        let q = Matrix::from_fn(4, 1, |_, _| 0.5);
        let full = complete_basis(&q);
        assert!(orthonormality_error(&full) < 1e-14);
        assert_eq!(full.col(0), q.col(0));
    }
}
