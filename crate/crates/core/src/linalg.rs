//! Small dense linear-algebra helpers used by the kernel tests and the
//! acyclicity penalty. Matrices here are tiny (a few hundred rows at most),
//! so plain Cholesky and power iteration are plenty.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factor (lower) of a symmetric positive-definite matrix.
/// Inner loops run over contiguous row slices so they vectorize.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("cholesky: matrix not square"));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            l[i * n + j] = a[[i, j]];
        }
    }
    for i in 0..n {
        let (prev, rest) = l.split_at_mut(i * n);
        let row_i = &mut rest[..n];
        for j in 0..i {
            let row_j = &prev[j * n..j * n + j + 1];
            let s = row_i[j] - dot(&row_i[..j], &row_j[..j]);
            row_i[j] = s / row_j[j];
        }
        let s = row_i[i] - dot(&row_i[..i], &row_i[..i]);
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::numeric(format!(
                "cholesky: matrix not positive definite at pivot {i} (value {s:.3e})"
            )));
        }
        row_i[i] = s.sqrt();
    }
    Array2::from_shape_vec((n, n), l).map_err(|_| Error::shape("cholesky: bad shape"))
}

/// Solves `A X = B` for SPD `A` via Cholesky. The triangular sweeps update
/// whole rows of `X` at a time, keeping the inner loops contiguous.
pub fn spd_solve(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::shape("spd_solve: rhs row count mismatch"));
    }
    let m = b.ncols();
    let lf = l.as_slice().expect("cholesky factor is contiguous");
    let mut x: Vec<f64> = b.iter().copied().collect();
    // forward: L Y = B, row i minus the already-solved rows above it
    for i in 0..n {
        let (prev, rest) = x.split_at_mut(i * m);
        let xi = &mut rest[..m];
        let lrow = &lf[i * n..i * n + i];
        for (k, &c) in lrow.iter().enumerate() {
            let xk = &prev[k * m..k * m + m];
            for (a, b) in xi.iter_mut().zip(xk) {
                *a -= c * *b;
            }
        }
        let d = lf[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    // backward: L^T X = Y, row i minus the already-solved rows below it
    for i in (0..n).rev() {
        let (head, tail) = x.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..];
        for k in i + 1..n {
            let c = lf[k * n + i];
            let xk = &tail[(k - i - 1) * m..(k - i) * m];
            for (a, b) in xi.iter_mut().zip(xk) {
                *a -= c * *b;
            }
        }
        let d = lf[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    Array2::from_shape_vec((n, m), x).map_err(|_| Error::shape("spd_solve: bad shape"))
}

pub fn frobenius_sq(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Spectral radius estimate by power iteration on `|a|` (entrywise absolute
/// values are taken by the caller when needed).
pub fn spectral_radius(a: &ArrayView2<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.dot(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

/// Operator 2-norm estimate via power iteration on `A^T A`.
pub fn operator_norm(a: &ArrayView2<f64>, iters: usize) -> f64 {
    let ata = a.t().dot(a);
    spectral_radius(&ata.view(), iters).sqrt()
}

/// Truncated-series trace penalty `tr(sum_{p<=degree} M^p / p!) - n` with
/// `M = W (.) W`. Exact for acyclic `W` once `degree >= n` (nilpotency).
pub fn acyclicity_penalty(w: &ArrayView2<f64>, degree: usize) -> f64 {
    let n = w.nrows();
    let m = w.mapv(|x| x * x);
    let mut term = Array2::<f64>::eye(n);
    let mut trace = 0.0;
    let mut fact = 1.0;
    for p in 1..=degree {
        term = term.dot(&m);
        fact *= p as f64;
        trace += term.diag().sum() / fact;
    }
    trace
}

/// Gradient of [`acyclicity_penalty`] with respect to `W`:
/// `(sum_{p=1..degree} (M^{p-1})^T / (p-1)!) (.) 2W`.
pub fn acyclicity_grad(w: &ArrayView2<f64>, degree: usize) -> Array2<f64> {
    let n = w.nrows();
    let m = w.mapv(|x| x * x);
    let mut pow = Array2::<f64>::eye(n);
    let mut acc = Array2::<f64>::zeros((n, n));
    let mut fact = 1.0;
    for p in 1..=degree {
        acc += &(pow.t().to_owned() / fact);
        if p < degree {
            pow = pow.dot(&m);
            fact *= p as f64;
        }
    }
    acc * &w.mapv(|x| 2.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_solve_recovers_identity() {
        let a = array![[4.0, 1.0, 0.2], [1.0, 3.0, 0.5], [0.2, 0.5, 2.0]];
        let b = Array2::<f64>::eye(3);
        let x = spd_solve(&a.view(), &b.view()).unwrap();
        let recon = a.dot(&x);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(recon[[i, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a.view()).is_err());
    }

    #[test]
    fn acyclicity_zero_for_triangular() {
        let w = array![[0.0, 0.7, -0.3], [0.0, 0.0, 1.2], [0.0, 0.0, 0.0]];
        assert_abs_diff_eq!(acyclicity_penalty(&w.view(), 3), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn acyclicity_positive_for_two_cycle() {
        // 2x2 with a cycle a*b != 0: truncated series at degree 2 gives
        // tr(I + M + M^2/2) - 2 = 2ab' where M = [[0,a^2],[b^2,0]].
        let a = 0.5_f64;
        let b = 0.4_f64;
        let w = array![[0.0, a], [b, 0.0]];
        let h = acyclicity_penalty(&w.view(), 2);
        let expect = a * a * b * b; // tr(M^2)/2 = (a^2 b^2 * 2)/2
        assert_abs_diff_eq!(h, expect, epsilon = 1e-14);
        assert!(h > 0.0);
    }

    #[test]
    fn spectral_radius_diagonal() {
        let a = array![[0.3, 0.0], [0.0, 0.9]];
        let r = spectral_radius(&a.view(), 200);
        assert_abs_diff_eq!(r, 0.9, epsilon = 1e-6);
    }
}
