//! Dense row-major kernels shared by the graph primitives and the
//! value-level distribution code.

use super::TensorError;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(a, (k as isize, 1), b, (n as isize, 1), &mut c, m, k, n);
    c
}

/// `c += a · b` with arbitrary (row, col) strides on `a` and `b`; `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() == m * n);
    // SAFETY: callers pass buffers of at least the strided extent; all
    // strides are derived from the row-major shapes of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor of the symmetric matrix whose lower triangle is
/// stored in `a` (`d×d`, row-major). The strict upper triangle is ignored.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>, TensorError> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a[j * d + j];
        for p in 0..j {
            diag -= l[j * d + p] * l[j * d + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(TensorError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` in place for lower-triangular `L: d×d`, `B: d×n`.
pub fn solve_lower_in_place(l: &[f64], d: usize, b: &mut [f64], n: usize) {
    for i in 0..d {
        let lii = l[i * d + i];
        for p in 0..i {
            let lip = l[i * d + p];
            if lip != 0.0 {
                let (head, tail) = b.split_at_mut(i * n);
                let src = &head[p * n..(p + 1) * n];
                for (dst, s) in tail[..n].iter_mut().zip(src) {
                    *dst -= lip * s;
                }
            }
        }
        for v in &mut b[i * n..(i + 1) * n] {
            *v /= lii;
        }
    }
}

/// Solves `Lᵀ X = B` in place for lower-triangular `L: d×d`, `B: d×n`.
pub fn solve_lower_transpose_in_place(l: &[f64], d: usize, b: &mut [f64], n: usize) {
    for i in (0..d).rev() {
        let lii = l[i * d + i];
        for p in (i + 1)..d {
            let lpi = l[p * d + i];
            if lpi != 0.0 {
                let (head, tail) = b.split_at_mut(p * n);
                let dst = &mut head[i * n..(i + 1) * n];
                for (x, s) in dst.iter_mut().zip(&tail[..n]) {
                    *x -= lpi * s;
                }
            }
        }
        for v in &mut b[i * n..(i + 1) * n] {
            *v /= lii;
        }
    }
}

/// `ln det(L Lᵀ)` from a Cholesky factor.
pub fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>()
}

/// `(x - mean)ᵀ (L Lᵀ)⁻¹ (x - mean)` via one forward substitution.
pub fn mahalanobis_sq(l: &[f64], d: usize, x: &[f64], mean: &[f64]) -> f64 {
    let mut r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    solve_lower_in_place(l, d, &mut r, 1);
    r.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let mut lt = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                lt[i * 3 + j] = l[j * 3 + i];
            }
        }
        let back = matmul(&l, &lt, 3, 3, 3);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            cholesky(&a, 2),
            Err(TensorError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn triangular_solves_invert() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let b = vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0];
        let mut x = b.clone();
        solve_lower_in_place(&l, 3, &mut x, 2);
        let back = matmul(&l, &x, 3, 3, 2);
        for (p, q) in back.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        let mut y = b.clone();
        solve_lower_transpose_in_place(&l, 3, &mut y, 2);
        let mut lt = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                lt[i * 3 + j] = l[j * 3 + i];
            }
        }
        let back = matmul(&lt, &y, 3, 3, 2);
        for (p, q) in back.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
