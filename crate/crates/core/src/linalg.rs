//! Small dense linear algebra on row-major slices: GEMM (backed by
//! `matrixmultiply`), Cholesky factorization, and triangular solves.
//!
//! Matrices are row-major `&[f64]` with explicit dimensions. Everything is
//! single-threaded and deterministic.

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
///
/// `a` stores a `(if ta { k x m } else { m x k })` matrix, analogously for
/// `b`; `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convenience: allocate and return `op(a) * op(b)`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Cholesky factorization of a symmetric matrix, returning the lower factor
/// (strict upper triangle zeroed). `None` when the matrix is not numerically
/// positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L X = B` for X, with L lower triangular `n x n` and B `n x m`,
/// both row-major. Forward substitution over row blocks.
pub fn solve_lower(l: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    let mut x = b.to_vec();
    for i in 0..n {
        let (head, tail) = x.split_at_mut(i * m);
        let xi = &mut tail[..m];
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                let xp = &head[p * m..(p + 1) * m];
                for j in 0..m {
                    xi[j] -= lip * xp[j];
                }
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// Solves `L^T X = B` for X (back substitution with the transposed lower
/// factor).
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * m);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let (head, tail) = x.split_at_mut((i + 1) * m);
        let xi = &mut head[i * m..(i + 1) * m];
        for p in (i + 1)..n {
            let lpi = l[p * n + i];
            if lpi != 0.0 {
                let xp = &tail[(p - i - 1) * m..(p - i) * m];
                for j in 0..m {
                    xi[j] -= lpi * xp[j];
                }
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// `sum_i x_i^2`.
pub fn sum_squares(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Global L2 norm of a collection of slices.
pub fn global_l2_norm<'a>(parts: impl Iterator<Item = &'a [f64]>) -> f64 {
    parts.map(sum_squares).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = naive_matmul(m, k, n, &a, &b);

        let got = matmul(m, k, n, &a, false, &b, false);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored transposed (k x m), same logical product
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let got = matmul(m, k, n, &at, true, &b, false);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b stored transposed (n x k)
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let got = matmul(m, k, n, &a, false, &bt, true);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = matmul(n, n, n, &g, false, &g, true);
        for i in 0..n {
            a[i * n + i] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 3, 8, 20] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a, n).unwrap();
            let back = matmul(n, n, n, &l, false, &l, true);
            for (x, y) in back.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-9, "n={n}");
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![-1.0, 0.0, 0.0, 2.0];
        assert!(cholesky(&a, 2).is_none());
    }

    #[test]
    fn triangular_solves_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 9;
        let m = 4;
        let a = random_spd(n, &mut rng);
        let l = cholesky(&a, n).unwrap();
        let b: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();

        let x = solve_lower(&l, n, &b, m);
        let back = matmul(n, n, m, &l, false, &x, false);
        for (u, v) in back.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-10);
        }

        let y = solve_lower_transpose(&l, n, &b, m);
        let back = matmul(n, n, m, &l, true, &y, false);
        for (u, v) in back.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}
