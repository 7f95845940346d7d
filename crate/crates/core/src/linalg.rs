//! Small dense symmetric factorizations used by the Hessian-weighted quantizer.
//!
//! Factorizations run in `f64`; matrices are row-major `n×n`.

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
///
/// Returns `None` when a pivot is not strictly positive.
pub(crate) fn cholesky_lower(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d.is_nan() || d <= 0.0 || d.is_infinite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub(crate) fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky_lower(a, n)?;
    // L⁻¹ by forward substitution, column by column
    let mut linv = vec![0.0f64; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    // A⁻¹ = L⁻ᵀ·L⁻¹
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Some(inv)
}

/// Upper-triangular `U` with `A⁻¹ = Uᵀ·U`, the factor the sequential
/// error-feedback update reads its rows from.
pub(crate) fn inverse_upper_cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let inv = spd_inverse(a, n)?;
    let l = cholesky_lower(&inv, n)?;
    let mut u = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            u[i * n + j] = l[j * n + i];
        }
    }
    Some(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Vec<f64> {
        // B·Bᵀ + n·I for a fixed non-symmetric B
        let b: Vec<f64> = (0..n * n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>();
            }
            a[i * n + i] += n as f64;
        }
        a
    }

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn cholesky_reconstructs() {
        let n = 6;
        let a = spd(n);
        let l = cholesky_lower(&a, n).unwrap();
        let mut lt = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                lt[i * n + j] = l[j * n + i];
            }
        }
        let back = matmul(&l, &lt, n);
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_is_inverse() {
        let n = 7;
        let a = spd(n);
        let inv = spd_inverse(&a, n).unwrap();
        let id = matmul(&a, &inv, n);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id[i * n + j] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upper_factor_of_inverse() {
        let n = 5;
        let a = spd(n);
        let u = inverse_upper_cholesky(&a, n).unwrap();
        let mut ut = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                ut[i * n + j] = u[j * n + i];
                if j < i {
                    assert_eq!(u[i * n + j], 0.0);
                }
            }
        }
        let inv = spd_inverse(&a, n).unwrap();
        for (x, y) in matmul(&ut, &u, n).iter().zip(&inv) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_fails() {
        // rank one
        let a = vec![1.0, 1.0, 1.0, 1.0];
        assert!(cholesky_lower(&a, 2).is_none());
        assert!(cholesky_lower(&[0.0], 1).is_none());
    }
}
