//! Small dense helpers over row-major `f64` slices.

use nalgebra::DMatrix;

use crate::error::{Result, StosymError};

pub fn identity(k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        m[i * k + i] = 1.0;
    }
    m
}

/// `a` is `n×m`, `b` is `m×p`.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for l in 0..m {
            let ail = a[i * m + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += ail * b[l * p + j];
            }
        }
    }
    out
}

/// `a` is `n×m`.
pub fn mat_vec(a: &[f64], v: &[f64], n: usize, m: usize) -> Vec<f64> {
    (0..n).map(|i| (0..m).map(|j| a[i * m + j] * v[j]).sum()).collect()
}

pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub fn to_dmatrix(a: &[f64], n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, m, a)
}

pub fn from_dmatrix(a: &DMatrix<f64>) -> Vec<f64> {
    let (n, m) = a.shape();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn det(a: &[f64], k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        _ => to_dmatrix(a, k, k).determinant(),
    }
}

/// Inverse of a `k×k` matrix, refusing when `|det| <= tol`.
pub fn inverse(a: &[f64], k: usize, tol: f64) -> Result<Vec<f64>> {
    let d = det(a, k);
    if !(d.abs() > tol) {
        return Err(StosymError::Singular { det: d, tol });
    }
    if k == 2 {
        return Ok(vec![a[3] / d, -a[1] / d, -a[2] / d, a[0] / d]);
    }
    to_dmatrix(a, k, k).try_inverse().map(|m| from_dmatrix(&m)).ok_or(StosymError::Singular { det: d, tol })
}

pub fn commutator(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let ab = mat_mul(a, b, k, k, k);
    let ba = mat_mul(b, a, k, k, k);
    ab.iter().zip(&ba).map(|(x, y)| x - y).collect()
}

pub fn rotation2(angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c, -s, s, c]
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest deviation of `BᵀB` from the identity.
pub fn orthogonality_defect(b: &[f64], k: usize) -> f64 {
    let btb = mat_mul(&transpose(b, k, k), b, k, k, k);
    max_abs_diff(&btb, &identity(k))
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &[f64], k: usize) -> Vec<f64> {
    let n1: f64 = a.iter().map(|x| x.abs()).sum();
    let mut s = 0;
    let mut scale = 1.0;
    while n1 * scale > 0.5 {
        scale *= 0.5;
        s += 1;
    }
    let a_s: Vec<f64> = a.iter().map(|x| x * scale).collect();
    let mut term = identity(k);
    let mut sum = identity(k);
    for j in 1..=20 {
        term = mat_mul(&term, &a_s, k, k, k);
        for x in term.iter_mut() {
            *x /= j as f64;
        }
        for (acc, t) in sum.iter_mut().zip(&term) {
            *acc += t;
        }
    }
    for _ in 0..s {
        sum = mat_mul(&sum, &sum, k, k, k);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_rotation_is_transpose() {
        let r = rotation2(0.7);
        let inv = inverse(&r, 2, 1e-12).unwrap();
        assert!(max_abs_diff(&inv, &transpose(&r, 2, 2)) < 1e-15);
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2, 1e-12).is_err());
        let m3 = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0];
        let inv = inverse(&m3, 3, 1e-12).unwrap();
        assert!((inv[8] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn expm_of_generator_is_rotation() {
        let r = [0.0, -1.3, 1.3, 0.0];
        assert!(max_abs_diff(&expm(&r, 2), &rotation2(1.3)) < 1e-13);
    }
}
