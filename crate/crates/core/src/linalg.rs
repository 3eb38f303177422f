//! Symmetric eigen-decomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};

pub const MAX_EIG_DIM: usize = 256;
const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;
const JITTER: f64 = 1e-12;

/// Eigenpairs sorted by ascending eigenvalue.
///
/// `vectors` is row-major `n x n`; column `k` is the unit eigenvector of
/// `values[k]`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.vectors[i * self.n + k]).collect()
    }
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn off_diagonal(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Decompose the symmetric row-major `n x n` matrix `s`.
///
/// A diagonal shift of `1e-12 * ||S||_F` is applied before the sweeps and
/// removed from the returned eigenvalues, so a zero matrix yields exact zeros
/// and scaling `S` by a power of two scales the spectrum exactly.
pub fn symmetric_eigen(s: &[f64], n: usize) -> Result<SymmetricEigen> {
    if s.len() != n * n {
        return Err(Error::InvalidShape {
            op: "symmetric_eig",
            reason: format!("{} values for a {n}x{n} matrix", s.len()),
        });
    }
    if n > MAX_EIG_DIM {
        return Err(Error::InvalidShape {
            op: "symmetric_eig",
            reason: format!("dimension {n} exceeds {MAX_EIG_DIM}"),
        });
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "symmetric_eig" });
    }
    let norm = frobenius(s);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s[i * n + j] - s[j * n + i]).abs());
        }
    }
    if asym > SYMMETRY_TOL * norm.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }

    let jitter = JITTER * norm;
    let mut a = s.to_vec();
    for i in 0..n {
        a[i * n + i] += jitter;
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let tol = OFF_DIAG_TOL * norm;
    let mut converged = off_diagonal(&a, n) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, n, p, q, c, sn);
            }
        }
        converged = off_diagonal(&a, n) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&k| a[k * n + k] - jitter).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[i * n + dst] = v[i * n + src];
        }
    }
    Ok(SymmetricEigen { n, values, vectors })
}

fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    // A <- A P (columns p, q)
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    // A <- P^T A (rows p, q)
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                s[i * n + j] = x;
                s[j * n + i] = x;
            }
        }
        s
    }

    #[test]
    fn diagonal_matrix_sorted() {
        let s = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let e = symmetric_eigen(&s, 3).unwrap();
        for (v, want) in e.values.iter().zip([1.0, 2.0, 3.0]) {
            assert!((v - want).abs() < 1e-14);
        }
        assert_eq!(e.vector(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn identity_all_ones() {
        let mut s = vec![0.0; 16];
        for i in 0..4 {
            s[i * 4 + i] = 1.0;
        }
        let e = symmetric_eigen(&s, 4).unwrap();
        for v in e.values {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_matrix_exact() {
        let e = symmetric_eigen(&[0.0; 25], 5).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_small() {
        for seed in 0..5 {
            let n = 12;
            let s = random_symmetric(n, seed);
            let e = symmetric_eigen(&s, n).unwrap();
            let norm = frobenius(&s);
            for k in 0..n {
                let vk = e.vector(k);
                for i in 0..n {
                    let sv: f64 = (0..n).map(|j| s[i * n + j] * vk[j]).sum();
                    assert!((sv - e.values[k] * vk[i]).abs() <= 1e-6 * norm);
                }
            }
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn agrees_with_nalgebra() {
        let n = 9;
        let s = random_symmetric(n, 42);
        let ours = symmetric_eigen(&s, n).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(n, n, &s);
        let mut theirs: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.values.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_asymmetric_and_oversized() {
        assert!(matches!(
            symmetric_eigen(&[1.0, 2.0, 0.0, 1.0], 2),
            Err(Error::NotSymmetric(_))
        ));
        assert!(symmetric_eigen(&vec![0.0; 257 * 257], 257).is_err());
    }

    #[test]
    fn power_of_two_scaling_exact() {
        let n = 7;
        let s = random_symmetric(n, 3);
        let s4: Vec<f64> = s.iter().map(|v| v * 4.0).collect();
        let a = symmetric_eigen(&s, n).unwrap();
        let b = symmetric_eigen(&s4, n).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(x * 4.0, *y);
        }
    }
}
