//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the truncated factorization used as the
//! static predictor baseline.

use super::TrainError;
use crate::numerics::{dot, DenseMatrix};

/// Relative off-diagonal tolerance for convergence.
pub const JACOBI_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100;

/// `W = U diag(sigma) Vᵀ` with `k = min(m, n)` singular triplets in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x k`, orthonormal columns.
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    /// `k x n`, orthonormal rows.
    pub vt: DenseMatrix,
    pub sweeps: usize,
}

/// Orthogonalizes the columns of `cols` in place, accumulating the rotations into `basis`.
fn hestenes(cols: &mut [Vec<f64>], basis: &mut [Vec<f64>]) -> Result<usize, TrainError> {
    let k = cols.len();
    for sweep in 1..=MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..k {
            for j in i + 1..k {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, i, j, c, s);
                rotate(basis, i, j, c, s);
            }
        }
        if !rotated {
            return Ok(sweep);
        }
    }
    Err(TrainError::NoConvergence { sweeps: MAX_SWEEPS })
}

fn rotate(vs: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

pub fn svd(w: &DenseMatrix) -> Result<Svd, TrainError> {
    let (m, n) = w.shape();
    // Rotate the columns of whichever orientation has fewer of them.
    let tall = m >= n;
    let a = if tall { w.clone() } else { w.transpose() };
    let (rows, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut basis: Vec<Vec<f64>> = (0..k).map(|j| (0..k).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    let sweeps = hestenes(&mut cols, &mut basis)?;

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    // For the tall case `A = (cols/σ) σ basisᵀ`; transposed, the roles of the two bases swap.
    let mut left = DenseMatrix::zeros(if tall { rows } else { k }, k);
    let mut right_t = DenseMatrix::zeros(k, if tall { k } else { rows });
    let mut sigma = Vec::with_capacity(k);
    for (out, &(s, j)) in order.iter().enumerate() {
        let normalized: Vec<f64> = cols[j].iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect();
        let (lvec, rvec) = if tall { (&normalized, &basis[j]) } else { (&basis[j], &normalized) };
        // Sign convention: the largest-magnitude entry of each right vector is positive.
        let pivot = rvec.iter().fold(0.0f64, |p, &v| if v.abs() > p.abs() { v } else { p });
        let flip = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in lvec.iter().enumerate() {
            left[(i, out)] = flip * v;
        }
        right_t.row_mut(out).iter_mut().zip(rvec).for_each(|(d, v)| *d = flip * v);
        sigma.push(s);
    }
    Ok(Svd { u: left, sigma, vt: right_t, sweeps })
}

/// Rank-`r` factors `(U_r Σ_r, V_rᵀ)` whose product is the best rank-`r` approximation of `w`.
pub fn truncated_svd(w: &DenseMatrix, r: usize) -> Result<(DenseMatrix, DenseMatrix), TrainError> {
    let (m, n) = w.shape();
    if r == 0 || r >= m.min(n) {
        return Err(TrainError::InvalidRank { rank: r, rows: m, cols: n });
    }
    let full = svd(w)?;
    let u = DenseMatrix::from_fn(m, r, |i, j| full.u[(i, j)] * full.sigma[j]);
    let v = DenseMatrix::from_fn(r, n, |i, j| full.vt[(i, j)]);
    Ok((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn residual(w: &DenseMatrix, u: &DenseMatrix, v: &DenseMatrix) -> f64 {
        let mut diff = w.clone();
        diff.add_scaled(-1.0, &u.matmul(v));
        diff.frobenius_norm()
    }

    #[test]
    fn rank_one_is_exact() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.3, 0.7, -1.1];
        let w = DenseMatrix::from_fn(4, 3, |i, j| a[i] * b[j]);
        let (u, v) = truncated_svd(&w, 1).unwrap();
        assert!(residual(&w, &u, &v) < 1e-8);
    }

    #[test]
    fn reconstructs_full_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n) in [(6, 4), (4, 6), (5, 5)] {
            let w = random(&mut rng, m, n);
            let s = svd(&w).unwrap();
            let k = m.min(n);
            let us = DenseMatrix::from_fn(m, k, |i, j| s.u[(i, j)] * s.sigma[j]);
            assert!(residual(&w, &us, &s.vt) < 1e-10);
            assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (m, n, r) in [(20, 12, 5), (9, 30, 4)] {
            let w = random(&mut rng, m, n);
            let (u, v) = truncated_svd(&w, r).unwrap();
            let utu = u.transpose().matmul(&u);
            let vvt = v.matmul(&v.transpose());
            for i in 0..r {
                for j in 0..r {
                    if i != j {
                        assert!(utu[(i, j)].abs() < 1e-8);
                    }
                    let id = if i == j { 1.0 } else { 0.0 };
                    assert!((vvt[(i, j)] - id).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn error_non_increasing_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 12, 10);
        let errs: Vec<f64> = (1..10)
            .map(|r| {
                let (u, v) = truncated_svd(&w, r).unwrap();
                residual(&w, &u, &v)
            })
            .collect();
        assert!(errs.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }

    #[test]
    fn invalid_rank() {
        let w = DenseMatrix::identity(3);
        assert!(matches!(truncated_svd(&w, 3), Err(TrainError::InvalidRank { .. })));
        assert!(matches!(truncated_svd(&w, 0), Err(TrainError::InvalidRank { .. })));
    }
}
