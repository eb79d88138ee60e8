//! Singular values of 3x3 matrices from the characteristic polynomial of `WᵀW`, and the
//! Eckart-Young optimal truncation error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenn_core::numerics::DenseMatrix;
use sparsenn_core::train::{svd, truncated_svd};

pub const TOL: f64 = 1e-8;

/// Roots of `det(A - λI)` for symmetric 3x3 `A`, descending (trigonometric form of the cubic).
pub fn symmetric_eigenvalues_3x3(a: &DenseMatrix) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = (a[(0, 0)] + a[(1, 1)] + a[(2, 2)]) / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    let b = DenseMatrix::from_fn(3, 3, |i, j| (a[(i, j)] - if i == j { q } else { 0.0 }) / p);
    let det = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
        - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
        + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}

fn residual(w: &DenseMatrix, u: &DenseMatrix, v: &DenseMatrix) -> f64 {
    let mut d = w.clone();
    d.add_scaled(-1.0, &u.matmul(v));
    d.frobenius_norm()
}

pub struct SvdOutcome {
    /// Largest singular-value disagreement with the polynomial roots (3x3 cases).
    pub sigma_err: f64,
    /// Largest gap between achieved and optimal truncation error.
    pub eckart_young_err: f64,
    /// Largest deviation of `UᵀU` (columns normalized) and `VVᵀ` from the identity.
    pub ortho_err: f64,
}

pub fn run(seed: u64, cases: usize) -> SvdOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SvdOutcome { sigma_err: 0.0, eckart_young_err: 0.0, ortho_err: 0.0 };
    for _ in 0..cases {
        let w = random_matrix(&mut rng, 3, 3);
        let roots = symmetric_eigenvalues_3x3(&w.transpose().matmul(&w));
        let s = svd(&w).unwrap();
        for (sig, lam) in s.sigma.iter().zip(roots) {
            out.sigma_err = out.sigma_err.max((sig - lam.max(0.0).sqrt()).abs());
        }
        for r in 1..3 {
            let (u, v) = truncated_svd(&w, r).unwrap();
            let opt: f64 = roots[r..].iter().map(|l| l.max(0.0)).sum::<f64>().sqrt();
            out.eckart_young_err = out.eckart_young_err.max((residual(&w, &u, &v) - opt).abs());
        }
    }
    for _ in 0..cases {
        let m = rng.random_range(4..=30);
        let n = rng.random_range(4..=30);
        let w = random_matrix(&mut rng, m, n);
        let s = svd(&w).unwrap();
        let k = m.min(n);
        let r = rng.random_range(1..k);
        let (u, v) = truncated_svd(&w, r).unwrap();
        let opt: f64 = s.sigma[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        out.eckart_young_err = out.eckart_young_err.max((residual(&w, &u, &v) - opt).abs());
        let utu = s.u.transpose().matmul(&s.u);
        let vvt = s.vt.matmul(&s.vt.transpose());
        for (g, dim) in [(utu, k), (vvt, k)] {
            for i in 0..dim {
                for j in 0..dim {
                    let id = if i == j { 1.0 } else { 0.0 };
                    out.ortho_err = out.ortho_err.max((g[(i, j)] - id).abs());
                }
            }
        }
    }
    out
}
