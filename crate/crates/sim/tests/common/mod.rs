#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenn_core::model::fx::{FxLayer, FxMatrix, FxPredictor, FxVector, QuantizedNetwork};
use sparsenn_core::numerics::QFormat;
use sparsenn_core::NetworkSpec;

pub fn q(f: u32) -> QFormat {
    QFormat::new(f).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, span: i16, frac: u32) -> FxMatrix {
    let codes = (0..rows * cols).map(|_| rng.random_range(-span..=span)).collect();
    FxMatrix { rows, cols, codes, format: q(frac) }
}

/// Random code-level network with predictors on every hidden layer.
pub fn random_net(rng: &mut ChaCha8Rng, sizes: &[usize], rank: usize) -> QuantizedNetwork {
    let spec = NetworkSpec::with_hidden_predictors(sizes.to_vec(), rank).unwrap();
    let layers = (0..sizes.len() - 1)
        .map(|l| {
            let (n, m) = (sizes[l], sizes[l + 1]);
            let hidden = l + 2 < sizes.len();
            FxLayer {
                w: random_matrix(rng, m, n, 700, 10),
                predictor: hidden.then(|| FxPredictor {
                    u: random_matrix(rng, m, rank, 900, 9),
                    v: random_matrix(rng, rank, n, 500, 10),
                    va_format: q(rng.random_range(5..=9)),
                }),
                out_format: q(rng.random_range(5..=10)),
            }
        })
        .collect();
    QuantizedNetwork { spec, input_format: q(8), layers }
}

pub fn random_input(rng: &mut ChaCha8Rng, n: usize, zero_fraction: f64) -> FxVector {
    let codes = (0..n).map(|_| if rng.random_bool(zero_fraction) { 0 } else { rng.random_range(-300..=300) }).collect();
    FxVector { codes, format: q(8) }
}

/// A small random case: (net, input). Widths cover partially filled PE arrays.
pub fn random_case(seed: u64, max_width: usize) -> (QuantizedNetwork, FxVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(3..=max_width)).collect();
    let rank = rng.random_range(1..=sizes.iter().min().copied().unwrap().saturating_sub(1).clamp(1, 6));
    let net = random_net(&mut rng, &sizes, rank);
    let zf = rng.random_range(0.0..0.8);
    let x = random_input(&mut rng, sizes[0], zf);
    (net, x)
}
