//! Central finite differences against the analytic gradients of the relaxed (clipped-gate) loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsenn_core::model::{forward_with, ForwardCache, Gating};
use sparsenn_core::numerics::DenseMatrix;
use sparsenn_core::train::{backward, l1_penalty, loss_and_delta, BackwardOptions, DeltaPath, L1Target};
use sparsenn_core::{NetworkParams, NetworkSpec};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Below this magnitude both values are treated as zero; the stencil's round-off is ~1e-12.
pub const ABS_FLOOR: f64 = 1e-8;

pub struct CaseOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

fn random_params(rng: &mut ChaCha8Rng) -> (NetworkParams, Vec<f64>, usize, BackwardOptions) {
    let depth = rng.random_range(2..=3);
    let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(3..=50)).collect();
    let min_hidden = sizes[1..sizes.len() - 1].iter().copied().min().unwrap();
    let max_rank = (min_hidden.min(sizes[0]) - 1).clamp(1, 8);
    let rank = rng.random_range(1..=max_rank);
    let spec = NetworkSpec::with_hidden_predictors(sizes.clone(), rank).unwrap();
    let mut p = NetworkParams::zeros(&spec);
    for layer in &mut p.layers {
        let (m, n) = layer.w.shape();
        let s = (3.0 / n as f64).sqrt();
        layer.w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-s..s));
        if let Some(pred) = &mut layer.predictor {
            let sv = (1.0 / n as f64).sqrt();
            let su = (1.0 / rank as f64).sqrt();
            pred.u = DenseMatrix::from_fn(m, rank, |_, _| rng.random_range(-su..su));
            pred.v = DenseMatrix::from_fn(rank, n, |_, _| rng.random_range(-sv..sv));
        }
    }
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(0.0..1.0)).collect();
    let label = rng.random_range(0..*sizes.last().unwrap());
    let opts = BackwardOptions {
        l1_lambda: if rng.random_bool(0.5) { rng.random_range(0.0..0.05) } else { 0.0 },
        l1_target: if rng.random_bool(0.5) { L1Target::PenalizeAll } else { L1Target::ActiveOnly },
        delta_path: DeltaPath::Full,
    };
    (p, x, label, opts)
}

fn objective(p: &NetworkParams, x: &[f64], label: usize, opts: &BackwardOptions) -> (f64, ForwardCache) {
    let cache = forward_with(p, x, Gating::Clip).unwrap();
    let (loss, _) = loss_and_delta(cache.logits(), label).unwrap();
    (loss + l1_penalty(&cache, opts), cache)
}

/// Sign pattern of every non-differentiable point: ReLU inputs, the clip window, the mask.
fn kinks(cache: &ForwardCache) -> Vec<bool> {
    let mut out = Vec::new();
    for l in &cache.layers {
        out.extend(l.pre_activation.iter().map(|&v| v > 0.0));
        if let Some(z) = &l.scores {
            out.extend(z.iter().map(|&v| v > 0.0));
            out.extend(z.iter().map(|&v| v.abs() < 1.0));
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Target {
    W,
    U,
    V,
}

fn entry(p: &mut NetworkParams, l: usize, t: Target) -> Option<&mut DenseMatrix> {
    let layer = &mut p.layers[l];
    match t {
        Target::W => Some(&mut layer.w),
        Target::U => layer.predictor.as_mut().map(|q| &mut q.u),
        Target::V => layer.predictor.as_mut().map(|q| &mut q.v),
    }
}

pub fn check_case(seed: u64) -> CaseOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, x, label, opts) = random_params(&mut rng);
    let (_, cache) = objective(&params, &x, label, &opts);
    let base_kinks = kinks(&cache);
    let (_, delta) = loss_and_delta(cache.logits(), label).unwrap();
    let grads = backward(&params, &cache, &delta, &opts).unwrap();
    let mut out = CaseOutcome { checked: 0, skipped: 0, worst_rel: 0.0, failures: Vec::new() };
    for l in 0..params.num_layers() {
        for t in [Target::W, Target::U, Target::V] {
            let analytic = match t {
                Target::W => Some(&grads.layers[l].dw),
                Target::U => grads.layers[l].du.as_ref(),
                Target::V => grads.layers[l].dv.as_ref(),
            };
            let Some(analytic) = analytic else { continue };
            let (rows, cols) = analytic.shape();
            for i in 0..rows {
                for j in 0..cols {
                    // Fourth-order central stencil over +-h, +-2h.
                    let mut vals = [0.0; 4];
                    let mut crossed = false;
                    for (k, off) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                        let mut q = params.clone();
                        entry(&mut q, l, t).unwrap()[(i, j)] += off * FD_STEP;
                        let (f, c) = objective(&q, &x, label, &opts);
                        crossed |= kinks(&c) != base_kinks;
                        vals[k] = f;
                    }
                    if crossed {
                        out.skipped += 1;
                        continue;
                    }
                    let fd = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * FD_STEP);
                    let a = analytic[(i, j)];
                    let scale = a.abs().max(fd.abs());
                    out.checked += 1;
                    if scale < ABS_FLOOR {
                        continue;
                    }
                    let rel = (a - fd).abs() / scale;
                    out.worst_rel = out.worst_rel.max(rel);
                    if rel > REL_TOL {
                        let name = ["W", "U", "V"][t as usize];
                        out.failures.push(format!("seed {seed} layer {l} d{name}[{i},{j}]: analytic {a:e} fd {fd:e}"));
                    }
                }
            }
        }
    }
    out
}
