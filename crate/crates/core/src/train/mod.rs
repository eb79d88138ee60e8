//! End-to-end predictor training.
//!
//! The binary mask `[z > 0]` has zero derivative almost everywhere, so backpropagation through
//! it uses the straight-through estimator: the gradient reaching the scores `z = U V a` is passed
//! through wherever `|z| < 1` and blocked elsewhere. An ℓ1 term on the mask pushes scores inside
//! that window downward, trading accuracy for predicted sparsity.

mod svd;

pub use svd::{svd, truncated_svd, Svd, JACOBI_TOL, MAX_SWEEPS};

use crate::data::Dataset;
use crate::model::{forward_with, ForwardCache, Gating, ModelError, NetworkParams, NetworkSpec, Predictor};
use crate::numerics::{DenseMatrix, NumericsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("rank {rank} must be in [1, min({rows}, {cols}))")]
    InvalidRank { rank: usize, rows: usize, cols: usize },
    #[error("jacobi SVD did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("training diverged in epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, report: Box<TrainReport> },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has dimension {got}, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the predictor is obtained during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// `U`, `V` trained jointly with `W` through the straight-through estimator.
    EndToEnd,
    /// `U`, `V` re-derived from the truncated SVD of `W` once per epoch.
    SvdStatic,
    /// No predictor: plain backpropagation and dense inference.
    None,
}

impl PredictorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictorMode::EndToEnd => "end_to_end",
            PredictorMode::SvdStatic => "svd_static",
            PredictorMode::None => "none",
        }
    }

    pub fn gating(self) -> Gating {
        match self {
            PredictorMode::None => Gating::Off,
            _ => Gating::Sign,
        }
    }
}

impl std::str::FromStr for PredictorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "end_to_end" => Ok(Self::EndToEnd),
            "svd_static" => Ok(Self::SvdStatic),
            "none" => Ok(Self::None),
            other => Err(format!("unknown predictor mode `{other}` (end_to_end, svd_static, none)")),
        }
    }
}

/// Which units receive the ℓ1 push.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Target {
    /// Every unit inside the straight-through window.
    #[default]
    PenalizeAll,
    /// Only units currently predicted active.
    ActiveOnly,
}

/// Terms propagated into `∂ℓ/∂a^(l)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPath {
    /// `Wᵀ γ` only.
    #[default]
    WeightOnly,
    /// `Wᵀ γ + Vᵀ Uᵀ θ`, the complete chain rule.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardOptions {
    pub l1_lambda: f64,
    pub l1_target: L1Target,
    pub delta_path: DeltaPath,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { l1_lambda: 0.0, l1_target: L1Target::PenalizeAll, delta_path: DeltaPath::WeightOnly }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub l1_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub predictor_mode: PredictorMode,
    #[serde(default)]
    pub l1_target: L1Target,
    #[serde(default)]
    pub delta_path: DeltaPath,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l1_lambda: 0.0,
            epochs: 10,
            batch_size: 100,
            seed: 0,
            predictor_mode: PredictorMode::EndToEnd,
            l1_target: L1Target::PenalizeAll,
            delta_path: DeltaPath::WeightOnly,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyper(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return Err(TrainError::InvalidHyper(format!("l1 lambda {} must be >= 0", self.l1_lambda)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidHyper("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn backward_options(&self) -> BackwardOptions {
        BackwardOptions { l1_lambda: self.l1_lambda, l1_target: self.l1_target, delta_path: self.delta_path }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub dw: DenseMatrix,
    pub du: Option<DenseMatrix>,
    pub dv: Option<DenseMatrix>,
    /// `∂ℓ/∂a^(l+1)` arriving at this layer's output.
    pub delta: Vec<f64>,
    /// `∂ℓ/∂(W a)`
    pub gamma: Vec<f64>,
    /// `∂ℓ/∂(U V a)` (gated layers only).
    pub theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let (m, n) = l.w.shape();
                LayerGrads {
                    dw: DenseMatrix::zeros(m, n),
                    du: l.predictor.as_ref().map(|p| DenseMatrix::zeros(p.u.rows(), p.u.cols())),
                    dv: l.predictor.as_ref().map(|p| DenseMatrix::zeros(p.v.rows(), p.v.cols())),
                    delta: vec![0.0; m],
                    gamma: vec![0.0; m],
                    theta: None,
                }
            })
            .collect();
        Self { layers }
    }

    /// `self += alpha * other` on the parameter gradients.
    pub fn accumulate(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.dw.add_scaled(alpha, &b.dw);
            if let (Some(x), Some(y)) = (&mut a.du, &b.du) {
                x.add_scaled(alpha, y);
            }
            if let (Some(x), Some(y)) = (&mut a.dv, &b.dv) {
                x.add_scaled(alpha, y);
            }
        }
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn loss_and_delta(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), TrainError> {
    if label >= logits.len() {
        return Err(TrainError::LabelOutOfRange { label, classes: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    delta[label] -= 1.0;
    Ok((loss, delta))
}

/// ℓ1 contribution of one gated layer for the value reported in the loss.
pub fn l1_penalty(cache: &ForwardCache, opts: &BackwardOptions) -> f64 {
    if opts.l1_lambda == 0.0 {
        return 0.0;
    }
    cache
        .layers
        .iter()
        .filter_map(|l| l.gate.as_ref().zip(l.mask.as_ref()))
        .map(|(gate, mask)| match opts.l1_target {
            L1Target::PenalizeAll => gate.iter().sum::<f64>(),
            L1Target::ActiveOnly => gate.iter().zip(&mask.bits).filter(|(_, &b)| b).map(|(g, _)| g).sum(),
        })
        .sum::<f64>()
        * opts.l1_lambda
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<(), TrainError> {
    if v.len() != expected {
        return Err(TrainError::StaleCache(format!("{what} has length {}, expected {expected}", v.len())));
    }
    Ok(())
}

/// Gradients of one sample from a cache produced by `forward_with` on the same parameters.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    delta_out: &[f64],
    opts: &BackwardOptions,
) -> Result<Gradients, TrainError> {
    if cache.layers.len() != params.num_layers() {
        return Err(TrainError::StaleCache(format!(
            "{} cached layers for {} parameter layers",
            cache.layers.len(),
            params.num_layers()
        )));
    }
    let mut grads: Vec<Option<LayerGrads>> = vec![None; params.num_layers()];
    let mut delta = delta_out.to_vec();
    for l in (0..params.num_layers()).rev() {
        let layer = &params.layers[l];
        let lc = &cache.layers[l];
        let (m, n) = layer.w.shape();
        check_len("delta", &delta, m)?;
        check_len("cached input", &lc.input, n)?;
        check_len("cached pre-activation", &lc.pre_activation, m)?;
        let is_final = l + 1 == params.num_layers();

        let mut theta = None;
        let mut du = None;
        let mut dv = None;
        let gamma: Vec<f64> = match (&lc.gate, &layer.predictor) {
            (Some(gate), Some(pred)) if !is_final => {
                let z = lc.scores.as_ref().ok_or_else(|| TrainError::StaleCache("gate without scores".into()))?;
                let va = lc.va.as_ref().ok_or_else(|| TrainError::StaleCache("gate without V a".into()))?;
                let mask = lc.mask.as_ref().ok_or_else(|| TrainError::StaleCache("gate without mask".into()))?;
                check_len("gate", gate, m)?;
                check_len("cached V a", va, pred.v.rows())?;
                // ∂ℓ/∂p = δ ∘ a_ori + λ sign(p), restricted to the STE window |z| < 1
                let th: Vec<f64> = (0..m)
                    .map(|j| {
                        if z[j].abs() >= 1.0 {
                            return 0.0;
                        }
                        let penalty = match opts.l1_target {
                            L1Target::PenalizeAll => opts.l1_lambda,
                            L1Target::ActiveOnly if mask.bits[j] => opts.l1_lambda,
                            L1Target::ActiveOnly => 0.0,
                        };
                        delta[j] * lc.a_ori[j] + penalty
                    })
                    .collect();
                let ut_theta = pred.u.matvec_t(&th);
                let mut g_u = DenseMatrix::zeros(pred.u.rows(), pred.u.cols());
                g_u.add_outer(1.0, &th, va);
                let mut g_v = DenseMatrix::zeros(pred.v.rows(), pred.v.cols());
                g_v.add_outer(1.0, &ut_theta, &lc.input);
                du = Some(g_u);
                dv = Some(g_v);
                theta = Some((th, ut_theta));
                // ∂ℓ/∂a_ori = δ ∘ p, then through ReLU
                (0..m)
                    .map(|j| if lc.pre_activation[j] > 0.0 { delta[j] * gate[j] } else { 0.0 })
                    .collect()
            }
            _ if is_final => delta.clone(),
            _ => (0..m).map(|j| if lc.pre_activation[j] > 0.0 { delta[j] } else { 0.0 }).collect(),
        };

        let mut dw = DenseMatrix::zeros(m, n);
        dw.add_outer(1.0, &gamma, &lc.input);
        let next_delta = (l > 0).then(|| {
            let mut d = layer.w.matvec_t(&gamma);
            if let (DeltaPath::Full, Some((_, ut_theta)), Some(pred)) = (opts.delta_path, &theta, &layer.predictor) {
                let extra = pred.v.matvec_t(ut_theta);
                d.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            }
            d
        });
        grads[l] = Some(LayerGrads { dw, du, dv, delta, gamma, theta: theta.map(|t| t.0) });
        delta = next_delta.unwrap_or_default();
    }
    Ok(Gradients { layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect() })
}

/// `params -= eta * grads`.
pub fn sgd_step(params: &mut NetworkParams, grads: &Gradients, eta: f64) {
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        layer.w.add_scaled(-eta, &g.dw);
        if let Some(pred) = &mut layer.predictor {
            if let Some(du) = &g.du {
                pred.u.add_scaled(-eta, du);
            }
            if let Some(dv) = &g.dv {
                pred.v.add_scaled(-eta, dv);
            }
        }
    }
}

/// Glorot-uniform weights; predictors start from the truncated SVD of their layer's weights.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, TrainError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(spec);
    for layer in &mut params.layers {
        let (m, n) = layer.w.shape();
        let limit = (6.0 / (m + n) as f64).sqrt();
        layer.w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-limit..limit));
    }
    refresh_svd_predictors(&mut params)?;
    Ok(params)
}

/// Replaces every predictor with the truncated SVD of its layer's weights.
pub fn refresh_svd_predictors(params: &mut NetworkParams) -> Result<(), TrainError> {
    let rank = params.spec.rank;
    for layer in &mut params.layers {
        if let Some(pred) = &mut layer.predictor {
            let (u, v) = truncated_svd(&layer.w, rank)?;
            *pred = Predictor { u, v };
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Test error rate in percent.
    pub ter: f64,
    /// Mean predicted sparsity per predicted layer; absent without a predictor.
    pub rho: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub predictor_mode: PredictorMode,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ter: f64,
    pub rho: Option<Vec<f64>>,
}

fn check_dataset(params: &NetworkParams, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let expected = params.spec.layer_sizes[0];
    if data.dim != expected {
        return Err(TrainError::DimensionMismatch { expected, got: data.dim });
    }
    let classes = *params.spec.layer_sizes.last().expect("validated spec");
    if let Some(&label) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Test error rate (%) and mean predicted sparsity per predicted layer.
pub fn evaluate(params: &NetworkParams, data: &Dataset, mode: PredictorMode) -> Result<Evaluation, TrainError> {
    check_dataset(params, data)?;
    let gating = mode.gating();
    let predicted: Vec<usize> = params.spec.predictor_layers.iter().copied().collect();
    let mut wrong = 0usize;
    let mut rho_sum = vec![0.0; predicted.len()];
    for (x, label) in data.iter() {
        let cache = forward_with(params, x, gating)?;
        if cache.predicted_class() != label {
            wrong += 1;
        }
        for (sum, &l) in rho_sum.iter_mut().zip(&predicted) {
            if let Some(mask) = &cache.layers[l].mask {
                *sum += mask.sparsity();
            }
        }
    }
    let n = data.len() as f64;
    let rho = (gating != Gating::Off && !predicted.is_empty()).then(|| rho_sum.iter().map(|s| s / n).collect());
    Ok(Evaluation { ter: 100.0 * wrong as f64 / n, rho })
}

/// Minibatch SGD with batch-averaged gradients. Deterministic for a fixed seed.
///
/// Metrics are computed on `eval` when given, otherwise on the training set.
pub fn train(
    params: &mut NetworkParams,
    data: &Dataset,
    eval: Option<&Dataset>,
    hyper: &HyperParams,
) -> Result<TrainReport, TrainError> {
    hyper.validate()?;
    params.validate()?;
    check_dataset(params, data)?;
    let eval = eval.unwrap_or(data);
    let mut report = TrainReport { predictor_mode: hyper.predictor_mode, epochs: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let opts = hyper.backward_options();
    let gating = hyper.predictor_mode.gating();
    for epoch in 0..hyper.epochs {
        let mut loss_sum = 0.0;
        for batch in data.shuffled_batches(hyper.batch_size, &mut rng) {
            let mut acc = Gradients::zeros_like(params);
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let cache = forward_with(params, data.sample(i), gating)?;
                let (loss, delta) = match loss_and_delta(cache.logits(), data.labels[i]) {
                    Ok(v) => v,
                    Err(TrainError::NonFiniteLogits) => {
                        return Err(TrainError::Diverged { epoch, report: Box::new(report) })
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += loss + l1_penalty(&cache, &opts);
                let g = backward(params, &cache, &delta, &opts)?;
                acc.accumulate(scale, &g);
            }
            if hyper.predictor_mode != PredictorMode::EndToEnd {
                for g in &mut acc.layers {
                    g.du = None;
                    g.dv = None;
                }
            }
            sgd_step(params, &acc, hyper.learning_rate);
        }
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() || !params.is_finite() {
            return Err(TrainError::Diverged { epoch, report: Box::new(report) });
        }
        if hyper.predictor_mode == PredictorMode::SvdStatic {
            refresh_svd_predictors(params)?;
        }
        let ev = evaluate(params, eval, hyper.predictor_mode)?;
        log::info!("epoch {epoch}: loss {loss:.4} ter {:.2}% rho {:?}", ev.ter, ev.rho);
        report.epochs.push(EpochRecord { epoch, loss, ter: ev.ter, rho: ev.rho });
    }
    Ok(report)
}
