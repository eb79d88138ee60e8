//! Network definition and the float forward passes.
//!
//! Layer `l` maps `n_l` inputs to `n_{l+1}` outputs through `W^(l)` (shape `n_{l+1} x n_l`).
//! Hidden layers apply ReLU; the final layer emits raw logits. A hidden layer may carry a
//! low-rank predictor `(U, V)`; the predicted mask `p = [U (V a) > 0]` zeroes the outputs it
//! predicts inactive.

pub mod fx;

use crate::numerics::{DenseMatrix, NumericsError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape { what: String, expected: (usize, usize), got: (usize, usize) },
    #[error("input length {got} does not match layer width {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Layer widths plus which layers carry a rank-`rank` predictor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub rank: usize,
    pub predictor_layers: BTreeSet<usize>,
}

impl NetworkSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        rank: usize,
        predictor_layers: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ModelError> {
        let spec = Self { layer_sizes, rank, predictor_layers: predictor_layers.into_iter().collect() };
        spec.validate()?;
        Ok(spec)
    }

    /// Predictors on every hidden layer.
    pub fn with_hidden_predictors(layer_sizes: Vec<usize>, rank: usize) -> Result<Self, ModelError> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self::new(layer_sizes, rank, 0..hidden)
    }

    /// No predictors at all.
    pub fn dense(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        Self::new(layer_sizes, 1, [])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::InvalidSpec("need at least input and output widths".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::InvalidSpec("layer widths must be positive".into()));
        }
        let last = self.num_layers() - 1;
        for &l in &self.predictor_layers {
            if l >= last {
                return Err(ModelError::InvalidSpec(format!(
                    "layer {l} cannot carry a predictor (final layer is {last})"
                )));
            }
            let (m, n) = self.layer_shape(l);
            if self.rank == 0 || self.rank >= m.min(n) {
                return Err(ModelError::InvalidSpec(format!(
                    "rank {} must be in [1, min({m}, {n})) for layer {l}",
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(outputs, inputs)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    pub fn has_predictor(&self, l: usize) -> bool {
        self.predictor_layers.contains(&l)
    }

    pub fn is_final(&self, l: usize) -> bool {
        l + 1 == self.num_layers()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    /// `m x r`
    pub u: DenseMatrix,
    /// `r x n`
    pub v: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: DenseMatrix,
    pub predictor: Option<Predictor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    /// All-zero parameters shaped after `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (m, n) = spec.layer_shape(l);
                LayerParams {
                    w: DenseMatrix::zeros(m, n),
                    predictor: spec.has_predictor(l).then(|| Predictor {
                        u: DenseMatrix::zeros(m, spec.rank),
                        v: DenseMatrix::zeros(spec.rank, n),
                    }),
                }
            })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    /// Checks every tensor against the spec.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.num_layers() {
            return Err(ModelError::InvalidSpec(format!(
                "{} layers stored, spec has {}",
                self.layers.len(),
                self.spec.num_layers()
            )));
        }
        let r = self.spec.rank;
        for (l, layer) in self.layers.iter().enumerate() {
            let (m, n) = self.spec.layer_shape(l);
            expect_shape(&format!("W[{l}]"), &layer.w, (m, n))?;
            match (&layer.predictor, self.spec.has_predictor(l)) {
                (Some(p), true) => {
                    expect_shape(&format!("U[{l}]"), &p.u, (m, r))?;
                    expect_shape(&format!("V[{l}]"), &p.v, (r, n))?;
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(ModelError::InvalidSpec(format!("layer {l} has an unexpected predictor")))
                }
                (None, true) => {
                    return Err(ModelError::InvalidSpec(format!("layer {l} is missing its predictor")))
                }
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.is_finite() && l.predictor.as_ref().is_none_or(|p| p.u.is_finite() && p.v.is_finite())
        })
    }
}

fn expect_shape(what: &str, m: &DenseMatrix, expected: (usize, usize)) -> Result<(), ModelError> {
    if m.shape() != expected {
        return Err(ModelError::Shape { what: what.to_string(), expected, got: m.shape() });
    }
    Ok(())
}

/// Predicted-active output neurons of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictorMask {
    pub bits: Vec<bool>,
}

impl PredictorMask {
    pub fn all_ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of neurons predicted inactive.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        (self.len() - self.popcount()) as f64 / self.len() as f64
    }
}

/// How a predicted layer gates its ReLU output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gating {
    /// Ignore predictors.
    Off,
    /// Binary mask `[z > 0]`.
    Sign,
    /// Continuous surrogate `clip(z, -1, 1)`; differentiable almost everywhere.
    Clip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    /// `a^(l)`
    pub input: Vec<f64>,
    /// `W a`
    pub pre_activation: Vec<f64>,
    /// `ReLU(W a)` on hidden layers, `W a` on the final layer.
    pub a_ori: Vec<f64>,
    /// `V a`
    pub va: Option<Vec<f64>>,
    /// `z = U (V a)`
    pub scores: Option<Vec<f64>>,
    /// Multiplier applied to `a_ori`: the 0/1 mask or its clipped surrogate.
    pub gate: Option<Vec<f64>>,
    pub mask: Option<PredictorMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub gating: Gating,
    pub layers: Vec<LayerCache>,
    /// Activations leaving each layer; the last entry is the logits.
    pub outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().expect("forward cache without layers")
    }

    /// Predicted sparsity per layer, `None` for layers that were not gated.
    pub fn mask_sparsity(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|l| l.mask.as_ref().map(PredictorMask::sparsity)).collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.logits())
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `z = U (V a)`, evaluated as two matrix-vector products.
pub fn predictor_scores(u: &DenseMatrix, v: &DenseMatrix, a: &[f64]) -> Result<Vec<f64>, ModelError> {
    if u.cols() != v.rows() {
        return Err(ModelError::Shape {
            what: "U columns vs V rows".into(),
            expected: (u.rows(), v.rows()),
            got: u.shape(),
        });
    }
    if a.len() != v.cols() {
        return Err(ModelError::InputLength { expected: v.cols(), got: a.len() });
    }
    Ok(u.matvec(&v.matvec(a)))
}

/// Bit `j` is set iff `z_j > 0`; a zero score predicts inactive.
pub fn predict_mask(z: &[f64]) -> PredictorMask {
    PredictorMask { bits: z.iter().map(|&s| s > 0.0).collect() }
}

pub fn forward_dense(params: &NetworkParams, x: &[f64]) -> Result<ForwardCache, ModelError> {
    forward_with(params, x, Gating::Off)
}

pub fn forward_gated(params: &NetworkParams, x: &[f64]) -> Result<ForwardCache, ModelError> {
    forward_with(params, x, Gating::Sign)
}

pub fn forward_with(params: &NetworkParams, x: &[f64], gating: Gating) -> Result<ForwardCache, ModelError> {
    let input_width = params.spec.layer_sizes[0];
    if x.len() != input_width {
        return Err(ModelError::InputLength { expected: input_width, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let last = params.num_layers() - 1;
    let mut layers = Vec::with_capacity(params.num_layers());
    let mut outputs = Vec::with_capacity(params.num_layers());
    let mut a = x.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let pre = layer.w.matvec(&a);
        let mut cache = LayerCache {
            input: a,
            a_ori: if l == last { pre.clone() } else { pre.iter().copied().map(relu).collect() },
            pre_activation: pre,
            va: None,
            scores: None,
            gate: None,
            mask: None,
        };
        let out = match (&layer.predictor, gating) {
            (Some(p), Gating::Sign | Gating::Clip) if l != last => {
                let va = p.v.matvec(&cache.input);
                let z = p.u.matvec(&va);
                let gate: Vec<f64> = match gating {
                    Gating::Clip => z.iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
                    _ => z.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect(),
                };
                let out = gate.iter().zip(&cache.a_ori).map(|(g, a)| g * a).collect();
                cache.mask = Some(predict_mask(&z));
                cache.va = Some(va);
                cache.scores = Some(z);
                cache.gate = Some(gate);
                out
            }
            _ => cache.a_ori.clone(),
        };
        a = out;
        outputs.push(a.clone());
        layers.push(cache);
    }
    Ok(ForwardCache { gating, layers, outputs })
}
