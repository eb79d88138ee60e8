//! Fixed-point twin of a network and the bit-exact golden forward pass.
//!
//! The golden pass fixes what a correct accelerator must produce: every neuron is one exact
//! [`WideAccumulator`] followed by a single requantization, and predictor bits come from the sign
//! of the exact `U (V a)` accumulator.

use super::{forward_dense, forward_gated, ModelError, NetworkParams, NetworkSpec, PredictorMask};
use crate::numerics::{
    dot_codes, format_for_magnitude, quantize_counted, requantize_code, DenseMatrix, QFormat,
    SaturationCounter, WideAccumulator,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxVector {
    pub codes: Vec<i16>,
    pub format: QFormat,
}

impl FxVector {
    pub fn zeros(len: usize, format: QFormat) -> Self {
        Self { codes: vec![0; len], format }
    }

    pub fn quantize(values: &[f64], format: QFormat, sat: &mut SaturationCounter) -> Self {
        let codes = values.iter().map(|&v| quantize_counted(v, format, sat).code).collect();
        Self { codes, format }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let lsb = self.format.lsb();
        self.codes.iter().map(|&c| f64::from(c) * lsb).collect()
    }

    pub fn nonzero_count(&self) -> usize {
        self.codes.iter().filter(|&&c| c != 0).count()
    }
}

/// Row-major matrix of 16-bit codes sharing one format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i16>,
    pub format: QFormat,
}

impl FxMatrix {
    pub fn quantize(m: &DenseMatrix, format: QFormat, sat: &mut SaturationCounter) -> Self {
        let codes = m.as_slice().iter().map(|&v| quantize_counted(v, format, sat).code).collect();
        Self { rows: m.rows(), cols: m.cols(), codes, format }
    }

    /// Quantizes with a format calibrated to the tensor's own range.
    pub fn calibrated(m: &DenseMatrix, sat: &mut SaturationCounter) -> Self {
        Self::quantize(m, format_for_magnitude(m.max_abs()), sat)
    }

    pub fn row(&self, i: usize) -> &[i16] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> i16 {
        self.codes[i * self.cols + j]
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let lsb = self.format.lsb();
        DenseMatrix::from_vec(self.rows, self.cols, self.codes.iter().map(|&c| f64::from(c) * lsb).collect())
            .expect("fixed-point matrix has positive dimensions")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxPredictor {
    pub u: FxMatrix,
    pub v: FxMatrix,
    /// Format of the requantized `V a` vector broadcast to every PE.
    pub va_format: QFormat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxLayer {
    pub w: FxMatrix,
    pub predictor: Option<FxPredictor>,
    pub out_format: QFormat,
}

impl FxLayer {
    /// Accumulator scale of `W a` for an input in `input_format`.
    pub fn w_accumulator(&self, input_format: QFormat) -> WideAccumulator {
        WideAccumulator::for_product(self.w.format, input_format)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub spec: NetworkSpec,
    pub input_format: QFormat,
    pub layers: Vec<FxLayer>,
}

impl QuantizedNetwork {
    /// Format of the activations entering layer `l`.
    pub fn layer_input_format(&self, l: usize) -> QFormat {
        if l == 0 {
            self.input_format
        } else {
            self.layers[l - 1].out_format
        }
    }

    pub fn quantize_input(&self, x: &[f64], sat: &mut SaturationCounter) -> Result<FxVector, ModelError> {
        let width = self.spec.layer_sizes[0];
        if x.len() != width {
            return Err(ModelError::InputLength { expected: width, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(FxVector::quantize(x, self.input_format, sat))
    }
}

/// Quantizes `params`, calibrating per-tensor weight formats from their ranges and activation
/// formats from float forward passes (gated and dense) over `calibration` inputs.
pub fn quantize_network<'a>(
    params: &NetworkParams,
    calibration: impl IntoIterator<Item = &'a [f64]>,
    sat: &mut SaturationCounter,
) -> Result<QuantizedNetwork, ModelError> {
    params.validate()?;
    let n_layers = params.num_layers();
    let mut input_max = 0.0f64;
    let mut out_max = vec![0.0f64; n_layers];
    let mut va_max = vec![0.0f64; n_layers];
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut seen = 0usize;
    for x in calibration {
        seen += 1;
        input_max = input_max.max(max_abs(x));
        for cache in [forward_gated(params, x)?, forward_dense(params, x)?] {
            for (l, layer) in cache.layers.iter().enumerate() {
                out_max[l] = out_max[l].max(max_abs(&layer.a_ori));
                if let Some(va) = &layer.va {
                    va_max[l] = va_max[l].max(max_abs(va));
                }
            }
        }
    }
    if seen == 0 {
        return Err(ModelError::InvalidSpec("quantization needs at least one calibration input".into()));
    }
    let layers = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| FxLayer {
            w: FxMatrix::calibrated(&layer.w, sat),
            predictor: layer.predictor.as_ref().map(|p| FxPredictor {
                u: FxMatrix::calibrated(&p.u, sat),
                v: FxMatrix::calibrated(&p.v, sat),
                va_format: format_for_magnitude(va_max[l]),
            }),
            out_format: format_for_magnitude(out_max[l]),
        })
        .collect();
    Ok(QuantizedNetwork {
        spec: params.spec.clone(),
        input_format: format_for_magnitude(input_max),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Predictor enabled: input and output sparsity exploited.
    UvOn,
    /// Predictor disabled: input sparsity only.
    UvOff,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::UvOn => "uv_on",
            InferenceMode::UvOff => "uv_off",
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uv_on" => Ok(Self::UvOn),
            "uv_off" => Ok(Self::UvOff),
            other => Err(format!("unknown inference mode `{other}` (expected uv_on or uv_off)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldenLayer {
    pub input: FxVector,
    /// Requantized `V a` (uv_on predicted layers only).
    pub va: Option<FxVector>,
    /// Predictor bits (uv_on predicted layers only).
    pub mask: Option<PredictorMask>,
    pub output: FxVector,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldenTrace {
    pub mode: InferenceMode,
    pub layers: Vec<GoldenLayer>,
    pub saturations: SaturationCounter,
}

impl GoldenTrace {
    pub fn logits(&self) -> &FxVector {
        &self.layers.last().expect("golden trace without layers").output
    }
}

/// Requantized `V a`.
pub fn golden_va(pred: &FxPredictor, input: &FxVector, sat: &mut SaturationCounter) -> FxVector {
    let scale = WideAccumulator::for_product(pred.v.format, input.format).frac_bits;
    let codes = (0..pred.v.rows)
        .map(|k| {
            let acc = WideAccumulator { acc: dot_codes(pred.v.row(k), &input.codes), frac_bits: scale };
            let (code, s) = requantize_code(acc, pred.va_format);
            sat.record(s);
            code
        })
        .collect();
    FxVector { codes, format: pred.va_format }
}

/// Predictor bits: sign of the exact `U va` accumulator.
pub fn golden_mask(pred: &FxPredictor, va: &FxVector) -> PredictorMask {
    PredictorMask { bits: (0..pred.u.rows).map(|i| dot_codes(pred.u.row(i), &va.codes) > 0).collect() }
}

/// Output code of one neuron from its exact accumulator.
pub fn finish_neuron(acc: WideAccumulator, format: QFormat, apply_relu: bool, sat: &mut SaturationCounter) -> i16 {
    let acc = if apply_relu { WideAccumulator { acc: acc.acc.max(0), ..acc } } else { acc };
    let (code, s) = requantize_code(acc, format);
    sat.record(s);
    code
}

/// Bit-exact reference inference. Pure: identical inputs give identical traces.
pub fn forward_fx_golden(net: &QuantizedNetwork, x: &FxVector, mode: InferenceMode) -> GoldenTrace {
    assert_eq!(x.format, net.input_format, "input quantized with a foreign format");
    let mut sat = SaturationCounter::default();
    let last = net.layers.len() - 1;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut a = x.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let (va, mask) = match (&layer.predictor, mode) {
            (Some(p), InferenceMode::UvOn) => {
                let va = golden_va(p, &a, &mut sat);
                let mask = golden_mask(p, &va);
                (Some(va), Some(mask))
            }
            _ => (None, None),
        };
        let scale = layer.w_accumulator(a.format).frac_bits;
        let codes = (0..layer.w.rows)
            .map(|i| {
                if mask.as_ref().is_some_and(|m| !m.bits[i]) {
                    return 0;
                }
                let acc = WideAccumulator { acc: dot_codes(layer.w.row(i), &a.codes), frac_bits: scale };
                finish_neuron(acc, layer.out_format, l != last, &mut sat)
            })
            .collect();
        let output = FxVector { codes, format: layer.out_format };
        layers.push(GoldenLayer { input: a, va, mask, output: output.clone() });
        a = output;
    }
    GoldenTrace { mode, layers, saturations: sat }
}
