//! Binary model checkpoints with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "SPNN"
//! version      u32      1
//! kind         u8       0 = f64 parameters, 1 = 16-bit fixed point
//! layer_count  u32
//! input_fmt    u8       fractional bits of the input (fixed) or 0xFF (float)
//! per layer:
//!   rows u32, cols u32, rank u32 (0 = no predictor)
//!   fixed only: w_fmt u8, out_fmt u8, and if rank > 0: u_fmt u8, v_fmt u8, va_fmt u8
//!   W blob (rows*cols), then U blob (rows*rank) and V blob (rank*cols) when rank > 0,
//!   each row-major as f64 (kind 0) or i16 (kind 1)
//! ```
//!
//! The sidecar `<path>.json` records the network spec and free-form run metadata.

use crate::model::fx::{FxLayer, FxMatrix, FxPredictor, QuantizedNetwork};
use crate::model::{LayerParams, NetworkParams, NetworkSpec, Predictor};
use crate::numerics::{DenseMatrix, QFormat};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SPNN";
pub const VERSION: u32 = 1;
const KIND_FLOAT: u8 = 0;
const KIND_FIXED: u8 = 1;
const NO_FORMAT: u8 = 0xFF;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} parameters, expected {expected}")]
    Kind { expected: &'static str, found: &'static str },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("sidecar spec does not match the checkpoint: {0}")]
    SpecMismatch(String),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub spec: NetworkSpec,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn kind_name(kind: u8) -> &'static str {
    if kind == KIND_FIXED {
        "fixed"
    } else {
        "float"
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u8, layers: usize, input_fmt: u8) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.push(kind);
        w.u32(layers as u32);
        w.0.push(input_fmt);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn fmt(&mut self, f: QFormat) {
        self.0.push(f.frac_bits() as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn fmt(&mut self) -> Result<QFormat, CheckpointError> {
        let b = self.u8()?;
        QFormat::new(u32::from(b)).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn i16s(&mut self, n: usize) -> Result<Vec<i16>, CheckpointError> {
        let raw = self.take(n.checked_mul(2).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
    }

    fn header(&mut self, expected_kind: u8) -> Result<(usize, u8), CheckpointError> {
        if self.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = self.u8()?;
        if kind != expected_kind {
            return Err(CheckpointError::Kind { expected: kind_name(expected_kind), found: kind_name(kind) });
        }
        let layers = self.u32()? as usize;
        let input_fmt = self.u8()?;
        Ok((layers, input_fmt))
    }

    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos != self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<DenseMatrix, CheckpointError> {
    DenseMatrix::from_vec(rows, cols, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_sidecar(path: &Path, kind: u8, spec: &NetworkSpec, metadata: &serde_json::Value) -> Result<(), CheckpointError> {
    let side = Sidecar {
        format: "sparsenn-checkpoint".into(),
        version: VERSION,
        kind: kind_name(kind).into(),
        spec: spec.clone(),
        metadata: metadata.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(io_err(&sp))
}

/// Reads the sidecar if present and checks it against the spec decoded from the binary.
fn check_sidecar(path: &Path, spec: &NetworkSpec) -> Result<Option<Sidecar>, CheckpointError> {
    let sp = sidecar_path(path);
    if !sp.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    if side.spec.layer_sizes != spec.layer_sizes || side.spec.predictor_layers != spec.predictor_layers {
        return Err(CheckpointError::SpecMismatch(format!("{:?} vs {:?}", side.spec, spec)));
    }
    Ok(Some(side))
}

fn spec_from_shapes(shapes: &[(usize, usize, usize)]) -> Result<NetworkSpec, CheckpointError> {
    let mut sizes = vec![shapes.first().map_or(0, |s| s.1)];
    let mut rank = 1;
    let mut predicted = Vec::new();
    for (l, &(rows, cols, r)) in shapes.iter().enumerate() {
        if cols != *sizes.last().expect("non-empty") {
            return Err(CheckpointError::Corrupt(format!("layer {l} input width {cols} breaks the chain")));
        }
        sizes.push(rows);
        if r > 0 {
            rank = r;
            predicted.push(l);
        }
    }
    NetworkSpec::new(sizes, rank, predicted).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn save_params(path: &Path, params: &NetworkParams, metadata: &serde_json::Value) -> Result<(), CheckpointError> {
    let mut w = Writer::header(KIND_FLOAT, params.num_layers(), NO_FORMAT);
    for layer in &params.layers {
        let (rows, cols) = layer.w.shape();
        w.u32(rows as u32);
        w.u32(cols as u32);
        w.u32(layer.predictor.as_ref().map_or(0, |p| p.u.cols() as u32));
        let blobs = std::iter::once(&layer.w).chain(layer.predictor.iter().flat_map(|p| [&p.u, &p.v]));
        for m in blobs {
            for v in m.as_slice() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, &w.0).map_err(io_err(path))?;
    write_sidecar(path, KIND_FLOAT, &params.spec, metadata)
}

pub fn load_params(path: &Path) -> Result<(NetworkParams, Option<Sidecar>), CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (count, _) = r.header(KIND_FLOAT)?;
    let mut shapes = Vec::with_capacity(count);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, cols, rank) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let w = matrix(rows, cols, r.f64s(rows * cols)?)?;
        let predictor = if rank > 0 {
            let u = matrix(rows, rank, r.f64s(rows * rank)?)?;
            let v = matrix(rank, cols, r.f64s(rank * cols)?)?;
            Some(Predictor { u, v })
        } else {
            None
        };
        shapes.push((rows, cols, rank));
        layers.push(LayerParams { w, predictor });
    }
    r.finish()?;
    let spec = spec_from_shapes(&shapes)?;
    let params = NetworkParams { spec, layers };
    params.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let side = check_sidecar(path, &params.spec)?;
    Ok((params, side))
}

pub fn save_quantized(path: &Path, net: &QuantizedNetwork, metadata: &serde_json::Value) -> Result<(), CheckpointError> {
    let mut w = Writer::header(KIND_FIXED, net.layers.len(), net.input_format.frac_bits() as u8);
    for layer in &net.layers {
        w.u32(layer.w.rows as u32);
        w.u32(layer.w.cols as u32);
        w.u32(layer.predictor.as_ref().map_or(0, |p| p.u.cols as u32));
        w.fmt(layer.w.format);
        w.fmt(layer.out_format);
        if let Some(p) = &layer.predictor {
            w.fmt(p.u.format);
            w.fmt(p.v.format);
            w.fmt(p.va_format);
        }
        let blobs = std::iter::once(&layer.w).chain(layer.predictor.iter().flat_map(|p| [&p.u, &p.v]));
        for m in blobs {
            for c in &m.codes {
                w.0.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    fs::write(path, &w.0).map_err(io_err(path))?;
    write_sidecar(path, KIND_FIXED, &net.spec, metadata)
}

pub fn load_quantized(path: &Path) -> Result<(QuantizedNetwork, Option<Sidecar>), CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (count, input_fmt) = r.header(KIND_FIXED)?;
    let input_format = QFormat::new(u32::from(input_fmt)).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut shapes = Vec::with_capacity(count);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, cols, rank) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let w_fmt = r.fmt()?;
        let out_format = r.fmt()?;
        let pred_fmts = if rank > 0 { Some((r.fmt()?, r.fmt()?, r.fmt()?)) } else { None };
        let w = FxMatrix { rows, cols, codes: r.i16s(rows * cols)?, format: w_fmt };
        let predictor = match pred_fmts {
            Some((uf, vf, vaf)) => Some(FxPredictor {
                u: FxMatrix { rows, cols: rank, codes: r.i16s(rows * rank)?, format: uf },
                v: FxMatrix { rows: rank, cols, codes: r.i16s(rank * cols)?, format: vf },
                va_format: vaf,
            }),
            None => None,
        };
        shapes.push((rows, cols, rank));
        layers.push(FxLayer { w, predictor, out_format });
    }
    r.finish()?;
    let spec = spec_from_shapes(&shapes)?;
    let side = check_sidecar(path, &spec)?;
    Ok((QuantizedNetwork { spec, input_format, layers }, side))
}
