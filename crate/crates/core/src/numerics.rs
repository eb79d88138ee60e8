//! Fixed-point arithmetic and the small dense linear algebra shared by training and the golden
//! inference model.
//!
//! Every fixed-point value is a 16-bit two's-complement code with a per-tensor [`QFormat`].
//! Products are accumulated exactly in a [`WideAccumulator`], so a dot product does not depend on
//! the order in which its terms arrive. Rounding is always round-half-to-even and narrowing is
//! always saturating.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Width of every fixed-point word.
pub const WORD_BITS: u32 = 16;

const CODE_MAX: i64 = i16::MAX as i64;
const CODE_MIN: i64 = i16::MIN as i64;

/// Guards `log2(0)` during format calibration.
const CALIBRATION_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("fractional bits {0} outside [0, 15]")]
    FormatOutOfRange(u32),
    #[error("mixed Q-formats inside one operand: {0} vs {1}")]
    FormatMismatch(QFormat, QFormat),
    #[error("operand lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot calibrate a format from an empty sequence")]
    EmptyInput,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("matrix dimensions must be positive, got {0}x{1}")]
    ZeroDimension(usize, usize),
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
}

/// A 16-bit fixed-point format with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct QFormat {
    frac_bits: u8,
}

impl QFormat {
    pub fn new(frac_bits: u32) -> Result<Self, NumericsError> {
        if frac_bits >= WORD_BITS {
            return Err(NumericsError::FormatOutOfRange(frac_bits));
        }
        Ok(Self { frac_bits: frac_bits as u8 })
    }

    pub fn frac_bits(self) -> u32 {
        u32::from(self.frac_bits)
    }

    pub fn total_bits(self) -> u32 {
        WORD_BITS
    }

    /// Value of one code step.
    pub fn lsb(self) -> f64 {
        (-f64::from(self.frac_bits)).exp2()
    }

    pub fn max_value(self) -> f64 {
        CODE_MAX as f64 * self.lsb()
    }

    pub fn min_value(self) -> f64 {
        CODE_MIN as f64 * self.lsb()
    }
}

impl Default for QFormat {
    /// Q6.10.
    fn default() -> Self {
        Self { frac_bits: 10 }
    }
}

impl TryFrom<u32> for QFormat {
    type Error = NumericsError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<QFormat> for u32 {
    fn from(value: QFormat) -> Self {
        value.frac_bits()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", WORD_BITS - self.frac_bits(), self.frac_bits)
    }
}

/// One fixed-point value: `code * 2^-frac_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxScalar {
    pub code: i16,
    pub format: QFormat,
}

impl FxScalar {
    pub fn new(code: i16, format: QFormat) -> Self {
        Self { code, format }
    }

    pub fn zero(format: QFormat) -> Self {
        Self { code: 0, format }
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.code) * self.format.lsb()
    }
}

/// Running count of saturating narrowings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationCounter(pub u64);

impl SaturationCounter {
    pub fn record(&mut self, saturated: bool) {
        self.0 += u64::from(saturated);
    }

    pub fn count(self) -> u64 {
        self.0
    }
}

fn saturate(value: i64) -> (i16, bool) {
    if value > CODE_MAX {
        (i16::MAX, true)
    } else if value < CODE_MIN {
        (i16::MIN, true)
    } else {
        (value as i16, false)
    }
}

/// Quantizes `x` and reports whether the result saturated.
pub fn quantize_code(x: f64, format: QFormat) -> (i16, bool) {
    debug_assert!(x.is_finite(), "quantize of non-finite {x}");
    let scaled = (x * (f64::from(format.frac_bits)).exp2()).round_ties_even();
    if scaled > CODE_MAX as f64 {
        (i16::MAX, true)
    } else if scaled < CODE_MIN as f64 {
        (i16::MIN, true)
    } else {
        (scaled as i16, false)
    }
}

/// Round-half-to-even quantization with saturation.
pub fn quantize(x: f64, format: QFormat) -> FxScalar {
    let (code, _) = quantize_code(x, format);
    FxScalar { code, format }
}

/// Like [`quantize`], recording saturation events in `sat`.
pub fn quantize_counted(x: f64, format: QFormat, sat: &mut SaturationCounter) -> FxScalar {
    let (code, saturated) = quantize_code(x, format);
    sat.record(saturated);
    FxScalar { code, format }
}

/// Exact sum of products, in units of `2^-frac_bits`.
///
/// The product of two 16-bit codes fits in 31 bits, so an `i64` absorbs at least 2^31 products
/// without rounding or overflow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WideAccumulator {
    pub acc: i64,
    pub frac_bits: u32,
}

impl WideAccumulator {
    pub fn zero(frac_bits: u32) -> Self {
        Self { acc: 0, frac_bits }
    }

    /// Accumulator scale for products of operands in `weights` and `inputs` formats.
    pub fn for_product(weights: QFormat, inputs: QFormat) -> Self {
        Self::zero(weights.frac_bits() + inputs.frac_bits())
    }

    pub fn mac(&mut self, weight: i16, input: i16) {
        self.acc += i64::from(weight) * i64::from(input);
    }

    /// Adds another accumulator of the same scale.
    pub fn merge(&mut self, other: WideAccumulator) {
        debug_assert_eq!(self.frac_bits, other.frac_bits);
        self.acc += other.acc;
    }

    pub fn to_f64(self) -> f64 {
        self.acc as f64 * (-f64::from(self.frac_bits)).exp2()
    }
}

/// Exact dot product of raw codes.
pub fn dot_codes(weights: &[i16], inputs: &[i16]) -> i64 {
    weights
        .iter()
        .zip(inputs)
        .map(|(&w, &x)| i64::from(w) * i64::from(x))
        .sum()
}

fn common_format(values: &[FxScalar]) -> Result<Option<QFormat>, NumericsError> {
    let Some(first) = values.first() else {
        return Ok(None);
    };
    match values.iter().find(|v| v.format != first.format) {
        Some(other) => Err(NumericsError::FormatMismatch(first.format, other.format)),
        None => Ok(Some(first.format)),
    }
}

/// Multiply-accumulate of two fixed-point sequences.
///
/// Each operand must carry one Q-format throughout; the result scale is the sum of the two
/// operands' fractional bits.
pub fn fx_dot(weights: &[FxScalar], inputs: &[FxScalar]) -> Result<WideAccumulator, NumericsError> {
    if weights.len() != inputs.len() {
        return Err(NumericsError::LengthMismatch(weights.len(), inputs.len()));
    }
    let (w_fmt, x_fmt) = match (common_format(weights)?, common_format(inputs)?) {
        (Some(w), Some(x)) => (w, x),
        _ => return Ok(WideAccumulator::zero(0)),
    };
    let mut acc = WideAccumulator::for_product(w_fmt, x_fmt);
    for (w, x) in weights.iter().zip(inputs) {
        acc.mac(w.code, x.code);
    }
    Ok(acc)
}

/// Round-half-to-even arithmetic shift right by `shift` (> 0).
fn shift_round_even(value: i64, shift: u32) -> i64 {
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Narrows an exact accumulator to a 16-bit code in `format`; reports saturation.
pub fn requantize_code(acc: WideAccumulator, format: QFormat) -> (i16, bool) {
    let target = format.frac_bits() as i32;
    let shift = acc.frac_bits as i32 - target;
    let value = match shift.cmp(&0) {
        std::cmp::Ordering::Greater => shift_round_even(acc.acc, shift as u32),
        std::cmp::Ordering::Equal => acc.acc,
        std::cmp::Ordering::Less => {
            let wide = i128::from(acc.acc) << (-shift) as u32;
            wide.clamp(i128::from(CODE_MIN) - 1, i128::from(CODE_MAX) + 1) as i64
        }
    };
    saturate(value)
}

pub fn requantize(acc: WideAccumulator, format: QFormat) -> FxScalar {
    let (code, _) = requantize_code(acc, format);
    FxScalar { code, format }
}

pub fn requantize_counted(
    acc: WideAccumulator,
    format: QFormat,
    sat: &mut SaturationCounter,
) -> FxScalar {
    let (code, saturated) = requantize_code(acc, format);
    sat.record(saturated);
    FxScalar { code, format }
}

/// Picks the largest fractional width that still represents `max |v|`.
pub fn calibrate_format(values: &[f64]) -> Result<QFormat, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let mut max_abs = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(v));
        }
        max_abs = max_abs.max(v.abs());
    }
    Ok(format_for_magnitude(max_abs))
}

/// Format for a known magnitude bound.
pub fn format_for_magnitude(max_abs: f64) -> QFormat {
    let int_bits = (max_abs + CALIBRATION_EPS).log2().ceil();
    let frac = (f64::from(WORD_BITS - 1) - int_bits).clamp(0.0, f64::from(WORD_BITS - 1));
    QFormat { frac_bits: frac as u8 }
}

/// Row-major dense matrix of finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::ZeroDimension(rows, cols));
        }
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength { rows, cols, got: data.len() });
        }
        if let Some(&bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(bad));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    /// `self += alpha * u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                let cols = self.cols;
                axpy(alpha * ui, v, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(frac: u32) -> QFormat {
        QFormat::new(frac).unwrap()
    }

    /// Scalar reference: exact rational rounding done on i128.
    fn reference_round_shift(value: i128, shift: u32) -> i128 {
        let d = 1i128 << shift;
        let floor = value.div_euclid(d);
        let rem = value.rem_euclid(d);
        let twice = 2 * rem;
        if twice > d || (twice == d && floor % 2 != 0) {
            floor + 1
        } else {
            floor
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, q(10)).code, 0);
        assert_eq!(quantize(1.0, q(10)).code, 1024);
        let mut sat = SaturationCounter::default();
        assert_eq!(quantize_counted(100.0, q(10), &mut sat).code, i16::MAX);
        assert_eq!(sat.count(), 1);
        assert_eq!(quantize_counted(-100.0, q(10), &mut sat).code, i16::MIN);
        assert_eq!(sat.count(), 2);
    }

    #[test]
    fn quantize_ties_to_even() {
        // 0.5 and 1.5 LSB, both directions.
        assert_eq!(quantize(0.5 / 1024.0, q(10)).code, 0);
        assert_eq!(quantize(1.5 / 1024.0, q(10)).code, 2);
        assert_eq!(quantize(-0.5 / 1024.0, q(10)).code, 0);
        assert_eq!(quantize(-1.5 / 1024.0, q(10)).code, -2);
    }

    #[test]
    fn format_bounds() {
        assert!(QFormat::new(16).is_err());
        let f = q(10);
        assert_eq!(f.to_string(), "Q6.10");
        assert_eq!(f.min_value(), -32.0);
        assert_eq!(f.max_value(), 32.0 - 1.0 / 1024.0);
        assert_eq!(q(0).max_value(), 32767.0);
    }

    #[test]
    fn dot_examples() {
        let acc = fx_dot(&[], &[]).unwrap();
        assert_eq!(acc.acc, 0);
        let f = q(8);
        let w: Vec<_> = [3, -7, 100].iter().map(|&c| FxScalar::new(c, f)).collect();
        let x: Vec<_> = [5, 2, -1].iter().map(|&c| FxScalar::new(c, f)).collect();
        let acc = fx_dot(&w, &x).unwrap();
        assert_eq!(acc.acc, 15 - 14 - 100);
        assert_eq!(acc.frac_bits, 16);
    }

    #[test]
    fn dot_rejects_mixed_formats_and_lengths() {
        let a = [FxScalar::new(1, q(8)), FxScalar::new(1, q(9))];
        let b = [FxScalar::new(1, q(8)), FxScalar::new(1, q(8))];
        assert!(matches!(fx_dot(&a, &b), Err(NumericsError::FormatMismatch(..))));
        assert!(matches!(fx_dot(&b, &b[..1]), Err(NumericsError::LengthMismatch(2, 1))));
    }

    #[test]
    fn dot_matches_bigint_oracle() {
        use num_bigint::BigInt;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let f = q(12);
        for _ in 0..50 {
            let w: Vec<i16> = (0..100).map(|_| rng.random()).collect();
            let x: Vec<i16> = (0..100).map(|_| rng.random()).collect();
            let oracle: BigInt =
                w.iter().zip(&x).map(|(&a, &b)| BigInt::from(a) * BigInt::from(b)).sum();
            let ws: Vec<_> = w.iter().map(|&c| FxScalar::new(c, f)).collect();
            let xs: Vec<_> = x.iter().map(|&c| FxScalar::new(c, f)).collect();
            assert_eq!(BigInt::from(fx_dot(&ws, &xs).unwrap().acc), oracle);
        }
    }

    #[test]
    fn requantize_examples() {
        let f = q(10);
        assert_eq!(requantize(WideAccumulator::zero(20), f).code, 0);
        let one = WideAccumulator { acc: 1 << 20, frac_bits: 20 };
        assert_eq!(requantize(one, f).code, 1024);
        let sixty_four = WideAccumulator { acc: 64 << 20, frac_bits: 20 };
        let mut sat = SaturationCounter::default();
        assert_eq!(requantize_counted(sixty_four, f, &mut sat).code, i16::MAX);
        assert_eq!(sat.count(), 1);
        // Just below the boundary: 32 - 2^-10 is the largest code and does not saturate.
        let below = WideAccumulator { acc: (32 << 20) - (1 << 10), frac_bits: 20 };
        assert_eq!(requantize_code(below, f), (i16::MAX, false));
        // Widening shift (accumulator coarser than target).
        let coarse = WideAccumulator { acc: 3, frac_bits: 2 };
        assert_eq!(requantize(coarse, f).code, 768);
    }

    #[test]
    fn calibrate_examples() {
        assert!(matches!(calibrate_format(&[]), Err(NumericsError::EmptyInput)));
        assert_eq!(calibrate_format(&[0.3, -0.99, 0.5]).unwrap().frac_bits(), 15);
        assert_eq!(calibrate_format(&[1.5, -0.2]).unwrap().frac_bits(), 14);
        assert_eq!(calibrate_format(&[40000.0]).unwrap().frac_bits(), 0);
        assert_eq!(calibrate_format(&[0.0]).unwrap().frac_bits(), 15);
        assert!(calibrate_format(&[f64::NAN]).is_err());
        // 1.5 needs the shift found by brute force over all formats.
        let brute = (0..16).rev().find(|&f| q(f).max_value() >= 1.5).unwrap();
        assert_eq!(brute, 14);
    }

    #[test]
    fn matrix_basics() {
        assert!(DenseMatrix::from_vec(0, 2, vec![]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0]).is_err());
        assert!(DenseMatrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
        let m = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.transpose().matmul(&m)[(0, 0)], 17.0);
        let mut z = DenseMatrix::zeros(2, 3);
        z.add_outer(2.0, &[1.0, 0.5], &[1.0, 2.0, 3.0]);
        assert_eq!(z.row(1), &[1.0, 2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn quantize_error_within_half_lsb(frac in 0u32..16, t in -1.0f64..1.0) {
            let f = q(frac);
            let x = t * f.max_value();
            let back = quantize(x, f).to_f64();
            prop_assert!((back - x).abs() <= f.lsb() / 2.0);
        }

        #[test]
        fn dot_is_permutation_invariant(
            pairs in prop::collection::vec((any::<i16>(), any::<i16>()), 0..64),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let f = q(9);
            let w: Vec<_> = pairs.iter().map(|p| FxScalar::new(p.0, f)).collect();
            let x: Vec<_> = pairs.iter().map(|p| FxScalar::new(p.1, f)).collect();
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let wp: Vec<_> = idx.iter().map(|&i| w[i]).collect();
            let xp: Vec<_> = idx.iter().map(|&i| x[i]).collect();
            prop_assert_eq!(fx_dot(&w, &x).unwrap().acc, fx_dot(&wp, &xp).unwrap().acc);
        }

        #[test]
        fn requantize_matches_single_rounding_oracle(
            pairs in prop::collection::vec((any::<i16>(), any::<i16>()), 1..40),
            wf in 0u32..16, xf in 0u32..16, of in 0u32..16,
        ) {
            let w: Vec<_> = pairs.iter().map(|p| FxScalar::new(p.0, q(wf))).collect();
            let x: Vec<_> = pairs.iter().map(|p| FxScalar::new(p.1, q(xf))).collect();
            let acc = fx_dot(&w, &x).unwrap();
            let exact: i128 = pairs.iter().map(|p| i128::from(p.0) * i128::from(p.1)).sum();
            let shift = (wf + xf) as i32 - of as i32;
            let rounded = if shift > 0 {
                reference_round_shift(exact, shift as u32)
            } else {
                exact << (-shift) as u32
            };
            let expected = rounded.clamp(i16::MIN.into(), i16::MAX.into()) as i16;
            prop_assert_eq!(requantize(acc, q(of)).code, expected);
        }
    }
}
