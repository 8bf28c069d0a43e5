//! Symmetric quantization and fixed-point arithmetic shared by the quantized paths.
//!
//! Every quantized value in the crate uses a zero-point of 0: a real value `v` is
//! represented by the integer `q = round(v / scale)` saturated to
//! `[-(2^(b-1) - 1), 2^(b-1) - 1]`. Rounding is half away from zero and narrowing
//! conversions saturate, never wrap.
//!
//! Activations run on 16-bit fixed point: inputs in Q3.12 (range [-8, 8)) and
//! outputs in Q0.15. They are evaluated by integer interpolation between
//! precomputed knots, so no floating point is touched at inference.

mod lut;

use std::fmt;

use thiserror::Error;

/// Number of fractional bits of the activation input format (Q3.12).
pub const Q3_12_FRAC_BITS: u32 = 12;
/// Number of fractional bits of the activation output format (Q0.15).
pub const Q0_15_FRAC_BITS: u32 = 15;
/// 1.0 in Q3.12.
pub const Q3_12_ONE: i32 = 1 << Q3_12_FRAC_BITS;
/// 1.0 in Q0.15. Does not fit an `i16`; gate arithmetic is carried in `i32`.
pub const Q0_15_ONE: i32 = 1 << Q0_15_FRAC_BITS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("unsupported bit width {0} (expected 8, 16 or 32)")]
    UnsupportedBitWidth(u32),

    #[error("quantization scale must be positive and finite, got {0}")]
    InvalidScale(f64),

    #[error("rescale multiplier {0} is outside the representable normalized range")]
    MultiplierOutOfRange(f64),

    #[error("{what}: expected length {expected}, got {actual}")]
    Length { what: &'static str, expected: usize, actual: usize },

    #[error("{what}: expected scale {expected}, got {actual}")]
    ScaleMismatch { what: &'static str, expected: f64, actual: f64 },
}

/// Integer width of a quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BitWidth {
    W8,
    W16,
    W32,
}

impl BitWidth {
    pub fn from_bits(bits: u32) -> Result<Self, QuantError> {
        match bits {
            8 => Ok(BitWidth::W8),
            16 => Ok(BitWidth::W16),
            32 => Ok(BitWidth::W32),
            other => Err(QuantError::UnsupportedBitWidth(other)),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::W8 => 8,
            BitWidth::W16 => 16,
            BitWidth::W32 => 32,
        }
    }

    /// Largest magnitude produced by quantization, `2^(b-1) - 1`.
    pub fn qmax(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn saturate(self, v: i64) -> i64 {
        let m = self.qmax();
        v.clamp(-m, m)
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.bits())
    }
}

/// Scale and width of a symmetric quantized tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    scale: f32,
    bits: BitWidth,
}

impl QuantParams {
    pub fn new(scale: f32, bits: BitWidth) -> Result<Self, QuantError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale as f64));
        }
        Ok(Self { scale, bits })
    }

    /// Parameters whose scale covers `[-max_abs, max_abs]`; a zero range maps to scale 1.
    pub fn from_max_abs(max_abs: f32, bits: BitWidth) -> Result<Self, QuantError> {
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(QuantError::InvalidScale(max_abs as f64));
        }
        if max_abs == 0.0 {
            return Self::new(1.0, bits);
        }
        Self::new((max_abs as f64 / bits.qmax() as f64) as f32, bits)
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    /// Largest representable real magnitude.
    pub fn max_real(&self) -> f64 {
        self.bits.qmax() as f64 * self.scale as f64
    }

    /// Quantizes one value with this scale (round half away from zero, saturating).
    pub fn quantize_value(&self, v: f32) -> i32 {
        let q = (v as f64 / self.scale as f64).round();
        let m = self.bits.qmax() as f64;
        q.clamp(-m, m) as i32
    }
}

/// Integer payload plus the scale that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub data: Vec<i32>,
    pub shape: Vec<usize>,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scale(&self) -> f32 {
        self.params.scale
    }
}

pub(crate) fn check_finite(v: &[f32]) -> Result<(), QuantError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(QuantError::NonFinite { index, value: v[index] as f64 }),
        None => Ok(()),
    }
}

pub(crate) fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

/// Quantizes `v` with `scale = max|v| / (2^(b-1) - 1)`.
pub fn quantize_symmetric(v: &[f32], bits: BitWidth) -> Result<QuantizedTensor, QuantError> {
    if bits == BitWidth::W32 {
        return Err(QuantError::UnsupportedBitWidth(32));
    }
    check_finite(v)?;
    let params = QuantParams::from_max_abs(max_abs(v), bits)?;
    Ok(quantize_with(v, params))
}

/// Quantizes `v` with a fixed, previously chosen scale.
pub fn quantize_with(v: &[f32], params: QuantParams) -> QuantizedTensor {
    QuantizedTensor { data: v.iter().map(|&x| params.quantize_value(x)).collect(), shape: vec![v.len()], params }
}

pub fn dequantize(t: &QuantizedTensor) -> Vec<f32> {
    let s = t.params.scale;
    t.data.iter().map(|&q| q as f32 * s).collect()
}

/// Divides with the quotient rounded half away from zero. `d` must be positive.
#[inline]
pub fn div_round(n: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    let half = d / 2;
    if n >= 0 {
        (n + half) / d
    } else {
        -((-n + half) / d)
    }
}

/// Arithmetic right shift with rounding half away from zero.
#[inline]
pub fn shift_round(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        return x;
    }
    let half = 1i64 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

/// A positive real rescale factor stored as a normalized 32-bit mantissa and a
/// power-of-two shift: `real = mantissa * 2^-right_shift`, with
/// `mantissa ∈ [2^30, 2^31)`.
///
/// Applying it is pure integer arithmetic, so results are bit-exact on every
/// platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Multiplier {
    mantissa: i32,
    right_shift: u32,
}

impl Multiplier {
    const MAX_RIGHT_SHIFT: i32 = 94;

    pub fn from_real(real: f64) -> Result<Self, QuantError> {
        if !(real.is_finite() && real > 0.0) || !real.is_normal() {
            return Err(QuantError::MultiplierOutOfRange(real));
        }
        // real = frac * 2^exp, frac ∈ [0.5, 1)
        let bits = real.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i32 - 1022;
        let frac = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
        let mut mantissa = (frac * (1u64 << 31) as f64).round() as i64;
        let mut exp = exp;
        if mantissa == 1i64 << 31 {
            mantissa >>= 1;
            exp += 1;
        }
        let right_shift = 31 - exp;
        if !(0..=Self::MAX_RIGHT_SHIFT).contains(&right_shift) {
            return Err(QuantError::MultiplierOutOfRange(real));
        }
        Ok(Self { mantissa: mantissa as i32, right_shift: right_shift as u32 })
    }

    pub fn mantissa(&self) -> i32 {
        self.mantissa
    }

    pub fn right_shift(&self) -> u32 {
        self.right_shift
    }

    pub fn to_real(&self) -> f64 {
        self.mantissa as f64 * (-(self.right_shift as f64)).exp2()
    }

    /// `round(x * real)`, rounding half away from zero, saturated to `i64`.
    #[inline]
    pub fn apply(&self, x: i64) -> i64 {
        let prod = x as i128 * self.mantissa as i128;
        let n = self.right_shift;
        let r = if n == 0 {
            prod
        } else {
            let half = 1i128 << (n - 1);
            if prod >= 0 {
                (prod + half) >> n
            } else {
                -((-prod + half) >> n)
            }
        };
        r.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }

    /// Applies the multiplier and saturates to `bits`.
    #[inline]
    pub fn requantize(&self, x: i64, bits: BitWidth) -> i32 {
        bits.saturate(self.apply(x)) as i32
    }
}

/// Rescales a 32-bit accumulator at `in_scale` onto `out`'s grid.
pub fn requantize(acc: i32, in_scale: f64, out: QuantParams) -> Result<i32, QuantError> {
    if !(in_scale.is_finite() && in_scale > 0.0) {
        return Err(QuantError::InvalidScale(in_scale));
    }
    let m = Multiplier::from_real(in_scale / out.scale as f64)?;
    Ok(m.requantize(acc as i64, out.bits))
}

#[inline]
fn interpolate(table: &[i32; 257], q: i16) -> i32 {
    let u = q as i32 + 32768;
    let k = (u >> 8) as usize;
    let frac = u & 0xff;
    let a = table[k];
    let b = table[k + 1];
    // tables are monotone increasing, so the product is non-negative
    a + (((b - a) * frac + 128) >> 8)
}

/// Sigmoid of a Q3.12 input, returned in Q0.15.
#[inline]
pub fn fixed_sigmoid(q: i16) -> i16 {
    interpolate(&lut::SIGMOID_Q15, q).clamp(0, i16::MAX as i32) as i16
}

/// Hyperbolic tangent of a Q3.12 input, returned in Q0.15.
#[inline]
pub fn fixed_tanh(q: i16) -> i16 {
    interpolate(&lut::TANH_Q15, q).clamp(-(i16::MAX as i32), i16::MAX as i32) as i16
}

/// Saturating narrowing to `i16`.
#[inline]
pub fn sat_i16(v: i64) -> i16 {
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}
