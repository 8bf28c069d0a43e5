//! Integer layer normalization.
//!
//! The input is normalized to zero mean and unit variance with the result kept
//! at scale `2^-10`, so the normalized values carry ten fractional bits rather
//! than the handful of levels a unit-variance integer would have. Mean and
//! variance are computed with `2^10`-scaled integer intermediates and 64-bit
//! (here 128-bit) accumulation of squares.
//!
//! The gain is an 8-bit tensor with scale `s_W`; the bias is a 32-bit tensor
//! with scale `2^-10 · s_W`, which is exactly the scale of `q′ · q_gain`. The
//! output `round((q′ · q_gain + q_bias) / 2^10)` therefore lands at scale `s_W`.

use crate::fixedpoint::{dequantize, div_round, quantize_with, BitWidth, QuantError, QuantParams, QuantizedTensor};

/// Fractional bits of the normalized intermediate `q′`.
pub const LN_NORM_FRAC_BITS: u32 = 10;

/// Normalizes `q` to zero mean and unit variance at scale `2^-10`.
///
/// A zero-variance input maps to all zeros.
pub fn normalize(q: &[i16]) -> Vec<i32> {
    let mut out = vec![0; q.len()];
    normalize_into(q, &mut out);
    out
}

pub(crate) fn normalize_into(q: &[i16], out: &mut [i32]) {
    let n = q.len() as i128;
    if n == 0 {
        return;
    }
    let (sum, sumsq) = q.iter().fold((0i128, 0i128), |(s, s2), &v| {
        let v = v as i128;
        (s + v, s2 + v * v)
    });
    // mean and variance, scaled by 2^10 and 2^20
    let mean = div_round(sum << 10, n);
    let var = (div_round(sumsq << 20, n) - mean * mean).max(0);
    // 2^8 · sqrt(var) = 2^18 · std
    let sigma = ((var << 16) as u128).isqrt() as i128;
    if sigma == 0 {
        out.fill(0);
        return;
    }
    for (o, &v) in out.iter_mut().zip(q) {
        *o = div_round((((v as i128) << 10) - mean) << 18, sigma) as i32;
    }
}

/// Gain and bias of an integer layer norm, with the bias scale tied to the gain scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayerNorm {
    gain: QuantizedTensor,
    bias: QuantizedTensor,
}

impl IntLayerNorm {
    pub fn new(gain: QuantizedTensor, bias: QuantizedTensor) -> Result<Self, QuantError> {
        if gain.params.bits() != BitWidth::W8 {
            return Err(QuantError::UnsupportedBitWidth(gain.params.bits().bits()));
        }
        if bias.params.bits() != BitWidth::W32 {
            return Err(QuantError::UnsupportedBitWidth(bias.params.bits().bits()));
        }
        if gain.len() != bias.len() {
            return Err(QuantError::Length { what: "layer norm bias", expected: gain.len(), actual: bias.len() });
        }
        let expected = Self::bias_scale(gain.scale());
        if bias.scale() != expected {
            return Err(QuantError::ScaleMismatch {
                what: "layer norm bias",
                expected: expected as f64,
                actual: bias.scale() as f64,
            });
        }
        Ok(Self { gain, bias })
    }

    /// `s_b = 2^-10 · s_W`.
    pub fn bias_scale(gain_scale: f32) -> f32 {
        gain_scale * (-(LN_NORM_FRAC_BITS as f32)).exp2()
    }

    /// Quantizes float gain and bias: `s_W = max|gain| / 127`, `s_b = 2^-10 · s_W`.
    pub fn from_float(gain: &[f32], bias: &[f32]) -> Result<Self, QuantError> {
        let g = crate::fixedpoint::quantize_symmetric(gain, BitWidth::W8)?;
        crate::fixedpoint::check_finite(bias)?;
        let bp = QuantParams::new(Self::bias_scale(g.scale()), BitWidth::W32)?;
        let b = quantize_with(bias, bp);
        Self::new(g, b)
    }

    pub fn gain(&self) -> &QuantizedTensor {
        &self.gain
    }

    pub fn bias(&self) -> &QuantizedTensor {
        &self.bias
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    /// Scale of the output, equal to the gain scale.
    pub fn output_scale(&self) -> f32 {
        self.gain.scale()
    }

    pub fn dequantized_gain(&self) -> Vec<f32> {
        dequantize(&self.gain)
    }

    pub fn dequantized_bias(&self) -> Vec<f32> {
        dequantize(&self.bias)
    }

    /// Normalizes `q` and applies gain and bias; `scratch` holds `q′`.
    pub(crate) fn apply_into(&self, q: &[i16], scratch: &mut [i32], out: &mut [i16]) {
        normalize_into(q, scratch);
        for (((o, &n), &g), &b) in out.iter_mut().zip(scratch.iter()).zip(&self.gain.data).zip(&self.bias.data) {
            let v = div_round(n as i128 * g as i128 + b as i128, 1 << LN_NORM_FRAC_BITS);
            *o = BitWidth::W16.saturate(v.clamp(i64::MIN as i128, i64::MAX as i128) as i64) as i16;
        }
    }

    pub fn apply(&self, q: &[i16]) -> Vec<i16> {
        let mut scratch = vec![0; q.len()];
        let mut out = vec![0; q.len()];
        self.apply_into(q, &mut scratch, &mut out);
        out
    }
}

/// Integer layer norm of a 16-bit vector; the output has the gain's scale.
pub fn integer_layer_norm(q: &[i16], gain: &QuantizedTensor, bias: &QuantizedTensor) -> Result<Vec<i16>, QuantError> {
    let ln = IntLayerNorm::new(gain.clone(), bias.clone())?;
    if q.len() != ln.len() {
        return Err(QuantError::Length { what: "layer norm input", expected: ln.len(), actual: q.len() });
    }
    Ok(ln.apply(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{layer_norm, mean_var, LayerNormParams, LN_EPSILON};
    use crate::fixedpoint::quantize_symmetric;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensors(gain: Vec<i32>, gain_scale: f32, bias: Vec<i32>) -> (QuantizedTensor, QuantizedTensor) {
        let n = gain.len();
        let g =
            QuantizedTensor { data: gain, shape: vec![n], params: QuantParams::new(gain_scale, BitWidth::W8).unwrap() };
        let b = QuantizedTensor {
            data: bias,
            shape: vec![n],
            params: QuantParams::new(IntLayerNorm::bias_scale(gain_scale), BitWidth::W32).unwrap(),
        };
        (g, b)
    }

    #[test]
    fn worked_examples() {
        let (g, b) = tensors(vec![127; 3], 0.01, vec![0; 3]);
        assert_eq!(integer_layer_norm(&[5, 5, 5], &g, &b).unwrap(), vec![0, 0, 0]);

        assert_eq!(normalize(&[1, -1]), vec![1024, -1024]);
        let (g, b) = tensors(vec![127; 2], 0.37, vec![0; 2]);
        assert_eq!(integer_layer_norm(&[1, -1], &g, &b).unwrap(), vec![127, -127]);

        assert_eq!(normalize(&[3, 1, -1, -3]), vec![1374, 458, -458, -1374]);
        let (g, b) = tensors(vec![127; 4], 0.01, vec![0; 4]);
        assert_eq!(integer_layer_norm(&[3, 1, -1, -3], &g, &b).unwrap(), vec![170, 57, -57, -170]);
    }

    #[test]
    fn zero_variance_yields_rounded_bias() {
        let (g, b) = tensors(vec![100, -50], 0.02, vec![3000, -1536]);
        assert_eq!(integer_layer_norm(&[-7, -7], &g, &b).unwrap(), vec![3, -2]);
    }

    #[test]
    fn rejects_mismatched_bias_scale() {
        let (g, mut b) = tensors(vec![1], 0.5, vec![0]);
        b.params = QuantParams::new(0.5, BitWidth::W32).unwrap();
        assert!(matches!(IntLayerNorm::new(g, b), Err(QuantError::ScaleMismatch { .. })));
    }

    #[test]
    fn bias_scale_is_exact_power_of_two_product() {
        let ln = IntLayerNorm::from_float(&[2.54, 1.0], &[0.1, -0.1]).unwrap();
        assert!((ln.gain().scale() - 0.02).abs() < 1e-9);
        assert_eq!(ln.bias().scale(), ln.gain().scale() / 1024.0);
        assert!((ln.bias().scale() - 1.953125e-5).abs() < 1e-12);
    }

    #[test]
    fn matches_float_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(2..=256);
            let spread = rng.gen_range(0.1f32..=20.0);
            let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-spread..=spread)).collect();
            if mean_var(&v).1.sqrt() < 0.1 {
                continue;
            }
            let gain: Vec<f32> = (0..n).map(|_| rng.gen_range(0.5f32..=1.5)).collect();
            let bias: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.5f32..=0.5)).collect();
            let ln = IntLayerNorm::from_float(&gain, &bias).unwrap();
            let q = quantize_symmetric(&v, BitWidth::W16).unwrap();
            let q16: Vec<i16> = q.data.iter().map(|&x| x as i16).collect();
            let out = ln.apply(&q16);
            let reference = layer_norm(
                &v,
                &LayerNormParams {
                    gain: ln.dequantized_gain(),
                    bias: ln.dequantized_bias(),
                    epsilon: LN_EPSILON,
                    enabled: true,
                },
            );
            for (o, r) in out.iter().zip(&reference) {
                worst = worst.max((*o as f64 * ln.output_scale() as f64 - *r as f64).abs());
            }
        }
        assert!(worst <= 1.0 / 64.0, "worst {worst}");
    }

    proptest! {
        #[test]
        fn normalized_mean_is_near_zero(q in prop::collection::vec(any::<i16>(), 2..512)) {
            prop_assume!(q.iter().any(|&v| v != q[0]));
            let n = normalize(&q);
            let mean = n.iter().map(|&v| v as f64).sum::<f64>() / n.len() as f64 / 1024.0;
            prop_assert!(mean.abs() <= 1.0 / 512.0);
        }

        #[test]
        fn scale_invariant(q in prop::collection::vec(-300i16..=300, 2..128), k in 1i16..=100) {
            let g = QuantizedTensor { data: vec![127; q.len()], shape: vec![q.len()], params: QuantParams::new(0.01, BitWidth::W8).unwrap() };
            let b = QuantizedTensor { data: vec![0; q.len()], shape: vec![q.len()], params: QuantParams::new(IntLayerNorm::bias_scale(0.01), BitWidth::W32).unwrap() };
            let scaled: Vec<i16> = q.iter().map(|&v| v * k).collect();
            let a = integer_layer_norm(&q, &g, &b).unwrap();
            let c = integer_layer_norm(&scaled, &g, &b).unwrap();
            for (x, y) in a.iter().zip(&c) {
                prop_assert!((x - y).abs() <= 1);
            }
        }
    }
}
