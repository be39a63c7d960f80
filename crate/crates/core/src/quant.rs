//! Uniform n-bit weight quantization with min-max or normal (μ ± kσ)
//! clipping, per-tensor parameters and round-half-to-even.
//!
//! Codes always occupy the signed n-bit range `[-2ⁿ⁻¹, 2ⁿ⁻¹ - 1]` so they fit
//! in an `i8` for every supported bit-width. The asymmetric zero point is
//! `round(α/s) + 2ⁿ⁻¹`; symmetric quantization uses `z = 0` over `[-a, a]`
//! with `a = max(|α|, |β|)`. De-quantization is `s · (code + z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipScheme {
    MinMax,
    Normal { k: f64 },
}

impl ClipScheme {
    pub fn normal(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid(format!("normal clipping needs k > 0, got {k}")));
        }
        Ok(Self::Normal { k })
    }
}

impl std::fmt::Display for ClipScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClipScheme::MinMax => write!(f, "minmax"),
            ClipScheme::Normal { k } => write!(f, "normal:{k}"),
        }
    }
}

impl std::str::FromStr for ClipScheme {
    type Err = Error;

    /// Parses `minmax` or `normal:K`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" | "min-max" => Ok(Self::MinMax),
            _ => match s.strip_prefix("normal:") {
                Some(k) => Self::normal(
                    k.parse().map_err(|_| Error::invalid(format!("bad normal clipping factor {k:?}")))?,
                ),
                None => Err(Error::invalid(format!("unknown clip scheme {s:?} (minmax | normal:K)"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    clip: ClipScheme,
    mode: QuantMode,
}

impl QuantSpec {
    pub fn new(bits: u8, clip: ClipScheme, mode: QuantMode) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::invalid(format!("bit-width must be in {MIN_BITS}..={MAX_BITS}, got {bits}")));
        }
        if let ClipScheme::Normal { k } = clip {
            ClipScheme::normal(k)?;
        }
        Ok(Self { bits, clip, mode })
    }

    /// Main-network default: normal clipping with k = 4, asymmetric.
    pub fn weights(bits: u8) -> Result<Self> {
        Self::new(bits, ClipScheme::Normal { k: 4.0 }, QuantMode::Asymmetric)
    }

    /// Adapter default: min-max clipping, asymmetric.
    pub fn adapters(bits: u8) -> Result<Self> {
        Self::new(bits, ClipScheme::MinMax, QuantMode::Asymmetric)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn clip(&self) -> ClipScheme {
        self.clip
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    /// Inclusive integer code range.
    pub fn code_range(&self) -> (i32, i32) {
        let half = 1i32 << (self.bits - 1);
        (-half, half - 1)
    }

    fn levels(&self) -> i32 {
        (1i32 << self.bits) - 1
    }
}

/// Per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams<T> {
    pub alpha: T,
    pub beta: T,
    pub scale: T,
    pub zero_point: i32,
}

impl<T: Scalar> QuantParams<T> {
    /// Derives `(s, z)` for the clip range `[alpha, beta]`.
    ///
    /// A degenerate range `alpha == beta == c` yields all-zero codes: `s = 1,
    /// z = 0` for `c = 0`, otherwise `s = |c|, z = sign(c)` so de-quantization
    /// reproduces the constant exactly.
    pub fn for_range(alpha: T, beta: T, spec: &QuantSpec) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha > beta {
            return Err(Error::numeric(format!("invalid clip range [{alpha}, {beta}]")));
        }
        let (alpha, beta) = match spec.mode {
            QuantMode::Asymmetric => (alpha, beta),
            QuantMode::Symmetric => {
                let a = alpha.abs().max(beta.abs());
                (-a, a)
            }
        };
        if beta == alpha {
            let c = alpha;
            return Ok(if c == T::zero() {
                Self { alpha, beta, scale: T::one(), zero_point: 0 }
            } else {
                Self { alpha, beta, scale: c.abs(), zero_point: if c > T::zero() { 1 } else { -1 } }
            });
        }
        let scale = (beta - alpha) / T::of(f64::from(spec.levels()));
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::numeric("quantization scale underflowed"));
        }
        let zero_point = match spec.mode {
            QuantMode::Symmetric => 0,
            QuantMode::Asymmetric => {
                let base = round_half_even(alpha / scale)
                    .to_i64()
                    .ok_or_else(|| Error::numeric("zero point out of range"))?;
                i32::try_from(base - i64::from(spec.code_range().0))
                    .map_err(|_| Error::numeric("zero point out of range"))?
            }
        };
        Ok(Self { alpha, beta, scale, zero_point })
    }

    fn encode(&self, x: T, spec: &QuantSpec) -> i8 {
        let (lo, hi) = spec.code_range();
        let clipped = x.max(self.alpha).min(self.beta);
        let q = round_half_even(clipped / self.scale) - T::of(f64::from(self.zero_point));
        let q = q.max(T::of(f64::from(lo))).min(T::of(f64::from(hi)));
        q.to_i32().expect("code in range") as i8
    }

    #[inline]
    pub fn decode(&self, code: i8) -> T {
        self.scale * T::of(f64::from(i32::from(code) + self.zero_point))
    }
}

/// Integer codes plus the parameters needed to de-quantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    shape: Vec<usize>,
    codes: Vec<i8>,
    params: QuantParams<T>,
    spec: QuantSpec,
}

impl<T: Scalar> QuantizedTensor<T> {
    /// Reassembles a quantized tensor (e.g. from disk), validating every
    /// invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        codes: Vec<i8>,
        params: QuantParams<T>,
        spec: QuantSpec,
    ) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != codes.len() {
            return Err(Error::shape(format!("{} codes do not fit shape {shape:?}", codes.len())));
        }
        let (lo, hi) = spec.code_range();
        if codes.iter().any(|&c| i32::from(c) < lo || i32::from(c) > hi) {
            return Err(Error::invalid(format!("code outside the {}-bit range", spec.bits)));
        }
        if !(params.scale > T::zero() && params.scale.is_finite()) {
            return Err(Error::invalid("quantization scale must be positive"));
        }
        Ok(Self { shape, codes, params, spec })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams<T> {
        &self.params
    }

    pub fn scale(&self) -> T {
        self.params.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.params.zero_point
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }
}

/// Rounds to the nearest integer, ties to even.
pub fn round_half_even<T: Scalar>(x: T) -> T {
    let r = x.round();
    if (r - x).abs() == T::of(0.5) {
        T::of(2.0) * (x / T::of(2.0)).round()
    } else {
        r
    }
}

/// Clip range `[α, β]` of a tensor: its extremes for min-max, `μ ± kσ`
/// (population σ) for normal clipping.
pub fn clip_range<T: Scalar>(w: &DenseTensor<T>, clip: ClipScheme) -> Result<(T, T)> {
    let data = w.data();
    if data.is_empty() {
        return Err(Error::invalid("cannot clip an empty tensor"));
    }
    match clip {
        ClipScheme::MinMax => {
            let lo = data.iter().cloned().fold(T::infinity(), T::min);
            let hi = data.iter().cloned().fold(T::neg_infinity(), T::max);
            Ok((lo, hi))
        }
        ClipScheme::Normal { k } => {
            if !(k > 0.0) {
                return Err(Error::invalid("normal clipping needs k > 0"));
            }
            let n = T::of_usize(data.len());
            let mean = data.iter().cloned().sum::<T>() / n;
            let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let half = T::of(k) * var.sqrt();
            Ok((mean - half, mean + half))
        }
    }
}

/// Quantizes with parameters derived from `w` itself.
pub fn quantize<T: Scalar>(w: &DenseTensor<T>, spec: &QuantSpec) -> Result<QuantizedTensor<T>> {
    let (alpha, beta) = clip_range(w, spec.clip)?;
    let params = QuantParams::for_range(alpha, beta, spec)?;
    Ok(quantize_with(w, params, spec))
}

/// Quantizes with fixed parameters (e.g. re-quantizing a de-quantized tensor).
pub fn quantize_with<T: Scalar>(
    w: &DenseTensor<T>,
    params: QuantParams<T>,
    spec: &QuantSpec,
) -> QuantizedTensor<T> {
    let codes = w.data().iter().map(|&x| params.encode(x, spec)).collect();
    QuantizedTensor { shape: w.shape().to_vec(), codes, params, spec: *spec }
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> DenseTensor<T> {
    let data = q.codes.iter().map(|&c| q.params.decode(c)).collect();
    DenseTensor::from_parts(q.shape.clone(), data)
}

/// Quantization residual `w - dequantize(quantize(w))`.
pub fn residual<T: Scalar>(w: &DenseTensor<T>, spec: &QuantSpec) -> Result<DenseTensor<T>> {
    let q = quantize(w, spec)?;
    w.sub(&dequantize(&q))
}
