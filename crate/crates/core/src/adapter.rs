//! Training-free low-rank adapters for quantization residuals.
//!
//! The residual `ΔW = W − ⟦W⟧` of a conv layer is factorized through the SVD of
//! its mode-1 matricization, `ΔW_(1) = U S Vᵀ`. Splitting `S` as
//! `S^{1/2} · S^{1/2}` yields two convolutions whose composition reproduces
//! the residual operator:
//!
//! * `A = fold(S^{1/2} Vᵀ)`: `r×n×k1×k2`, applied with the host layer's
//!   stride and padding;
//! * `B = fold(U S^{1/2})`: `m×r×1×1`, a pointwise convolution.
//!
//! Truncating to the top `r` singular triples gives the best rank-`r`
//! adapter; a Butterworth mask over the singular indices makes the
//! truncation differentiable in a continuous cutoff rank.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, matricize_mode1, svd, tensorize_mode1, ConvGeometry, DenseTensor, Matrix, SvdTriple};

/// SVD of a layer's matricized quantization residual plus the metadata
/// needed to fold factors back into convolution kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFactorization<T> {
    layer: usize,
    svd: SvdTriple<T>,
    fold_shape: (usize, usize, usize),
    geometry: ConvGeometry,
}

impl<T: Scalar> ResidualFactorization<T> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    /// `m × R` left singular vectors.
    pub fn u(&self) -> &Matrix<T> {
        &self.svd.u
    }

    /// Singular values, descending.
    pub fn s(&self) -> &[T] {
        &self.svd.s
    }

    /// `(n·k1·k2) × R` right singular vectors.
    pub fn v(&self) -> &Matrix<T> {
        &self.svd.v
    }

    /// `R = min(m, n·k1·k2)`.
    pub fn max_rank(&self) -> usize {
        self.svd.s.len()
    }

    pub fn out_channels(&self) -> usize {
        self.svd.u.rows()
    }

    /// `(n, k1, k2)` of the host kernel.
    pub fn fold_shape(&self) -> (usize, usize, usize) {
        self.fold_shape
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    /// The residual kernel `U S Vᵀ` folded back to `m×n×k1×k2`.
    pub fn residual(&self) -> DenseTensor<T> {
        tensorize_mode1(&self.svd.reconstruct(), self.fold_shape).expect("factor shapes are consistent")
    }

    /// Builds `A`/`B` with per-index factor weights `g_i` multiplying both
    /// `√σ_i Vᵢ` and `√σ_i Uᵢ`, keeping the first `width` indices.
    fn build(&self, width: usize, weight: impl Fn(usize) -> T) -> LowRankAdapter<T> {
        let (m, cols) = (self.out_channels(), self.svd.v.rows());
        let scale: Vec<T> = (0..width).map(|i| weight(i) * self.svd.s[i].sqrt()).collect();
        let a = Matrix::from_fn(width, cols, |i, j| scale[i] * self.svd.v.get(j, i));
        let b = Matrix::from_fn(m, width, |i, j| self.svd.u.get(i, j) * scale[j]);
        let (n, k1, k2) = self.fold_shape;
        LowRankAdapter {
            a: DenseTensor::from_parts(vec![width, n, k1, k2], a.into_data()),
            b: DenseTensor::from_parts(vec![m, width, 1, 1], b.into_data()),
            rank: width,
            geometry: self.geometry,
        }
    }
}

/// Factorizes the residual kernel `dw: m×n×k1×k2` of conv layer `layer`.
pub fn factorize_residual<T: Scalar>(
    layer: usize,
    dw: &DenseTensor<T>,
    geometry: ConvGeometry,
) -> Result<ResidualFactorization<T>> {
    let mat = matricize_mode1(dw)?;
    let s = dw.shape();
    if (s[2], s[3]) != geometry.kernel {
        return Err(Error::shape(format!(
            "residual kernel is {}x{} but geometry says {:?}",
            s[2], s[3], geometry.kernel
        )));
    }
    Ok(ResidualFactorization { layer, svd: svd(&mat)?, fold_shape: (s[1], s[2], s[3]), geometry })
}

/// Two-filter adapter `B ⊛ A`: `A: r×n×k1×k2` with the host geometry,
/// then the pointwise `B: m×r×1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter<T> {
    a: DenseTensor<T>,
    b: DenseTensor<T>,
    rank: usize,
    geometry: ConvGeometry,
}

impl<T: Scalar> LowRankAdapter<T> {
    /// Reassembles an adapter from its kernels, checking that they chain.
    pub fn from_parts(a: DenseTensor<T>, b: DenseTensor<T>, geometry: ConvGeometry) -> Result<Self> {
        if a.order() != 4 || b.order() != 4 {
            return Err(Error::shape("adapter kernels must be 4-order"));
        }
        let (sa, sb) = (a.shape(), b.shape());
        if sb[1] != sa[0] || sb[2] != 1 || sb[3] != 1 {
            return Err(Error::shape(format!("adapter factors {sa:?} and {sb:?} do not chain")));
        }
        if (sa[2], sa[3]) != geometry.kernel {
            return Err(Error::shape("adapter kernel does not match its geometry"));
        }
        let rank = sa[0];
        Ok(Self { a, b, rank, geometry })
    }

    pub fn a(&self) -> &DenseTensor<T> {
        &self.a
    }

    pub fn b(&self) -> &DenseTensor<T> {
        &self.b
    }

    /// Number of intermediate channels.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    /// Number of stored weights, `r·(m + n·k1·k2)`.
    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `B_(1) · A_(1)`, the `m × (n·k1·k2)` matrix of the composed operator.
    pub fn matrix(&self) -> Matrix<T> {
        let b = matricize_mode1(&self.b).expect("4-order");
        let a = matricize_mode1(&self.a).expect("4-order");
        b.matmul(&a).expect("factors chain")
    }

    /// The composed operator folded to an `m×n×k1×k2` kernel.
    pub fn compose(&self) -> DenseTensor<T> {
        let s = self.a.shape();
        tensorize_mode1(&self.matrix(), (s[1], s[2], s[3])).expect("factors chain")
    }

    /// `B ⊛ (A ⊛ x)`.
    pub fn apply(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let hidden = conv2d(&self.a, x, &self.geometry)?;
        conv2d(&self.b, &hidden, &ConvGeometry::pointwise())
    }

    /// Applies `f` to both kernels (e.g. quantize-dequantize round trips).
    pub fn try_map_kernels(
        &self,
        mut f: impl FnMut(&DenseTensor<T>) -> Result<DenseTensor<T>>,
    ) -> Result<Self> {
        Self::from_parts(f(&self.a)?, f(&self.b)?, self.geometry)
    }
}

/// Keeps the top-`r` singular triples (`1 ≤ r ≤ R`).
pub fn build_adapter_hard<T: Scalar>(f: &ResidualFactorization<T>, r: usize) -> Result<LowRankAdapter<T>> {
    if r == 0 || r > f.max_rank() {
        return Err(Error::invalid(format!("rank {r} outside 1..={}", f.max_rank())));
    }
    Ok(f.build(r, |_| T::one()))
}

/// Normalized Butterworth kernel over singular indices `1..=R`:
/// `Φ_i = 1 / √(1 + (i/r_l)^{2k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthMask<T> {
    cutoff: T,
    order: u32,
    values: Vec<T>,
}

impl<T: Scalar> ButterworthMask<T> {
    pub fn cutoff(&self) -> T {
        self.cutoff
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_mask_args<T: Scalar>(r_l: T, order: u32) -> Result<()> {
    if !(r_l > T::zero() && r_l.is_finite()) {
        return Err(Error::invalid(format!("cutoff rank must be positive, got {r_l}")));
    }
    if order == 0 {
        return Err(Error::invalid("mask order must be at least 1"));
    }
    Ok(())
}

/// `(i / r_l)^{2k}` for `i = 1..=R`.
fn ratio_powers<T: Scalar>(r_l: T, max_rank: usize, order: u32) -> impl Iterator<Item = T> {
    let exp = 2 * order as i32;
    (1..=max_rank).map(move |i| (T::of_usize(i) / r_l).powi(exp))
}

pub fn butterworth_mask<T: Scalar>(r_l: T, max_rank: usize, order: u32) -> Result<ButterworthMask<T>> {
    check_mask_args(r_l, order)?;
    let values = ratio_powers(r_l, max_rank, order).map(|p| (T::one() + p).sqrt().recip()).collect();
    Ok(ButterworthMask { cutoff: r_l, order, values })
}

/// `dΦ_i/dr_l = (k/r_l) · (i/r_l)^{2k} · (1 + (i/r_l)^{2k})^{-3/2}`.
pub fn mask_gradient<T: Scalar>(r_l: T, max_rank: usize, order: u32) -> Result<Vec<T>> {
    check_mask_args(r_l, order)?;
    let k = T::of(f64::from(order));
    Ok(ratio_powers(r_l, max_rank, order)
        .map(|p| {
            // Past overflow the derivative is zero; avoid ∞/∞.
            if p.is_infinite() {
                return T::zero();
            }
            k / r_l * p * (T::one() + p).powf(T::of(-1.5))
        })
        .collect())
}

/// Full-width (`R`) adapter whose factors both carry `Φ(r_l) ⊙ S^{1/2}`,
/// so the composed singular values are `Φ² ⊙ S`.
pub fn build_adapter_soft<T: Scalar>(
    f: &ResidualFactorization<T>,
    r_l: T,
    order: u32,
) -> Result<LowRankAdapter<T>> {
    let mask = butterworth_mask(r_l, f.max_rank(), order)?;
    Ok(f.build(f.max_rank(), |i| mask.values[i]))
}
