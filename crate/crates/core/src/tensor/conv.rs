//! Mode-1 matricization and 2D convolution through the unfolding operator.
//!
//! A convolution `W ⊛ x` with `W: m×n×k1×k2` and `x: n×h×w` is evaluated as
//! the matrix product `W_(1) · T(x)`, where `T` gathers every sliding window
//! into a column whose rows follow the same `(channel, ky, kx)` order as the
//! columns of `W_(1)`. Semantics are cross-correlation (no kernel flip).

use serde::{Deserialize, Serialize};

use super::{gemm, gemm_at, gemm_bt, DenseTensor, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Kernel size, stride and zero padding of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { kernel, stride, padding }
    }

    /// 1×1 kernel, unit stride, no padding.
    pub fn pointwise() -> Self {
        Self::new((1, 1), (1, 1), (0, 0))
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k1, k2) = self.kernel;
        let (s1, s2) = self.stride;
        if k1 == 0 || k2 == 0 || s1 == 0 || s2 == 0 {
            return Err(Error::Geometry("kernel and stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if ph < k1 || pw < k2 {
            return Err(Error::Geometry(format!(
                "kernel {k1}x{k2} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - k1) / s1 + 1, (pw - k2) / s2 + 1))
    }
}

fn expect_order<T: Scalar>(t: &DenseTensor<T>, order: usize) -> Result<()> {
    if t.order() != order {
        return Err(Error::OrderMismatch { expected: order, actual: t.order() });
    }
    Ok(())
}

/// Unfolds `m×n×k1×k2` into the `m × (n·k1·k2)` matrix `W_(1)`; column
/// `c·k1·k2 + u·k2 + v` holds `t(i, c, u, v)`.
pub fn matricize_mode1<T: Scalar>(t: &DenseTensor<T>) -> Result<Matrix<T>> {
    expect_order(t, 4)?;
    let s = t.shape();
    Ok(Matrix::from_parts(s[0], s[1] * s[2] * s[3], t.data().to_vec()))
}

/// Folds an `m × (n·k1·k2)` matrix back into `m×n×k1×k2`.
pub fn tensorize_mode1<T: Scalar>(
    m: &Matrix<T>,
    fold_shape: (usize, usize, usize),
) -> Result<DenseTensor<T>> {
    let (n, k1, k2) = fold_shape;
    if n * k1 * k2 != m.cols() || n == 0 || k1 == 0 || k2 == 0 {
        return Err(Error::shape(format!(
            "cannot fold {} columns into {n}x{k1}x{k2}",
            m.cols()
        )));
    }
    Ok(DenseTensor::from_parts(vec![m.rows(), n, k1, k2], m.data().to_vec()))
}

/// Sliding-window unfolding of `x: n×h×w` into `(n·k1·k2) × h' × w'`.
pub fn unfold_input<T: Scalar>(x: &DenseTensor<T>, geom: &ConvGeometry) -> Result<DenseTensor<T>> {
    expect_order(x, 3)?;
    let s = x.shape();
    let (oh, ow) = geom.output_size(s[1], s[2])?;
    let cols = im2col(x.data(), s[0], s[1], s[2], geom, oh, ow);
    Ok(DenseTensor::from_parts(vec![s[0] * geom.kernel.0 * geom.kernel.1, oh, ow], cols))
}

pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (k1, k2) = geom.kernel;
    let (s1, s2) = geom.stride;
    let (p1, p2) = geom.padding;
    let positions = oh * ow;
    let mut cols = vec![T::zero(); n * k1 * k2 * positions];
    for c in 0..n {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for u in 0..k1 {
            for v in 0..k2 {
                let row = (c * k1 + u) * k2 + v;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for i in 0..oh {
                    let y = (i * s1 + u) as isize - p1 as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for j in 0..ow {
                        let xx = (j * s2 + v) as isize - p2 as isize;
                        if xx >= 0 && xx < w as isize {
                            dst[i * ow + j] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of the unfolding operator: scatters `(n·k1·k2) × (h'·w')`
/// columns back onto an `n×h×w` image, summing overlaps.
pub fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
) -> Result<Vec<T>> {
    let (oh, ow) = geom.output_size(h, w)?;
    let (k1, k2) = geom.kernel;
    if cols.len() != n * k1 * k2 * oh * ow {
        return Err(Error::shape("column buffer does not match geometry"));
    }
    let (s1, s2) = geom.stride;
    let (p1, p2) = geom.padding;
    let positions = oh * ow;
    let mut x = vec![T::zero(); n * h * w];
    for c in 0..n {
        for u in 0..k1 {
            for v in 0..k2 {
                let row = (c * k1 + u) * k2 + v;
                let src = &cols[row * positions..(row + 1) * positions];
                for i in 0..oh {
                    let y = (i * s1 + u) as isize - p1 as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let xx = (j * s2 + v) as isize - p2 as isize;
                        if xx >= 0 && xx < w as isize {
                            let dst = &mut x[c * h * w + y as usize * w + xx as usize];
                            *dst = *dst + src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

fn check_conv_shapes<T: Scalar>(w: &DenseTensor<T>, x: &DenseTensor<T>, geom: &ConvGeometry) -> Result<()> {
    expect_order(w, 4)?;
    expect_order(x, 3)?;
    let ws = w.shape();
    if ws[1] != x.shape()[0] {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, input has {}",
            ws[1],
            x.shape()[0]
        )));
    }
    if (ws[2], ws[3]) != geom.kernel {
        return Err(Error::shape(format!(
            "kernel is {}x{} but geometry says {:?}",
            ws[2], ws[3], geom.kernel
        )));
    }
    Ok(())
}

/// `W ⊛ x` for `W: m×n×k1×k2`, `x: n×h×w`; returns `m×h'×w'`.
pub fn conv2d<T: Scalar>(
    w: &DenseTensor<T>,
    x: &DenseTensor<T>,
    geom: &ConvGeometry,
) -> Result<DenseTensor<T>> {
    check_conv_shapes(w, x, geom)?;
    let cols = unfold_input(x, geom)?;
    let (rows, oh, ow) = (cols.shape()[0], cols.shape()[1], cols.shape()[2]);
    let m = w.shape()[0];
    let mut out = vec![T::zero(); m * oh * ow];
    gemm(w.data(), cols.data(), &mut out, m, rows, oh * ow);
    Ok(DenseTensor::from_parts(vec![m, oh, ow], out))
}

/// Gradients of a loss through `y = W ⊛ x`: returns `(dL/dW, dL/dx)` given
/// `dL/dy`.
pub fn conv2d_backward<T: Scalar>(
    w: &DenseTensor<T>,
    x: &DenseTensor<T>,
    geom: &ConvGeometry,
    grad_out: &DenseTensor<T>,
) -> Result<(DenseTensor<T>, DenseTensor<T>)> {
    check_conv_shapes(w, x, geom)?;
    let cols = unfold_input(x, geom)?;
    let (rows, oh, ow) = (cols.shape()[0], cols.shape()[1], cols.shape()[2]);
    let m = w.shape()[0];
    if grad_out.shape() != [m, oh, ow] {
        return Err(Error::shape("output gradient does not match convolution output"));
    }
    let mut gw = vec![T::zero(); m * rows];
    gemm_bt(grad_out.data(), cols.data(), &mut gw, m, oh * ow, rows);
    let mut gcols = vec![T::zero(); rows * oh * ow];
    gemm_at(w.data(), grad_out.data(), &mut gcols, rows, m, oh * ow);
    let xs = x.shape();
    let gx = col2im(&gcols, xs[0], xs[1], xs[2], geom)?;
    Ok((
        DenseTensor::from_parts(w.shape().to_vec(), gw),
        DenseTensor::from_parts(xs.to_vec(), gx),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor<f64> {
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop cross-correlation with zero padding.
    fn naive_conv(w: &DenseTensor<f64>, x: &DenseTensor<f64>, g: &ConvGeometry) -> DenseTensor<f64> {
        let (m, n, k1, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        let oh = (h + 2 * g.padding.0 - k1) / g.stride.0 + 1;
        let ow = (wd + 2 * g.padding.1 - k2) / g.stride.1 + 1;
        DenseTensor::from_fn(vec![m, oh, ow], |o| {
            let mut acc = 0.0;
            for c in 0..n {
                for u in 0..k1 {
                    for v in 0..k2 {
                        let y = (o[1] * g.stride.0 + u) as isize - g.padding.0 as isize;
                        let xx = (o[2] * g.stride.1 + v) as isize - g.padding.1 as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += w.get(&[o[0], c, u, v]) * x.get(&[c, y as usize, xx as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matricize_kernel_shape() {
        let t = DenseTensor::<f64>::zeros(vec![8, 16, 3, 3]);
        let m = matricize_mode1(&t).unwrap();
        assert_eq!((m.rows(), m.cols()), (8, 144));
        let back = tensorize_mode1(&m, (16, 3, 3)).unwrap();
        assert_eq!(back.shape(), &[8, 16, 3, 3]);
    }

    #[test]
    fn matricize_singleton_and_order_error() {
        let t = DenseTensor::new(vec![1, 1, 1, 1], vec![7.0]).unwrap();
        let m = matricize_mode1(&t).unwrap();
        assert_eq!(m.data(), &[7.0]);
        let bad = DenseTensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matricize_mode1(&bad), Err(Error::OrderMismatch { expected: 4, actual: 2 })));
        let zero = Matrix::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(tensorize_mode1(&zero, (1, 1, 1)).unwrap().data(), &[0.0]);
        assert!(tensorize_mode1(&zero, (2, 1, 1)).is_err());
    }

    #[test]
    fn matricize_column_order_by_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(vec![2, 3, 2, 2], &mut rng);
        let m = matricize_mode1(&t).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                for u in 0..2 {
                    for v in 0..2 {
                        assert_eq!(m.get(i, c * 4 + u * 2 + v), t.get(&[i, c, u, v]));
                    }
                }
            }
        }
        assert_eq!(tensorize_mode1(&m, (3, 2, 2)).unwrap(), t);
    }

    #[test]
    fn unfold_identity_for_pointwise() {
        let x = DenseTensor::new(vec![1, 1, 1], vec![3.5]).unwrap();
        assert_eq!(unfold_input(&x, &ConvGeometry::pointwise()).unwrap(), x);
    }

    #[test]
    fn unfold_geometry_by_patch_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![2, 4, 4], &mut rng);
        let g = ConvGeometry::new((3, 3), (1, 1), (0, 0));
        let u = unfold_input(&x, &g).unwrap();
        assert_eq!(u.shape(), &[18, 2, 2]);
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    for i in 0..2 {
                        for j in 0..2 {
                            assert_eq!(u.get(&[c * 9 + ky * 3 + kx, i, j]), x.get(&[c, i + ky, j + kx]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_padded_ones_center_row() {
        let x = DenseTensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let u = unfold_input(&x, &ConvGeometry::new((3, 3), (1, 1), (1, 1))).unwrap();
        assert_eq!(u.shape(), &[9, 3, 3]);
        // Row 4 is the kernel center: every window sees an in-bounds pixel.
        assert!((0..3).all(|i| (0..3).all(|j| u.get(&[4, i, j]) == 1.0)));
        // The corner tap of the corner window falls into the padding.
        assert_eq!(u.get(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn unfold_rejects_oversized_kernel() {
        let x = DenseTensor::<f64>::zeros(vec![1, 2, 2]);
        let err = unfold_input(&x, &ConvGeometry::new((3, 3), (1, 1), (0, 0))).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![1, 5, 4], &mut rng);
        let w = DenseTensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&w, &x, &ConvGeometry::pointwise()).unwrap();
        assert_eq!(y.data(), x.map(|v| 2.0 * v).data());
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in [
            ConvGeometry::new((3, 3), (1, 1), (0, 0)),
            ConvGeometry::new((3, 3), (1, 1), (1, 1)),
            ConvGeometry::new((3, 2), (2, 1), (1, 0)),
        ] {
            let w = random(vec![4, 3, g.kernel.0, g.kernel.1], &mut rng);
            let x = random(vec![3, 8, 8], &mut rng);
            let fast = conv2d(&w, &x, &g).unwrap();
            let slow = naive_conv(&w, &x, &g);
            assert_eq!(fast.shape(), slow.shape());
            let err = fast.sub(&slow).unwrap().max_abs();
            assert!(err < 1e-12, "{g:?}: {err}");
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let w = DenseTensor::<f64>::zeros(vec![2, 3, 1, 1]);
        let x = DenseTensor::<f64>::zeros(vec![2, 4, 4]);
        assert!(matches!(conv2d(&w, &x, &ConvGeometry::pointwise()), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry::new((3, 3), (2, 2), (1, 1));
        let w = random(vec![2, 2, 3, 3], &mut rng);
        let x = random(vec![2, 5, 5], &mut rng);
        let y = conv2d(&w, &x, &g).unwrap();
        let probe = random(y.shape().to_vec(), &mut rng);
        let loss = |w: &DenseTensor<f64>, x: &DenseTensor<f64>| -> f64 {
            let y = conv2d(w, x, &g).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (gw, gx) = conv2d_backward(&w, &x, &g, &probe).unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 20, 35] {
            let mut d = w.data().to_vec();
            d[idx] += h;
            let up = loss(&DenseTensor::new(w.shape().to_vec(), d.clone()).unwrap(), &x);
            d[idx] -= 2.0 * h;
            let dn = loss(&DenseTensor::new(w.shape().to_vec(), d).unwrap(), &x);
            assert!(((up - dn) / (2.0 * h) - gw.data()[idx]).abs() < 1e-8);
        }
        for idx in [0usize, 12, 24, 49] {
            let mut d = x.data().to_vec();
            d[idx] += h;
            let up = loss(&w, &DenseTensor::new(x.shape().to_vec(), d.clone()).unwrap());
            d[idx] -= 2.0 * h;
            let dn = loss(&w, &DenseTensor::new(x.shape().to_vec(), d).unwrap());
            assert!(((up - dn) / (2.0 * h) - gx.data()[idx]).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn fold_unfold_roundtrip(m in 1usize..5, n in 1usize..5, k1 in 1usize..4, k2 in 1usize..4, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = random(vec![m, n, k1, k2], &mut rng);
                let back = tensorize_mode1(&matricize_mode1(&t).unwrap(), (n, k1, k2)).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn conv_is_linear_in_weights(seed in any::<u64>(), pad in 0usize..2) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = ConvGeometry::new((3, 3), (1, 1), (pad, pad));
                let w1 = random(vec![3, 2, 3, 3], &mut rng);
                let w2 = random(vec![3, 2, 3, 3], &mut rng);
                let x = random(vec![2, 6, 7], &mut rng);
                let lhs = conv2d(&w1.add(&w2).unwrap(), &x, &g).unwrap();
                let rhs = conv2d(&w1, &x, &g).unwrap().add(&conv2d(&w2, &x, &g).unwrap()).unwrap();
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-5);
            }

            #[test]
            fn conv_matches_naive_on_random_sizes(
                m in 1usize..9, n in 1usize..9, hw in 3usize..17, seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = ConvGeometry::new((3, 3), (1, 1), (1, 1));
                let w = random(vec![m, n, 3, 3], &mut rng);
                let x = random(vec![n, hw, hw], &mut rng);
                let err = conv2d(&w, &x, &g).unwrap().sub(&naive_conv(&w, &x, &g)).unwrap().max_abs();
                prop_assert!(err <= 1e-5);
            }
        }
    }
}
