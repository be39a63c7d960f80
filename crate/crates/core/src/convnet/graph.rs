//! Per-sample evaluation engine shared by the float and quantized networks:
//! a forward pass over borrowed weights and a reverse pass that yields the
//! weight-space gradient `dL/dW_(1)` of selected conv layers.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{col2im, gemm, gemm_at, gemm_bt, im2col, ConvGeometry};

/// One layer with its (effective) weights borrowed from the owning model.
/// Conv weights are the `m × (n·k1·k2)` mode-1 matricization; dense weights
/// are `out × in`, both row-major.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Op<'a, T> {
    Conv { weight: &'a [T], bias: Option<&'a [T]>, out: usize, geometry: ConvGeometry },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Dense { weight: &'a [T], bias: Option<&'a [T]>, out: usize },
}

/// An activation: a flat buffer plus its shape (`[n, h, w]` or `[d]`).
#[derive(Debug, Clone)]
pub(crate) struct Act<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn pool_out(h: usize, kernel: usize, stride: usize) -> usize {
    (h - kernel) / stride + 1
}

/// Forward through one op. For conv layers the unfolded columns are
/// returned too so the reverse pass can reuse them.
fn step<T: Scalar>(op: &Op<'_, T>, x: &Act<T>) -> Result<(Act<T>, Option<Vec<T>>)> {
    Ok(match *op {
        Op::Conv { weight, bias, out, geometry } => {
            let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (oh, ow) = geometry.output_size(h, w)?;
            let cols = im2col(&x.data, n, h, w, &geometry, oh, ow);
            let rows = n * geometry.kernel.0 * geometry.kernel.1;
            let positions = oh * ow;
            let mut y = vec![T::zero(); out * positions];
            if let Some(b) = bias {
                for (plane, &bv) in y.chunks_mut(positions).zip(b) {
                    plane.iter_mut().for_each(|v| *v = bv);
                }
            }
            gemm(weight, &cols, &mut y, out, rows, positions);
            (Act { shape: vec![out, oh, ow], data: y }, Some(cols))
        }
        Op::Relu => (
            Act { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(T::zero())).collect() },
            None,
        ),
        Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
            let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (oh, ow) = (pool_out(h, kernel, stride), pool_out(w, kernel, stride));
            let is_max = matches!(op, Op::MaxPool { .. });
            let area = T::of_usize(kernel * kernel);
            let mut y = Vec::with_capacity(n * oh * ow);
            for c in 0..n {
                let plane = &x.data[c * h * w..(c + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let window = (0..kernel)
                            .flat_map(|u| (0..kernel).map(move |v| (i * stride + u) * w + j * stride + v));
                        y.push(if is_max {
                            window.map(|p| plane[p]).fold(T::neg_infinity(), T::max)
                        } else {
                            window.map(|p| plane[p]).sum::<T>() / area
                        });
                    }
                }
            }
            (Act { shape: vec![n, oh, ow], data: y }, None)
        }
        Op::Flatten => (Act { shape: vec![x.data.len()], data: x.data.clone() }, None),
        Op::Dense { weight, bias, out } => {
            let inp = x.data.len();
            let mut y = bias.map_or_else(|| vec![T::zero(); out], <[T]>::to_vec);
            gemm(weight, &x.data, &mut y, out, inp, 1);
            (Act { shape: vec![out], data: y }, None)
        }
    })
}

/// Logits of one sample.
pub(crate) fn forward<T: Scalar>(ops: &[Op<'_, T>], x: Act<T>) -> Result<Vec<T>> {
    let mut act = x;
    for op in ops {
        act = step(op, &act)?.0;
    }
    Ok(act.data)
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`,
/// stabilized by max subtraction.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().cloned().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Loss of one sample and, for every op flagged in `tracked` (conv ops
/// only), the gradient of `scale · loss` with respect to that op's weight
/// matrix. The reverse pass stops below the lowest tracked op.
pub(crate) fn loss_and_weight_grads<T: Scalar>(
    ops: &[Op<'_, T>],
    x: Act<T>,
    label: usize,
    scale: T,
    tracked: &[bool],
) -> Result<(T, Vec<Option<Vec<T>>>)> {
    debug_assert_eq!(ops.len(), tracked.len());
    let mut inputs = Vec::with_capacity(ops.len());
    let mut cols = Vec::with_capacity(ops.len());
    let mut act = x;
    for op in ops {
        let (next, c) = step(op, &act)?;
        inputs.push(act);
        cols.push(c);
        act = next;
    }
    let (loss, mut g) = softmax_cross_entropy(&act.data, label);
    g.iter_mut().for_each(|v| *v = *v * scale);

    let mut grads = vec![None; ops.len()];
    let lowest = match tracked.iter().position(|&t| t) {
        Some(i) => i,
        None => return Ok((loss, grads)),
    };
    for idx in (lowest..ops.len()).rev() {
        let x = &inputs[idx];
        let need_input_grad = idx > lowest;
        match ops[idx] {
            Op::Conv { weight, out, geometry, .. } => {
                let c = cols[idx].as_ref().expect("conv records columns");
                let positions = g.len() / out;
                let rows = c.len() / positions;
                if tracked[idx] {
                    let mut gw = vec![T::zero(); out * rows];
                    gemm_bt(&g, c, &mut gw, out, positions, rows);
                    grads[idx] = Some(gw);
                }
                if need_input_grad {
                    let mut gc = vec![T::zero(); rows * positions];
                    gemm_at(weight, &g, &mut gc, rows, out, positions);
                    g = col2im(&gc, x.shape[0], x.shape[1], x.shape[2], &geometry)?;
                }
            }
            Op::Relu => {
                for (gv, &xv) in g.iter_mut().zip(&x.data) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            Op::MaxPool { kernel, stride } => {
                let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (pool_out(h, kernel, stride), pool_out(w, kernel, stride));
                let mut gx = vec![T::zero(); x.data.len()];
                for c in 0..n {
                    let base = c * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            // First maximal element of the window wins.
                            let mut best = base + i * stride * w + j * stride;
                            for u in 0..kernel {
                                for v in 0..kernel {
                                    let p = base + (i * stride + u) * w + j * stride + v;
                                    if x.data[p] > x.data[best] {
                                        best = p;
                                    }
                                }
                            }
                            gx[best] = gx[best] + g[(c * oh + i) * ow + j];
                        }
                    }
                }
                g = gx;
            }
            Op::AvgPool { kernel, stride } => {
                let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (pool_out(h, kernel, stride), pool_out(w, kernel, stride));
                let area = T::of_usize(kernel * kernel);
                let mut gx = vec![T::zero(); x.data.len()];
                for c in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            let share = g[(c * oh + i) * ow + j] / area;
                            for u in 0..kernel {
                                for v in 0..kernel {
                                    let p = c * h * w + (i * stride + u) * w + j * stride + v;
                                    gx[p] = gx[p] + share;
                                }
                            }
                        }
                    }
                }
                g = gx;
            }
            Op::Flatten => {}
            Op::Dense { weight, out, .. } => {
                let inp = x.data.len();
                let mut gx = vec![T::zero(); inp];
                gemm_at(weight, &g, &mut gx, inp, out, 1);
                g = gx;
            }
        }
    }
    Ok((loss, grads))
}
