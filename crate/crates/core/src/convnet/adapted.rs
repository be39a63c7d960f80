//! The quantized network `Q(y|x; θ̃, φ, r)`: every conv layer evaluates
//! `deq(⟦W⟧)⊛x + B⊛A⊛x`, dense layers are quantized without adapters and
//! biases stay in floating point.
//!
//! The two branches are linear in the same unfolded input, so each conv
//! layer caches the effective kernel `deq(⟦W⟧)_(1) + B_(1)A_(1)` and runs a
//! single convolution; the adapters themselves stay available for export.

use rayon::prelude::*;

use super::graph::{self, Op};
use super::{check_composition, check_input, Classifier, Dataset, Layer, Model, ShapeOp};
use crate::adapter::{
    build_adapter_hard, build_adapter_soft, butterworth_mask, factorize_residual, mask_gradient, LowRankAdapter,
    ResidualFactorization,
};
use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, QuantSpec, QuantizedTensor};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, DenseTensor};

/// The residual adapter attached to a quantized conv layer.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterState<T> {
    None,
    /// Full-width Butterworth-masked adapter used during the rank search.
    Soft { cutoff: T, order: u32 },
    /// Truncated adapter; `quantized` holds the integer codes of `A` and `B`
    /// when the adapter weights were quantized.
    Hard { adapter: LowRankAdapter<T>, quantized: Option<(QuantizedTensor<T>, QuantizedTensor<T>)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConv<T> {
    quantized: QuantizedTensor<T>,
    bias: Option<Vec<T>>,
    geometry: ConvGeometry,
    factorization: Option<ResidualFactorization<T>>,
    adapter: AdapterState<T>,
    effective: Vec<T>,
}

impl<T: Scalar> QuantConv<T> {
    /// Assembles a layer from stored parts (no factorization is available,
    /// so the adapter is fixed).
    pub fn new(
        quantized: QuantizedTensor<T>,
        bias: Option<Vec<T>>,
        geometry: ConvGeometry,
        adapter: Option<LowRankAdapter<T>>,
        adapter_codes: Option<(QuantizedTensor<T>, QuantizedTensor<T>)>,
    ) -> Result<Self> {
        let s = quantized.shape();
        if s.len() != 4 || (s[2], s[3]) != geometry.kernel {
            return Err(Error::shape(format!("conv kernel {s:?} does not match geometry {:?}", geometry.kernel)));
        }
        let adapter = match adapter {
            None if adapter_codes.is_some() => return Err(Error::invalid("adapter codes without an adapter")),
            None => AdapterState::None,
            Some(a) => {
                let (sa, sb) = (a.a().shape(), a.b().shape());
                if sb[0] != s[0] || sa[1..] != s[1..] || *a.geometry() != geometry {
                    return Err(Error::shape(format!("adapter {sa:?}/{sb:?} does not fit conv {s:?}")));
                }
                AdapterState::Hard { adapter: a, quantized: adapter_codes }
            }
        };
        let mut layer = Self { quantized, bias, geometry, factorization: None, adapter, effective: Vec::new() };
        layer.refresh()?;
        Ok(layer)
    }

    pub fn quantized(&self) -> &QuantizedTensor<T> {
        &self.quantized
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn factorization(&self) -> Option<&ResidualFactorization<T>> {
        self.factorization.as_ref()
    }

    pub fn adapter(&self) -> &AdapterState<T> {
        &self.adapter
    }

    pub fn out_channels(&self) -> usize {
        self.quantized.shape()[0]
    }

    /// `R = min(m, n·k1·k2)`.
    pub fn max_rank(&self) -> usize {
        let s = self.quantized.shape();
        s[0].min(s[1] * s[2] * s[3])
    }

    /// `Θ`: number of weights of the host kernel.
    pub fn parameter_count(&self) -> usize {
        self.quantized.codes().len()
    }

    /// The effective `m × (n·k1·k2)` kernel this layer convolves with.
    pub fn effective_weight(&self) -> &[T] {
        &self.effective
    }

    fn refresh(&mut self) -> Result<()> {
        let mut w = dequantize(&self.quantized).into_data();
        let extra = match &self.adapter {
            AdapterState::None => None,
            AdapterState::Soft { cutoff, order } => {
                let f = self.factorization.as_ref().ok_or_else(|| Error::invalid("soft adapter without factorization"))?;
                Some(build_adapter_soft(f, *cutoff, *order)?.matrix())
            }
            AdapterState::Hard { adapter, .. } => Some(adapter.matrix()),
        };
        if let Some(m) = extra {
            w.iter_mut().zip(m.data()).for_each(|(x, &d)| *x = *x + d);
        }
        self.effective = w;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantDense<T> {
    quantized: QuantizedTensor<T>,
    bias: Option<Vec<T>>,
    effective: Vec<T>,
}

impl<T: Scalar> QuantDense<T> {
    pub fn new(quantized: QuantizedTensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if quantized.shape().len() != 2 {
            return Err(Error::shape("dense weight must be a matrix"));
        }
        let effective = dequantize(&quantized).into_data();
        Ok(Self { quantized, bias, effective })
    }

    pub fn quantized(&self) -> &QuantizedTensor<T> {
        &self.quantized
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantLayer<T> {
    Conv(QuantConv<T>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Dense(QuantDense<T>),
}

impl<T: Scalar> QuantLayer<T> {
    fn shape_op(&self) -> ShapeOp {
        match self {
            QuantLayer::Conv(c) => {
                let s = c.quantized.shape();
                ShapeOp::Conv { out: s[0], inp: s[1], geometry: c.geometry, bias: c.bias.as_ref().map(Vec::len) }
            }
            QuantLayer::Relu => ShapeOp::Elementwise,
            QuantLayer::MaxPool { kernel, stride } | QuantLayer::AvgPool { kernel, stride } => {
                ShapeOp::Pool { kernel: *kernel, stride: *stride }
            }
            QuantLayer::Flatten => ShapeOp::Flatten,
            QuantLayer::Dense(d) => {
                let s = d.quantized.shape();
                ShapeOp::Dense { out: s[0], inp: s[1], bias: d.bias.as_ref().map(Vec::len) }
            }
        }
    }

    fn op(&self) -> Op<'_, T> {
        match self {
            QuantLayer::Conv(c) => Op::Conv {
                weight: &c.effective,
                bias: c.bias.as_deref(),
                out: c.out_channels(),
                geometry: c.geometry,
            },
            QuantLayer::Relu => Op::Relu,
            QuantLayer::MaxPool { kernel, stride } => Op::MaxPool { kernel: *kernel, stride: *stride },
            QuantLayer::AvgPool { kernel, stride } => Op::AvgPool { kernel: *kernel, stride: *stride },
            QuantLayer::Flatten => Op::Flatten,
            QuantLayer::Dense(d) => {
                Op::Dense { weight: &d.effective, bias: d.bias.as_deref(), out: d.quantized.shape()[0] }
            }
        }
    }
}

/// Mean data loss over a batch and its gradient with respect to each conv
/// layer's cutoff rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankGradient<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Quantized network with per-conv-layer residual adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedQuantModel<T> {
    input_shape: [usize; 3],
    num_classes: usize,
    weight_spec: QuantSpec,
    layers: Vec<QuantLayer<T>>,
}

impl<T: Scalar> AdaptedQuantModel<T> {
    /// Quantizes every conv and dense weight of `model` with `spec` and
    /// factorizes each conv residual. No adapters are attached yet.
    pub fn quantize(model: &Model<T>, spec: &QuantSpec) -> Result<Self> {
        let layers = model
            .layers()
            .par_iter()
            .enumerate()
            .map(|(idx, layer)| -> Result<QuantLayer<T>> {
                Ok(match layer {
                    Layer::Conv(c) => {
                        let quantized = quantize(&c.weight, spec)?;
                        let dw = c.weight.sub(&dequantize(&quantized))?;
                        let factorization = factorize_residual(idx, &dw, c.geometry)?;
                        let mut q = QuantConv {
                            quantized,
                            bias: c.bias.clone(),
                            geometry: c.geometry,
                            factorization: Some(factorization),
                            adapter: AdapterState::None,
                            effective: Vec::new(),
                        };
                        q.refresh()?;
                        QuantLayer::Conv(q)
                    }
                    Layer::Dense(d) => {
                        let w = DenseTensor::from_parts(vec![d.weight.rows(), d.weight.cols()], d.weight.data().to_vec());
                        QuantLayer::Dense(QuantDense::new(quantize(&w, spec)?, d.bias.clone())?)
                    }
                    Layer::Relu => QuantLayer::Relu,
                    Layer::MaxPool { kernel, stride } => QuantLayer::MaxPool { kernel: *kernel, stride: *stride },
                    Layer::AvgPool { kernel, stride } => QuantLayer::AvgPool { kernel: *kernel, stride: *stride },
                    Layer::Flatten => QuantLayer::Flatten,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { input_shape: model.input_shape(), num_classes: model.num_classes(), weight_spec: *spec, layers })
    }

    /// Reassembles a model from stored layers, checking shape composition.
    pub fn from_parts(
        input_shape: [usize; 3],
        num_classes: usize,
        weight_spec: QuantSpec,
        layers: Vec<QuantLayer<T>>,
    ) -> Result<Self> {
        check_composition(input_shape, num_classes, layers.iter().map(QuantLayer::shape_op))?;
        Ok(Self { input_shape, num_classes, weight_spec, layers })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weight_spec(&self) -> &QuantSpec {
        &self.weight_spec
    }

    pub fn layers(&self) -> &[QuantLayer<T>] {
        &self.layers
    }

    /// Conv layers in network order (the adaptable layers).
    pub fn convs(&self) -> impl Iterator<Item = &QuantConv<T>> {
        self.layers.iter().filter_map(|l| match l {
            QuantLayer::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut QuantConv<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            QuantLayer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.convs().count()
    }

    /// `R_l` per conv layer.
    pub fn max_ranks(&self) -> Vec<usize> {
        self.convs().map(QuantConv::max_rank).collect()
    }

    /// `Θ_l` per conv layer.
    pub fn parameter_counts(&self) -> Vec<usize> {
        self.convs().map(QuantConv::parameter_count).collect()
    }

    /// Rank of each conv layer's adapter: `None` without adapter, the full
    /// width for soft adapters.
    pub fn adapter_ranks(&self) -> Vec<Option<usize>> {
        self.convs()
            .map(|c| match &c.adapter {
                AdapterState::None => None,
                AdapterState::Soft { .. } => Some(c.max_rank()),
                AdapterState::Hard { adapter, .. } => Some(adapter.rank()),
            })
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.conv_count() {
            return Err(Error::shape(format!("{len} ranks for {} conv layers", self.conv_count())));
        }
        Ok(())
    }

    /// Removes every adapter (plain quantized model).
    pub fn clear_adapters(&mut self) -> Result<()> {
        for c in self.convs_mut() {
            c.adapter = AdapterState::None;
            c.refresh()?;
        }
        Ok(())
    }

    /// Attaches Butterworth-masked adapters with continuous cutoffs `ranks`.
    pub fn set_soft_ranks(&mut self, ranks: &[T], order: u32) -> Result<()> {
        self.check_len(ranks.len())?;
        let convs: Vec<&mut QuantConv<T>> = self.convs_mut().collect();
        convs.into_par_iter().zip(ranks.par_iter()).try_for_each(|(c, &r)| {
            if c.factorization.is_none() {
                return Err(Error::invalid("layer has no residual factorization (loaded model?)"));
            }
            // Validate before mutating.
            butterworth_mask(r, 1, order)?;
            c.adapter = AdapterState::Soft { cutoff: r, order };
            c.refresh()
        })
    }

    /// Attaches hard-truncated adapters of integer `ranks`. Adapter weights
    /// are rounded to single precision, the precision they are stored in.
    pub fn set_hard_ranks(&mut self, ranks: &[usize]) -> Result<()> {
        self.check_len(ranks.len())?;
        let convs: Vec<&mut QuantConv<T>> = self.convs_mut().collect();
        convs.into_par_iter().zip(ranks.par_iter()).try_for_each(|(c, &r)| {
            let f = c.factorization.as_ref().ok_or_else(|| Error::invalid("layer has no residual factorization"))?;
            let adapter = build_adapter_hard(f, r)?.try_map_kernels(|k| Ok(k.map(T::round_to_f32)))?;
            c.adapter = AdapterState::Hard { adapter, quantized: None };
            c.refresh()
        })
    }

    /// Quantizes the weights of every hard adapter with `spec`, replacing
    /// them with their de-quantized values.
    pub fn quantize_adapters(&mut self, spec: &QuantSpec) -> Result<()> {
        for c in self.convs_mut() {
            if let AdapterState::Hard { adapter, quantized } = &mut c.adapter {
                if quantized.is_some() {
                    return Err(Error::invalid("adapters are already quantized"));
                }
                let qa = quantize(adapter.a(), spec)?;
                let qb = quantize(adapter.b(), spec)?;
                *adapter = LowRankAdapter::from_parts(dequantize(&qa), dequantize(&qb), *adapter.geometry())?;
                *quantized = Some((qa, qb));
                c.refresh()?;
            }
        }
        Ok(())
    }

    fn ops(&self) -> Vec<Op<'_, T>> {
        self.layers.iter().map(QuantLayer::op).collect()
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to the
    /// soft-adapter cutoffs. Every conv layer must carry a soft adapter.
    ///
    /// With `M = Σᵢ Φᵢ² σᵢ uᵢ vᵢᵀ` the composed adapter and `G = dL/dW_(1)`,
    /// `dL/dr_l = Σᵢ 2 Φᵢ Φᵢ' σᵢ · uᵢᵀ G vᵢ`. Non-finite values are returned
    /// as-is for the caller to handle.
    pub fn grad_wrt_ranks(&self, batch: &Dataset<T>) -> Result<RankGradient<T>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut soft = Vec::new();
        for c in self.convs() {
            match (&c.adapter, &c.factorization) {
                (AdapterState::Soft { cutoff, order }, Some(f)) => soft.push((f, *cutoff, *order)),
                _ => return Err(Error::invalid("rank gradients need soft adapters on every conv layer")),
            }
        }
        let ops = self.ops();
        let tracked: Vec<bool> = self.layers.iter().map(|l| matches!(l, QuantLayer::Conv(_))).collect();
        let scale = T::one() / T::of_usize(batch.len());
        let per_sample = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let x = check_input(self.input_shape, &batch.image(i))?;
                graph::loss_and_weight_grads(&ops, x, batch.labels()[i], scale, &tracked)
            })
            .collect::<Result<Vec<_>>>()?;

        // Reduce in sample order so the result does not depend on scheduling.
        let mut loss = T::zero();
        let mut sums: Vec<Option<Vec<T>>> = vec![None; ops.len()];
        for (l, grads) in per_sample {
            loss = loss + l;
            for (acc, g) in sums.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        let grad = sums
            .into_iter()
            .flatten()
            .zip(soft)
            .map(|(g, (f, cutoff, order))| rank_derivative(f, &g, cutoff, order))
            .collect::<Result<Vec<_>>>()?;
        Ok(RankGradient { loss: loss * scale, grad })
    }
}

fn rank_derivative<T: Scalar>(f: &ResidualFactorization<T>, g: &[T], cutoff: T, order: u32) -> Result<T> {
    let r = f.max_rank();
    let phi = butterworth_mask(cutoff, r, order)?;
    let dphi = mask_gradient(cutoff, r, order)?;
    let (u, v) = (f.u(), f.v());
    let (m, cols) = (u.rows(), v.rows());
    let mut total = T::zero();
    for i in 0..r {
        let weight = T::of(2.0) * phi.values()[i] * dphi[i] * f.s()[i];
        if weight == T::zero() {
            continue;
        }
        let mut u_gv = T::zero();
        for row in 0..m {
            let gv = (0..cols).fold(T::zero(), |s, j| s + g[row * cols + j] * v.get(j, i));
            u_gv = u_gv + u.get(row, i) * gv;
        }
        total = total + weight * u_gv;
    }
    Ok(total)
}

impl<T: Scalar> Classifier<T> for AdaptedQuantModel<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn logits(&self, image: &DenseTensor<T>) -> Result<Vec<T>> {
        graph::forward(&self.ops(), check_input(self.input_shape, image)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{smooth_toy_model, toy_data, toy_model};
    use super::super::{data_loss, predict_logits, ConvLayer, DenseLayer};
    use super::*;
    use crate::quant::ClipScheme;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> QuantSpec {
        QuantSpec::weights(4).unwrap()
    }

    #[test]
    fn full_rank_matches_float_model() {
        let model = toy_model(11);
        let data = toy_data(12, 8);
        let mut q = AdaptedQuantModel::quantize(&model, &QuantSpec::new(3, ClipScheme::MinMax, crate::quant::QuantMode::Asymmetric).unwrap()).unwrap();
        assert_eq!(q.max_ranks(), vec![4, 6, 5]);
        // Dense layers are quantized too, so compare against a float model
        // carrying the same de-quantized head.
        let mut reference = model.clone();
        if let (Some(Layer::Dense(d)), Some(QuantLayer::Dense(qd))) = (reference.layers.last_mut(), q.layers.last()) {
            d.weight = Matrix::new(d.weight.rows(), d.weight.cols(), qd.effective.clone()).unwrap();
        }
        q.set_hard_ranks(&q.max_ranks()).unwrap();
        let want = predict_logits(&reference, &data).unwrap();
        let got = predict_logits(&q, &data).unwrap();
        for (a, b) in got.iter().zip(&want) {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(num <= 1e-3 * den, "{a:?} vs {b:?}");
        }
    }

    fn fd_check(model: &AdaptedQuantModel<f64>, data: &Dataset<f64>, ranks: &[f64], h: f64, tol: f64) {
        let order = 4;
        let mut m = model.clone();
        m.set_soft_ranks(ranks, order).unwrap();
        let g = m.grad_wrt_ranks(data).unwrap();
        assert!((g.loss - data_loss(&m, data).unwrap()).abs() < 1e-12);
        for l in 0..ranks.len() {
            let eval = |delta: f64| {
                let mut r = ranks.to_vec();
                r[l] += delta;
                let mut mm = model.clone();
                mm.set_soft_ranks(&r, order).unwrap();
                data_loss(&mm, data).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (g.grad[l] - fd).abs();
            assert!(err <= tol * fd.abs().max(1e-6), "layer {l} at {ranks:?}: {} vs {fd}", g.grad[l]);
        }
    }

    #[test]
    fn rank_gradient_matches_finite_differences() {
        // Without kinks the loss is smooth in r, so a wide step is accurate.
        let q = AdaptedQuantModel::quantize(&smooth_toy_model(24), &QuantSpec::weights(2).unwrap()).unwrap();
        let data = toy_data(25, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..3 {
            let ranks: Vec<f64> = q.max_ranks().iter().map(|&r| rng.gen_range(1.0..r as f64)).collect();
            fd_check(&q, &data, &ranks, 1e-2, 1e-3);
        }
    }

    #[test]
    fn rank_gradient_through_relu_and_max_pool() {
        // ReLU and max pooling are piecewise linear; a small step keeps the
        // difference quotient on one linear piece.
        let q = AdaptedQuantModel::quantize(&toy_model(21), &QuantSpec::weights(2).unwrap()).unwrap();
        let data = toy_data(22, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..3 {
            let ranks: Vec<f64> = q.max_ranks().iter().map(|&r| rng.gen_range(1.0..r as f64)).collect();
            fd_check(&q, &data, &ranks, 1e-5, 1e-5);
        }
    }

    #[test]
    fn duplicating_the_batch_keeps_the_gradient() {
        let q = AdaptedQuantModel::quantize(&toy_model(31), &spec()).unwrap();
        let mut m = q.clone();
        m.set_soft_ranks(&[1.5, 2.5, 3.5], 4).unwrap();
        let data = toy_data(32, 5);
        let twice = data.subset(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let (a, b) = (m.grad_wrt_ranks(&data).unwrap(), m.grad_wrt_ranks(&twice).unwrap());
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn zero_residual_layer_has_zero_gradient() {
        // Weights {-1, 0, 1, 2} are exactly the 2-bit min-max grid (s = 1).
        let conv = |m: usize, n: usize| {
            Layer::Conv(ConvLayer {
                weight: DenseTensor::from_fn(vec![m, n, 1, 1], |i| ((i[0] + 2 * i[1]) % 4) as f64 - 1.0),
                bias: None,
                geometry: ConvGeometry::pointwise(),
            })
        };
        let model = Model::new(
            [2, 2, 2],
            2,
            vec![conv(3, 2), Layer::Relu, Layer::Flatten, Layer::Dense(DenseLayer { weight: Matrix::from_fn(2, 12, |i, j| (i + j) as f64 * 0.1), bias: None })],
        )
        .unwrap();
        let spec = QuantSpec::adapters(2).unwrap();
        let mut q = AdaptedQuantModel::quantize(&model, &spec).unwrap();
        assert!(q.convs().next().unwrap().factorization().unwrap().s().iter().all(|&s| s == 0.0));
        q.set_soft_ranks(&[1.3], 4).unwrap();
        let data = Dataset::new([2, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect(), vec![0, 1], 2).unwrap();
        assert_eq!(q.grad_wrt_ranks(&data).unwrap().grad, vec![0.0]);
    }

    #[test]
    fn gradient_needs_soft_adapters() {
        let mut q = AdaptedQuantModel::quantize(&toy_model(41), &spec()).unwrap();
        let data = toy_data(42, 2);
        assert!(q.grad_wrt_ranks(&data).is_err());
        q.set_hard_ranks(&[1, 1, 1]).unwrap();
        assert!(q.grad_wrt_ranks(&data).is_err());
        assert!(q.set_soft_ranks(&[1.0, 1.0], 4).is_err());
        assert!(q.set_soft_ranks(&[1.0, 0.0, 1.0], 4).is_err());
        assert!(q.set_hard_ranks(&[1, 7, 1]).is_err());
    }

    #[test]
    fn adapter_quantization_records_codes() {
        let mut q = AdaptedQuantModel::quantize(&toy_model(51), &spec()).unwrap();
        q.set_hard_ranks(&[2, 3, 1]).unwrap();
        assert_eq!(q.adapter_ranks(), vec![Some(2), Some(3), Some(1)]);
        q.quantize_adapters(&QuantSpec::adapters(8).unwrap()).unwrap();
        for c in q.convs() {
            match c.adapter() {
                AdapterState::Hard { adapter, quantized: Some((qa, _)) } => {
                    assert_eq!(&dequantize(qa), adapter.a());
                }
                other => panic!("unexpected adapter state {other:?}"),
            }
        }
        assert!(q.quantize_adapters(&QuantSpec::adapters(8).unwrap()).is_err());
        q.clear_adapters().unwrap();
        assert_eq!(q.adapter_ranks(), vec![None; 3]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut q = AdaptedQuantModel::quantize(&toy_model(61), &spec()).unwrap();
        q.set_soft_ranks(&[2.2, 3.1, 1.7], 4).unwrap();
        let data = toy_data(62, 10);
        assert_eq!(predict_logits(&q, &data).unwrap(), predict_logits(&q, &data).unwrap());
        assert_eq!(q.grad_wrt_ranks(&data).unwrap(), q.grad_wrt_ranks(&data).unwrap());
    }
}

