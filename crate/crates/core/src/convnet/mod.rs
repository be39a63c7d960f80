//! A minimal feed-forward ConvNet: conv, ReLU, max/avg pooling, flatten and
//! dense layers with softmax cross-entropy, plus the quantized-with-adapters
//! variant whose only trainable variables are the adapter ranks.

mod adapted;
pub(crate) mod graph;

pub use adapted::{AdaptedQuantModel, AdapterState, QuantConv, QuantDense, QuantLayer, RankGradient};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, DenseTensor, Matrix};
use graph::{Act, Op};

/// Float conv layer: `m×n×k1×k2` kernel, optional per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: DenseTensor<T>,
    pub bias: Option<Vec<T>>,
    pub geometry: ConvGeometry,
}

/// Float dense layer: `out × in` weight, optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Dense(DenseLayer<T>),
}

/// Weight-free description of a layer, enough to propagate shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ShapeOp {
    Conv { out: usize, inp: usize, geometry: ConvGeometry, bias: Option<usize> },
    Pool { kernel: usize, stride: usize },
    Elementwise,
    Flatten,
    Dense { out: usize, inp: usize, bias: Option<usize> },
}

impl<T: Scalar> Layer<T> {
    pub(crate) fn shape_op(&self) -> ShapeOp {
        match self {
            Layer::Conv(c) => ShapeOp::Conv {
                out: c.weight.shape()[0],
                inp: c.weight.shape()[1],
                geometry: c.geometry,
                bias: c.bias.as_ref().map(Vec::len),
            },
            Layer::Relu => ShapeOp::Elementwise,
            Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => {
                ShapeOp::Pool { kernel: *kernel, stride: *stride }
            }
            Layer::Flatten => ShapeOp::Flatten,
            Layer::Dense(d) => ShapeOp::Dense {
                out: d.weight.rows(),
                inp: d.weight.cols(),
                bias: d.bias.as_ref().map(Vec::len),
            },
        }
    }
}

/// Propagates `input` through `ops`, checking that every layer accepts its
/// input and that the network ends in a `[classes]` vector.
pub(crate) fn check_composition(
    input: [usize; 3],
    classes: usize,
    ops: impl IntoIterator<Item = ShapeOp>,
) -> Result<()> {
    let mut shape = input.to_vec();
    for (i, op) in ops.into_iter().enumerate() {
        let fail = |msg: String| Err(Error::shape(format!("layer {i}: {msg}")));
        shape = match op {
            ShapeOp::Conv { out, inp, geometry, bias } => {
                if shape.len() != 3 || shape[0] != inp {
                    return fail(format!("conv expects {inp} channels, input is {shape:?}"));
                }
                if bias.is_some_and(|b| b != out) {
                    return fail(format!("bias length differs from {out} output channels"));
                }
                let (oh, ow) = geometry.output_size(shape[1], shape[2])?;
                vec![out, oh, ow]
            }
            ShapeOp::Pool { kernel, stride } => {
                if shape.len() != 3 || kernel == 0 || stride == 0 || shape[1] < kernel || shape[2] < kernel {
                    return fail(format!("pool {kernel}/{stride} does not fit input {shape:?}"));
                }
                vec![shape[0], pool_out(shape[1], kernel, stride), pool_out(shape[2], kernel, stride)]
            }
            ShapeOp::Elementwise => shape,
            ShapeOp::Flatten => vec![shape.iter().product()],
            ShapeOp::Dense { out, inp, bias } => {
                if shape.len() != 1 || shape[0] != inp {
                    return fail(format!("dense expects a flat vector of {inp}, input is {shape:?}"));
                }
                if bias.is_some_and(|b| b != out) {
                    return fail(format!("bias length differs from {out} outputs"));
                }
                vec![out]
            }
        };
    }
    if shape != [classes] {
        return Err(Error::shape(format!("network produces {shape:?}, expected [{classes}] logits")));
    }
    Ok(())
}

fn pool_out(h: usize, kernel: usize, stride: usize) -> usize {
    (h - kernel) / stride + 1
}

/// A float network `θ = {W⁽¹⁾, …}` over `n×h×w` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        check_composition(input_shape, num_classes, layers.iter().map(Layer::shape_op))?;
        Ok(Self { input_shape, num_classes, layers })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Conv layers in network order.
    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn ops(&self) -> Vec<Op<'_, T>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Op::Conv {
                    weight: c.weight.data(),
                    bias: c.bias.as_deref(),
                    out: c.weight.shape()[0],
                    geometry: c.geometry,
                },
                Layer::Relu => Op::Relu,
                Layer::MaxPool { kernel, stride } => Op::MaxPool { kernel: *kernel, stride: *stride },
                Layer::AvgPool { kernel, stride } => Op::AvgPool { kernel: *kernel, stride: *stride },
                Layer::Flatten => Op::Flatten,
                Layer::Dense(d) => Op::Dense { weight: d.weight.data(), bias: d.bias.as_deref(), out: d.weight.rows() },
            })
            .collect()
    }
}

/// Anything that maps an image to class logits.
pub trait Classifier<T: Scalar>: Sync {
    fn input_shape(&self) -> [usize; 3];

    fn logits(&self, image: &DenseTensor<T>) -> Result<Vec<T>>;
}

pub(crate) fn check_input<T: Scalar>(expected: [usize; 3], image: &DenseTensor<T>) -> Result<Act<T>> {
    if image.shape() != expected {
        return Err(Error::shape(format!("input {:?} does not match model input {expected:?}", image.shape())));
    }
    Ok(Act { shape: expected.to_vec(), data: image.data().to_vec() })
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn logits(&self, image: &DenseTensor<T>) -> Result<Vec<T>> {
        graph::forward(&self.ops(), check_input(self.input_shape, image)?)
    }
}

/// Labeled images, `count × n × h × w`, with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    image_shape: [usize; 3],
    images: Vec<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(image_shape: [usize; 3], images: Vec<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} scalars do not hold {} images of {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("dataset contains non-finite pixels"));
        }
        Ok(Self { image_shape, images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[T] {
        &self.images
    }

    pub fn image(&self, i: usize) -> DenseTensor<T> {
        let per: usize = self.image_shape.iter().product();
        DenseTensor::from_parts(self.image_shape.to_vec(), self.images[i * per..(i + 1) * per].to_vec())
    }

    /// The samples at `indices`, in that order (a mini-batch).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let per: usize = self.image_shape.iter().product();
        let images = indices.iter().flat_map(|&i| self.images[i * per..(i + 1) * per].iter().cloned()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { image_shape: self.image_shape, images, labels, num_classes: self.num_classes }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Mean of `−log softmax(z)[y]` over the batch.
pub fn cross_entropy<T: Scalar>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape("logits and labels must be non-empty and equally long"));
    }
    let mut total = T::zero();
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::invalid(format!("label {y} outside {} classes", z.len())));
        }
        total = total + graph::softmax_cross_entropy(z, y).0;
    }
    Ok(total / T::of_usize(labels.len()))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Logits for every sample, computed in parallel, returned in sample order.
pub fn predict_logits<T: Scalar, C: Classifier<T> + ?Sized>(model: &C, data: &Dataset<T>) -> Result<Vec<Vec<T>>> {
    (0..data.len()).into_par_iter().map(|i| model.logits(&data.image(i))).collect()
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn top1_accuracy<T: Scalar, C: Classifier<T> + ?Sized>(model: &C, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let logits = predict_logits(model, data)?;
    let hits = logits.iter().zip(data.labels()).filter(|(z, &y)| argmax(z) == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean cross-entropy of a classifier over a dataset.
pub fn data_loss<T: Scalar, C: Classifier<T> + ?Sized>(model: &C, data: &Dataset<T>) -> Result<T> {
    cross_entropy(&predict_logits(model, data)?, data.labels())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Three 3×3 convs (one strided) with ReLU, max and average pooling and a
    /// dense head over 1×8×8 inputs and 3 classes.
    pub(crate) fn toy_model(seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |m: usize, n: usize, geometry: ConvGeometry| {
            let scale = (2.0 / (n * 9) as f64).sqrt();
            Layer::Conv(ConvLayer {
                weight: DenseTensor::from_fn(vec![m, n, 3, 3], |_| rng.gen_range(-1.0..1.0) * scale),
                bias: Some((0..m).map(|i| 0.01 * i as f64).collect()),
                geometry,
            })
        };
        let same = ConvGeometry::new((3, 3), (1, 1), (1, 1));
        let (c1, c2, c3) = (conv(4, 1, same), conv(6, 4, same), conv(5, 6, ConvGeometry::new((3, 3), (2, 2), (1, 1))));
        let head = Matrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let layers = vec![
            c1,
            Layer::Relu,
            c2,
            Layer::Relu,
            Layer::MaxPool { kernel: 2, stride: 2 },
            c3,
            Layer::Relu,
            Layer::AvgPool { kernel: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense(DenseLayer { weight: head, bias: Some(vec![0.1, -0.1, 0.0]) }),
        ];
        Model::new([1, 8, 8], 3, layers).unwrap()
    }

    /// Like [`toy_model`] but without ReLU or max pooling, so the loss is
    /// smooth in every weight.
    pub(crate) fn smooth_toy_model(seed: u64) -> Model<f64> {
        let layers = toy_model(seed)
            .layers
            .into_iter()
            .filter(|l| !matches!(l, Layer::Relu))
            .map(|l| match l {
                Layer::MaxPool { kernel, stride } => Layer::AvgPool { kernel, stride },
                other => other,
            })
            .collect();
        Model::new([1, 8, 8], 3, layers).unwrap()
    }

    pub(crate) fn toy_data(seed: u64, count: usize) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..count * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..count).map(|i| i % 3).collect();
        Dataset::new([1, 8, 8], images, labels, 3).unwrap()
    }

    #[test]
    fn composition_is_checked() {
        let dense = |o, i| Layer::Dense(DenseLayer { weight: Matrix::<f64>::zeros(o, i), bias: None });
        assert!(Model::new([1, 2, 2], 3, vec![Layer::Flatten, dense(3, 4)]).is_ok());
        assert!(Model::new([1, 2, 2], 3, vec![Layer::Flatten, dense(3, 5)]).is_err());
        assert!(Model::new([1, 2, 2], 2, vec![Layer::Flatten, dense(3, 4)]).is_err());
        assert!(Model::new([1, 2, 2], 3, vec![dense(3, 4)]).is_err());
        assert!(Model::new([1, 2, 2], 3, vec![Layer::MaxPool { kernel: 3, stride: 1 }, Layer::Flatten, dense(3, 4)]).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let layers = vec![
            Layer::Conv(ConvLayer {
                weight: DenseTensor::<f64>::zeros(vec![2, 1, 1, 1]),
                bias: None,
                geometry: ConvGeometry::pointwise(),
            }),
            Layer::Flatten,
            Layer::Dense(DenseLayer { weight: Matrix::zeros(3, 8), bias: None }),
        ];
        let m = Model::new([1, 2, 2], 3, layers).unwrap();
        assert_eq!(m.logits(&DenseTensor::zeros(vec![1, 2, 2])).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_conv_dense() {
        // 2x2 kernel (1, 2; 3, 4) on x = (1, 2; 3, 4) gives 30, then relu,
        // flatten and dense (2, -1) with bias (0.5, 0) → (60.5, -30).
        let layers = vec![
            Layer::Conv(ConvLayer {
                weight: DenseTensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                bias: Some(vec![0.0]),
                geometry: ConvGeometry::new((2, 2), (1, 1), (0, 0)),
            }),
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense(DenseLayer { weight: Matrix::new(2, 1, vec![2.0, -1.0]).unwrap(), bias: Some(vec![0.5, 0.0]) }),
        ];
        let m = Model::new([1, 2, 2], 2, layers).unwrap();
        let x = DenseTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.logits(&x).unwrap(), vec![60.5, -30.0]);
    }

    #[test]
    fn cross_entropy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let labels = [0, 3, 1, 2, 2];
        let direct: f64 = logits
            .iter()
            .zip(labels)
            .map(|(z, y)| -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 5.0;
        assert!((cross_entropy(&logits, &labels).unwrap() - direct).abs() < 1e-10);
        assert!((cross_entropy(&[vec![0.0; 7]], &[3]).unwrap() - 7f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[vec![100.0, 0.0]], &[0]).unwrap() < 1e-40);
        assert!(cross_entropy::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_on_own_and_shifted_labels() {
        let model = toy_model(1);
        let data = toy_data(2, 30);
        let logits = predict_logits(&model, &data).unwrap();
        let own: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
        let shifted: Vec<usize> = own.iter().map(|&y| (y + 1) % 3).collect();
        let relabel = |labels| Dataset::new([1, 8, 8], data.images().to_vec(), labels, 3).unwrap();
        assert_eq!(top1_accuracy(&model, &relabel(own)).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&model, &relabel(shifted)).unwrap(), 0.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new([1, 2, 2], vec![0.0f64; 8], vec![0, 1], 2).is_ok());
        assert!(Dataset::new([1, 2, 2], vec![0.0f64; 7], vec![0, 1], 2).is_err());
        assert!(Dataset::new([1, 2, 2], vec![0.0f64; 8], vec![0, 2], 2).is_err());
        let d = toy_data(0, 6);
        let s = d.subset(&[4, 1]);
        assert_eq!(s.labels(), &[1, 1]);
        assert_eq!(s.image(0), d.image(4));
    }
}
