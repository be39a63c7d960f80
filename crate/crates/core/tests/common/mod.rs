//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use cora::convnet::{ConvLayer, Dataset, DenseLayer, Layer, Model};
use cora::tensor::{ConvGeometry, DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk")
}

fn f32_exact(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    f64::from((rng.gen_range(-1.0..1.0) * scale) as f32)
}

fn conv(rng: &mut ChaCha8Rng, m: usize, n: usize, geometry: ConvGeometry) -> Layer<f64> {
    let (k1, k2) = geometry.kernel;
    let fan_in = (n * k1 * k2) as f64;
    let shape = vec![m, n, k1, k2];
    let weight = DenseTensor::from_fn(shape, |_| f32_exact(rng, 2.0 / fan_in.sqrt()));
    let bias = (0..m).map(|_| f32_exact(rng, 0.1)).collect();
    Layer::Conv(ConvLayer { weight, bias: Some(bias), geometry })
}

/// A small three-conv network over `1×8×8` images with three classes; all
/// weights are exactly representable in f32.
pub fn small_model(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g3 = ConvGeometry::new((3, 3), (1, 1), (1, 1));
    let layers = vec![
        conv(&mut rng, 4, 1, g3),
        Layer::Relu,
        conv(&mut rng, 6, 4, ConvGeometry::new((3, 3), (2, 2), (1, 1))),
        Layer::Relu,
        Layer::MaxPool { kernel: 2, stride: 2 },
        conv(&mut rng, 5, 6, g3),
        Layer::AvgPool { kernel: 2, stride: 2 },
        Layer::Flatten,
        Layer::Dense(DenseLayer {
            weight: Matrix::from_fn(3, 5, |_, _| f32_exact(&mut rng, 0.8)),
            bias: Some(vec![0.0, 0.125, -0.25]),
        }),
    ];
    Model::new([1, 8, 8], 3, layers).unwrap()
}

pub fn random_data(seed: u64, count: usize) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count * 64).map(|_| f64::from(rng.gen::<f32>())).collect();
    let labels = (0..count).map(|_| rng.gen_range(0..3)).collect();
    Dataset::new([1, 8, 8], images, labels, 3).unwrap()
}

/// [`small_model`] without ReLU and with average instead of max pooling:
/// the loss is smooth in every weight, hence in every adapter rank.
pub fn smooth_model(seed: u64) -> Model<f64> {
    let layers = small_model(seed)
        .layers()
        .iter()
        .filter(|l| !matches!(l, Layer::Relu))
        .map(|l| match l {
            Layer::MaxPool { kernel, stride } => Layer::AvgPool { kernel: *kernel, stride: *stride },
            other => other.clone(),
        })
        .collect();
    Model::new([1, 8, 8], 3, layers).unwrap()
}
