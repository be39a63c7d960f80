mod common;

use std::path::Path;

use cora::convnet::{predict_logits, AdaptedQuantModel, Classifier, Model};
use cora::io::{load_dataset, load_model, load_model_with_provenance, load_quantized, save_dataset, save_model, save_quantized, Split};
use cora::quant::QuantSpec;
use cora::tensor::DenseTensor;
use cora::{Error, FormatError};
use sha2::{Digest, Sha256};

use common::{desk_dir, random_data, small_model};

fn format_error<T: std::fmt::Debug>(r: cora::Result<T>) -> FormatError {
    match r {
        Err(Error::Format(f)) => f,
        other => panic!("expected a format error, got {other:?}"),
    }
}

/// Rewrites the checksum so a deliberate manifest edit passes integrity.
fn reseal(bytes: &mut [u8]) {
    let body = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body]);
    bytes[body..].copy_from_slice(&digest);
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[test]
fn float_model_roundtrip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cora-model");
    let model = small_model(3);
    save_model(&path, &model, "unit test").unwrap();
    let (back, provenance) = load_model_with_provenance::<f64>(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(provenance, "unit test");
    // The f32 instantiation reads the same file.
    let narrow: Model<f32> = load_model(&path).unwrap();
    assert_eq!(narrow.layers().len(), model.layers().len());
}

#[test]
fn dataset_roundtrip_keeps_split_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cora-data");
    let data = random_data(5, 17);
    save_dataset(&path, &data, Split::Validation).unwrap();
    let (back, split) = load_dataset::<f64>(&path).unwrap();
    assert_eq!(split, Split::Validation);
    assert_eq!(back, data);
}

#[test]
fn exported_desk_model_reproduces_probe_logits() {
    let model: Model<f64> = load_model(desk_dir().join("float.cora-model")).unwrap();
    assert_eq!(model.input_shape(), [1, 28, 28]);
    assert_eq!(model.num_classes(), 10);
    assert_eq!(model.conv_layers().count(), 6);

    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(desk_dir().join("probe.json")).unwrap()).unwrap();
    let input: Vec<f64> = serde_json::from_value(probe["input"].clone()).unwrap();
    let expected: Vec<f64> = serde_json::from_value(probe["logits"].clone()).unwrap();
    let logits = model.logits(&DenseTensor::new(vec![1, 28, 28], input).unwrap()).unwrap();
    for (a, b) in logits.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
}

#[test]
fn exported_desk_splits_load_with_their_tags() {
    let (calib, split) = load_dataset::<f64>(desk_dir().join("calibration.cora-data")).unwrap();
    assert_eq!((calib.len(), split), (1600, Split::Calibration));
    let (val, split) = load_dataset::<f64>(desk_dir().join("validation.cora-data")).unwrap();
    assert_eq!(split, Split::Validation);
    assert_eq!(val.image_shape(), [1, 28, 28]);
    assert!(val.labels().iter().all(|&l| l < 10));
}

fn assert_bitwise_equal_logits(a: &AdaptedQuantModel<f64>, b: &AdaptedQuantModel<f64>) {
    let data = random_data(11, 12);
    let (la, lb) = single_threaded(|| (predict_logits(a, &data).unwrap(), predict_logits(b, &data).unwrap()));
    for (x, y) in la.iter().flatten().zip(lb.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn roundtrip(model: &AdaptedQuantModel<f64>, dir: &Path) -> AdaptedQuantModel<f64> {
    let path = dir.join("q.cora-qmodel");
    save_quantized(&path, model).unwrap();
    load_quantized(&path).unwrap()
}

#[test]
fn quantized_roundtrip_preserves_everything_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let float = small_model(7);
    for adapter_bits in [None, Some(8)] {
        let mut q = AdaptedQuantModel::quantize(&float, &QuantSpec::weights(4).unwrap()).unwrap();
        q.set_hard_ranks(&[2, 3, 1]).unwrap();
        if let Some(bits) = adapter_bits {
            q.quantize_adapters(&QuantSpec::adapters(bits).unwrap()).unwrap();
        }
        let back = roundtrip(&q, dir.path());
        assert_eq!(back.adapter_ranks(), vec![Some(2), Some(3), Some(1)]);
        assert_eq!(back.weight_spec(), q.weight_spec());
        for (a, b) in q.convs().zip(back.convs()) {
            assert_eq!(a.quantized(), b.quantized());
            assert_eq!(a.bias(), b.bias());
            assert_eq!(a.adapter(), b.adapter());
            assert_eq!(a.effective_weight(), b.effective_weight());
        }
        assert_bitwise_equal_logits(&q, &back);
    }
}

#[test]
fn quantized_model_without_adapters_loads_plain() {
    let dir = tempfile::tempdir().unwrap();
    let q = AdaptedQuantModel::quantize(&small_model(8), &QuantSpec::weights(3).unwrap()).unwrap();
    let back = roundtrip(&q, dir.path());
    assert_eq!(back.adapter_ranks(), vec![None, None, None]);
    assert_bitwise_equal_logits(&q, &back);
}

#[test]
fn soft_adapters_must_be_finalized_before_saving() {
    let dir = tempfile::tempdir().unwrap();
    let mut q = AdaptedQuantModel::quantize(&small_model(9), &QuantSpec::weights(4).unwrap()).unwrap();
    q.set_soft_ranks(&[1.5, 2.0, 1.0], 4).unwrap();
    assert!(matches!(save_quantized(dir.path().join("s.cora-qmodel"), &q), Err(Error::InvalidArgument(_))));
}

#[test]
fn damaged_files_fail_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cora-model");
    save_model(&path, &small_model(1), "").unwrap();
    let good = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.cora-model");
    let load = |bytes: &[u8]| {
        std::fs::write(&bad, bytes).unwrap();
        format_error(load_model::<f64>(&bad))
    };

    assert!(matches!(load(&good[..good.len() - 100]), FormatError::Truncated(_)));
    assert!(matches!(load(&good[..12]), FormatError::Truncated(_)));

    let mut flipped = good.clone();
    let n = flipped.len();
    flipped[n - 200] ^= 0x01;
    assert!(matches!(load(&flipped), FormatError::Integrity));

    let mut bumped = good.clone();
    bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(load(&bumped), FormatError::VersionMismatch { found: 2, supported: 1 }));

    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"ONNX");
    assert!(matches!(load(&magic), FormatError::BadMagic));

    // A consistent file whose layers cannot produce the declared logits.
    let text = String::from_utf8_lossy(&good).into_owned();
    let at = text.find("\"num_classes\":3").expect("manifest field");
    let mut recomposed = good.clone();
    recomposed[at + "\"num_classes\":".len()] = b'4';
    reseal(&mut recomposed);
    assert!(matches!(load(&recomposed), FormatError::Composition(_)));

    // A dataset is not a model.
    let data = dir.path().join("d.cora-data");
    save_dataset(&data, &random_data(0, 2), Split::Calibration).unwrap();
    assert!(matches!(format_error(load_model::<f64>(&data)), FormatError::WrongKind { .. }));
    assert!(matches!(format_error(load_quantized::<f64>(&path)), FormatError::WrongKind { .. }));

    assert!(matches!(load_model::<f64>(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn corrupted_quantized_model_fails_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.cora-qmodel");
    let mut q = AdaptedQuantModel::quantize(&small_model(2), &QuantSpec::weights(4).unwrap()).unwrap();
    q.set_hard_ranks(&[1, 1, 1]).unwrap();
    save_quantized(&path, &q).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0x80;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(format_error(load_quantized::<f64>(&path)), FormatError::Integrity));
}
