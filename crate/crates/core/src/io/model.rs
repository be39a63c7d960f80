//! `.cora-model`: a float network.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::container::{manifest_error, read_file, write_file, BlobRef, BlobWriter, Container, Fields};
use crate::convnet::{ConvLayer, DenseLayer, Layer, Model};
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, DenseTensor, Matrix};

pub(crate) const KIND: &str = "model";

/// Structural fields of a conv layer entry, shared with `.cora-qmodel`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub(crate) struct ConvHeader {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvHeader {
    pub fn new(shape: &[usize], g: &ConvGeometry) -> Self {
        Self {
            out_channels: shape[0],
            in_channels: shape[1],
            kernel: [g.kernel.0, g.kernel.1],
            stride: [g.stride.0, g.stride.1],
            padding: [g.padding.0, g.padding.1],
        }
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.out_channels == 0 || self.in_channels == 0 {
            return Err(manifest_error("conv layer with a zero dimension"));
        }
        Ok(ConvGeometry::new(
            (self.kernel[0], self.kernel[1]),
            (self.stride[0], self.stride[1]),
            (self.padding[0], self.padding[1]),
        ))
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel[0], self.kernel[1]]
    }

    pub fn weight_count(&self) -> usize {
        self.shape().iter().product()
    }
}

/// Writes the header fields into a layer entry.
pub(crate) fn header_entry(kind: &str, header: impl Serialize) -> Map<String, Value> {
    let mut entry = match serde_json::to_value(header).expect("header serializes") {
        Value::Object(m) => m,
        _ => unreachable!("headers are structs"),
    };
    entry.insert("type".into(), kind.into());
    entry
}

/// Entries for the weight-free layers; `None` for conv/dense.
pub(crate) fn plain_entry(kind: &str, pool: Option<(usize, usize)>) -> Value {
    match pool {
        Some((kernel, stride)) => json!({ "type": kind, "kernel": kernel, "stride": stride }),
        None => json!({ "type": kind }),
    }
}

/// A weight-free layer read back from the manifest.
pub(crate) enum PlainLayer {
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
}

pub(crate) fn parse_plain(kind: &str, entry: &Map<String, Value>) -> Result<Option<PlainLayer>> {
    Ok(Some(match kind {
        "relu" => PlainLayer::Relu,
        "flatten" => PlainLayer::Flatten,
        "max_pool" => PlainLayer::MaxPool { kernel: entry.parse("kernel")?, stride: entry.parse("stride")? },
        "avg_pool" => PlainLayer::AvgPool { kernel: entry.parse("kernel")?, stride: entry.parse("stride")? },
        _ => return Ok(None),
    }))
}

pub(crate) fn layer_entries(manifest: &Map<String, Value>) -> Result<Vec<Map<String, Value>>> {
    let layers: Vec<Value> = manifest.parse("layers")?;
    layers
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::Object(m) => Ok(m),
            _ => Err(manifest_error(format!("layer {i} is not an object"))),
        })
        .collect()
}

pub(crate) fn read_bias<T: Scalar>(c: &mut Container, entry: &Map<String, Value>, len: usize) -> Result<Option<Vec<T>>> {
    let bias: Option<Vec<T>> = entry.parse_opt::<BlobRef>("bias")?.map(|r| c.f32_tensor(r, len)).transpose()?;
    if bias.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(manifest_error("bias contains non-finite values"));
    }
    Ok(bias)
}

/// Stored tensors that cannot form a valid in-memory tensor (e.g. NaN
/// weights) are malformed files, not numeric failures of the pipeline.
pub(crate) fn invalid_tensor(e: Error) -> Error {
    manifest_error(e.to_string())
}

/// Shape-composition failures of a decoded network are format errors.
pub(crate) fn composition(e: Error) -> Error {
    match e {
        Error::Shape(msg) | Error::Geometry(msg) => FormatError::Composition(msg).into(),
        other => other,
    }
}

/// Writes `model` with a free-form provenance string.
pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, provenance: &str) -> Result<()> {
    let mut blob = BlobWriter::default();
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        layers.push(match layer {
            Layer::Conv(c) => {
                let mut e = header_entry("conv", ConvHeader::new(c.weight.shape(), &c.geometry));
                e.insert("weight".into(), json!(blob.push_f32(c.weight.data())));
                if let Some(b) = &c.bias {
                    e.insert("bias".into(), json!(blob.push_f32(b)));
                }
                Value::Object(e)
            }
            Layer::Dense(d) => {
                let mut e = header_entry("dense", json!({ "out_features": d.weight.rows(), "in_features": d.weight.cols() }));
                e.insert("weight".into(), json!(blob.push_f32(d.weight.data())));
                if let Some(b) = &d.bias {
                    e.insert("bias".into(), json!(blob.push_f32(b)));
                }
                Value::Object(e)
            }
            Layer::Relu => plain_entry("relu", None),
            Layer::MaxPool { kernel, stride } => plain_entry("max_pool", Some((*kernel, *stride))),
            Layer::AvgPool { kernel, stride } => plain_entry("avg_pool", Some((*kernel, *stride))),
            Layer::Flatten => plain_entry("flatten", None),
        });
    }
    let mut m = Map::new();
    m.insert("kind".into(), KIND.into());
    m.insert("provenance".into(), provenance.into());
    m.insert("input_shape".into(), json!(model.input_shape()));
    m.insert("num_classes".into(), json!(model.num_classes()));
    m.insert("layers".into(), Value::Array(layers));
    write_file(path.as_ref(), m, blob)
}

/// Reads a float model and its provenance string.
pub fn load_model_with_provenance<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, String)> {
    let mut c = read_file(path.as_ref())?;
    c.expect_kind(KIND)?;
    let input_shape: [usize; 3] = c.manifest.parse("input_shape")?;
    let num_classes: usize = c.manifest.parse("num_classes")?;
    let provenance = c.manifest.parse_opt::<String>("provenance")?.unwrap_or_default();
    let mut layers = Vec::new();
    for (i, entry) in layer_entries(&c.manifest)?.iter().enumerate() {
        let kind = entry.str_field("type")?;
        let layer = match kind {
            "conv" => {
                let h: ConvHeader = serde_json::from_value(Value::Object(entry.clone()))
                    .map_err(|e| manifest_error(format!("layer {i}: {e}")))?;
                let geometry = h.geometry()?;
                let weight = c.f32_tensor(entry.parse("weight")?, h.weight_count())?;
                let bias = read_bias(&mut c, entry, h.out_channels)?;
                Layer::Conv(ConvLayer { weight: DenseTensor::new(h.shape(), weight).map_err(invalid_tensor)?, bias, geometry })
            }
            "dense" => {
                let (out, inp): (usize, usize) = (entry.parse("out_features")?, entry.parse("in_features")?);
                let weight = c.f32_tensor(entry.parse("weight")?, out * inp)?;
                let bias = read_bias(&mut c, entry, out)?;
                Layer::Dense(DenseLayer { weight: Matrix::new(out, inp, weight).map_err(invalid_tensor)?, bias })
            }
            other => match parse_plain(other, entry)? {
                Some(PlainLayer::Relu) => Layer::Relu,
                Some(PlainLayer::Flatten) => Layer::Flatten,
                Some(PlainLayer::MaxPool { kernel, stride }) => Layer::MaxPool { kernel, stride },
                Some(PlainLayer::AvgPool { kernel, stride }) => Layer::AvgPool { kernel, stride },
                None => return Err(manifest_error(format!("layer {i}: unknown type {other:?}"))),
            },
        };
        layers.push(layer);
    }
    let model = Model::new(input_shape, num_classes, layers).map_err(composition)?;
    Ok((model, provenance))
}

/// Reads a float model; shape composition from input to logits is verified.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    load_model_with_provenance(path).map(|(m, _)| m)
}
