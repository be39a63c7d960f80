//! `.cora-qmodel`: a quantized network with its hard residual adapters.
//!
//! Codes are stored as signed bytes whatever the bit-width, per-tensor
//! parameters (`alpha`, `beta`, `s`, `z`) in the manifest, biases as f32.
//! Adapter kernels are stored either as f32 (`"encoding": "f32"`) or as
//! signed-byte codes with their own parameters (`"encoding": "q8"`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::container::{manifest_error, read_file, write_file, BlobRef, BlobWriter, Container, Fields};
use super::model::{composition, invalid_tensor, header_entry, layer_entries, parse_plain, plain_entry, read_bias, ConvHeader, PlainLayer};
use crate::adapter::LowRankAdapter;
use crate::convnet::{AdaptedQuantModel, AdapterState, Classifier, QuantConv, QuantDense, QuantLayer};
use crate::error::{Error, Result};
use crate::quant::{dequantize, QuantParams, QuantSpec, QuantizedTensor};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, DenseTensor};

const KIND: &str = "qmodel";

/// Integer codes of an adapter's `A` and `B` kernels.
type AdapterCodes<T> = (QuantizedTensor<T>, QuantizedTensor<T>);

/// Quantization parameters as they appear in the manifest. Values are
/// widened to f64, which is exact for both scalar types.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ParamsEntry {
    alpha: f64,
    beta: f64,
    scale: f64,
    zero_point: i32,
}

fn push_quantized<T: Scalar>(blob: &mut BlobWriter, q: &QuantizedTensor<T>) -> Value {
    let p = q.params();
    json!({
        "codes": blob.push_i8(q.codes()),
        "params": ParamsEntry {
            alpha: p.alpha.as_f64(),
            beta: p.beta.as_f64(),
            scale: p.scale.as_f64(),
            zero_point: p.zero_point,
        },
    })
}

fn read_quantized<T: Scalar>(c: &mut Container, entry: &Value, shape: Vec<usize>, spec: QuantSpec) -> Result<QuantizedTensor<T>> {
    let entry = entry.as_object().ok_or_else(|| manifest_error("quantized tensor entry must be an object"))?;
    let p: ParamsEntry = entry.parse("params")?;
    let codes = c.i8_tensor(entry.parse("codes")?, shape.iter().product())?;
    let params = QuantParams { alpha: T::of(p.alpha), beta: T::of(p.beta), scale: T::of(p.scale), zero_point: p.zero_point };
    QuantizedTensor::from_parts(shape, codes, params, spec).map_err(|e| manifest_error(e.to_string()))
}

/// Re-validates a deserialized spec (deserialization bypasses the checks).
fn checked_spec(spec: QuantSpec) -> Result<QuantSpec> {
    QuantSpec::new(spec.bits(), spec.clip(), spec.mode()).map_err(|e| manifest_error(e.to_string()))
}

fn adapter_entry<T: Scalar>(
    blob: &mut BlobWriter,
    adapter: &LowRankAdapter<T>,
    codes: Option<&AdapterCodes<T>>,
    adapter_spec: &mut Option<QuantSpec>,
) -> Result<Value> {
    Ok(match codes {
        None => json!({
            "rank": adapter.rank(),
            "encoding": "f32",
            "a": blob.push_f32(adapter.a().data()),
            "b": blob.push_f32(adapter.b().data()),
        }),
        Some((qa, qb)) => {
            for spec in [qa.spec(), qb.spec()] {
                match adapter_spec {
                    None => *adapter_spec = Some(*spec),
                    Some(s) if s == spec => {}
                    Some(_) => return Err(Error::invalid("adapters quantized with different specs")),
                }
            }
            json!({
                "rank": adapter.rank(),
                "encoding": "q8",
                "a": push_quantized(blob, qa),
                "b": push_quantized(blob, qb),
            })
        }
    })
}

/// Writes a quantized model. Soft (search-time) adapters cannot be stored;
/// finalize the ranks first.
pub fn save_quantized<T: Scalar>(path: impl AsRef<Path>, model: &AdaptedQuantModel<T>) -> Result<()> {
    let mut blob = BlobWriter::default();
    let mut adapter_spec = None;
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        layers.push(match layer {
            QuantLayer::Conv(c) => {
                let mut e = header_entry("conv", ConvHeader::new(c.quantized().shape(), c.geometry()));
                e.insert("weight".into(), push_quantized(&mut blob, c.quantized()));
                if let Some(b) = c.bias() {
                    e.insert("bias".into(), json!(blob.push_f32(b)));
                }
                let adapter = match c.adapter() {
                    AdapterState::None => Value::Null,
                    AdapterState::Soft { .. } => {
                        return Err(Error::invalid("soft adapters cannot be saved; finalize the ranks first"))
                    }
                    AdapterState::Hard { adapter, quantized } => {
                        adapter_entry(&mut blob, adapter, quantized.as_ref(), &mut adapter_spec)?
                    }
                };
                e.insert("adapter".into(), adapter);
                Value::Object(e)
            }
            QuantLayer::Dense(d) => {
                let s = d.quantized().shape();
                let mut e = header_entry("dense", json!({ "out_features": s[0], "in_features": s[1] }));
                e.insert("weight".into(), push_quantized(&mut blob, d.quantized()));
                if let Some(b) = d.bias() {
                    e.insert("bias".into(), json!(blob.push_f32(b)));
                }
                Value::Object(e)
            }
            QuantLayer::Relu => plain_entry("relu", None),
            QuantLayer::MaxPool { kernel, stride } => plain_entry("max_pool", Some((*kernel, *stride))),
            QuantLayer::AvgPool { kernel, stride } => plain_entry("avg_pool", Some((*kernel, *stride))),
            QuantLayer::Flatten => plain_entry("flatten", None),
        });
    }
    let mut m = Map::new();
    m.insert("kind".into(), KIND.into());
    m.insert("input_shape".into(), json!(Classifier::input_shape(model)));
    m.insert("num_classes".into(), json!(model.num_classes()));
    m.insert("weight_spec".into(), json!(model.weight_spec()));
    m.insert("adapter_spec".into(), json!(adapter_spec));
    m.insert("layers".into(), Value::Array(layers));
    write_file(path.as_ref(), m, blob)
}

fn read_adapter<T: Scalar>(
    c: &mut Container,
    entry: &Map<String, Value>,
    host: &ConvHeader,
    geometry: ConvGeometry,
    adapter_spec: Option<QuantSpec>,
) -> Result<(Option<LowRankAdapter<T>>, Option<AdapterCodes<T>>)> {
    let Some(a) = entry.get("adapter").filter(|v| !v.is_null()) else {
        return Ok((None, None));
    };
    let a = a.as_object().ok_or_else(|| manifest_error("adapter entry must be an object"))?;
    let rank: usize = a.parse("rank")?;
    if rank == 0 {
        return Err(manifest_error("adapter of rank 0"));
    }
    let shape_a = vec![rank, host.in_channels, host.kernel[0], host.kernel[1]];
    let shape_b = vec![host.out_channels, rank, 1, 1];
    let (ta, tb, codes) = match a.str_field("encoding")? {
        "f32" => {
            let ta = c.f32_tensor(a.parse::<BlobRef>("a")?, shape_a.iter().product())?;
            let tb = c.f32_tensor(a.parse::<BlobRef>("b")?, shape_b.iter().product())?;
            (
                DenseTensor::new(shape_a, ta).map_err(invalid_tensor)?,
                DenseTensor::new(shape_b, tb).map_err(invalid_tensor)?,
                None,
            )
        }
        "q8" => {
            let spec = adapter_spec.ok_or_else(|| manifest_error("quantized adapter without adapter_spec"))?;
            let qa = read_quantized(c, a.field("a")?, shape_a, spec)?;
            let qb = read_quantized(c, a.field("b")?, shape_b, spec)?;
            (dequantize(&qa), dequantize(&qb), Some((qa, qb)))
        }
        other => return Err(manifest_error(format!("unknown adapter encoding {other:?}"))),
    };
    let adapter = LowRankAdapter::from_parts(ta, tb, geometry).map_err(|e| manifest_error(e.to_string()))?;
    Ok((Some(adapter), codes))
}

/// Reads a quantized model. Loaded conv layers carry their stored adapters
/// but no residual factorization, so they cannot be searched again.
pub fn load_quantized<T: Scalar>(path: impl AsRef<Path>) -> Result<AdaptedQuantModel<T>> {
    let mut c = read_file(path.as_ref())?;
    c.expect_kind(KIND)?;
    let input_shape: [usize; 3] = c.manifest.parse("input_shape")?;
    let num_classes: usize = c.manifest.parse("num_classes")?;
    let weight_spec = checked_spec(c.manifest.parse("weight_spec")?)?;
    let adapter_spec = c.manifest.parse_opt::<QuantSpec>("adapter_spec")?.map(checked_spec).transpose()?;
    let mut layers = Vec::new();
    for (i, entry) in layer_entries(&c.manifest)?.iter().enumerate() {
        let kind = entry.str_field("type")?;
        let layer = match kind {
            "conv" => {
                let h: ConvHeader = serde_json::from_value(Value::Object(entry.clone()))
                    .map_err(|e| manifest_error(format!("layer {i}: {e}")))?;
                let geometry = h.geometry()?;
                let q = read_quantized(&mut c, entry.field("weight")?, h.shape(), weight_spec)?;
                let bias = read_bias(&mut c, entry, h.out_channels)?;
                let (adapter, codes) = read_adapter(&mut c, entry, &h, geometry, adapter_spec)?;
                QuantLayer::Conv(QuantConv::new(q, bias, geometry, adapter, codes).map_err(composition)?)
            }
            "dense" => {
                let (out, inp): (usize, usize) = (entry.parse("out_features")?, entry.parse("in_features")?);
                let q = read_quantized(&mut c, entry.field("weight")?, vec![out, inp], weight_spec)?;
                let bias = read_bias(&mut c, entry, out)?;
                QuantLayer::Dense(QuantDense::new(q, bias)?)
            }
            other => match parse_plain(other, entry)? {
                Some(PlainLayer::Relu) => QuantLayer::Relu,
                Some(PlainLayer::Flatten) => QuantLayer::Flatten,
                Some(PlainLayer::MaxPool { kernel, stride }) => QuantLayer::MaxPool { kernel, stride },
                Some(PlainLayer::AvgPool { kernel, stride }) => QuantLayer::AvgPool { kernel, stride },
                None => return Err(manifest_error(format!("layer {i}: unknown type {other:?}"))),
            },
        };
        layers.push(layer);
    }
    AdaptedQuantModel::from_parts(input_shape, num_classes, weight_spec, layers).map_err(composition)
}
