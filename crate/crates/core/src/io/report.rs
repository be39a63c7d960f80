//! Run reports and the canonical JSON writer used for every exported JSON
//! document: keys sorted, floats printed with 17 significant digits so that
//! parsing them back recovers the exact `f64`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::quant::{QuantMode, QuantSpec};
use crate::search::{equivalent_bitwidth, LayerSolution};

/// Weight quantization settings as reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub bits: u8,
    /// `minmax` or `normal:K`.
    pub clip: String,
    pub mode: QuantMode,
}

impl From<&QuantSpec> for QuantSummary {
    fn from(s: &QuantSpec) -> Self {
        Self { bits: s.bits(), clip: s.clip().to_string(), mode: s.mode() }
    }
}

/// Top-1 accuracies (fractions in `[0, 1]`) of the compared variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub float: f64,
    /// Plain quantized model, no adapters.
    pub quantized: f64,
    /// Quantized with adapters at the heuristic ranks `⌊b·R_l⌋`.
    pub heuristic: Option<f64>,
    /// Quantized with adapters at the searched ranks.
    pub optimal: Option<f64>,
}

/// One row of a results table: settings, solution and accuracies of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub weights: QuantSummary,
    pub adapter_bits: u8,
    pub budget: f64,
    /// `ξ = n + m·b`.
    pub equivalent_bits: f64,
    pub layers: Vec<LayerSolution>,
    pub accuracy: Accuracy,
    /// Budget `ωᵀr` of the continuous ranks at the end of the search.
    pub continuous_budget: Option<f64>,
    /// Budget `ωᵀr` of the finalized integer ranks.
    pub integer_budget: Option<f64>,
    pub iterations: usize,
    pub wall_time_seconds: f64,
}

impl RunReport {
    /// A report with `equivalent_bits` derived from the settings; the rest
    /// is filled in by the caller.
    pub fn new(weights: &QuantSpec, adapter_bits: u8, budget: f64, accuracy: Accuracy) -> Self {
        Self {
            weights: weights.into(),
            adapter_bits,
            budget,
            equivalent_bits: equivalent_bitwidth(weights.bits(), adapter_bits, budget),
            layers: Vec::new(),
            accuracy,
            continuous_budget: None,
            integer_budget: None,
            iterations: 0,
            wall_time_seconds: 0.0,
        }
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat_n("  ", n));
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            write!(out, "{x:.16e}").expect("write to string");
        }
        Value::Array(items) if !items.is_empty() => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push_str(": ");
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
        other => out.push_str(&serde_json::to_string(other).expect("scalar serializes")),
    }
}

/// Renders `value` as canonical JSON (sorted keys, 17-significant-digit
/// floats, two-space indent, trailing newline). Non-finite floats become
/// `null`.
pub fn to_canonical_json(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::invalid(format!("not serializable: {e}")))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

/// Writes `value` as canonical JSON.
pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_canonical_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn write_report(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: not a run report: {e}", path.display())))
}
