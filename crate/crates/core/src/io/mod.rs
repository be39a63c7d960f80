//! On-disk formats: `.cora-model` (float network), `.cora-qmodel`
//! (quantized network with adapters), `.cora-data` (labeled images) and
//! JSON run reports. All binary formats share one checksummed container,
//! little-endian throughout.

mod container;
mod dataset;
mod model;
mod qmodel;
mod report;

pub use container::{BlobRef, FORMAT_VERSION, MAGIC};
pub use dataset::{load_dataset, save_dataset, Split};
pub use model::{load_model, load_model_with_provenance, save_model};
pub use qmodel::{load_quantized, save_quantized};
pub use report::{read_report, to_canonical_json, write_json, write_report, Accuracy, QuantSummary, RunReport};
