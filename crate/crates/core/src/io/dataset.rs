//! `.cora-data`: labeled images with a split tag.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::container::{manifest_error, read_file, write_file, BlobWriter, Fields};
use crate::convnet::Dataset;
use crate::error::Result;
use crate::scalar::Scalar;

const KIND: &str = "dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Calibration => "calibration",
            Split::Validation => "validation",
        })
    }
}

pub fn save_dataset<T: Scalar>(path: impl AsRef<Path>, data: &Dataset<T>, split: Split) -> Result<()> {
    let mut blob = BlobWriter::default();
    let labels: Vec<u32> = data.labels().iter().map(|&l| l as u32).collect();
    let mut m = Map::new();
    m.insert("kind".into(), KIND.into());
    m.insert("split".into(), json!(split));
    m.insert("count".into(), json!(data.len()));
    m.insert("image_shape".into(), json!(data.image_shape()));
    m.insert("num_classes".into(), json!(data.num_classes()));
    m.insert("images".into(), json!(blob.push_f32(data.images())));
    m.insert("labels".into(), json!(blob.push_u32(&labels)));
    write_file(path.as_ref(), m, blob)
}

/// Reads a dataset and its split tag.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<(Dataset<T>, Split)> {
    let mut c = read_file(path.as_ref())?;
    c.expect_kind(KIND)?;
    let split: Split = c.manifest.parse("split")?;
    let count: usize = c.manifest.parse("count")?;
    let shape: [usize; 3] = c.manifest.parse("image_shape")?;
    let num_classes: usize = c.manifest.parse("num_classes")?;
    let per: usize = shape.iter().product();
    let images = c.f32_tensor(c.manifest.parse("images")?, count * per)?;
    let labels = c.u32_tensor(c.manifest.parse("labels")?, count)?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(manifest_error(format!("label {bad} outside 0..{num_classes}")));
    }
    let labels = labels.into_iter().map(|l| l as usize).collect();
    let data = Dataset::new(shape, images, labels, num_classes).map_err(|e| manifest_error(e.to_string()))?;
    Ok((data, split))
}
