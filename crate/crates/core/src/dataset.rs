//! Labeled datasets and their on-disk formats: IDX (the MNIST binary
//! convention, big-endian, pixels scaled to `[0,1]`) and CSV with the label
//! in the first column.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Inputs with ground-truth class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<LabeledDataset> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset inputs vs labels".into(),
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        if let Some(first) = inputs.first() {
            let dim = first.len();
            for (i, x) in inputs.iter().enumerate() {
                if x.len() != dim {
                    return Err(Error::DimensionMismatch {
                        context: format!("dataset sample {i}"),
                        expected: dim,
                        actual: x.len(),
                    });
                }
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(|x| x.len())
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            name: self.name.clone(),
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Every label must name a class of a `num_classes`-way classifier.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class: l,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_u32(bytes: &[u8], offset: usize, path: &str, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Parse {
            path: path.into(),
            location: format!("byte {offset}"),
            message: format!("file ends before the {what} field ({} bytes total)", bytes.len()),
        }),
    }
}

/// Reads an IDX image file: magic `0x00000803`, then big-endian counts for
/// images, rows, and columns, then one unsigned byte per pixel, scaled to
/// `[0,1]` by dividing by 255.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {shown}"), e))?;
    let magic = idx_u32(&bytes, 0, &shown, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: shown,
            location: "byte 0".into(),
            message: format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = idx_u32(&bytes, 4, &shown, "image count")? as usize;
    let rows = idx_u32(&bytes, 8, &shown, "row count")? as usize;
    let cols = idx_u32(&bytes, 12, &shown, "column count")? as usize;
    let pixels = rows * cols;
    let expected = 16 + count * pixels;
    if bytes.len() != expected {
        return Err(Error::Parse {
            path: shown,
            location: format!("byte {}", bytes.len().min(expected)),
            message: format!(
                "{count} images of {rows}x{cols} pixels need {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    Ok(bytes[16..]
        .chunks_exact(pixels)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect())
}

/// Reads an IDX label file: magic `0x00000801`, a big-endian count, then one
/// unsigned byte per label.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {shown}"), e))?;
    let magic = idx_u32(&bytes, 0, &shown, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: shown,
            location: "byte 0".into(),
            message: format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = idx_u32(&bytes, 4, &shown, "label count")? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Parse {
            path: shown,
            location: format!("byte {}", bytes.len().min(expected)),
            message: format!("{count} labels need {expected} bytes, file has {}", bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads a paired IDX image/label file set into one dataset.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    name: impl Into<String>,
) -> Result<LabeledDataset> {
    let inputs = load_idx_images(images)?;
    let labels_path = labels.as_ref().display().to_string();
    let labels = load_idx_labels(labels)?;
    if inputs.len() != labels.len() {
        return Err(Error::Parse {
            path: labels_path,
            location: "byte 4".into(),
            message: format!(
                "label count {} does not match image count {}",
                labels.len(),
                inputs.len()
            ),
        });
    }
    LabeledDataset::new(name, inputs, labels)
}

/// Loads a CSV dataset: each row is `label, feature, feature, ...`.  A
/// header row is rejected unless `skip_header` is set, in which case the
/// first line is dropped unconditionally.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    name: impl Into<String>,
    skip_header: bool,
) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {shown}"), e))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if idx == 0 && skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or("");
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            path: shown.clone(),
            location: format!("line {lineno}"),
            message: if idx == 0 {
                format!(
                    "label column is not an integer ({label_field:?}); pass the header flag if the file starts with column names"
                )
            } else {
                format!("label column is not an integer ({label_field:?})")
            },
        })?;
        let features: Vec<f64> = fields
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    path: shown.clone(),
                    location: format!("line {lineno}"),
                    message: format!("feature column {} is not a number ({f:?})", col + 2),
                })
            })
            .collect::<Result<_>>()?;
        if features.is_empty() {
            return Err(Error::Parse {
                path: shown.clone(),
                location: format!("line {lineno}"),
                message: "row has a label but no features".into(),
            });
        }
        inputs.push(features);
        labels.push(label);
    }
    LabeledDataset::new(name, inputs, labels).map_err(|e| match e {
        Error::DimensionMismatch { expected, actual, .. } => Error::Parse {
            path: shown.clone(),
            location: "whole file".into(),
            message: format!("rows have inconsistent widths ({expected} vs {actual} features)"),
        },
        other => other,
    })
}
