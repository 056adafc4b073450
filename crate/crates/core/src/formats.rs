//! JSON file formats for networks and robustness properties.
//!
//! Numbers are written in serde_json's shortest round-trip decimal form,
//! which parses back to the bit-identical double, so every file round-trip
//! is lossless for finite values.  ReLU layers carry no dimension in the
//! file; the width is inferred from the preceding affine layer.

use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::net::{Dnn, Layer};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerFile {
    Affine { weights: Vec<Vec<f64>>, bias: Vec<f64> },
    Relu,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    format_version: u32,
    layers: Vec<LayerFile>,
}

/// One robustness query: the L∞ ball `B(center, radius)`, optionally with a
/// fixed label (otherwise the network's own prediction at the center is
/// used) and a known adversarial point inside the ball.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PropertyEntry {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<Vec<f64>>,
}

impl PropertyEntry {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.center.len() != input_dim {
            return Err(Error::DimensionMismatch {
                context: "property center".into(),
                expected: input_dim,
                actual: self.center.len(),
            });
        }
        if self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRegion("property center must be finite".into()));
        }
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return Err(Error::InvalidRegion(format!(
                "property radius must be finite and non-negative, got {}",
                self.radius
            )));
        }
        if let Some(adv) = &self.adversarial {
            if adv.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    context: "property adversarial point".into(),
                    expected: input_dim,
                    actual: adv.len(),
                });
            }
            if adv.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRegion(
                    "property adversarial point must be finite".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn region(&self) -> Result<BoxRegion> {
        BoxRegion::from_center_radius(&self.center, self.radius)
    }
}

fn net_to_file(net: &Dnn) -> NetworkFile {
    let layers = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Affine { weights, bias } => LayerFile::Affine {
                weights: weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: bias.to_vec(),
            },
            Layer::Relu { .. } => LayerFile::Relu,
        })
        .collect();
    NetworkFile {
        format_version: NETWORK_FORMAT_VERSION,
        layers,
    }
}

fn file_to_net(file: NetworkFile, path: &Path) -> Result<Dnn> {
    if file.format_version != NETWORK_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: file.format_version.to_string(),
            supported: NETWORK_FORMAT_VERSION.to_string(),
        });
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    let mut width: Option<usize> = None;
    for (i, layer) in file.layers.into_iter().enumerate() {
        match layer {
            LayerFile::Affine { weights, bias } => {
                let rows = weights.len();
                let cols = weights.first().map_or(0, |r| r.len());
                if weights.iter().any(|r| r.len() != cols) {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        location: format!("layers[{i}]"),
                        message: "ragged weight matrix".into(),
                    });
                }
                let flat: Vec<f64> = weights.into_iter().flatten().collect();
                let weights = Array2::from_shape_vec((rows, cols), flat).map_err(|e| {
                    Error::Parse {
                        path: path.display().to_string(),
                        location: format!("layers[{i}]"),
                        message: e.to_string(),
                    }
                })?;
                if let Some(w) = width {
                    if cols != w {
                        return Err(Error::Parse {
                            path: path.display().to_string(),
                            location: format!("layers[{i}]"),
                            message: format!(
                                "layer expects {cols} inputs but the previous layer produces {w}"
                            ),
                        });
                    }
                }
                width = Some(rows);
                layers.push(Layer::affine(weights, Array1::from_vec(bias))?);
            }
            LayerFile::Relu => {
                let dim = width.ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    location: format!("layers[{i}]"),
                    message: "relu layer needs a preceding affine layer to fix its width".into(),
                })?;
                layers.push(Layer::relu(dim));
            }
        }
    }
    Dnn::new(layers)
}

pub fn write_network(path: impl AsRef<Path>, net: &Dnn) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(&net_to_file(net))
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, json)
        .map_err(|e| Error::io(format!("writing network file {}", path.display()), e))
}

pub fn read_network(path: impl AsRef<Path>) -> Result<Dnn> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading network file {}", path.display()), e))?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    file_to_net(file, path)
}

/// In-memory JSON text of a network, used by bundle files.
pub fn network_to_json(net: &Dnn) -> Result<String> {
    serde_json::to_string_pretty(&net_to_file(net))
        .map_err(|e| Error::json("<memory>".to_string(), e))
}

pub fn network_from_json(text: &str, origin: &str) -> Result<Dnn> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.into(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    file_to_net(file, Path::new(origin))
}

pub fn write_properties(path: impl AsRef<Path>, entries: &[PropertyEntry]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, json)
        .map_err(|e| Error::io(format!("writing property file {}", path.display()), e))
}

pub fn read_properties(path: impl AsRef<Path>) -> Result<Vec<PropertyEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading property file {}", path.display()), e))?;
    let entries: Vec<PropertyEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(entries)
}
