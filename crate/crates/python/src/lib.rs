//! Python bindings: networks, verification, attack, repair, and metrics,
//! driven in-process from Python.
//!
//! Usage from Python:
//!
//! ```text
//! import relurepair_rs as rr
//! net = rr.reference_network()
//! assert not rr.verify(net, [-0.7, 1.0], 0.5, 1)
//! adv = rr.attack(net, [-0.7, 1.0], 0.5, 1)
//! repaired, report = rr.repair(net, [([-0.7, 1.0], 1, adv)], 0.5)
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use relurepair::attacks::{self, AttackConfig};
use relurepair::dataset::LabeledDataset;
use relurepair::deeppoly::{self, BoxRegion, Verdict};
use relurepair::demo;
use relurepair::formats;
use relurepair::metrics::{self, EvalConfig};
use relurepair::net::{Dnn, Network};
use relurepair::nnet;
use relurepair::patched::RepairedDnn;
use relurepair::repair::{Anchor, PatchInit, PatchSpec, RepairConfig, RepairMode};
use relurepair::synth::{self, TrainConfig};
use relurepair::Error;

fn py_err(err: Error) -> PyErr {
    match err {
        Error::DivergentLoss { .. } => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// `(center, label or None, adversarial or None)` as accepted from Python.
type AnchorTuple = (Vec<f64>, Option<usize>, Option<Vec<f64>>);

fn to_anchors(tuples: Vec<AnchorTuple>) -> Vec<Anchor> {
    tuples
        .into_iter()
        .map(|(center, label, adversarial)| Anchor {
            center,
            label,
            adversarial,
        })
        .collect()
}

fn region_of(center: &[f64], radius: f64) -> PyResult<BoxRegion> {
    BoxRegion::from_center_radius(center, radius).map_err(py_err)
}

/// A feed-forward ReLU network (affine layers with ReLU between).
#[pyclass(name = "Network", module = "relurepair_rs", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Dnn,
}

#[pymethods]
impl PyNetwork {
    /// Parse a network from its JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyNetwork> {
        let inner = formats::network_from_json(text, "<string>").map_err(py_err)?;
        Ok(PyNetwork { inner })
    }

    /// Load a network JSON file.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<PyNetwork> {
        let inner = formats::read_network(path).map_err(py_err)?;
        Ok(PyNetwork { inner })
    }

    /// Load a network in the NNet text format.  With `folded`, input
    /// normalization and output denormalization are absorbed into the
    /// first and last affine layers.
    #[staticmethod]
    #[pyo3(signature = (path, folded = false))]
    fn from_nnet(path: &str, folded: bool) -> PyResult<PyNetwork> {
        let inner = if folded {
            nnet::read_nnet_folded(path)
        } else {
            nnet::read_nnet(path)
        }
        .map_err(py_err)?;
        Ok(PyNetwork { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        formats::network_to_json(&self.inner).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        formats::write_network(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(py_err)
    }

    fn classify(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.classify(&x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network({} inputs, {} outputs, {} layers)",
            self.inner.input_dim(),
            self.inner.output_dim(),
            self.inner.layers().len()
        )
    }
}

/// A base network plus trained patches, routed by region membership.
#[pyclass(name = "RepairedNetwork", module = "relurepair_rs")]
struct PyRepairedNetwork {
    inner: RepairedDnn,
}

#[pymethods]
impl PyRepairedNetwork {
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(py_err)
    }

    fn classify(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.classify(&x).map_err(py_err)
    }

    /// The unmodified base network.
    fn base(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.base().clone(),
        }
    }

    #[getter]
    fn patch_count(&self) -> usize {
        self.inner.patches().len()
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.inner.radius()
    }

    /// Write the bundle directory (base, patches, regions, manifest).
    fn save_bundle(&self, dir: &str) -> PyResult<()> {
        self.inner.save_bundle(dir, false).map_err(py_err)
    }

    #[staticmethod]
    fn load_bundle(dir: &str) -> PyResult<PyRepairedNetwork> {
        let inner = RepairedDnn::load_bundle(dir).map_err(py_err)?;
        Ok(PyRepairedNetwork { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "RepairedNetwork({} patches, radius {})",
            self.inner.patches().len(),
            self.inner.radius()
        )
    }
}

/// True when the box around `center` provably keeps the class.  With
/// `label=None` the network's own prediction at the center is enforced.
#[pyfunction]
#[pyo3(signature = (net, center, radius, label = None))]
fn verify(net: &PyNetwork, center: Vec<f64>, radius: f64, label: Option<usize>) -> PyResult<bool> {
    let region = region_of(&center, radius)?;
    let label = match label {
        Some(l) => l,
        None => net.inner.classify(&center).map_err(py_err)?,
    };
    let verdict = deeppoly::verify(&net.inner, &region, label).map_err(py_err)?;
    Ok(verdict == Verdict::Verified)
}

/// Multi-restart projected gradient attack on the box around `center`.
/// Returns a misclassified point, or None if the attack fails.
#[pyfunction]
#[pyo3(signature = (net, center, radius, label = None, steps = 50, restarts = 10, step_size = 2.0 / 255.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn attack(
    net: &PyNetwork,
    center: Vec<f64>,
    radius: f64,
    label: Option<usize>,
    steps: usize,
    restarts: usize,
    step_size: f64,
    seed: u64,
) -> PyResult<Option<Vec<f64>>> {
    let region = region_of(&center, radius)?;
    let label = match label {
        Some(l) => l,
        None => net.inner.classify(&center).map_err(py_err)?,
    };
    let config = AttackConfig {
        step_size,
        steps,
        restarts,
        seed,
        ..AttackConfig::default()
    };
    let result = attacks::pgd(&net.inner, &region, &center, label, &config).map_err(py_err)?;
    Ok(result.adversarial)
}

/// Repair the network on the boxes around the anchors.  Each anchor is a
/// tuple `(center, label or None, adversarial or None)`.  Returns the
/// repaired network and the full report as a JSON string.
#[pyfunction]
#[pyo3(signature = (
    net, anchors, radius,
    mode = "provable", split_layer = None,
    max_iterations = 25, epochs = 10, learning_rate = 10.0, selection = 800,
    seed = 0,
    patch_hidden = None, patch_bias = true,
    patch_init_constant = None, patch_init_uniform = None,
))]
#[allow(clippy::too_many_arguments)]
fn repair(
    net: &PyNetwork,
    anchors: Vec<AnchorTuple>,
    radius: f64,
    mode: &str,
    split_layer: Option<usize>,
    max_iterations: usize,
    epochs: usize,
    learning_rate: f64,
    selection: usize,
    seed: u64,
    patch_hidden: Option<Vec<usize>>,
    patch_bias: bool,
    patch_init_constant: Option<f64>,
    patch_init_uniform: Option<f64>,
) -> PyResult<(PyRepairedNetwork, String)> {
    let mode = match mode {
        "provable" => {
            if split_layer.is_some() {
                return Err(PyValueError::new_err(
                    "split_layer needs mode=\"feature\"",
                ));
            }
            RepairMode::Provable
        }
        "feature" => RepairMode::Feature {
            boundary: split_layer,
        },
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be \"provable\" or \"feature\", got {other:?}"
            )))
        }
    };
    let init = match (patch_init_constant, patch_init_uniform) {
        (None, None) => PatchInit::Zero,
        (Some(c), None) => PatchInit::Constant(c),
        (None, Some(scale)) => PatchInit::Uniform { scale },
        (Some(_), Some(_)) => {
            return Err(PyValueError::new_err(
                "patch_init_constant and patch_init_uniform are mutually exclusive",
            ))
        }
    };
    let config = RepairConfig {
        mode,
        patch: PatchSpec {
            hidden: patch_hidden.unwrap_or_default(),
            bias: patch_bias,
            init,
        },
        max_iterations,
        epochs,
        learning_rate,
        selection,
        seed,
        ..RepairConfig::default()
    };
    let (repaired, report) =
        relurepair::repair::repair(&net.inner, &to_anchors(anchors), radius, &config)
            .map_err(py_err)?;
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| PyRuntimeError::new_err(format!("cannot serialize report: {e}")))?;
    Ok((PyRepairedNetwork { inner: repaired }, report_json))
}

/// Score a repaired network: repair success, generalization, drawdown,
/// and defense rates.  Returns the metrics report as a JSON string.
#[pyfunction]
#[pyo3(signature = (repaired, anchors, radius, model = "model", test_inputs = None, test_labels = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    repaired: &PyRepairedNetwork,
    anchors: Vec<AnchorTuple>,
    radius: f64,
    model: &str,
    test_inputs: Option<Vec<Vec<f64>>>,
    test_labels: Option<Vec<usize>>,
    seed: u64,
) -> PyResult<String> {
    let test = match (test_inputs, test_labels) {
        (Some(inputs), Some(labels)) => {
            Some(LabeledDataset::new("test", inputs, labels).map_err(py_err)?)
        }
        (None, None) => None,
        _ => {
            return Err(PyValueError::new_err(
                "test_inputs and test_labels must be given together",
            ))
        }
    };
    let mut config = EvalConfig::new(model, radius);
    config.attack.seed = seed;
    let report =
        metrics::evaluate_repair(&repaired.inner, &to_anchors(anchors), test.as_ref(), &config)
            .map_err(py_err)?;
    Ok(report.to_json())
}

/// The built-in 2-2-2 classifier the worked example repairs.
#[pyfunction]
fn reference_network() -> PyNetwork {
    PyNetwork {
        inner: demo::reference_net(),
    }
}

/// The full worked-example trace: loss, gradient step, bisection, and the
/// certified engine run, as printable text.
#[pyfunction]
fn worked_example_trace() -> PyResult<String> {
    let worked = demo::worked_example().map_err(py_err)?;
    Ok(demo::describe(&worked))
}

/// Two separable Gaussian-free clusters for quick experiments: class 0
/// centered at -0.5 per coordinate, class 1 at +0.5.
#[pyfunction]
fn two_cluster_data(
    dim: usize,
    per_class: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let data = synth::two_cluster_dataset(dim, per_class, seed).map_err(py_err)?;
    Ok((data.inputs().to_vec(), data.labels().to_vec()))
}

/// Train a fresh fully connected ReLU classifier on the given data with
/// softmax cross-entropy; deterministic for a fixed seed.
#[pyfunction]
#[pyo3(signature = (dims, inputs, labels, epochs = 120, batch_size = 32, learning_rate = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_classifier(
    dims: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<PyNetwork> {
    let data = LabeledDataset::new("train", inputs, labels).map_err(py_err)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
    };
    let inner = synth::train_classifier(&dims, &data, &config).map_err(py_err)?;
    Ok(PyNetwork { inner })
}

#[pymodule]
fn relurepair_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyRepairedNetwork>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(repair, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(reference_network, m)?)?;
    m.add_function(wrap_pyfunction!(worked_example_trace, m)?)?;
    m.add_function(wrap_pyfunction!(two_cluster_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_classifier, m)?)?;
    Ok(())
}
