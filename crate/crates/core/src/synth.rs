//! Desk-scale experiment material: synthetic two-cluster datasets, random
//! fully connected networks, a small deterministic trainer, and a helper
//! that turns attack findings into repair anchors.  Everything is seeded,
//! so runs reproduce bitwise.

use crate::attacks::{self, AttackConfig};
use crate::dataset::LabeledDataset;
use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::net::{Dnn, Layer, Network};
use crate::repair::Anchor;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two uniform clusters at `(-offset, ..., -offset)` (class 0) and
/// `(+offset, ..., +offset)` (class 1) with per-coordinate noise in
/// `±noise`, interleaved so any prefix stays balanced.  With
/// `noise > offset` the clusters overlap and no classifier separates them
/// perfectly, which makes boundary-hugging (attackable) points plentiful.
pub fn cluster_dataset(
    dim: usize,
    per_class: usize,
    offset: f64,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if dim == 0 || per_class == 0 {
        return Err(Error::InvalidConfig(
            "cluster dataset needs a positive dimension and size".into(),
        ));
    }
    if !(offset.is_finite() && noise.is_finite() && noise > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cluster dataset needs finite offset and positive noise, got {offset} and {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for class in 0..2usize {
            let center = if class == 0 { -offset } else { offset };
            let point: Vec<f64> = (0..dim)
                .map(|_| center + rng.random_range(-noise..noise))
                .collect();
            inputs.push(point);
            labels.push(class);
        }
    }
    LabeledDataset::new(format!("clusters-{dim}d"), inputs, labels)
}

/// [`cluster_dataset`] with the default geometry: centers `±0.5`, noise
/// `±0.35`, cleanly separable.
pub fn two_cluster_dataset(dim: usize, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    cluster_dataset(dim, per_class, 0.5, 0.35, seed)
}

/// A fully connected ReLU classifier with uniform `±1/sqrt(fan_in)` weights
/// and zero biases.
pub fn random_net(dims: &[usize], seed: u64) -> Result<Dnn> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(
            "a network needs an input and an output size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (k, pair) in dims.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-scale..scale));
        layers.push(Layer::affine(weights, Array1::zeros(n_out))?);
        if k + 1 < dims.len() - 1 {
            layers.push(Layer::relu(n_out));
        }
    }
    Dnn::new(layers)
}

/// Minibatch gradient-descent parameters for [`train_classifier`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 120,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Trains a fresh fully connected ReLU classifier of the given layer sizes
/// on the dataset with softmax cross-entropy and minibatch gradient
/// descent.  Fully deterministic for a fixed config.
pub fn train_classifier(
    dims: &[usize],
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<Dnn> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(
            "a network needs an input and an output size".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("training needs a nonempty dataset".into()));
    }
    if data.input_dim() != Some(dims[0]) {
        return Err(Error::DimensionMismatch {
            context: "training data vs network input".into(),
            expected: dims[0],
            actual: data.input_dim().unwrap_or(0),
        });
    }
    let classes = *dims.last().unwrap();
    data.check_labels(classes)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "learning rate must be positive and finite".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stages = dims.len() - 1;
    let mut weights: Vec<Array2<f64>> = Vec::with_capacity(stages);
    let mut biases: Vec<Array1<f64>> = Vec::with_capacity(stages);
    for pair in dims.windows(2) {
        let (n_in, n_out) = (pair[0], pair[1]);
        let scale = (2.0 / n_in as f64).sqrt();
        weights.push(Array2::from_shape_fn((n_out, n_in), |_| {
            rng.random_range(-scale..scale)
        }));
        biases.push(Array1::zeros(n_out));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad_w: Vec<Array2<f64>> =
                weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
            let mut grad_b: Vec<Array1<f64>> =
                biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
            for &i in batch {
                let x = Array1::from_vec(data.inputs()[i].clone());
                let label = data.labels()[i];
                // Forward, keeping each stage's post-activation input.
                let mut inputs_per_stage = Vec::with_capacity(stages);
                let mut cur = x;
                for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
                    inputs_per_stage.push(cur.clone());
                    cur = w.dot(&cur) + b;
                    if k + 1 < stages {
                        cur.mapv_inplace(|v| v.max(0.0));
                    }
                }
                // Cross-entropy gradient at the scores.
                let mut delta = softmax(&cur);
                delta[label] -= 1.0;
                // Backward through the affine/ReLU stack.
                for k in (0..stages).rev() {
                    let a = &inputs_per_stage[k];
                    for r in 0..grad_w[k].nrows() {
                        for c in 0..grad_w[k].ncols() {
                            grad_w[k][(r, c)] += delta[r] * a[c];
                        }
                    }
                    grad_b[k] += &delta;
                    if k > 0 {
                        let mut prev = weights[k].t().dot(&delta);
                        // ReLU passes gradient only where its output was
                        // positive; the stored input of stage k is that
                        // output.
                        for (d, &v) in prev.iter_mut().zip(a.iter()) {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        delta = prev;
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for k in 0..stages {
                weights[k].scaled_add(-step, &grad_w[k]);
                biases[k].scaled_add(-step, &grad_b[k]);
            }
        }
    }

    let mut layers = Vec::with_capacity(2 * stages - 1);
    for (k, (w, b)) in weights.into_iter().zip(biases).enumerate() {
        let out = w.nrows();
        layers.push(Layer::affine(w, b)?);
        if k + 1 < stages {
            layers.push(Layer::relu(out));
        }
    }
    Dnn::new(layers)
}

/// Fraction of the dataset the network classifies correctly.
pub fn accuracy<N: Network + ?Sized>(net: &N, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, l) in data.iter() {
        if net.classify(x)? == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Scans correctly classified dataset points and attacks each one's box,
/// collecting up to `count` anchors where the attack finds an adversarial
/// point.  Each anchor carries its ground truth and the found point.
pub fn find_attack_anchors<N: Network + Sync + ?Sized>(
    net: &N,
    data: &LabeledDataset,
    radius: f64,
    attack: &AttackConfig,
    count: usize,
) -> Result<Vec<Anchor>> {
    let mut anchors = Vec::with_capacity(count);
    for (x, label) in data.iter() {
        if anchors.len() == count {
            break;
        }
        if net.classify(x)? != label {
            continue;
        }
        let region = BoxRegion::from_center_radius(x, radius)?;
        let result = attacks::pgd(net, &region, x, label, attack)?;
        if let Some(adv) = result.adversarial {
            anchors.push(Anchor {
                center: x.to_vec(),
                label: Some(label),
                adversarial: Some(adv),
            });
        }
    }
    Ok(anchors)
}
