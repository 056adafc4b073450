//! Feed-forward ReLU networks: evaluation, classification, input gradients,
//! and splitting into a feature extractor plus classifier head.
//!
//! Classification scores are the raw outputs of the final affine layer;
//! `classify` breaks ties toward the lowest class index so that a tie never
//! silently counts as the expected class.  Gradients use the subgradient 0 at
//! ReLU kinks (pre-activation exactly zero).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// One layer of a network: an affine map `x -> Wx + b` or an elementwise ReLU.
#[derive(Debug, Clone)]
pub enum Layer {
    Affine { weights: Array2<f64>, bias: Array1<f64> },
    Relu { dim: usize },
}

impl Layer {
    /// Builds an affine layer, rejecting non-finite entries and shape
    /// disagreements between the weight matrix and the bias vector.
    pub fn affine(weights: Array2<f64>, bias: Array1<f64>) -> Result<Layer> {
        if weights.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "affine layer bias".into(),
                expected: weights.nrows(),
                actual: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidNetwork(
                "affine layer contains a non-finite weight or bias".into(),
            ));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::InvalidNetwork("affine layer has a zero dimension".into()));
        }
        Ok(Layer::Affine { weights, bias })
    }

    pub fn relu(dim: usize) -> Layer {
        Layer::Relu { dim }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Affine { weights, .. } => weights.ncols(),
            Layer::Relu { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Affine { weights, .. } => weights.nrows(),
            Layer::Relu { dim } => *dim,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Affine { .. })
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        match self {
            Layer::Affine { weights, bias } => weights.dot(x) + bias,
            Layer::Relu { .. } => x.mapv(|v| v.max(0.0)),
        }
    }
}

/// An immutable feed-forward network: an ordered stack of layers whose
/// dimensions chain.  Built with [`Dnn::new`] for classifiers (final layer
/// affine) or [`Dnn::pipeline`] for internal stages such as feature
/// extractors, which may end in an activation.
#[derive(Debug, Clone)]
pub struct Dnn {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl Dnn {
    /// Builds a classifier network.  The final layer must be affine so that
    /// outputs are pre-activation scores.
    pub fn new(layers: Vec<Layer>) -> Result<Dnn> {
        let net = Dnn::pipeline(layers)?;
        match net.layers.last() {
            Some(Layer::Affine { .. }) => Ok(net),
            _ => Err(Error::InvalidNetwork(
                "classifier network must end with an affine layer".into(),
            )),
        }
    }

    /// Builds a network stage without the final-affine requirement.  Used for
    /// the prefix half of a split network, whose output is an activation.
    pub fn pipeline(layers: Vec<Layer>) -> Result<Dnn> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {} -> layer {}", k, k + 1),
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        let input_dim = layers[0].input_dim();
        let output_dim = layers.last().unwrap().output_dim();
        Ok(Dnn {
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_affine_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_affine()).count()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "network input".into(),
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Outputs of every layer in order, ending with the network output.
    pub fn layer_outputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut cur = Array1::from_vec(x.to_vec());
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = layer.apply(&cur);
            out.push(cur.to_vec());
        }
        Ok(out)
    }

    /// Splits the network at a layer boundary `l` (`1 <= l < num_layers`):
    /// the prefix is `layers[..l]`, the suffix `layers[l..]`.
    pub fn split(&self, boundary: usize) -> Result<SplitNetwork> {
        if boundary == 0 || boundary >= self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "split boundary {} outside 1..{}",
                boundary,
                self.layers.len()
            )));
        }
        let prefix = Dnn::pipeline(self.layers[..boundary].to_vec())?;
        let suffix = Dnn::pipeline(self.layers[boundary..].to_vec())?;
        Ok(SplitNetwork {
            prefix,
            suffix,
            boundary,
        })
    }

    /// Default split boundary: just before the second-to-last affine layer,
    /// so the suffix holds the last two affine stages.  For networks with
    /// exactly two affine layers that boundary would be 0, so the split falls
    /// back to just before the final affine layer.  `None` if the network has
    /// fewer than two affine layers or no valid interior boundary.
    pub fn default_split_boundary(&self) -> Option<usize> {
        let affine_at: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_affine().then_some(i))
            .collect();
        if affine_at.len() < 2 {
            return None;
        }
        let preferred = affine_at[affine_at.len() - 2];
        if preferred >= 1 {
            return Some(preferred);
        }
        let last = affine_at[affine_at.len() - 1];
        (last >= 1).then_some(last)
    }
}

/// Anything attacks and metrics can treat as a classifier: a plain [`Dnn`] or
/// a repaired network with its patches.
pub trait Network {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of `objective . outputs` with respect to the input, where
    /// `objective` is a coefficient vector over the outputs.
    fn input_gradient(&self, x: &[f64], objective: &[f64]) -> Result<Vec<f64>>;

    /// Argmax of the outputs; ties go to the lowest index.
    fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax_lowest(&self.forward(x)?))
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

impl Network for Dnn {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = Array1::from_vec(x.to_vec());
        for layer in &self.layers {
            cur = layer.apply(&cur);
        }
        Ok(cur.to_vec())
    }

    fn input_gradient(&self, x: &[f64], objective: &[f64]) -> Result<Vec<f64>> {
        Ok(self.vjp(x, objective)?.to_vec())
    }
}

impl Dnn {
    /// Vector-Jacobian product: pulls `cotangent` (over the outputs) back to
    /// the input space.  ReLU passes a component only where its pre-activation
    /// is strictly positive, so the subgradient at a kink is 0.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<Array1<f64>> {
        self.check_input(x)?;
        if cotangent.len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                context: "output cotangent".into(),
                expected: self.output_dim,
                actual: cotangent.len(),
            });
        }
        // Forward pass, remembering each layer's input.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = Array1::from_vec(x.to_vec());
        for layer in &self.layers {
            inputs.push(cur.clone());
            cur = layer.apply(&cur);
        }
        // Backward pass.
        let mut delta = Array1::from_vec(cotangent.to_vec());
        for (layer, pre) in self.layers.iter().zip(inputs.iter()).rev() {
            delta = match layer {
                Layer::Affine { weights, .. } => weights.t().dot(&delta),
                Layer::Relu { .. } => {
                    let mut d = delta;
                    for (di, &p) in d.iter_mut().zip(pre.iter()) {
                        if p <= 0.0 {
                            *di = 0.0;
                        }
                    }
                    d
                }
            };
        }
        Ok(delta)
    }
}

/// A network cut at a layer boundary: `suffix(prefix(x)) == forward(x)`
/// exactly, including bitwise-identical floating point.
#[derive(Debug, Clone)]
pub struct SplitNetwork {
    prefix: Dnn,
    suffix: Dnn,
    boundary: usize,
}

impl SplitNetwork {
    pub fn prefix(&self) -> &Dnn {
        &self.prefix
    }

    pub fn suffix(&self) -> &Dnn {
        &self.suffix
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// Dimension of the feature space the prefix maps into.
    pub fn feature_dim(&self) -> usize {
        self.prefix.output_dim()
    }
}
