//! Verification loss of a patched network over a box.
//!
//! A patch module runs in parallel with the base network (or with the
//! classifier head after a split) and its output is added to the base scores.
//! For each class `l != l0` the composite margin `F_l - F_l0` is bounded above
//! by the sum of the base network's symbolic margin bound and the patch's own
//! margin form; maximizing that affine form over the box is exact and gives a
//! closed-form, differentiable training loss.  In clipped mode each class
//! contributes `max(term, 0)` (zero loss certifies the property up to the
//! caller's threshold); unclipped mode sums raw terms and keeps pushing
//! margins down even once they are certified.

use crate::deeppoly::{self, affine_box_max, maximizing_corner, BoxRegion, LinearForm, Verdict};
use crate::error::{Error, Result};
use crate::net::{Dnn, Layer};
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

/// Where a patch reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchSpace {
    /// The network input itself.
    Input,
    /// The activation at a split boundary; loss regions are then boxes in
    /// that feature space and the analyzed net is the classifier suffix.
    Feature { boundary: usize },
}

/// A trainable module added to the base network's output.
#[derive(Debug, Clone)]
pub struct PatchModule {
    net: Dnn,
    space: PatchSpace,
    trainable_bias: bool,
}

impl PatchModule {
    /// Wraps an arbitrary pipeline as a patch; biases are trainable.
    pub fn new(net: Dnn, space: PatchSpace) -> PatchModule {
        PatchModule {
            net,
            space,
            trainable_bias: true,
        }
    }

    /// Single affine patch `W v (+ b)` with every weight set by `init`.
    /// With `bias` false the bias stays pinned at zero during training.
    pub fn single_affine(input_dim: usize, output_dim: usize, bias: bool, init: f64) -> Result<PatchModule> {
        let weights = Array2::from_elem((output_dim, input_dim), init);
        let b = if bias {
            Array1::from_elem(output_dim, init)
        } else {
            Array1::zeros(output_dim)
        };
        let net = Dnn::new(vec![Layer::affine(weights, b)?])?;
        Ok(PatchModule {
            net,
            space: PatchSpace::Input,
            trainable_bias: bias,
        })
    }

    pub fn with_space(mut self, space: PatchSpace) -> PatchModule {
        self.space = space;
        self
    }

    pub fn with_trainable_bias(mut self, trainable: bool) -> PatchModule {
        self.trainable_bias = trainable;
        self
    }

    pub fn net(&self) -> &Dnn {
        &self.net
    }

    pub fn space(&self) -> PatchSpace {
        self.space
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// True when the patch is exactly one affine layer, in which case its
    /// margin forms are exact and box-independent.
    pub fn is_single_affine(&self) -> bool {
        self.net.layers().len() == 1
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        use crate::net::Network;
        self.net.forward(v)
    }

    /// Upper-bound forms of the patch's own margins `P_l - P_l0` over
    /// `region`.  Exact for a single affine layer; otherwise the symbolic
    /// relaxation of the patch network.
    pub fn margin_forms(&self, region: &BoxRegion, label: usize) -> Result<BTreeMap<usize, LinearForm>> {
        if label >= self.output_dim() {
            return Err(Error::ClassOutOfRange {
                class: label,
                num_classes: self.output_dim(),
            });
        }
        if let [Layer::Affine { weights, bias }] = self.net.layers() {
            let mut out = BTreeMap::new();
            for l in 0..self.output_dim() {
                if l == label {
                    continue;
                }
                let coeffs = &weights.row(l) - &weights.row(label);
                out.insert(l, LinearForm::new(coeffs, bias[l] - bias[label]));
            }
            Ok(out)
        } else {
            deeppoly::output_diff_upper(&self.net, region, label)
        }
    }

    /// Gradient-descent update of every affine layer.  `grad` must come from
    /// [`loss_gradient`] (or a sum of such gradients) for this patch.
    pub fn apply_step(&mut self, grad: &PatchGradient, rate: f64) -> Result<()> {
        let affine_count = self.net.num_affine_layers();
        if grad.weights.len() != affine_count {
            return Err(Error::DimensionMismatch {
                context: "patch gradient layers".into(),
                expected: affine_count,
                actual: grad.weights.len(),
            });
        }
        let mut layers = self.net.layers().to_vec();
        let mut gi = 0;
        for layer in layers.iter_mut() {
            if let Layer::Affine { weights, bias } = layer {
                weights.scaled_add(-rate, &grad.weights[gi]);
                if self.trainable_bias {
                    bias.scaled_add(-rate, &grad.biases[gi]);
                }
                gi += 1;
            }
        }
        self.net = Dnn::pipeline(layers).map_err(|_| {
            Error::InvalidNetwork("patch update produced non-finite weights".into())
        })?;
        Ok(())
    }

    /// Whether training may move the bias entries (decided at construction).
    pub fn trainable_bias(&self) -> bool {
        self.trainable_bias
    }
}

/// Per-class composite margin bound: base form + patch form = total.
#[derive(Debug, Clone)]
pub struct ClassBound {
    pub class: usize,
    pub base: LinearForm,
    pub patch: LinearForm,
    pub total: LinearForm,
}

/// Upper bounds of every composite margin `F_l - F_l0` over one region, in
/// the space the patch reads from.
#[derive(Debug, Clone)]
pub struct CompositeBound {
    pub label: usize,
    pub classes: Vec<ClassBound>,
}

impl CompositeBound {
    pub fn class(&self, l: usize) -> Option<&ClassBound> {
        self.classes.iter().find(|c| c.class == l)
    }
}

/// Combines externally computed base margin forms with the patch's forms.
/// The repair loop uses this with cached base forms so only the patch side is
/// recomputed after each training step.
pub fn composite_bounds_with_base(
    base_forms: &BTreeMap<usize, LinearForm>,
    patch: &PatchModule,
    region: &BoxRegion,
    label: usize,
) -> Result<CompositeBound> {
    let patch_forms = patch.margin_forms(region, label)?;
    if base_forms.len() != patch_forms.len() || base_forms.keys().any(|k| !patch_forms.contains_key(k)) {
        return Err(Error::InvalidConfig(
            "base and patch margin forms cover different class sets".into(),
        ));
    }
    let mut classes = Vec::with_capacity(base_forms.len());
    for (&l, base) in base_forms {
        let patch_form = &patch_forms[&l];
        if base.dim() != patch_form.dim() {
            return Err(Error::DimensionMismatch {
                context: format!("margin form for class {l}"),
                expected: base.dim(),
                actual: patch_form.dim(),
            });
        }
        classes.push(ClassBound {
            class: l,
            base: base.clone(),
            patch: patch_form.clone(),
            total: base.sum(patch_form),
        });
    }
    Ok(CompositeBound { label, classes })
}

/// Computes the base margin forms and combines them with the patch.  For an
/// input-space patch the base is the full network over `region`; for a
/// feature-space patch the base is the classifier suffix after the split
/// boundary and `region` must be a feature-space box.
pub fn composite_bounds(
    base: &Dnn,
    patch: &PatchModule,
    region: &BoxRegion,
    label: usize,
) -> Result<CompositeBound> {
    let base_forms = match patch.space() {
        PatchSpace::Input => deeppoly::output_diff_upper(base, region, label)?,
        PatchSpace::Feature { boundary } => {
            let split = base.split(boundary)?;
            deeppoly::output_diff_upper(split.suffix(), region, label)?
        }
    };
    composite_bounds_with_base(&base_forms, patch, region, label)
}

/// Whether per-class terms are hinged at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// `sum_l max(term_l, 0)`: zero exactly when every margin bound is
    /// non-positive over the box.
    Clipped,
    /// `sum_l term_l`: keeps pushing certified margins further down.
    Unclipped,
}

/// Evaluated loss of one property: the box maximum of every class's total
/// margin form, the corners attaining them, and the mode-dependent total.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    /// Raw (unclipped) per-class terms, keyed by class.
    pub per_class: Vec<(usize, f64)>,
    /// Maximizing box corner per class, aligned with `per_class`.
    pub corners: Vec<(usize, Array1<f64>)>,
    pub mode: LossMode,
}

impl LossValue {
    /// Classes whose raw term is strictly positive.
    pub fn active_set(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .filter_map(|&(l, t)| (t > 0.0).then_some(l))
            .collect()
    }

    /// True when every raw term is at most `-epsilon` — the training loop's
    /// certification test.
    pub fn certified(&self, epsilon: f64) -> bool {
        self.per_class.iter().all(|&(_, t)| t <= -epsilon)
    }
}

/// Closed-form loss of one property: exact box maximization of each total
/// margin form, clipped or not according to `mode`.
pub fn violation_loss(bound: &CompositeBound, region: &BoxRegion, mode: LossMode) -> LossValue {
    let mut per_class = Vec::with_capacity(bound.classes.len());
    let mut corners = Vec::with_capacity(bound.classes.len());
    let mut total = 0.0;
    for cb in &bound.classes {
        let term = affine_box_max(&cb.total, region);
        per_class.push((cb.class, term));
        corners.push((cb.class, maximizing_corner(&cb.total, region)));
        total += match mode {
            LossMode::Clipped => term.max(0.0),
            LossMode::Unclipped => term,
        };
    }
    LossValue {
        total,
        per_class,
        corners,
        mode,
    }
}

/// Loss of a conjunction of properties sharing one patch: the sum of the
/// per-property losses.  All properties must target the same class.
pub fn conjunction_loss(
    properties: &[(&CompositeBound, &BoxRegion)],
    mode: LossMode,
) -> Result<(f64, Vec<LossValue>)> {
    if let Some(((first, _), rest)) = properties.split_first() {
        if rest.iter().any(|(b, _)| b.label != first.label) {
            return Err(Error::MixedLabels);
        }
    }
    let values: Vec<LossValue> = properties
        .iter()
        .map(|(b, r)| violation_loss(b, r, mode))
        .collect();
    Ok((values.iter().map(|v| v.total).sum(), values))
}

/// Gradient of a loss with respect to one patch's parameters, one entry per
/// affine layer of the patch network.
#[derive(Debug, Clone)]
pub struct PatchGradient {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl PatchGradient {
    pub fn zeros_like(patch: &PatchModule) -> PatchGradient {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in patch.net().layers() {
            if let Layer::Affine { weights: w, bias } = layer {
                weights.push(Array2::zeros(w.dim()));
                biases.push(Array1::zeros(bias.len()));
            }
        }
        PatchGradient { weights, biases }
    }

    pub fn add_assign(&mut self, other: &PatchGradient) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Largest absolute entry, used for gradient clipping.
    pub fn max_abs(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        self.biases
            .iter()
            .flat_map(|v| v.iter())
            .fold(w, |acc, v| acc.max(v.abs()))
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * s);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * s);
        }
    }
}

/// Exact subgradient of [`violation_loss`] with respect to the patch
/// parameters, with the per-class activity and maximizing corners frozen at
/// the evaluation point.
///
/// For a single affine patch each contributing class `l` adds the corner to
/// row `l`, subtracts it from row `l0`, and (when the patch has a bias) adds
/// `+1`/`-1` to the two bias entries.  Deeper patches backpropagate through
/// the patch's own relaxation with the relaxation coefficients frozen, the
/// usual convention when training against propagated bounds.
pub fn loss_gradient(
    bound: &CompositeBound,
    region: &BoxRegion,
    patch: &PatchModule,
    mode: LossMode,
) -> Result<PatchGradient> {
    let value = violation_loss(bound, region, mode);
    let mut grad = PatchGradient::zeros_like(patch);
    let train_bias = patch.trainable_bias();
    for (idx, &(l, term)) in value.per_class.iter().enumerate() {
        if mode == LossMode::Clipped && term <= 0.0 {
            continue;
        }
        let corner = &value.corners[idx].1;
        if patch.is_single_affine() {
            let g = &mut grad.weights[0];
            for d in 0..corner.len() {
                g[(l, d)] += corner[d];
                g[(bound.label, d)] -= corner[d];
            }
            if train_bias {
                grad.biases[0][l] += 1.0;
                grad.biases[0][bound.label] -= 1.0;
            }
        } else {
            deep_margin_gradient(patch, region, l, bound.label, corner, &mut grad, train_bias)?;
        }
    }
    Ok(grad)
}

/// Reverse-mode gradient of the patch branch of one class term through the
/// frozen relaxation.  The branch's bound, back-substituted into the patch
/// input space and evaluated at the (frozen) corner, equals the forward value
/// of a linearized network: affine layers stay as-is and each ReLU becomes
/// the diagonal map picked during back-substitution (chord or 0/1 slope,
/// chosen by the sign of the coefficient reaching it).  Standard backprop
/// through that linearized network gives the exact gradient of the frozen
/// bound.
fn deep_margin_gradient(
    patch: &PatchModule,
    region: &BoxRegion,
    l: usize,
    l0: usize,
    corner: &Array1<f64>,
    grad: &mut PatchGradient,
    train_bias: bool,
) -> Result<()> {
    let analysis = deeppoly::analyze(patch.net(), region)?;
    let layers = patch.net().layers();
    let n_out = patch.output_dim();

    // Backward coefficient sweep, recording the frozen diagonal (slope,
    // intercept) chosen at every ReLU.
    let mut seed = Array1::zeros(n_out);
    seed[l] = 1.0;
    seed[l0] += -1.0;
    let mut coeff = seed.clone();
    let mut frozen: Vec<Option<(Array1<f64>, Array1<f64>)>> = vec![None; layers.len()];
    for (k, layer) in layers.iter().enumerate().rev() {
        match layer {
            Layer::Affine { weights, .. } => {
                coeff = weights.t().dot(&coeff);
            }
            Layer::Relu { dim } => {
                let mut slopes = Array1::zeros(*dim);
                let mut intercepts = Array1::zeros(*dim);
                let mut next = Array1::zeros(*dim);
                for i in 0..*dim {
                    let c = coeff[i];
                    let n = &analysis.layers[k][i];
                    // Upper bound: positive coefficients take the upper form.
                    let form = if c > 0.0 { &n.sym_upper } else { &n.sym_lower };
                    slopes[i] = form.coeffs()[i];
                    intercepts[i] = form.offset();
                    next[i] = c * slopes[i];
                }
                frozen[k] = Some((slopes, intercepts));
                coeff = next;
            }
        }
    }

    // Forward through the linearized stack from the corner.
    let mut z = corner.clone();
    let mut layer_inputs = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate() {
        layer_inputs.push(z.clone());
        z = match layer {
            Layer::Affine { weights, bias } => weights.dot(&z) + bias,
            Layer::Relu { .. } => {
                let (slopes, intercepts) = frozen[k].as_ref().unwrap();
                &z * slopes + intercepts
            }
        };
    }

    // Backprop the seed through the linearized stack.
    let mut delta = seed;
    let mut gi = grad.weights.len();
    for (k, layer) in layers.iter().enumerate().rev() {
        match layer {
            Layer::Affine { weights, .. } => {
                gi -= 1;
                let input = &layer_inputs[k];
                for r in 0..weights.nrows() {
                    if delta[r] == 0.0 {
                        continue;
                    }
                    for c in 0..weights.ncols() {
                        grad.weights[gi][(r, c)] += delta[r] * input[c];
                    }
                    if train_bias {
                        grad.biases[gi][r] += delta[r];
                    }
                }
                delta = weights.t().dot(&delta);
            }
            Layer::Relu { .. } => {
                let (slopes, _) = frozen[k].as_ref().unwrap();
                delta = &delta * slopes;
            }
        }
    }
    Ok(())
}

/// Independent certification of a patched property: recomputes the base
/// margin forms and the patch forms from scratch and requires every total to
/// be strictly negative at its box maximum.  Shares no state with the repair
/// loop's cached bounds.
pub fn verify_composite(
    base: &Dnn,
    patch: &PatchModule,
    region: &BoxRegion,
    label: usize,
) -> Result<Verdict> {
    let bound = composite_bounds(base, patch, region, label)?;
    let all_negative = bound
        .classes
        .iter()
        .all(|cb| affine_box_max(&cb.total, region) < 0.0);
    Ok(if all_negative { Verdict::Verified } else { Verdict::Unknown })
}
