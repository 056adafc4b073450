//! The repair engine: per-patch training against the closed-form violation
//! loss, gradient-scored bisection of unresolved boxes, and assembly of the
//! repaired network.
//!
//! Each anchor gets its own patch and its own refinement tree, so anchors
//! are fully independent: the engine trains them in parallel and merges the
//! results in anchor order, which keeps every run bitwise deterministic for
//! a fixed seed regardless of thread count.
//!
//! Two modes.  In provable mode patches read the network input, the loss is
//! clipped, training stops as soon as every box is certified, and the final
//! guarantee comes from an independent from-scratch verification of every
//! leaf box.  In feature mode patches read the activation at a split layer,
//! the boxes live in feature space (the hull of attack-driven samples), the
//! loss is unclipped, all iterations run, and no provable claim is made —
//! the report header carries that interpretation.

use crate::attacks::{self, AttackConfig};
use crate::deeppoly::{self, BoxRegion, LinearForm, Verdict};
use crate::error::{Error, Result};
use crate::loss::{
    composite_bounds_with_base, loss_gradient, verify_composite, violation_loss, LossMode,
    LossValue, PatchGradient, PatchModule, PatchSpace,
};
use crate::net::{Dnn, Layer, Network};
use crate::patched::{RegionEntry, RepairedDnn};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// One repair request: a point whose surrounding box must keep a class.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub center: Vec<f64>,
    /// Class to enforce; defaults to the base network's prediction at the
    /// center.
    pub label: Option<usize>,
    /// Known adversarial point inside the box, used to seed feature-space
    /// sampling.
    pub adversarial: Option<Vec<f64>>,
}

impl Anchor {
    pub fn at(center: Vec<f64>) -> Anchor {
        Anchor {
            center,
            label: None,
            adversarial: None,
        }
    }
}

/// Whether repair certifies boxes in input space or trains heuristically in
/// the feature space of a split layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairMode {
    Provable,
    /// `boundary: None` uses the network's default split point (before the
    /// second-to-last affine layer).
    Feature { boundary: Option<usize> },
}

/// How patch weights start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchInit {
    Zero,
    Constant(f64),
    /// Uniform in `(-scale, scale)`, drawn from the per-anchor stream of the
    /// repair seed.
    Uniform { scale: f64 },
}

/// Patch architecture: affine layers of the given hidden widths (ReLU
/// between), empty for a single affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub hidden: Vec<usize>,
    pub bias: bool,
    pub init: PatchInit,
}

impl Default for PatchSpec {
    fn default() -> PatchSpec {
        PatchSpec {
            hidden: Vec::new(),
            bias: true,
            init: PatchInit::Zero,
        }
    }
}

/// Sampling budget for feature-space boxes beyond the PGD restarts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingBudget {
    pub fgsm_samples: usize,
}

impl Default for SamplingBudget {
    fn default() -> SamplingBudget {
        SamplingBudget { fgsm_samples: 50 }
    }
}

/// Engine parameters.  The defaults follow the evaluation setup: up to 25
/// iterations of (train, bisect), 10 epochs per training call at rate 10,
/// the 800 worst boxes refined per iteration.
#[derive(Debug, Clone)]
pub struct RepairConfig {
    pub mode: RepairMode,
    pub patch: PatchSpec,
    /// M: outer (train + bisect) iterations per patch.
    pub max_iterations: usize,
    /// R: gradient steps per training call.
    pub epochs: usize,
    /// η.
    pub learning_rate: f64,
    /// K: how many positive-loss boxes may be bisected per iteration.
    pub selection: usize,
    /// Certification slack: a box counts as certified during training when
    /// every per-class term is at most `-epsilon_verify`.
    pub epsilon_verify: f64,
    /// Refinement depth bound; a box at the cap is left unsplit.
    pub depth_cap: usize,
    pub seed: u64,
    /// Scale gradients down to this max-abs value when set.
    pub gradient_clip: Option<f64>,
    /// Attack budget for feature-space sampling.
    pub attack: AttackConfig,
    pub sampling: SamplingBudget,
    /// Externally supplied root margin forms, keyed by anchor index then
    /// class: training and bisection of that anchor's depth-0 box use these
    /// instead of the analyzer's forms.  Children always get fresh forms,
    /// and the final verification never consults overrides.
    pub base_form_overrides: BTreeMap<usize, BTreeMap<usize, LinearForm>>,
}

impl Default for RepairConfig {
    fn default() -> RepairConfig {
        RepairConfig {
            mode: RepairMode::Provable,
            patch: PatchSpec::default(),
            max_iterations: 25,
            epochs: 10,
            learning_rate: 10.0,
            selection: 800,
            epsilon_verify: 1e-9,
            depth_cap: 30,
            seed: 0,
            gradient_clip: None,
            attack: AttackConfig::default(),
            sampling: SamplingBudget::default(),
            base_form_overrides: BTreeMap::new(),
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.epochs == 0 || self.selection == 0 {
            return Err(Error::InvalidConfig(
                "iterations, epochs, and selection size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.epsilon_verify.is_finite() && self.epsilon_verify >= 0.0) {
            return Err(Error::InvalidConfig(
                "certification slack must be finite and non-negative".into(),
            ));
        }
        if self.depth_cap == 0 {
            return Err(Error::InvalidConfig("depth cap must be at least 1".into()));
        }
        if let Some(clip) = self.gradient_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::InvalidConfig(
                    "gradient clip must be positive and finite".into(),
                ));
            }
        }
        self.attack.validate()
    }

    fn loss_mode(&self) -> LossMode {
        match self.mode {
            RepairMode::Provable => LossMode::Clipped,
            RepairMode::Feature { .. } => LossMode::Unclipped,
        }
    }
}

/// One box a patch must fix, with its place in the refinement tree.
#[derive(Debug, Clone)]
pub struct RobustnessProperty {
    pub region: BoxRegion,
    pub label: usize,
    /// Index of the anchor this box descends from.
    pub origin: usize,
    pub depth: usize,
}

/// A property plus its cached base margin forms, computed once when the
/// property is created; only the patch side changes during training.
#[derive(Debug, Clone)]
pub struct PropertyRecord {
    pub property: RobustnessProperty,
    pub base_forms: BTreeMap<usize, LinearForm>,
}

/// Result of one training call.
#[derive(Debug)]
pub struct TrainOutcome {
    /// True when every per-class term of every box reached the certification
    /// slack (provable mode only).
    pub repaired: bool,
    pub epochs_run: usize,
    /// Indices into the record slice of the boxes to bisect next: the
    /// positive-loss boxes, worst first, at most `selection` of them.
    pub refine: Vec<usize>,
    /// Post-training loss of every record, aligned with the input slice.
    pub final_losses: Vec<LossValue>,
}

fn conjunction_losses(
    records: &[PropertyRecord],
    patch: &PatchModule,
    mode: LossMode,
) -> Result<Vec<LossValue>> {
    records
        .iter()
        .map(|rec| {
            let bound = composite_bounds_with_base(
                &rec.base_forms,
                patch,
                &rec.property.region,
                rec.property.label,
            )?;
            Ok(violation_loss(&bound, &rec.property.region, mode))
        })
        .collect()
}

fn any_non_finite(losses: &[LossValue]) -> bool {
    losses
        .iter()
        .any(|v| !v.total.is_finite() || v.per_class.iter().any(|&(_, t)| !t.is_finite()))
}

/// Positive-loss record indices, worst loss first, ties broken by (origin,
/// depth, box lower corner lexicographically), truncated to the selection
/// size.
fn select_refinements(
    records: &[PropertyRecord],
    losses: &[LossValue],
    selection: usize,
) -> Vec<usize> {
    let mut positive: Vec<usize> = (0..records.len())
        .filter(|&i| losses[i].total > 0.0)
        .collect();
    positive.sort_by(|&a, &b| {
        losses[b]
            .total
            .partial_cmp(&losses[a].total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(records[a].property.origin.cmp(&records[b].property.origin))
            .then(records[a].property.depth.cmp(&records[b].property.depth))
            .then_with(|| {
                let la = records[a].property.region.lower();
                let lb = records[b].property.region.lower();
                la.iter()
                    .zip(lb.iter())
                    .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    positive.truncate(selection);
    positive
}

/// Trains one patch against the conjunction of its boxes: at most `epochs`
/// subgradient steps of the summed closed-form loss.  In provable mode the
/// call returns as soon as every box is certified — including before the
/// first step; in feature mode it always runs the full epoch budget.
pub fn train_patch(
    patch: &mut PatchModule,
    records: &[PropertyRecord],
    config: &RepairConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one box".into()));
    }
    let label = records[0].property.label;
    if records.iter().any(|r| r.property.label != label) {
        return Err(Error::MixedLabels);
    }
    let origin = records[0].property.origin;
    let mode = config.loss_mode();
    let early_exit = matches!(config.mode, RepairMode::Provable);

    let mut losses = conjunction_losses(records, patch, mode)?;
    if any_non_finite(&losses) {
        return Err(Error::DivergentLoss { patch: origin });
    }
    let mut epochs_run = 0;
    let certified =
        |ls: &[LossValue]| ls.iter().all(|v| v.certified(config.epsilon_verify));
    if !(early_exit && certified(&losses)) {
        for _ in 0..config.epochs {
            let mut grad = PatchGradient::zeros_like(patch);
            for rec in records {
                let bound = composite_bounds_with_base(
                    &rec.base_forms,
                    patch,
                    &rec.property.region,
                    rec.property.label,
                )?;
                let g = loss_gradient(&bound, &rec.property.region, patch, mode)?;
                grad.add_assign(&g);
            }
            if let Some(clip) = config.gradient_clip {
                let max = grad.max_abs();
                if max > clip {
                    grad.scale(clip / max);
                }
            }
            // The only failure mode of the update is a non-finite weight,
            // i.e. the step itself overflowed.
            patch
                .apply_step(&grad, config.learning_rate)
                .map_err(|_| Error::DivergentLoss { patch: origin })?;
            epochs_run += 1;
            losses = conjunction_losses(records, patch, mode)?;
            if any_non_finite(&losses) {
                return Err(Error::DivergentLoss { patch: origin });
            }
            if early_exit && certified(&losses) {
                break;
            }
        }
    }
    let repaired = early_exit && certified(&losses);
    let refine = if repaired {
        Vec::new()
    } else {
        select_refinements(records, &losses, config.selection)
    };
    Ok(TrainOutcome {
        repaired,
        epochs_run,
        refine,
        final_losses: losses,
    })
}

/// Splits a box at the midpoint of its most influential dimension: the one
/// maximizing |g_d| · width_d, where g sums the total margin coefficients
/// of the classes contributing loss (the loss gradient in input space at
/// the maximizing corner).  Ties go to the lowest dimension; zero-width
/// dimensions are never split.
pub fn bisect_property(
    record: &PropertyRecord,
    patch: &PatchModule,
    mode: LossMode,
) -> Result<(RobustnessProperty, RobustnessProperty)> {
    let prop = &record.property;
    let bound =
        composite_bounds_with_base(&record.base_forms, patch, &prop.region, prop.label)?;
    let value = violation_loss(&bound, &prop.region, mode);
    // Which classes drive the split: the ones contributing loss.  Clipped
    // loss only feels positive terms (all classes as a fallback when none
    // are); unclipped loss feels every term.
    let active = value.active_set();
    let dim = prop.region.dim();
    let mut g = vec![0.0; dim];
    for cb in &bound.classes {
        let counts = match mode {
            LossMode::Unclipped => true,
            LossMode::Clipped => active.is_empty() || active.contains(&cb.class),
        };
        if counts {
            for d in 0..dim {
                g[d] += cb.total.coeffs()[d];
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for d in 0..dim {
        let width = prop.region.width(d);
        if width <= 0.0 {
            continue;
        }
        let score = g[d].abs() * width;
        match best {
            None => best = Some((d, score)),
            Some((_, s)) if score > s => best = Some((d, score)),
            _ => {}
        }
    }
    let (d_star, _) = best.ok_or(Error::RefinementExhausted)?;
    let (low, high) = prop.region.split_at_midpoint(d_star);
    let child = |region: BoxRegion| RobustnessProperty {
        region,
        label: prop.label,
        origin: prop.origin,
        depth: prop.depth + 1,
    };
    Ok((child(low), child(high)))
}

/// A feature-space box covering where the suffix actually operates: the
/// componentwise hull of the split-layer activations of attack-driven
/// samples of the input box.
#[derive(Debug, Clone)]
pub struct FeatureBox {
    pub region: BoxRegion,
    pub sample_count: usize,
}

/// Samples the input box with the attack budget — every PGD restart's final
/// point, `fgsm_samples` single-step points from random starts, the box
/// center, and the stored adversarial example if given — and returns the
/// componentwise hull of their activations at the split boundary.
pub fn sample_feature_box(
    base: &Dnn,
    boundary: usize,
    region: &BoxRegion,
    label: usize,
    adversarial: Option<&[f64]>,
    attack: &AttackConfig,
    budget: &SamplingBudget,
) -> Result<FeatureBox> {
    let split = base.split(boundary)?;
    let center = region.center();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    samples.push(center.to_vec());
    if let Some(adv) = adversarial {
        if adv.len() != region.dim() {
            return Err(Error::DimensionMismatch {
                context: "stored adversarial point".into(),
                expected: region.dim(),
                actual: adv.len(),
            });
        }
        samples.push(adv.to_vec());
    }
    let pgd = attacks::pgd(base, region, &center, label, attack)?;
    samples.extend(pgd.finals);
    let mut rng = ChaCha8Rng::seed_from_u64(attack.seed);
    rng.set_stream(u64::MAX); // distinct from the per-restart streams
    for _ in 0..budget.fgsm_samples {
        let start: Vec<f64> = (0..region.dim())
            .map(|d| {
                let (lo, hi) = (region.lower()[d], region.upper()[d]);
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            })
            .collect();
        let radius =
            (0..region.dim()).fold(0.0_f64, |acc, d| acc.max(region.width(d))) * 0.5;
        samples.push(attacks::fgsm(base, region, &start, label, radius)?);
    }
    let mut lower: Option<Array1<f64>> = None;
    let mut upper: Option<Array1<f64>> = None;
    for s in &samples {
        let f = Array1::from_vec(split.prefix().forward(s)?);
        match (&mut lower, &mut upper) {
            (Some(lo), Some(hi)) => {
                for d in 0..f.len() {
                    lo[d] = lo[d].min(f[d]);
                    hi[d] = hi[d].max(f[d]);
                }
            }
            _ => {
                lower = Some(f.clone());
                upper = Some(f);
            }
        }
    }
    Ok(FeatureBox {
        region: BoxRegion::new(lower.unwrap(), upper.unwrap())?,
        sample_count: samples.len(),
    })
}

/// Per-anchor slice of the final report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnchorReport {
    pub index: usize,
    pub label: usize,
    /// Outer iterations executed.
    pub iterations: usize,
    /// Whether training reached the certification slack on every box.
    pub certified_in_training: bool,
    /// Whether the independent verification pass confirmed every leaf box
    /// (always false in feature mode — no claim is made).
    pub verified: bool,
    /// Conjunction loss after each iteration's training call.
    pub per_iteration_loss: Vec<f64>,
    /// Leaf boxes at the end.
    pub properties: usize,
    /// Bisections performed.
    pub refinements: usize,
    pub max_depth: usize,
    /// Post-training loss of each leaf box, in tree order.
    pub final_losses: Vec<f64>,
    /// Independent verification outcome per leaf box, in tree order.
    pub property_status: Vec<String>,
    pub warnings: Vec<String>,
}

/// Wall-clock breakdown; zeroed by [`RepairReport::timing_zeroed`] so
/// reports can be compared across runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingReport {
    pub total_seconds: f64,
    pub sampling_seconds: f64,
    pub training_seconds: f64,
    pub verification_seconds: f64,
    pub per_anchor_seconds: Vec<f64>,
}

/// Configuration echo stamped into every report, including the attack
/// budget used for sampling and later defense metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigEcho {
    pub max_iterations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub selection: usize,
    pub epsilon_verify: f64,
    pub depth_cap: usize,
    pub seed: u64,
    pub attack_step_size: f64,
    pub attack_steps: usize,
    pub attack_restarts: usize,
    pub fgsm_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RepairReport {
    pub mode: String,
    /// Present in feature mode: states that boxes are sampled feature hulls
    /// and no provable claim is made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<String>,
    pub radius: f64,
    pub config: ConfigEcho,
    /// True when every anchor's every leaf box passed the independent
    /// verification pass.
    pub provable: bool,
    pub anchors: Vec<AnchorReport>,
    pub timing: TimingReport,
}

impl RepairReport {
    /// Copy with all wall-clock fields set to zero, for determinism
    /// comparisons.
    pub fn timing_zeroed(&self) -> RepairReport {
        let mut r = self.clone();
        r.timing = TimingReport {
            total_seconds: 0.0,
            sampling_seconds: 0.0,
            training_seconds: 0.0,
            verification_seconds: 0.0,
            per_anchor_seconds: vec![0.0; self.timing.per_anchor_seconds.len()],
        };
        r
    }
}

struct AnchorOutcome {
    patch: PatchModule,
    report: AnchorReport,
    sampling_seconds: f64,
    training_seconds: f64,
    verification_seconds: f64,
    total_seconds: f64,
}

fn build_patch(
    input_dim: usize,
    output_dim: usize,
    spec: &PatchSpec,
    space: PatchSpace,
    seed: u64,
    stream: u64,
) -> Result<PatchModule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut value = |init: &PatchInit| -> f64 {
        match init {
            PatchInit::Zero => 0.0,
            PatchInit::Constant(c) => *c,
            PatchInit::Uniform { scale } => rng.random_range(-*scale..*scale),
        }
    };
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(spec.hidden.iter().copied())
        .chain(std::iter::once(output_dim))
        .collect();
    let mut layers = Vec::new();
    for (k, pair) in dims.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let weights = Array2::from_shape_fn((n_out, n_in), |_| value(&spec.init));
        let bias = if spec.bias {
            Array1::from_shape_fn(n_out, |_| value(&spec.init))
        } else {
            Array1::zeros(n_out)
        };
        layers.push(Layer::affine(weights, bias)?);
        if k + 1 < dims.len() - 1 {
            layers.push(Layer::relu(n_out));
        }
    }
    Ok(PatchModule::new(Dnn::new(layers)?, space).with_trainable_bias(spec.bias))
}

fn base_forms_for(
    base: &Dnn,
    suffix: Option<&Dnn>,
    region: &BoxRegion,
    label: usize,
) -> Result<BTreeMap<usize, LinearForm>> {
    match suffix {
        None => deeppoly::output_diff_upper(base, region, label),
        Some(suffix) => deeppoly::output_diff_upper(suffix, region, label),
    }
}

fn repair_anchor(
    base: &Dnn,
    anchor: &Anchor,
    index: usize,
    radius: f64,
    boundary: Option<usize>,
    config: &RepairConfig,
) -> Result<AnchorOutcome> {
    let start = Instant::now();
    let mut warnings = Vec::new();

    let predicted = base.classify(&anchor.center)?;
    let label = match anchor.label {
        Some(l) => {
            if l >= base.output_dim() {
                return Err(Error::ClassOutOfRange {
                    class: l,
                    num_classes: base.output_dim(),
                });
            }
            if l != predicted {
                warnings.push(format!(
                    "anchor {index}: base network predicts class {predicted}, enforcing supplied label {l}"
                ));
            }
            l
        }
        None => predicted,
    };

    let input_box = BoxRegion::from_center_radius(&anchor.center, radius)?;
    let space = match boundary {
        None => PatchSpace::Input,
        Some(b) => PatchSpace::Feature { boundary: b },
    };
    let suffix_net = match boundary {
        None => None,
        Some(b) => Some(base.split(b)?.suffix().clone()),
    };

    // Root box: the input box itself, or the sampled feature hull.
    let mut sampling_seconds = 0.0;
    let root_region = match boundary {
        None => input_box.clone(),
        Some(b) => {
            let t = Instant::now();
            let mut attack = config.attack.clone();
            attack.seed = config.attack.seed.wrapping_add(index as u64);
            let feature_box = sample_feature_box(
                base,
                b,
                &input_box,
                label,
                anchor.adversarial.as_deref(),
                &attack,
                &config.sampling,
            )?;
            sampling_seconds = t.elapsed().as_secs_f64();
            feature_box.region
        }
    };

    let root_forms = match config.base_form_overrides.get(&index) {
        Some(forms) => {
            let expected: Vec<usize> =
                (0..base.output_dim()).filter(|&l| l != label).collect();
            if forms.len() != expected.len() || expected.iter().any(|l| !forms.contains_key(l)) {
                return Err(Error::InvalidConfig(format!(
                    "root form override for anchor {index} must cover exactly the classes other than {label}"
                )));
            }
            warnings.push(format!(
                "anchor {index}: root margin forms supplied externally; children and final verification use the analyzer"
            ));
            forms.clone()
        }
        None => base_forms_for(base, suffix_net.as_ref(), &root_region, label)?,
    };

    let patch_input_dim = match &suffix_net {
        None => base.input_dim(),
        Some(s) => s.input_dim(),
    };
    let mut patch = build_patch(
        patch_input_dim,
        base.output_dim(),
        &config.patch,
        space,
        config.seed,
        index as u64,
    )?;

    let mut records = vec![PropertyRecord {
        property: RobustnessProperty {
            region: root_region,
            label,
            origin: index,
            depth: 0,
        },
        base_forms: root_forms,
    }];

    let mode = config.loss_mode();
    let mut per_iteration_loss = Vec::new();
    let mut certified = false;
    let mut iterations = 0;
    let mut refinements = 0;
    let mut depth_cap_hit = false;
    let mut training_seconds = 0.0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let t = Instant::now();
        let outcome = train_patch(&mut patch, &records, config)?;
        training_seconds += t.elapsed().as_secs_f64();
        let total: f64 = outcome.final_losses.iter().map(|v| v.total).sum();
        per_iteration_loss.push(total);
        if outcome.repaired {
            certified = true;
            break;
        }
        if iterations == config.max_iterations {
            break; // the budget ends with training, not a dangling bisection
        }
        // Replace each selected box by its midpoint halves; boxes at the
        // depth cap or with no splittable width stay as they are.
        let mut replacements: Vec<(usize, Vec<PropertyRecord>)> = Vec::new();
        for &ri in &outcome.refine {
            let record = &records[ri];
            if record.property.depth >= config.depth_cap {
                if !depth_cap_hit {
                    warnings.push(format!(
                        "anchor {index}: refinement depth cap {} reached; some boxes stay unsplit",
                        config.depth_cap
                    ));
                    depth_cap_hit = true;
                }
                continue;
            }
            match bisect_property(record, &patch, mode) {
                Ok((low, high)) => {
                    let children = [low, high]
                        .into_iter()
                        .map(|property| {
                            Ok(PropertyRecord {
                                base_forms: base_forms_for(
                                    base,
                                    suffix_net.as_ref(),
                                    &property.region,
                                    label,
                                )?,
                                property,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    replacements.push((ri, children));
                }
                Err(Error::RefinementExhausted) => {
                    if !depth_cap_hit {
                        warnings.push(format!(
                            "anchor {index}: a zero-width box cannot be split further"
                        ));
                        depth_cap_hit = true;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        refinements += replacements.len();
        // Apply in descending index order so earlier indices stay valid.
        replacements.sort_by(|a, b| b.0.cmp(&a.0));
        for (ri, children) in replacements {
            records.splice(ri..=ri, children);
        }
    }

    // Independent certification: fresh margin forms for every leaf, strict
    // negativity, no shared state with the training loop.  Feature mode
    // makes no claim: the boxes only cover sampled activations.
    let t = Instant::now();
    let mut property_status = Vec::with_capacity(records.len());
    let mut verified = matches!(config.mode, RepairMode::Provable);
    for rec in &records {
        // `verify_composite` splits the base itself when the patch lives in
        // feature space.
        let verdict = verify_composite(base, &patch, &rec.property.region, label)?;
        let confirmed = verdict == Verdict::Verified && matches!(config.mode, RepairMode::Provable);
        verified &= confirmed;
        property_status.push(
            if confirmed { "verified" } else { "unknown" }.to_string(),
        );
    }
    let verification_seconds = t.elapsed().as_secs_f64();
    if matches!(config.mode, RepairMode::Provable) && certified && !verified {
        warnings.push(format!(
            "anchor {index}: training certified the boxes but independent verification did not confirm them"
        ));
    }

    let final_losses = conjunction_losses(&records, &patch, mode)?;
    let report = AnchorReport {
        index,
        label,
        iterations,
        certified_in_training: certified,
        verified,
        per_iteration_loss,
        properties: records.len(),
        refinements,
        max_depth: records.iter().map(|r| r.property.depth).max().unwrap_or(0),
        final_losses: final_losses.iter().map(|v| v.total).collect(),
        property_status,
        warnings,
    };
    Ok(AnchorOutcome {
        patch,
        report,
        sampling_seconds,
        training_seconds,
        verification_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Repairs every anchor's box against the base network and assembles the
/// patched network plus a full report.  Anchors are independent and may be
/// processed in parallel; results are merged in anchor order, so the
/// outcome is deterministic for a fixed seed.
pub fn repair(
    base: &Dnn,
    anchors: &[Anchor],
    radius: f64,
    config: &RepairConfig,
) -> Result<(RepairedDnn, RepairReport)> {
    let start = Instant::now();
    config.validate()?;
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("repair needs at least one anchor".into()));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "repair radius must be positive and finite, got {radius}"
        )));
    }
    for (i, anchor) in anchors.iter().enumerate() {
        if anchor.center.len() != base.input_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("anchor {i} center"),
                expected: base.input_dim(),
                actual: anchor.center.len(),
            });
        }
    }
    let boundary = match config.mode {
        RepairMode::Provable => None,
        RepairMode::Feature { boundary } => Some(match boundary {
            Some(b) => b,
            None => base.default_split_boundary().ok_or_else(|| {
                Error::InvalidConfig(
                    "network has no interior affine layer to split at".into(),
                )
            })?,
        }),
    };

    let outcomes: Vec<Result<AnchorOutcome>> = anchors
        .par_iter()
        .enumerate()
        .map(|(i, anchor)| repair_anchor(base, anchor, i, radius, boundary, config))
        .collect();
    let mut patches = Vec::with_capacity(anchors.len());
    let mut reports = Vec::with_capacity(anchors.len());
    let mut timing = TimingReport {
        total_seconds: 0.0,
        sampling_seconds: 0.0,
        training_seconds: 0.0,
        verification_seconds: 0.0,
        per_anchor_seconds: Vec::with_capacity(anchors.len()),
    };
    for outcome in outcomes {
        let outcome = outcome?;
        timing.sampling_seconds += outcome.sampling_seconds;
        timing.training_seconds += outcome.training_seconds;
        timing.verification_seconds += outcome.verification_seconds;
        timing.per_anchor_seconds.push(outcome.total_seconds);
        patches.push(outcome.patch);
        reports.push(outcome.report);
    }

    let space = match boundary {
        None => PatchSpace::Input,
        Some(b) => PatchSpace::Feature { boundary: b },
    };
    let regions: Vec<RegionEntry> = anchors
        .iter()
        .zip(&reports)
        .enumerate()
        .map(|(i, (anchor, rep))| {
            Ok(RegionEntry {
                region: BoxRegion::from_center_radius(&anchor.center, radius)?,
                anchor: anchor.center.clone(),
                label: rep.label,
                patch_index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let provable = matches!(config.mode, RepairMode::Provable)
        && reports.iter().all(|r| r.verified);
    let repaired = RepairedDnn::new(base.clone(), space, patches, regions, radius)?;
    timing.total_seconds = start.elapsed().as_secs_f64();
    let report = RepairReport {
        mode: match config.mode {
            RepairMode::Provable => "provable".into(),
            RepairMode::Feature { .. } => "feature".into(),
        },
        interpretation: match config.mode {
            RepairMode::Provable => None,
            RepairMode::Feature { .. } => Some(
                "feature mode: boxes are componentwise hulls of attack-sampled split-layer \
                 activations; training minimizes the unclipped margin bound over those hulls \
                 and the run makes no provable claim"
                    .into(),
            ),
        },
        radius,
        config: ConfigEcho {
            max_iterations: config.max_iterations,
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            selection: config.selection,
            epsilon_verify: config.epsilon_verify,
            depth_cap: config.depth_cap,
            seed: config.seed,
            attack_step_size: config.attack.step_size,
            attack_steps: config.attack.steps,
            attack_restarts: config.attack.restarts,
            fgsm_samples: config.sampling.fgsm_samples,
        },
        provable,
        anchors: reports,
        timing,
    };
    Ok((repaired, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn reference_net() -> Dnn {
        Dnn::new(vec![
            Layer::affine(arr2(&[[0.8, 1.1], [1.4, 1.2]]), arr1(&[0.0, 0.0])).unwrap(),
            Layer::relu(2),
            Layer::affine(arr2(&[[-0.8, 0.4], [1.1, -1.1]]), arr1(&[0.0, 0.0])).unwrap(),
        ])
        .unwrap()
    }

    fn given_root_forms() -> BTreeMap<usize, LinearForm> {
        let mut m = BTreeMap::new();
        m.insert(0, LinearForm::new(arr1(&[0.7, 0.14]), 1.08));
        m
    }

    fn worked_config() -> RepairConfig {
        let mut overrides = BTreeMap::new();
        overrides.insert(0, given_root_forms());
        RepairConfig {
            epochs: 1,
            learning_rate: 0.6,
            patch: PatchSpec {
                hidden: vec![],
                bias: false,
                init: PatchInit::Constant(0.1),
            },
            base_form_overrides: overrides,
            ..RepairConfig::default()
        }
    }

    fn root_record() -> PropertyRecord {
        PropertyRecord {
            property: RobustnessProperty {
                region: BoxRegion::from_center_radius(&[-0.7, 1.0], 0.5).unwrap(),
                label: 1,
                origin: 0,
                depth: 0,
            },
            base_forms: given_root_forms(),
        }
    }

    fn patch_weights(patch: &PatchModule) -> Array2<f64> {
        match &patch.net().layers()[0] {
            Layer::Affine { weights, .. } => weights.clone(),
            _ => panic!("expected affine"),
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        assert!(RepairConfig::default().validate().is_ok());
        assert!(RepairConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { selection: 0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { epsilon_verify: -1.0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { depth_cap: 0, ..Default::default() }.validate().is_err());
        assert!(RepairConfig { gradient_clip: Some(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn one_training_epoch_reproduces_the_worked_step() {
        let config = worked_config();
        let mut patch = build_patch(2, 2, &config.patch, PatchSpace::Input, 0, 0).unwrap();
        let records = vec![root_record()];
        let outcome = train_patch(&mut patch, &records, &config).unwrap();
        assert!(!outcome.repaired);
        assert_eq!(outcome.epochs_run, 1);
        assert_eq!(outcome.refine, vec![0]);
        let w = patch_weights(&patch);
        assert!((w[(0, 0)] - 0.22).abs() < 1e-12);
        assert!((w[(0, 1)] + 0.8).abs() < 1e-12);
        assert!((w[(1, 0)] + 0.02).abs() < 1e-12);
        assert!((w[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((outcome.final_losses[0].total - 0.062).abs() < 1e-12);
    }

    #[test]
    fn already_satisfied_boxes_train_zero_epochs() {
        let config = RepairConfig::default();
        let mut patch = build_patch(2, 2, &config.patch, PatchSpace::Input, 0, 0).unwrap();
        let mut record = root_record();
        record.base_forms = {
            let mut m = BTreeMap::new();
            m.insert(0, LinearForm::new(arr1(&[0.0, 0.0]), -0.5));
            m
        };
        let outcome = train_patch(&mut patch, &[record], &config).unwrap();
        assert!(outcome.repaired);
        assert_eq!(outcome.epochs_run, 0);
        assert!(outcome.refine.is_empty());
        // The patch is untouched (zero init stays zero).
        assert!(patch_weights(&patch).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn mixed_labels_are_rejected() {
        let config = RepairConfig::default();
        let mut patch = build_patch(2, 2, &config.patch, PatchSpace::Input, 0, 0).unwrap();
        let mut other = root_record();
        other.property.label = 0;
        other.base_forms = {
            let mut m = BTreeMap::new();
            m.insert(1, LinearForm::new(arr1(&[0.0, 0.0]), 0.0));
            m
        };
        assert!(matches!(
            train_patch(&mut patch, &[root_record(), other], &config),
            Err(Error::MixedLabels)
        ));
    }

    #[test]
    fn selection_keeps_the_k_worst_boxes_in_order() {
        let region = BoxRegion::from_center_radius(&[0.0, 0.0], 1.0).unwrap();
        let mk = |offset: f64, origin: usize| PropertyRecord {
            property: RobustnessProperty {
                region: region.clone(),
                label: 1,
                origin,
                depth: 0,
            },
            base_forms: {
                let mut m = BTreeMap::new();
                m.insert(0, LinearForm::new(arr1(&[0.0, 0.0]), offset));
                m
            },
        };
        // Losses: 5, 3, 3, 1, -2 (the tie at 3 breaks by origin).
        let records = vec![mk(3.0, 4), mk(5.0, 0), mk(1.0, 2), mk(3.0, 1), mk(-2.0, 3)];
        let patch = PatchModule::single_affine(2, 2, false, 0.0).unwrap();
        let losses = conjunction_losses(&records, &patch, LossMode::Clipped).unwrap();
        let selected = select_refinements(&records, &losses, 3);
        assert_eq!(selected, vec![1, 3, 0]); // 5.0, then 3.0 at origin 1, then 3.0 at origin 4
        let all = select_refinements(&records, &losses, 800);
        assert_eq!(all, vec![1, 3, 0, 2]); // the negative-loss box never appears
    }

    #[test]
    fn bisection_at_initialization_splits_the_first_dimension() {
        // With the patch at its constant init the rows cancel, so the box
        // gradient is the supplied form's coefficients (0.7, 0.14); equal
        // widths make dimension 0 the split choice.
        let record = root_record();
        let patch = PatchModule::single_affine(2, 2, false, 0.1).unwrap();
        let (low, high) = bisect_property(&record, &patch, LossMode::Clipped).unwrap();
        let close = |got: &Array1<f64>, want: [f64; 2]| {
            got.iter()
                .zip(want)
                .for_each(|(&g, w)| assert!((g - w).abs() < 1e-12, "{g} vs {w}"))
        };
        close(low.region.lower(), [-1.2, 0.5]);
        close(low.region.upper(), [-0.7, 1.5]);
        close(high.region.lower(), [-0.7, 0.5]);
        close(high.region.upper(), [-0.2, 1.5]);
        assert_eq!(low.depth, 1);
        assert_eq!(high.depth, 1);
        assert_eq!(low.label, 1);
        assert_eq!(low.origin, 0);
    }

    #[test]
    fn bisection_weights_gradient_by_width() {
        // Gradient (0, 5) with widths (10, 0.1): scores (0, 0.5) → dim 1.
        let record = PropertyRecord {
            property: RobustnessProperty {
                region: BoxRegion::new(arr1(&[0.0, 0.0]), arr1(&[10.0, 0.1])).unwrap(),
                label: 1,
                origin: 0,
                depth: 3,
            },
            base_forms: {
                let mut m = BTreeMap::new();
                m.insert(0, LinearForm::new(arr1(&[0.0, 5.0]), 1.0));
                m
            },
        };
        let patch = PatchModule::single_affine(2, 2, false, 0.0).unwrap();
        let (low, high) = bisect_property(&record, &patch, LossMode::Clipped).unwrap();
        assert_eq!(low.region.upper()[1], 0.05);
        assert_eq!(high.region.lower()[1], 0.05);
        assert_eq!(low.region.upper()[0], 10.0, "dimension 0 untouched");
        assert_eq!(low.depth, 4);
    }

    #[test]
    fn zero_width_boxes_cannot_be_bisected() {
        let record = PropertyRecord {
            property: RobustnessProperty {
                region: BoxRegion::new(arr1(&[1.0, 2.0]), arr1(&[1.0, 2.0])).unwrap(),
                label: 1,
                origin: 0,
                depth: 0,
            },
            base_forms: {
                let mut m = BTreeMap::new();
                m.insert(0, LinearForm::new(arr1(&[1.0, 1.0]), 1.0));
                m
            },
        };
        let patch = PatchModule::single_affine(2, 2, false, 0.0).unwrap();
        assert!(matches!(
            bisect_property(&record, &patch, LossMode::Clipped),
            Err(Error::RefinementExhausted)
        ));
    }

    #[test]
    fn bisection_children_partition_the_parent() {
        let record = root_record();
        let patch = PatchModule::single_affine(2, 2, false, 0.1).unwrap();
        let (low, high) = bisect_property(&record, &patch, LossMode::Clipped).unwrap();
        let parent = &record.property.region;
        let vol = |r: &BoxRegion| r.volume();
        assert!((vol(&low.region) + vol(&high.region) - vol(parent)).abs() < 1e-12);
        // Shared face only: interiors are disjoint.
        assert_eq!(low.region.upper()[0], high.region.lower()[0]);
    }

    #[test]
    fn worked_example_repair_is_provable_with_the_expected_patch() {
        let base = reference_net();
        let anchors = vec![Anchor {
            center: vec![-0.7, 1.0],
            label: Some(1),
            adversarial: Some(vec![-0.2, 1.5]),
        }];
        let (repaired, report) = repair(&base, &anchors, 0.5, &worked_config()).unwrap();
        assert!(report.provable);
        assert_eq!(report.anchors.len(), 1);
        let a = &report.anchors[0];
        assert_eq!(a.label, 1);
        assert_eq!(a.iterations, 2);
        assert!(a.certified_in_training);
        assert!(a.verified);
        assert_eq!(a.properties, 2);
        assert_eq!(a.refinements, 1);
        assert_eq!(a.max_depth, 1);
        assert!((a.per_iteration_loss[0] - 0.062).abs() < 1e-12);
        assert_eq!(a.per_iteration_loss[1], 0.0);
        assert_eq!(a.property_status, vec!["verified", "verified"]);
        // The final patch is the one-step patch: iteration 2 certified its
        // boxes before taking any step.
        let w = patch_weights(&repaired.patches()[0]);
        assert!((w[(0, 0)] - 0.22).abs() < 1e-12);
        assert!((w[(0, 1)] + 0.8).abs() < 1e-12);
        assert!((w[(1, 0)] + 0.02).abs() < 1e-12);
        assert!((w[(1, 1)] - 1.0).abs() < 1e-12);
        // The repaired network classifies the stored adversarial correctly.
        assert_eq!(repaired.classify(&[-0.2, 1.5]).unwrap(), 1);
    }

    #[test]
    fn repair_leaves_the_base_network_bitwise_unchanged() {
        let base = reference_net();
        let probes: Vec<Vec<f64>> = vec![
            vec![-0.7, 1.0],
            vec![-0.2, 1.5],
            vec![0.3, -0.4],
            vec![2.0, 2.0],
        ];
        let before: Vec<Vec<f64>> = probes.iter().map(|p| base.forward(p).unwrap()).collect();
        let (repaired, _) = repair(
            &base,
            &[Anchor::at(vec![-0.7, 1.0])],
            0.5,
            &worked_config(),
        )
        .unwrap();
        for (p, b) in probes.iter().zip(&before) {
            assert_eq!(&base.forward(p).unwrap(), b);
            assert_eq!(&repaired.base().forward(p).unwrap(), b);
        }
    }

    #[test]
    fn supplied_label_disagreement_is_warned_and_wins() {
        let base = reference_net();
        // Anchor (0.5, 0.5): prediction is class 0; supply label 1.
        assert_eq!(base.classify(&[0.5, 0.5]).unwrap(), 0);
        let anchors = vec![Anchor {
            center: vec![0.5, 0.5],
            label: Some(1),
            adversarial: None,
        }];
        let config = RepairConfig {
            max_iterations: 2,
            ..RepairConfig::default()
        };
        let (_, report) = repair(&base, &anchors, 0.05, &config).unwrap();
        assert_eq!(report.anchors[0].label, 1);
        assert!(report.anchors[0]
            .warnings
            .iter()
            .any(|w| w.contains("predicts class 0") && w.contains("supplied label 1")));
    }

    #[test]
    fn verified_anchor_trains_zero_epochs_and_exits_in_one_iteration() {
        let base = reference_net();
        // B((-0.7, 1.3), 0.1) is verified on the base net.
        assert_eq!(
            deeppoly::verify(&base, &BoxRegion::from_center_radius(&[-0.7, 1.3], 0.1).unwrap(), 1)
                .unwrap(),
            Verdict::Verified
        );
        let (repaired, report) = repair(
            &base,
            &[Anchor::at(vec![-0.7, 1.3])],
            0.1,
            &RepairConfig::default(),
        )
        .unwrap();
        let a = &report.anchors[0];
        assert_eq!(a.iterations, 1);
        assert!(a.certified_in_training);
        assert!(report.provable);
        assert_eq!(a.properties, 1);
        // Zero-init patch stays zero: the repaired net equals the base.
        assert!(patch_weights(&repaired.patches()[0]).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn leaf_boxes_partition_each_anchor_region() {
        // Drive several refinement rounds with a deliberately weak learning
        // rate so bisection does the work, then check the leaves tile the
        // root box exactly.
        let base = reference_net();
        let config = RepairConfig {
            max_iterations: 4,
            epochs: 1,
            learning_rate: 1e-6,
            patch: PatchSpec {
                hidden: vec![],
                bias: false,
                init: PatchInit::Zero,
            },
            ..RepairConfig::default()
        };
        let anchors = vec![Anchor {
            center: vec![-0.7, 1.0],
            label: Some(1),
            adversarial: None,
        }];
        let (repaired, report) = repair(&base, &anchors, 0.5, &config).unwrap();
        let a = &report.anchors[0];
        assert!(a.properties >= 4, "refinement must actually happen");
        // Recover the leaves by replaying: simpler — verify total volume via
        // the report is impossible, so recompute here via a fresh run of the
        // internal pieces.
        let root = BoxRegion::from_center_radius(&[-0.7, 1.0], 0.5).unwrap();
        let mut records = vec![PropertyRecord {
            property: RobustnessProperty {
                region: root.clone(),
                label: 1,
                origin: 0,
                depth: 0,
            },
            base_forms: deeppoly::output_diff_upper(&base, &root, 1).unwrap(),
        }];
        let mut patch = build_patch(2, 2, &config.patch, PatchSpace::Input, 0, 0).unwrap();
        for iter in 1..=config.max_iterations {
            let outcome = train_patch(&mut patch, &records, &config).unwrap();
            if outcome.repaired || iter == config.max_iterations {
                break; // the engine never bisects after the last training call
            }
            let mut reps: Vec<(usize, Vec<PropertyRecord>)> = Vec::new();
            for &ri in &outcome.refine {
                let (low, high) =
                    bisect_property(&records[ri], &patch, LossMode::Clipped).unwrap();
                let children = [low, high]
                    .into_iter()
                    .map(|property| PropertyRecord {
                        base_forms: deeppoly::output_diff_upper(&base, &property.region, 1)
                            .unwrap(),
                        property,
                    })
                    .collect();
                reps.push((ri, children));
            }
            reps.sort_by(|a, b| b.0.cmp(&a.0));
            for (ri, children) in reps {
                records.splice(ri..=ri, children);
            }
        }
        assert_eq!(records.len(), a.properties, "replay matches the engine");
        let total: f64 = records.iter().map(|r| r.property.region.volume()).sum();
        assert!((total - root.volume()).abs() < 1e-9);
        // Pairwise disjoint interiors: midpoints of distinct leaves never
        // fall inside another leaf.
        for (i, ri) in records.iter().enumerate() {
            let c = ri.property.region.center();
            for (j, rj) in records.iter().enumerate() {
                if i != j {
                    assert!(!rj.property.region.contains(&c));
                }
            }
        }
        drop(repaired);
    }

    #[test]
    fn divergent_learning_rate_is_reported_as_such() {
        let base = reference_net();
        let config = RepairConfig {
            learning_rate: 1e308,
            ..worked_config()
        };
        match repair(&base, &[Anchor::at(vec![-0.7, 1.0])], 0.5, &config) {
            Err(Error::DivergentLoss { patch }) => assert_eq!(patch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_clip_bounds_the_step() {
        let config = RepairConfig {
            gradient_clip: Some(0.1),
            ..worked_config()
        };
        let mut patch = build_patch(2, 2, &config.patch, PatchSpace::Input, 0, 0).unwrap();
        train_patch(&mut patch, &[root_record()], &config).unwrap();
        let w = patch_weights(&patch);
        // Unclipped the largest move is 0.6·1.5 = 0.9; clipped to max-abs
        // 0.1 the largest move is 0.6·0.1 = 0.06.
        for &v in w.iter() {
            assert!((v - 0.1).abs() <= 0.06 + 1e-12, "weight {v} moved too far");
        }
    }

    #[test]
    fn feature_box_is_the_hull_of_sampled_activations() {
        let base = reference_net();
        let region = BoxRegion::from_center_radius(&[-0.7, 1.0], 0.5).unwrap();
        let attack = AttackConfig {
            step_size: 0.05,
            steps: 10,
            restarts: 3,
            seed: 5,
            ..AttackConfig::default()
        };
        let budget = SamplingBudget { fgsm_samples: 10 };
        let fb = sample_feature_box(
            &base,
            2,
            &region,
            1,
            Some(&[-0.2, 1.5]),
            &attack,
            &budget,
        )
        .unwrap();
        // center + adversarial + 3 finals + 10 fgsm
        assert_eq!(fb.sample_count, 15);
        let split = base.split(2).unwrap();
        // Containment of the two known samples.
        for point in [[-0.7, 1.0], [-0.2, 1.5]] {
            let f = split.prefix().forward(&point).unwrap();
            assert!(fb.region.contains(&f));
        }
        // The hull is tight: every face is touched by some sample, so it is
        // contained in the prefix image bounds of the input box.
        let bounds = deeppoly::analyze(split.prefix(), &region).unwrap();
        let last = bounds.layers.last().unwrap();
        for d in 0..fb.region.dim() {
            assert!(fb.region.lower()[d] >= last[d].conc_lower - 1e-9);
            assert!(fb.region.upper()[d] <= last[d].conc_upper + 1e-9);
        }
    }

    #[test]
    fn single_sample_feature_box_is_degenerate_but_valid() {
        let base = reference_net();
        // Zero-radius region: center, adversarial, finals, and FGSM samples
        // all collapse to the same point.
        let region = BoxRegion::from_center_radius(&[-0.7, 1.0], 0.0).unwrap();
        let attack = AttackConfig {
            step_size: 0.05,
            steps: 2,
            restarts: 2,
            seed: 5,
            ..AttackConfig::default()
        };
        let fb = sample_feature_box(
            &base,
            2,
            &region,
            1,
            None,
            &attack,
            &SamplingBudget { fgsm_samples: 2 },
        )
        .unwrap();
        assert_eq!(fb.region.lower(), fb.region.upper());
    }

    #[test]
    fn feature_mode_runs_all_iterations_without_claims() {
        let base = reference_net();
        let config = RepairConfig {
            mode: RepairMode::Feature { boundary: None },
            max_iterations: 3,
            epochs: 2,
            learning_rate: 0.05,
            attack: AttackConfig {
                step_size: 0.05,
                steps: 10,
                restarts: 2,
                seed: 9,
                ..AttackConfig::default()
            },
            sampling: SamplingBudget { fgsm_samples: 5 },
            ..RepairConfig::default()
        };
        let anchors = vec![Anchor {
            center: vec![-0.7, 1.0],
            label: Some(1),
            adversarial: Some(vec![-0.2, 1.5]),
        }];
        let (repaired, report) = repair(&base, &anchors, 0.5, &config).unwrap();
        assert!(!report.provable);
        assert_eq!(report.mode, "feature");
        assert!(report.interpretation.as_deref().unwrap().contains("no provable claim"));
        let a = &report.anchors[0];
        assert_eq!(a.iterations, 3, "no early exit in feature mode");
        assert!(!a.verified);
        assert!(a.property_status.iter().all(|s| s == "unknown"));
        // The default split point of the 2-2-2 net is before the last
        // affine layer (fallback), so patches read the 2-wide hidden state.
        assert!(matches!(repaired.space(), PatchSpace::Feature { boundary: 2 }));
        assert_eq!(repaired.patches()[0].input_dim(), 2);
        // Per-iteration losses were recorded every iteration.
        assert_eq!(a.per_iteration_loss.len(), 3);
    }

    #[test]
    fn repair_is_deterministic_across_runs() {
        let base = reference_net();
        let anchors = vec![
            Anchor {
                center: vec![-0.7, 1.0],
                label: Some(1),
                adversarial: Some(vec![-0.2, 1.5]),
            },
            Anchor::at(vec![0.4, -0.3]),
        ];
        let config = RepairConfig {
            max_iterations: 3,
            epochs: 2,
            learning_rate: 0.3,
            patch: PatchSpec {
                hidden: vec![4],
                bias: true,
                init: PatchInit::Uniform { scale: 0.05 },
            },
            ..RepairConfig::default()
        };
        let (net1, rep1) = repair(&base, &anchors, 0.4, &config).unwrap();
        let (net2, rep2) = repair(&base, &anchors, 0.4, &config).unwrap();
        assert_eq!(rep1.timing_zeroed(), rep2.timing_zeroed());
        assert_eq!(
            serde_json::to_string(&rep1.timing_zeroed()).unwrap(),
            serde_json::to_string(&rep2.timing_zeroed()).unwrap()
        );
        for (p1, p2) in net1.patches().iter().zip(net2.patches()) {
            for (l1, l2) in p1.net().layers().iter().zip(p2.net().layers()) {
                match (l1, l2) {
                    (
                        Layer::Affine { weights: w1, bias: b1 },
                        Layer::Affine { weights: w2, bias: b2 },
                    ) => {
                        assert_eq!(w1, w2);
                        assert_eq!(b1, b2);
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn duplicate_anchors_get_distinct_patches() {
        let base = reference_net();
        let anchors = vec![
            Anchor::at(vec![-0.7, 1.0]),
            Anchor::at(vec![-0.7, 1.0]),
        ];
        let config = RepairConfig {
            max_iterations: 2,
            ..RepairConfig::default()
        };
        let (repaired, report) = repair(&base, &anchors, 0.3, &config).unwrap();
        assert_eq!(repaired.patches().len(), 2);
        assert_eq!(report.anchors.len(), 2);
        assert_eq!(repaired.regions()[0].patch_index, 0);
        assert_eq!(repaired.regions()[1].patch_index, 1);
    }
}
