//! The built-in worked example: a 2-2-2 network, one violated box, and a
//! single-affine patch trained with one subgradient step.  Every number in
//! the trace is computed by the real operations — the module only fixes
//! the scenario (weights, box, supplied margin form, hyperparameters) and
//! packages the intermediate results so the CLI can print them and tests
//! can pin them.

use crate::deeppoly::{BoxRegion, LinearForm};
use crate::error::Result;
use crate::loss::{
    composite_bounds_with_base, loss_gradient, violation_loss, LossMode, LossValue, PatchGradient,
    PatchModule,
};
use crate::net::{Dnn, Layer};
use crate::patched::RepairedDnn;
use crate::repair::{
    bisect_property, repair, train_patch, Anchor, PatchInit, PatchSpec, PropertyRecord,
    RepairConfig, RepairReport, RobustnessProperty,
};
use ndarray::{arr1, arr2, Array2};
use std::collections::BTreeMap;

/// The example's base classifier: two inputs, one hidden ReLU pair, two
/// scores.
pub fn reference_net() -> Dnn {
    Dnn::new(vec![
        Layer::affine(arr2(&[[0.8, 1.1], [1.4, 1.2]]), arr1(&[0.0, 0.0])).unwrap(),
        Layer::relu(2),
        Layer::affine(arr2(&[[-0.8, 0.4], [1.1, -1.1]]), arr1(&[0.0, 0.0])).unwrap(),
    ])
    .unwrap()
}

/// The repair request: keep class 1 on the box around `(-0.7, 1.0)` with
/// radius `0.5`; the witness point `(-0.2, 1.5)` attains the violated
/// margin bound.
pub fn reference_anchor() -> Anchor {
    Anchor {
        center: vec![-0.7, 1.0],
        label: Some(1),
        adversarial: Some(vec![-0.2, 1.5]),
    }
}

pub const REFERENCE_RADIUS: f64 = 0.5;

/// The margin form the example prescribes for the root box: an upper bound
/// on `score_0 - score_1` with coefficients `(0.7, 0.14)` and offset
/// `1.08`.
pub fn reference_base_form() -> LinearForm {
    LinearForm::new(arr1(&[0.7, 0.14]), 1.08)
}

/// Engine parameters of the example: one epoch per iteration at rate 0.6,
/// a bias-free single-affine patch starting at constant 0.1, and the
/// prescribed root form for anchor 0.
pub fn reference_config() -> RepairConfig {
    let mut forms = BTreeMap::new();
    forms.insert(0, reference_base_form());
    let mut overrides = BTreeMap::new();
    overrides.insert(0, forms);
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

fn root_record() -> Result<PropertyRecord> {
    Ok(PropertyRecord {
        property: RobustnessProperty {
            region: BoxRegion::from_center_radius(&[-0.7, 1.0], REFERENCE_RADIUS)?,
            label: 1,
            origin: 0,
            depth: 0,
        },
        base_forms: {
            let mut m = BTreeMap::new();
            m.insert(0, reference_base_form());
            m
        },
    })
}

/// Every stage of the worked trace, computed live.
#[derive(Debug)]
pub struct WorkedExample {
    pub base: Dnn,
    pub region: BoxRegion,
    pub label: usize,
    pub base_form: LinearForm,
    /// Loss of the freshly initialized patch, with its maximizing corner.
    pub loss_at_init: LossValue,
    /// Patch-weight gradient at initialization.
    pub gradient_at_init: PatchGradient,
    /// Patch weights after the single subgradient step.
    pub patch_after_step: Array2<f64>,
    /// Loss of the stepped patch on the root box.
    pub loss_after_step: LossValue,
    /// Input dimension the bisection rule picks at the initial patch state.
    pub init_split_dimension: usize,
    /// The two sub-boxes of that split.
    pub init_children: (BoxRegion, BoxRegion),
    /// The full engine run on the same scenario.
    pub report: RepairReport,
    pub repaired: RepairedDnn,
}

/// Runs the whole example: loss and gradient at initialization, one
/// training step, the bisection decision, and the end-to-end engine.
pub fn worked_example() -> Result<WorkedExample> {
    let base = reference_net();
    let config = reference_config();
    let record = root_record()?;
    let region = record.property.region.clone();

    let mut patch = PatchModule::single_affine(2, 2, false, 0.1)?;
    let bound = composite_bounds_with_base(&record.base_forms, &patch, &region, 1)?;
    let loss_at_init = violation_loss(&bound, &region, LossMode::Clipped);
    let gradient_at_init = loss_gradient(&bound, &region, &patch, LossMode::Clipped)?;

    let init_patch = patch.clone();
    let outcome = train_patch(&mut patch, std::slice::from_ref(&record), &config)?;
    let patch_after_step = match &patch.net().layers()[0] {
        Layer::Affine { weights, .. } => weights.clone(),
        _ => unreachable!("the example patch is single affine"),
    };
    let loss_after_step = outcome.final_losses.into_iter().next().expect("one record");

    let (low, high) = bisect_property(&record, &init_patch, LossMode::Clipped)?;
    let init_split_dimension = (0..region.dim())
        .find(|&d| low.region.upper()[d] != region.upper()[d])
        .expect("split changes one dimension");

    let (repaired, report) = repair(
        &base,
        std::slice::from_ref(&reference_anchor()),
        REFERENCE_RADIUS,
        &config,
    )?;

    Ok(WorkedExample {
        base,
        region,
        label: 1,
        base_form: reference_base_form(),
        loss_at_init,
        gradient_at_init,
        patch_after_step,
        loss_after_step,
        init_split_dimension,
        init_children: (low.region, high.region),
        report,
        repaired,
    })
}

fn fmt_box(region: &BoxRegion) -> String {
    let pieces: Vec<String> = (0..region.dim())
        .map(|d| format!("[{:.4}, {:.4}]", region.lower()[d], region.upper()[d]))
        .collect();
    pieces.join(" x ")
}

/// Human-readable rendering of the trace, one stage per block.
pub fn describe(example: &WorkedExample) -> String {
    let mut out = String::new();
    out.push_str("worked example: single-affine patch on a 2-2-2 classifier\n");
    out.push_str(&format!(
        "  box {} , enforcing class {}\n",
        fmt_box(&example.region),
        example.label
    ));
    out.push_str(&format!(
        "  supplied margin form: coefficients ({:.2}, {:.2}), offset {:.2}\n",
        example.base_form.coeffs()[0],
        example.base_form.coeffs()[1],
        example.base_form.offset()
    ));
    let corner = &example.loss_at_init.corners[0].1;
    out.push_str(&format!(
        "\nstep 1: loss at initialization = {:.6} (maximizing corner ({:.1}, {:.1}))\n",
        example.loss_at_init.total, corner[0], corner[1]
    ));
    let w = &example.patch_after_step;
    out.push_str(&format!(
        "step 2: after one step at rate 0.6 the patch is [[{:.2}, {:.2}], [{:.2}, {:.2}]]\n",
        w[(0, 0)],
        w[(0, 1)],
        w[(1, 0)],
        w[(1, 1)]
    ));
    out.push_str(&format!(
        "        remaining loss = {:.6}\n",
        example.loss_after_step.total
    ));
    out.push_str(&format!(
        "step 3: at the initial patch state the bisection rule splits dimension {} into\n        {} and {}\n",
        example.init_split_dimension,
        fmt_box(&example.init_children.0),
        fmt_box(&example.init_children.1)
    ));
    let anchor = &example.report.anchors[0];
    out.push_str(&format!(
        "\nengine run: {} iterations, per-iteration loss {:?}\n",
        anchor.iterations, anchor.per_iteration_loss
    ));
    out.push_str(&format!(
        "  leaf boxes: {}, refinements: {}\n",
        anchor.properties, anchor.refinements
    ));
    out.push_str(&format!(
        "  provable: {} (every leaf independently verified)\n",
        example.report.provable
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_trace_reproduces_the_pinned_numbers() {
        let ex = worked_example().unwrap();
        assert!((ex.loss_at_init.total - 1.15).abs() < 1e-12);
        let corner = &ex.loss_at_init.corners[0].1;
        assert!((corner[0] + 0.2).abs() < 1e-12);
        assert!((corner[1] - 1.5).abs() < 1e-12);
        let w = &ex.patch_after_step;
        assert!((w[(0, 0)] - 0.22).abs() < 1e-12);
        assert!((w[(0, 1)] + 0.8).abs() < 1e-12);
        assert!((w[(1, 0)] + 0.02).abs() < 1e-12);
        assert!((w[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((ex.loss_after_step.total - 0.062).abs() < 1e-12);
        assert_eq!(ex.init_split_dimension, 0);
        assert!(ex.report.provable);
        assert_eq!(ex.report.anchors[0].iterations, 2);
    }

    #[test]
    fn the_gradient_at_init_is_the_corner_pattern() {
        // One active class: the patch row for the wrong class moves by the
        // maximizing corner and the enforced class's row by its negation.
        let ex = worked_example().unwrap();
        let g = &ex.gradient_at_init.weights[0];
        assert!((g[(0, 0)] + 0.2).abs() < 1e-12);
        assert!((g[(0, 1)] - 1.5).abs() < 1e-12);
        assert!((g[(1, 0)] - 0.2).abs() < 1e-12);
        assert!((g[(1, 1)] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn describe_prints_every_stage() {
        let ex = worked_example().unwrap();
        let text = describe(&ex);
        assert!(text.contains("loss at initialization = 1.150000"));
        assert!(text.contains("[[0.22, -0.80], [-0.02, 1.00]]"));
        assert!(text.contains("splits dimension 0"));
        assert!(text.contains("provable: true"));
    }

    #[test]
    fn the_repaired_network_fixes_the_witness() {
        use crate::net::Network;
        let ex = worked_example().unwrap();
        assert_eq!(ex.base.classify(&[-0.2, 1.5]).unwrap(), 1);
        assert_eq!(ex.repaired.classify(&[-0.2, 1.5]).unwrap(), 1);
        // The repaired scores strengthen the margin decisively.
        let scores = ex.repaired.forward(&[-0.2, 1.5]).unwrap();
        assert!(scores[1] - scores[0] > 1.0);
    }
}
