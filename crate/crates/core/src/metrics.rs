//! Outcome metrics for a repair run: how many known violations were fixed
//! (repair success), whether fixes carry to other adversarial points in the
//! same boxes (generalization), what happened to clean accuracy (drawdown
//! and fidelity drawdown), and how the repaired network holds up under
//! fresh attack (defense rates).
//!
//! Every metric is pure counting over per-sample verdicts; the stored
//! counts reproduce the percentages exactly.  Defense metrics use
//! multi-restart projected gradient descent as the attack oracle — a
//! substitution for AutoAttack that is stamped into every report so the
//! numbers are never silently compared across oracles.

use crate::attacks::{self, AttackConfig};
use crate::dataset::LabeledDataset;
use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::patched::RepairedDnn;
use crate::repair::Anchor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Stamped into every report: the attack oracle behind the defense rates.
pub const ATTACK_SUBSTITUTION_NOTE: &str =
    "defense rates use multi-restart projected gradient descent in place of AutoAttack";

/// A counted rate: `hits` of `total` samples satisfied the predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RateCount {
    pub hits: usize,
    pub total: usize,
}

impl RateCount {
    pub fn percentage(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.hits as f64 / self.total as f64)
    }
}

/// Per-sample verdict counts behind each percentage in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MetricCounts {
    /// Adversarial anchors the repaired network now classifies as the base
    /// network classifies the clean anchor.
    pub repair_success: RateCount,
    /// Generalization-set points classified as their ground truth.
    pub repair_generalization: RateCount,
    /// Test points the base network classifies correctly.
    pub test_correct_base: RateCount,
    /// Test points the repaired network classifies correctly.
    pub test_correct_repaired: RateCount,
    /// Test points where the two networks disagree.
    pub fidelity_flips: RateCount,
    /// Anchor boxes where no attack within budget fools the repaired
    /// network out of the base's anchor class.
    pub defended_anchors: RateCount,
    /// Test-point boxes defended the same way.
    pub defended_test: RateCount,
}

/// Echo of the attack budget the defense rates were computed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStamp {
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackStamp {
    pub fn of(config: &AttackConfig) -> AttackStamp {
        AttackStamp {
            step_size: config.step_size,
            steps: config.steps,
            restarts: config.restarts,
            seed: config.seed,
        }
    }
}

/// The full measurement of one repaired network.  Percentages are `None`
/// when the underlying set was empty (no labeled test set, no
/// generalization samples found) — never silently 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub radius: f64,
    /// Number of anchors measured (the `n` column).
    pub anchors: usize,
    pub rsr: Option<f64>,
    pub rgr: Option<f64>,
    /// Signed: negative means the repaired network is more accurate than
    /// the base on the test set.
    pub dd: Option<f64>,
    pub fdd: Option<f64>,
    pub dsr: Option<f64>,
    pub dgsr: Option<f64>,
    pub counts: MetricCounts,
    /// Generalization samples requested minus found.
    pub generalization_shortfall: usize,
    pub attack_note: String,
    pub attack: AttackStamp,
    pub time_s: f64,
}

impl MetricsReport {
    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn timing_zeroed(&self) -> MetricsReport {
        MetricsReport {
            time_s: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed CSV column order; drawdown is the labeled variant.
    pub fn csv_header() -> &'static str {
        "model,r,n,rsr,rgr,dd,dsr,dgsr,time_s"
    }

    pub fn csv_row(&self) -> String {
        fn rate(v: Option<f64>) -> String {
            match v {
                Some(p) => format!("{p:.1}"),
                None => "na".into(),
            }
        }
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.model,
            self.radius,
            self.anchors,
            rate(self.rsr),
            rate(self.rgr),
            rate(self.dd),
            rate(self.dsr),
            rate(self.dgsr),
            self.time_s
        )
    }
}

/// Repair success: of the known adversarial points, how many the repaired
/// network now classifies as the base network classifies the matching
/// clean anchor.
pub fn compute_rsr<F, N>(
    repaired: &F,
    base: &N,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<RateCount>
where
    F: Network + Sync + ?Sized,
    N: Network + Sync + ?Sized,
{
    if pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "repair success rate needs at least one (anchor, adversarial) pair".into(),
        ));
    }
    let verdicts: Vec<bool> = pairs
        .par_iter()
        .map(|(clean, adv)| Ok(repaired.classify(adv)? == base.classify(clean)?))
        .collect::<Result<_>>()?;
    Ok(RateCount {
        hits: verdicts.iter().filter(|&&v| v).count(),
        total: verdicts.len(),
    })
}

/// Generalization: fraction of the sampled set the repaired network
/// classifies as its ground truth.  An empty set is a `total` of zero —
/// callers report it as not-applicable.
pub fn compute_rgr<F>(repaired: &F, generalization: &LabeledDataset) -> Result<RateCount>
where
    F: Network + Sync + ?Sized,
{
    let verdicts: Vec<bool> = generalization
        .inputs()
        .par_iter()
        .zip(generalization.labels().par_iter())
        .map(|(x, &l)| Ok(repaired.classify(x)? == l))
        .collect::<Result<_>>()?;
    Ok(RateCount {
        hits: verdicts.iter().filter(|&&v| v).count(),
        total: verdicts.len(),
    })
}

/// Accuracy drawdown counts on a labeled test set: correct-by-base and
/// correct-by-repaired.  The signed drawdown percentage is
/// `100 · (correct_base − correct_repaired) / total`.
pub fn compute_drawdown<F, N>(
    repaired: &F,
    base: &N,
    test: &LabeledDataset,
) -> Result<(RateCount, RateCount)>
where
    F: Network + Sync + ?Sized,
    N: Network + Sync + ?Sized,
{
    let verdicts: Vec<(bool, bool)> = test
        .inputs()
        .par_iter()
        .zip(test.labels().par_iter())
        .map(|(x, &l)| Ok((base.classify(x)? == l, repaired.classify(x)? == l)))
        .collect::<Result<_>>()?;
    let total = verdicts.len();
    Ok((
        RateCount {
            hits: verdicts.iter().filter(|&&(b, _)| b).count(),
            total,
        },
        RateCount {
            hits: verdicts.iter().filter(|&&(_, f)| f).count(),
            total,
        },
    ))
}

pub fn drawdown_percentage(correct_base: &RateCount, correct_repaired: &RateCount) -> Option<f64> {
    (correct_base.total > 0).then(|| {
        100.0 * (correct_base.hits as f64 - correct_repaired.hits as f64)
            / correct_base.total as f64
    })
}

/// Fidelity drawdown counts: test points where the repaired network
/// disagrees with the base.  Needs no labels.
pub fn compute_fidelity_drawdown<F, N>(
    repaired: &F,
    base: &N,
    inputs: &[Vec<f64>],
) -> Result<RateCount>
where
    F: Network + Sync + ?Sized,
    N: Network + Sync + ?Sized,
{
    let verdicts: Vec<bool> = inputs
        .par_iter()
        .map(|x| Ok(repaired.classify(x)? != base.classify(x)?))
        .collect::<Result<_>>()?;
    Ok(RateCount {
        hits: verdicts.iter().filter(|&&v| v).count(),
        total: verdicts.len(),
    })
}

/// Defense rate over a set of (center, required class) boxes: a box counts
/// as defended iff no attack within the budget makes the network leave the
/// required class.  Each box gets its own attack seed so findings are
/// decorrelated but still deterministic; restart prefixes keep the rate
/// monotone nonincreasing in the restart budget.
pub fn compute_defense<F>(
    net: &F,
    points: &[(Vec<f64>, usize)],
    radius: f64,
    attack: &AttackConfig,
) -> Result<RateCount>
where
    F: Network + Sync + ?Sized,
{
    let verdicts: Vec<bool> = points
        .par_iter()
        .enumerate()
        .map(|(i, (center, class))| {
            let region = BoxRegion::from_center_radius(center, radius)?;
            let config = AttackConfig {
                seed: attack.seed.wrapping_add(i as u64),
                ..attack.clone()
            };
            let result = attacks::pgd(net, &region, center, *class, &config)?;
            Ok(!result.success())
        })
        .collect::<Result<_>>()?;
    Ok(RateCount {
        hits: verdicts.iter().filter(|&&v| v).count(),
        total: verdicts.len(),
    })
}

/// A sampled generalization set: adversarial points of the base network in
/// each anchor box, distinct from each other and from the anchor's known
/// adversarial, labeled with the anchor's ground truth.
#[derive(Debug, Clone)]
pub struct GeneralizationSet {
    pub data: LabeledDataset,
    pub requested: usize,
    /// Distinct adversarials found per anchor, in anchor order.
    pub found_per_anchor: Vec<usize>,
    /// Requested minus found; recorded, never padded away.
    pub shortfall: usize,
}

/// Attacks each anchor box of the base network with per-attempt seeds until
/// `per_region` distinct adversarial points are found or the attempt budget
/// (four per requested point) runs out.
pub fn build_generalization_set<N>(
    base: &N,
    anchors: &[Anchor],
    labels: &[usize],
    radius: f64,
    attack: &AttackConfig,
    per_region: usize,
) -> Result<GeneralizationSet>
where
    N: Network + Sync + ?Sized,
{
    if anchors.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "generalization anchors vs labels".into(),
            expected: anchors.len(),
            actual: labels.len(),
        });
    }
    let per_anchor: Vec<Vec<Vec<f64>>> = anchors
        .par_iter()
        .enumerate()
        .map(|(i, anchor)| {
            let region = BoxRegion::from_center_radius(&anchor.center, radius)?;
            let mut found: Vec<Vec<f64>> = Vec::new();
            for attempt in 0..per_region.saturating_mul(4) {
                if found.len() == per_region {
                    break;
                }
                let config = AttackConfig {
                    seed: attack
                        .seed
                        .wrapping_add((i as u64).wrapping_mul(100_003))
                        .wrapping_add(attempt as u64),
                    ..attack.clone()
                };
                let result = attacks::pgd(base, &region, &anchor.center, labels[i], &config)?;
                if let Some(point) = result.adversarial {
                    let is_known = anchor.adversarial.as_deref() == Some(point.as_slice());
                    if !is_known && !found.contains(&point) {
                        found.push(point);
                    }
                }
            }
            Ok(found)
        })
        .collect::<Result<_>>()?;
    let found_per_anchor: Vec<usize> = per_anchor.iter().map(Vec::len).collect();
    let mut inputs = Vec::new();
    let mut point_labels = Vec::new();
    for (points, &label) in per_anchor.into_iter().zip(labels) {
        for p in points {
            inputs.push(p);
            point_labels.push(label);
        }
    }
    let requested = per_region * anchors.len();
    let found: usize = found_per_anchor.iter().sum();
    Ok(GeneralizationSet {
        data: LabeledDataset::new("generalization", inputs, point_labels)?,
        requested,
        found_per_anchor,
        shortfall: requested - found,
    })
}

/// Harness parameters for one full measurement.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Name stamped into the `model` column.
    pub model: String,
    pub radius: f64,
    pub attack: AttackConfig,
    /// Generalization samples requested per anchor box.
    pub per_region_samples: usize,
    /// Cap on how many test points get the per-point defense attack
    /// (`None` attacks all of them).
    pub dgsr_limit: Option<usize>,
}

impl EvalConfig {
    pub fn new(model: impl Into<String>, radius: f64) -> EvalConfig {
        EvalConfig {
            model: model.into(),
            radius,
            attack: AttackConfig::default(),
            per_region_samples: 10,
            dgsr_limit: None,
        }
    }
}

/// Runs the whole harness: repair success over the anchors' stored
/// adversarials, generalization over freshly attacked points, drawdown and
/// fidelity drawdown over the test set, and defense rates under attack of
/// the repaired network.
pub fn evaluate_repair(
    repaired: &RepairedDnn,
    anchors: &[Anchor],
    test: Option<&LabeledDataset>,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let start = Instant::now();
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one anchor".into()));
    }
    if !(config.radius.is_finite() && config.radius > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "evaluation radius must be positive and finite, got {}",
            config.radius
        )));
    }
    config.attack.validate()?;
    let base = repaired.base();
    if let Some(test) = test {
        test.check_labels(base.output_dim())?;
    }

    // Ground truth per anchor: the supplied label, else the base's call.
    let mut truth = Vec::with_capacity(anchors.len());
    let mut base_class = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let predicted = base.classify(&anchor.center)?;
        base_class.push(predicted);
        truth.push(anchor.label.unwrap_or(predicted));
    }

    let mut counts = MetricCounts::default();

    let pairs: Vec<(Vec<f64>, Vec<f64>)> = anchors
        .iter()
        .filter_map(|a| {
            a.adversarial
                .as_ref()
                .map(|adv| (a.center.clone(), adv.clone()))
        })
        .collect();
    if !pairs.is_empty() {
        counts.repair_success = compute_rsr(repaired, base, &pairs)?;
    }

    let generalization = build_generalization_set(
        base,
        anchors,
        &truth,
        config.radius,
        &config.attack,
        config.per_region_samples,
    )?;
    counts.repair_generalization = compute_rgr(repaired, &generalization.data)?;

    if let Some(test) = test {
        let (correct_base, correct_repaired) = compute_drawdown(repaired, base, test)?;
        counts.test_correct_base = correct_base;
        counts.test_correct_repaired = correct_repaired;
        counts.fidelity_flips = compute_fidelity_drawdown(repaired, base, test.inputs())?;
    }

    let anchor_points: Vec<(Vec<f64>, usize)> = anchors
        .iter()
        .zip(&base_class)
        .map(|(a, &c)| (a.center.clone(), c))
        .collect();
    counts.defended_anchors =
        compute_defense(repaired, &anchor_points, config.radius, &config.attack)?;

    if let Some(test) = test {
        let limit = config.dgsr_limit.unwrap_or(test.len()).min(test.len());
        let test_points: Vec<(Vec<f64>, usize)> = test.inputs()[..limit]
            .par_iter()
            .map(|x| Ok((x.clone(), base.classify(x)?)))
            .collect::<Result<_>>()?;
        counts.defended_test =
            compute_defense(repaired, &test_points, config.radius, &config.attack)?;
    }

    Ok(MetricsReport {
        model: config.model.clone(),
        radius: config.radius,
        anchors: anchors.len(),
        rsr: counts.repair_success.percentage(),
        rgr: counts.repair_generalization.percentage(),
        dd: drawdown_percentage(&counts.test_correct_base, &counts.test_correct_repaired),
        fdd: counts.fidelity_flips.percentage(),
        dsr: counts.defended_anchors.percentage(),
        dgsr: counts.defended_test.percentage(),
        counts,
        generalization_shortfall: generalization.shortfall,
        attack_note: ATTACK_SUBSTITUTION_NOTE.into(),
        attack: AttackStamp::of(&config.attack),
        time_s: start.elapsed().as_secs_f64(),
    })
}
