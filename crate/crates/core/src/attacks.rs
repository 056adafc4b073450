//! Gradient-based adversarial search inside a box.
//!
//! Both attacks ascend the classification margin `y_target - y_label`, where
//! the target is the strongest competing class at the current point
//! (recomputed every step, lowest index on ties).  Success means the
//! attacked network's decision differs from the given label — which, with
//! lowest-index argmax, includes exact ties won by a lower-indexed class.

use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::net::Network;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What margin the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackTarget {
    /// `max_{l != label} y_l - y_label`, retargeted every step.
    #[default]
    Untargeted,
    /// `y_class - y_label` for one fixed competing class.
    Class(usize),
}

/// Projected-gradient attack parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Absolute per-step perturbation in each coordinate.
    pub step_size: f64,
    /// Gradient steps per restart.
    pub steps: usize,
    /// Independent restarts; the first starts at the box center point given
    /// to the attack, the rest at uniform samples of the box.
    pub restarts: usize,
    pub seed: u64,
    pub target: AttackTarget,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            step_size: 2.0 / 255.0,
            steps: 50,
            restarts: 10,
            seed: 0,
            target: AttackTarget::Untargeted,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack step size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack needs at least one step".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("attack needs at least one restart".into()));
        }
        Ok(())
    }
}

/// Outcome of a projected-gradient run.  All restarts always run to
/// completion so that `finals` fully describes where the search settled;
/// the reported adversarial point is the first success in (restart, step)
/// order.
#[derive(Debug, Clone)]
pub struct PgdResult {
    /// First point found whose decision differs from the label.
    pub adversarial: Option<Vec<f64>>,
    /// Restart index of the first success.
    pub success_restart: Option<usize>,
    /// Step index of the first success within its restart; step 0 is the
    /// restart's start point before any gradient step.
    pub success_step: Option<usize>,
    /// Final iterate of every restart, in restart order.
    pub finals: Vec<Vec<f64>>,
    /// Number of forward evaluations spent.
    pub evaluations: usize,
}

impl PgdResult {
    pub fn success(&self) -> bool {
        self.adversarial.is_some()
    }
}

/// Margin objective and its input gradient at `x`: the gap from the label's
/// score to the attacked class (the strongest competitor when untargeted,
/// lowest index on ties).
fn margin_and_gradient<N: Network + ?Sized>(
    net: &N,
    x: &[f64],
    label: usize,
    goal: AttackTarget,
) -> Result<(f64, Vec<f64>)> {
    let y = net.forward(x)?;
    if label >= y.len() {
        return Err(Error::ClassOutOfRange {
            class: label,
            num_classes: y.len(),
        });
    }
    let target = match goal {
        AttackTarget::Class(c) => {
            if c >= y.len() || c == label {
                return Err(Error::InvalidConfig(format!(
                    "attack target class {c} invalid for label {label} with {} classes",
                    y.len()
                )));
            }
            c
        }
        AttackTarget::Untargeted => {
            let mut best = None;
            for (l, &v) in y.iter().enumerate() {
                if l == label {
                    continue;
                }
                match best {
                    None => best = Some(l),
                    Some(t) => {
                        if v > y[t] {
                            best = Some(l);
                        }
                    }
                }
            }
            best.ok_or_else(|| {
                Error::InvalidNetwork("attack needs at least two output classes".into())
            })?
        }
    };
    let mut cotangent = vec![0.0; y.len()];
    cotangent[target] = 1.0;
    cotangent[label] -= 1.0;
    let grad = net.input_gradient(x, &cotangent)?;
    Ok((y[target] - y[label], grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-shot fast gradient sign step from `x`: moves `radius` in the sign of
/// the margin gradient along each coordinate and clamps to the region.
pub fn fgsm<N: Network + ?Sized>(
    net: &N,
    region: &BoxRegion,
    x: &[f64],
    label: usize,
    radius: f64,
) -> Result<Vec<f64>> {
    if x.len() != region.dim() {
        return Err(Error::DimensionMismatch {
            context: "fgsm start point".into(),
            expected: region.dim(),
            actual: x.len(),
        });
    }
    let (_, grad) = margin_and_gradient(net, x, label, AttackTarget::Untargeted)?;
    let mut stepped: Vec<f64> = x
        .iter()
        .zip(grad.iter())
        .map(|(&xi, &gi)| xi + radius * sign(gi))
        .collect();
    region.clamp(&mut stepped);
    Ok(stepped)
}

/// Multi-restart projected gradient ascent of the margin objective over
/// `region`.  Deterministic for a fixed config: restart `k` draws its start
/// point from an independent, restart-indexed random stream, restarts run
/// sequentially, and the first success in (restart, step) order is reported.
pub fn pgd<N: Network + ?Sized>(
    net: &N,
    region: &BoxRegion,
    center: &[f64],
    label: usize,
    config: &AttackConfig,
) -> Result<PgdResult> {
    config.validate()?;
    if center.len() != region.dim() {
        return Err(Error::DimensionMismatch {
            context: "attack center".into(),
            expected: region.dim(),
            actual: center.len(),
        });
    }
    let mut result = PgdResult {
        adversarial: None,
        success_restart: None,
        success_step: None,
        finals: Vec::with_capacity(config.restarts),
        evaluations: 0,
    };
    for restart in 0..config.restarts {
        let mut x: Vec<f64> = if restart == 0 {
            let mut start = center.to_vec();
            region.clamp(&mut start);
            start
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(restart as u64);
            (0..region.dim())
                .map(|d| {
                    let (lo, hi) = (region.lower()[d], region.upper()[d]);
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..=hi)
                    }
                })
                .collect()
        };
        for step in 0..=config.steps {
            // Success check first: step 0 inspects the start point itself.
            result.evaluations += 1;
            if net.classify(&x)? != label && result.adversarial.is_none() {
                result.adversarial = Some(x.clone());
                result.success_restart = Some(restart);
                result.success_step = Some(step);
            }
            if step == config.steps {
                break;
            }
            let (_, grad) = margin_and_gradient(net, &x, label, config.target)?;
            result.evaluations += 1;
            let mut stepped: Vec<f64> = x
                .iter()
                .zip(grad.iter())
                .map(|(&xi, &gi)| xi + config.step_size * sign(gi))
                .collect();
            region.clamp(&mut stepped);
            x = stepped;
        }
        result.finals.push(x);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeppoly::{self, Verdict};
    use crate::net::{Dnn, Layer};
    use ndarray::{arr1, arr2, Array1, Array2};

    fn reference_net() -> Dnn {
        let w1 = Array2::from_shape_vec((2, 2), vec![0.8, 1.1, 1.4, 1.2]).unwrap();
        let w2 = Array2::from_shape_vec((2, 2), vec![-0.8, 0.4, 1.1, -1.1]).unwrap();
        Dnn::new(vec![
            Layer::affine(w1, Array1::zeros(2)).unwrap(),
            Layer::relu(2),
            Layer::affine(w2, Array1::zeros(2)).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_degenerate_parameters() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { step_size: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { restarts: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pgd_on_linear_net_walks_straight_to_the_corner() {
        // Margin gradient of w2-w1 = (3, -4) is constant, so each step moves
        // +step in x1 and -step in x2 until the box boundary.
        let net = Dnn::new(vec![Layer::affine(
            arr2(&[[1.0, 2.0], [4.0, -2.0]]),
            arr1(&[0.0, -10.0]),
        )
        .unwrap()])
        .unwrap();
        let region = BoxRegion::from_center_radius(&[0.0, 0.0], 1.0).unwrap();
        let config = AttackConfig {
            step_size: 0.25,
            steps: 10,
            restarts: 1,
            seed: 7,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[0.0, 0.0], 0, &config).unwrap();
        // 4 steps reach (1, -1); remaining steps clamp in place.
        assert_eq!(result.finals.len(), 1);
        assert_eq!(result.finals[0], vec![1.0, -1.0]);
        // At (1,-1): y = (-1, -4): label 0 still wins, margin never flips.
        assert!(!result.success());
        assert_eq!(result.evaluations, 11 + 10);
    }

    #[test]
    fn pgd_finds_the_flip_on_a_linear_net_when_one_exists() {
        let net = Dnn::new(vec![Layer::affine(
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            arr1(&[0.0, -0.3]),
        )
        .unwrap()])
        .unwrap();
        let region = BoxRegion::from_center_radius(&[0.0, 0.0], 1.0).unwrap();
        let config = AttackConfig {
            step_size: 0.1,
            steps: 20,
            restarts: 1,
            seed: 0,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[0.0, 0.0], 0, &config).unwrap();
        assert!(result.success());
        let adv = result.adversarial.unwrap();
        assert!(region.contains(&adv));
        assert_ne!(net.classify(&adv).unwrap(), 0);
        // Flip needs x2 - x1 > 0.3: 2 joint steps of 0.1 give 0.4 > 0.3.
        assert_eq!(result.success_restart, Some(0));
        assert_eq!(result.success_step, Some(2));
    }

    #[test]
    fn zero_gradient_leaves_the_iterate_in_place() {
        // Identical rows make every margin gradient exactly zero; sign(0)=0
        // so the iterate never moves.
        let net = Dnn::new(vec![Layer::affine(
            arr2(&[[0.5, 0.5], [0.5, 0.5]]),
            arr1(&[1.0, 0.0]),
        )
        .unwrap()])
        .unwrap();
        let region = BoxRegion::from_center_radius(&[0.2, -0.1], 0.5).unwrap();
        let config = AttackConfig {
            step_size: 0.1,
            steps: 5,
            restarts: 1,
            seed: 0,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[0.2, -0.1], 0, &config).unwrap();
        assert_eq!(result.finals[0], vec![0.2, -0.1]);
        assert!(!result.success());
    }

    #[test]
    fn fgsm_moves_radius_in_gradient_sign_and_clamps() {
        let net = Dnn::new(vec![Layer::affine(
            arr2(&[[1.0, -1.0], [-1.0, 1.0]]),
            arr1(&[0.0, 0.0]),
        )
        .unwrap()])
        .unwrap();
        // Margin gradient for label 0 is row1 - row0 = (-2, 2).
        let region = BoxRegion::new(arr1(&[-0.5, -0.5]), arr1(&[0.5, 0.3])).unwrap();
        let out = fgsm(&net, &region, &[0.1, 0.0], 0, 0.4).unwrap();
        assert!((out[0] - (-0.3)).abs() < 1e-12);
        assert!((out[1] - 0.3).abs() < 1e-12, "clamped to the upper face");
    }

    #[test]
    fn verified_region_yields_no_adversarial() {
        // First confirm the region robust by certification, then check the
        // attack agrees (soundness of the bound makes disagreement a bug).
        let net = reference_net();
        let region = BoxRegion::from_center_radius(&[-0.7, 1.3], 0.1).unwrap();
        assert_eq!(deeppoly::verify(&net, &region, 1).unwrap(), Verdict::Verified);
        let config = AttackConfig {
            step_size: 0.02,
            steps: 50,
            restarts: 10,
            seed: 3,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[-0.7, 1.3], 1, &config).unwrap();
        assert!(!result.success());
        assert_eq!(result.finals.len(), 10);
        for f in &result.finals {
            assert!(region.contains(f));
        }
    }

    #[test]
    fn attack_matches_grid_search_on_the_workbench_region() {
        // Dense grid over the 2-D region first establishes that violations
        // exist (decision != 1 at some points), then the attack must find
        // one too, and the returned point must genuinely flip the decision.
        let net = reference_net();
        let region = BoxRegion::from_center_radius(&[-0.7, 1.0], 0.5).unwrap();
        let mut grid_hit = None;
        'outer: for i in 0..=200 {
            for j in 0..=200 {
                let x = [
                    region.lower()[0] + region.width(0) * i as f64 / 200.0,
                    region.lower()[1] + region.width(1) * j as f64 / 200.0,
                ];
                if net.classify(&x).unwrap() != 1 {
                    grid_hit = Some(x);
                    break 'outer;
                }
            }
        }
        assert!(grid_hit.is_some(), "grid must expose the violation");
        let config = AttackConfig {
            step_size: 0.05,
            steps: 50,
            restarts: 10,
            seed: 11,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[-0.7, 1.0], 1, &config).unwrap();
        assert!(result.success(), "attack must also expose it");
        let adv = result.adversarial.unwrap();
        assert!(region.contains(&adv));
        assert_ne!(net.classify(&adv).unwrap(), 1);
    }

    #[test]
    fn extra_restarts_preserve_earlier_findings() {
        // Restart k draws from stream k regardless of the restart budget, so
        // growing the budget replays the earlier restarts identically and
        // the first success cannot change.
        let net = reference_net();
        let region = BoxRegion::from_center_radius(&[-0.7, 1.0], 0.5).unwrap();
        let base = AttackConfig {
            step_size: 0.05,
            steps: 30,
            restarts: 4,
            seed: 21,
            target: AttackTarget::Untargeted,
        };
        let small = pgd(&net, &region, &[-0.7, 1.0], 1, &base).unwrap();
        let big = pgd(
            &net,
            &region,
            &[-0.7, 1.0],
            1,
            &AttackConfig { restarts: 9, ..base.clone() },
        )
        .unwrap();
        assert_eq!(small.finals, big.finals[..4].to_vec());
        if small.success() {
            assert_eq!(small.adversarial, big.adversarial);
            assert_eq!(small.success_restart, big.success_restart);
            assert_eq!(small.success_step, big.success_step);
        }
        // Same config twice is bitwise identical.
        let again = pgd(&net, &region, &[-0.7, 1.0], 1, &base).unwrap();
        assert_eq!(small.finals, again.finals);
        assert_eq!(small.adversarial, again.adversarial);
    }

    #[test]
    fn targeted_attack_ascends_the_chosen_class_only() {
        // Class 2 is reachable by moving x2 up; class 1 by moving x1 up.
        // Targeting class 2 must ignore the nearer class-1 flip.
        let net = Dnn::new(vec![Layer::affine(
            arr2(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            arr1(&[0.1, 0.0, -0.2]),
        )
        .unwrap()])
        .unwrap();
        let region = BoxRegion::from_center_radius(&[0.0, 0.0], 1.0).unwrap();
        let config = AttackConfig {
            step_size: 0.2,
            steps: 10,
            restarts: 1,
            seed: 0,
            target: AttackTarget::Class(2),
        };
        let result = pgd(&net, &region, &[0.0, 0.0], 0, &config).unwrap();
        let adv = result.adversarial.unwrap();
        assert_eq!(net.classify(&adv).unwrap(), 2);
        // Invalid targets are rejected.
        let bad = AttackConfig { target: AttackTarget::Class(0), ..config.clone() };
        assert!(pgd(&net, &region, &[0.0, 0.0], 0, &bad).is_err());
        let oob = AttackConfig { target: AttackTarget::Class(9), ..config };
        assert!(pgd(&net, &region, &[0.0, 0.0], 0, &oob).is_err());
    }

    #[test]
    fn degenerate_dimensions_stay_pinned() {
        let net = reference_net();
        let region = BoxRegion::new(arr1(&[-0.7, 0.5]), arr1(&[-0.7, 1.5])).unwrap();
        let config = AttackConfig {
            step_size: 0.05,
            steps: 10,
            restarts: 3,
            seed: 1,
            target: AttackTarget::Untargeted,
        };
        let result = pgd(&net, &region, &[-0.7, 1.0], 1, &config).unwrap();
        for f in &result.finals {
            assert_eq!(f[0], -0.7);
        }
    }
}
