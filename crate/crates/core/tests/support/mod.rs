//! Shared fixtures and independent oracles for the integration suites.
//!
//! The constants below were derived by hand (and double-checked with a desk
//! calculator) from the two-ReLU reference network before any library code
//! existed; they are frozen here so regressions are caught against values the
//! implementation never produced itself.  The oracle routines deliberately use
//! naive algorithms (corner enumeration, dense grids, central differences) so
//! they share no code with the optimized paths they check.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relurepair::deeppoly::{BoxRegion, LinearForm};
use relurepair::net::{Dnn, Layer, Network};

// ---------------------------------------------------------------------------
// Frozen reference values for the 2-2-2 worked example
// ---------------------------------------------------------------------------

/// First-layer weights of the reference network, row-major `[out][in]`.
pub const REF_W1: [[f64; 2]; 2] = [[0.8, 1.1], [1.4, 1.2]];
/// Output-layer weights of the reference network.
pub const REF_W2: [[f64; 2]; 2] = [[-0.8, 0.4], [1.1, -1.1]];

/// Anchor input, its (0-based) target class, and the stored adversarial point.
pub const REF_ANCHOR: [f64; 2] = [-0.7, 1.0];
pub const REF_LABEL: usize = 1;
pub const REF_ADVERSARIAL: [f64; 2] = [-0.2, 1.5];
pub const REF_RADIUS: f64 = 0.5;

/// Forward pass at the anchor: hidden pre-activations (0.54, 0.22), outputs
/// y1 = -0.8*0.54 + 0.4*0.22, y2 = 1.1*0.54 - 1.1*0.22.
pub const REF_FORWARD_AT_ANCHOR: [f64; 2] = [-0.344, 0.352];

/// Base-network outputs at the stored adversarial point (-0.2, 1.5):
/// hidden (1.49, 1.52), y1 = -1.192 + 0.608, y2 = 1.1*(1.49 - 1.52).
pub const REF_FORWARD_AT_ADVERSARIAL: [f64; 2] = [-0.584, -0.033];

/// Interval bounds of the hidden pre-activations over the anchor box
/// [-1.2,-0.2] x [0.5,1.5] (exact: the first layer is affine).
pub const REF_HIDDEN_BOUNDS: [[f64; 2]; 2] = [[-0.41, 1.49], [-1.08, 1.52]];

/// Gradient of y1 - y2 at the anchor (both hidden units active):
/// -1.9*(0.8,1.1) + 1.5*(1.4,1.2).
pub const REF_DIFF_GRADIENT_AT_ANCHOR: [f64; 2] = [0.58, -0.29];

/// Externally supplied output-difference bound for class 0 vs class 1 over the
/// anchor box, used as a given input by the scripted regression:
/// y1 - y2 <= 0.7*x1 + 0.14*x2 + 1.08.
pub const REF_GIVEN_ALPHA: [f64; 2] = [0.7, 0.14];
pub const REF_GIVEN_BETA: f64 = 1.08;

/// With a 2x2 bias-free patch at constant 0.1 the patch rows cancel, so the
/// composite bound equals the given form; its box maximum is attained at the
/// corner (-0.2, 1.5) with value 0.7*(-0.2) + 0.14*1.5 + 1.08 = 1.15.
pub const REF_LOSS_AT_INIT: f64 = 1.15;
pub const REF_CORNER: [f64; 2] = [-0.2, 1.5];

/// Loss gradient over (w11, w12, w21, w22) at the constant-0.1 patch: the
/// active-class row receives the corner, the target row its negation.
pub const REF_LOSS_GRADIENT: [f64; 4] = [-0.2, 1.5, 0.2, -1.5];

/// One gradient step with rate 0.6 from constant 0.1.
pub const REF_STEP_RATE: f64 = 0.6;
pub const REF_PATCH_AFTER_STEP: [[f64; 2]; 2] = [[0.22, -0.8], [-0.02, 1.0]];

/// Composite loss after that step: alpha = (0.94, -1.66), beta = 1.08,
/// maximized at (-0.2, 0.5): -0.188 - 0.83 + 1.08.
pub const REF_LOSS_AFTER_STEP: f64 = 0.062;

/// Bisection driven by the init-state gradient (0.7, 0.14) on the unit-width
/// box splits dimension 0 at -0.7.
pub const REF_SPLIT_DIM: usize = 0;
pub const REF_CHILD_LOW: [[f64; 2]; 2] = [[-1.2, -0.7], [0.5, 1.5]];
pub const REF_CHILD_HIGH: [[f64; 2]; 2] = [[-0.7, -0.2], [0.5, 1.5]];

/// Given-form loss of the stepped patch on the low child: alpha = (0.94, -1.66)
/// maximized at (-0.7, 0.5): -0.658 - 0.83 + 1.08.
pub const REF_CHILD_LOW_TERM: f64 = -0.408;

/// Repaired outputs at the adversarial point with the stepped patch:
/// (-0.584, -0.033) + ([0.22,-0.8].x, [-0.02,1].x) at x = (-0.2, 1.5).
pub const REF_REPAIRED_AT_ADVERSARIAL: [f64; 2] = [-1.828, 1.471];

/// Builds the reference network (no biases).
pub fn reference_net() -> Dnn {
    let w1 = Array2::from_shape_vec((2, 2), REF_W1.concat()).unwrap();
    let w2 = Array2::from_shape_vec((2, 2), REF_W2.concat()).unwrap();
    Dnn::new(vec![
        Layer::affine(w1, Array1::zeros(2)).unwrap(),
        Layer::relu(2),
        Layer::affine(w2, Array1::zeros(2)).unwrap(),
    ])
    .unwrap()
}

/// The anchor box [-1.2,-0.2] x [0.5,1.5].
pub fn reference_box() -> BoxRegion {
    BoxRegion::from_center_radius(&REF_ANCHOR, REF_RADIUS).unwrap()
}

/// The externally supplied class-0 bound as a `LinearForm`.
pub fn reference_given_form() -> LinearForm {
    LinearForm::new(Array1::from_vec(REF_GIVEN_ALPHA.to_vec()), REF_GIVEN_BETA)
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Exact maximum of an affine form over a box by corner enumeration.
/// Only usable for dimension <= 20; panics otherwise.
pub fn vertex_max_oracle(form: &LinearForm, region: &BoxRegion) -> f64 {
    let d = region.dim();
    assert!(d <= 20, "vertex oracle limited to 20 dimensions");
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << d) {
        let corner: Vec<f64> = (0..d)
            .map(|i| {
                if mask >> i & 1 == 1 {
                    region.upper()[i]
                } else {
                    region.lower()[i]
                }
            })
            .collect();
        best = best.max(form.eval(&corner));
    }
    best
}

/// Draws `count` uniform points from `region` with a fixed seed.
pub fn uniform_points(region: &BoxRegion, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..region.dim())
                .map(|d| {
                    let (lo, hi) = (region.lower()[d], region.upper()[d]);
                    if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    }
                })
                .collect()
        })
        .collect()
}

/// Checks every neuron bound of an analysis against sampled concrete runs.
/// Returns the worst violation margin (positive = violation beyond `tol`).
pub fn sampling_soundness_violation(
    net: &Dnn,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
    bounds: &[Vec<(f64, f64)>],
) -> f64 {
    let mut worst: f64 = f64::NEG_INFINITY;
    for x in uniform_points(region, samples, seed) {
        let acts = net.layer_outputs(&x).unwrap();
        for (k, layer_vals) in acts.iter().enumerate() {
            for (i, &v) in layer_vals.iter().enumerate() {
                let (lo, hi) = bounds[k][i];
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    worst
}

/// Central finite difference of `f` in direction `i` of `params`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, params: &[f64], i: usize, h: f64) -> f64 {
    let mut hi = params.to_vec();
    let mut lo = params.to_vec();
    hi[i] += h;
    lo[i] -= h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}

/// Relative deviation used by the gradient checks: |a-b| / max(1, |a|, |b|).
pub fn relative_deviation(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0_f64).max(a.abs()).max(b.abs())
}

/// Maximum of `net`'s class-`l` minus class-`l0` margin over an inclusive
/// `steps` x `steps` grid on a 2-D box.  Endpoints are included, so for affine
/// networks the box maximum is attained exactly at a grid corner.
pub fn grid_margin_max(net: &Dnn, region: &BoxRegion, l: usize, l0: usize, steps: usize) -> f64 {
    assert_eq!(region.dim(), 2, "grid oracle is 2-D only");
    let mut best = f64::NEG_INFINITY;
    for i in 0..steps {
        let x1 = interp(region.lower()[0], region.upper()[0], i, steps);
        for j in 0..steps {
            let x2 = interp(region.lower()[1], region.upper()[1], j, steps);
            let y = net.forward(&[x1, x2]).unwrap();
            best = best.max(y[l] - y[l0]);
        }
    }
    best
}

/// Searches an inclusive 2-D grid for any point the network classifies away
/// from `label`; mirrors the attack success criterion exactly.
pub fn grid_misclassification_search(
    net: &dyn Network,
    region: &BoxRegion,
    label: usize,
    steps: usize,
) -> Option<Vec<f64>> {
    assert_eq!(region.dim(), 2);
    for i in 0..steps {
        let x1 = interp(region.lower()[0], region.upper()[0], i, steps);
        for j in 0..steps {
            let x2 = interp(region.lower()[1], region.upper()[1], j, steps);
            if net.classify(&[x1, x2]).unwrap() != label {
                return Some(vec![x1, x2]);
            }
        }
    }
    None
}

fn interp(lo: f64, hi: f64, i: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lo;
    }
    lo + (hi - lo) * (i as f64) / ((steps - 1) as f64)
}

/// Random fully connected ReLU classifier with the given layer widths.
pub fn random_net(dims: &[usize], scale: f64, seed: u64) -> Dnn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (k, pair) in dims.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let w = Array2::from_shape_fn((n_out, n_in), |_| rng.random_range(-scale..scale));
        let b = Array1::from_shape_fn(n_out, |_| rng.random_range(-scale..scale));
        layers.push(Layer::affine(w, b).unwrap());
        if k + 2 < dims.len() {
            layers.push(Layer::relu(n_out));
        }
    }
    Dnn::new(layers).unwrap()
}

/// Random box with widths in [0.1, 1.1] around a random center in [-1, 1]^d.
pub fn random_box(dim: usize, seed: u64) -> BoxRegion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for _ in 0..dim {
        let c: f64 = rng.random_range(-1.0..1.0);
        let half: f64 = rng.random_range(0.05..0.55);
        lower.push(c - half);
        upper.push(c + half);
    }
    BoxRegion::new(Array1::from_vec(lower), Array1::from_vec(upper)).unwrap()
}
