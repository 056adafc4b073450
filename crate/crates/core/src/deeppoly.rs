//! Symbolic bound propagation for ReLU networks over box-shaped input regions.
//!
//! Every neuron carries a symbolic lower and upper bound that is affine in the
//! previous layer's variables, plus concrete interval bounds obtained by
//! substituting those forms backwards all the way to the input box.  Affine
//! layers transfer bounds exactly; an unstable ReLU (pre-activation straddling
//! zero) gets the chord as its upper bound and a slope-0-or-1 lower bound
//! chosen by the smaller relaxation area, with ties taking slope 1.
//!
//! Verification of a robustness query asks, for every class `l` other than the
//! expected `l0`, whether the affine over-approximation of `y_l - y_l0` stays
//! strictly negative over the box.  The analysis is sound but incomplete, so
//! the negative answer is `Unknown`, never "violated".

use crate::error::{Error, Result};
use crate::net::{Dnn, Layer};
use ndarray::Array1;
use std::collections::BTreeMap;

/// An axis-aligned box `[lower_d, upper_d]` per dimension.  Degenerate
/// (zero-width) dimensions are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    lower: Array1<f64>,
    upper: Array1<f64>,
}

impl BoxRegion {
    pub fn new(lower: Array1<f64>, upper: Array1<f64>) -> Result<BoxRegion> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "box bounds".into(),
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::InvalidRegion("box has dimension 0".into()));
        }
        for d in 0..lower.len() {
            let (lo, hi) = (lower[d], upper[d]);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidRegion(format!("non-finite bound in dimension {d}")));
            }
            if lo > hi {
                return Err(Error::InvalidRegion(format!(
                    "lower {lo} exceeds upper {hi} in dimension {d}"
                )));
            }
        }
        Ok(BoxRegion { lower, upper })
    }

    /// The ball `B(center, radius)` in the infinity norm.
    pub fn from_center_radius(center: &[f64], radius: f64) -> Result<BoxRegion> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::InvalidRegion(format!("invalid radius {radius}")));
        }
        let lower = Array1::from_iter(center.iter().map(|c| c - radius));
        let upper = Array1::from_iter(center.iter().map(|c| c + radius));
        BoxRegion::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &Array1<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &Array1<f64> {
        &self.upper
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim()).map(|d| 0.5 * (self.lower[d] + self.upper[d])).collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.width(d)).product()
    }

    /// Closed-box membership: faces count as inside.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(d, &v)| v >= self.lower[d] && v <= self.upper[d])
    }

    /// Projects `x` onto the box, componentwise.
    pub fn clamp(&self, x: &mut [f64]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[d], self.upper[d]);
        }
    }

    /// Splits at the midpoint of dimension `d` into (low half, high half).
    pub fn split_at_midpoint(&self, d: usize) -> (BoxRegion, BoxRegion) {
        let mid = 0.5 * (self.lower[d] + self.upper[d]);
        let mut low_hi = self.upper.clone();
        low_hi[d] = mid;
        let mut high_lo = self.lower.clone();
        high_lo[d] = mid;
        (
            BoxRegion {
                lower: self.lower.clone(),
                upper: low_hi,
            },
            BoxRegion {
                lower: high_lo,
                upper: self.upper.clone(),
            },
        )
    }
}

/// An affine function `coeffs . x + offset` of some layer's variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm {
    coeffs: Array1<f64>,
    offset: f64,
}

impl LinearForm {
    pub fn new(coeffs: Array1<f64>, offset: f64) -> LinearForm {
        LinearForm { coeffs, offset }
    }

    pub fn zero(dim: usize) -> LinearForm {
        LinearForm {
            coeffs: Array1::zeros(dim),
            offset: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &Array1<f64> {
        &self.coeffs
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + self.offset
    }

    /// `self + other`, requiring equal dimension.
    pub fn sum(&self, other: &LinearForm) -> LinearForm {
        LinearForm {
            coeffs: &self.coeffs + &other.coeffs,
            offset: self.offset + other.offset,
        }
    }
}

/// Exact maximum of an affine form over a box: each coordinate contributes
/// its upper end where the coefficient is positive and its lower end where
/// negative.
pub fn affine_box_max(form: &LinearForm, region: &BoxRegion) -> f64 {
    debug_assert_eq!(form.dim(), region.dim());
    let mut total = form.offset;
    for d in 0..form.dim() {
        let c = form.coeffs[d];
        if c > 0.0 {
            total += c * region.upper()[d];
        } else if c < 0.0 {
            total += c * region.lower()[d];
        }
    }
    total
}

/// Exact minimum of an affine form over a box.
pub fn affine_box_min(form: &LinearForm, region: &BoxRegion) -> f64 {
    let mut total = form.offset;
    for d in 0..form.dim() {
        let c = form.coeffs[d];
        if c > 0.0 {
            total += c * region.lower()[d];
        } else if c < 0.0 {
            total += c * region.upper()[d];
        }
    }
    total
}

/// The box corner attaining [`affine_box_max`].  Zero coefficients take the
/// upper end, matching the maximum's tie handling.
pub fn maximizing_corner(form: &LinearForm, region: &BoxRegion) -> Array1<f64> {
    Array1::from_iter((0..form.dim()).map(|d| {
        if form.coeffs[d] >= 0.0 {
            region.upper()[d]
        } else {
            region.lower()[d]
        }
    }))
}

/// Per-neuron abstraction: symbolic bounds over the previous layer's
/// variables plus concrete interval bounds over the input box.
#[derive(Debug, Clone)]
pub struct NeuronAbstraction {
    pub sym_lower: LinearForm,
    pub sym_upper: LinearForm,
    pub conc_lower: f64,
    pub conc_upper: f64,
}

/// The full analysis of a network over a box: one abstraction per neuron per
/// layer, and (when requested through [`output_diff_upper`]) input-space upper
/// bounds on each class margin against the expected class.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub layers: Vec<Vec<NeuronAbstraction>>,
    pub diff_bounds: BTreeMap<usize, LinearForm>,
}

/// Outcome of a robustness query.  The analysis is incomplete, so failure to
/// prove is `Unknown` rather than a counterexample claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Verified,
    Unknown,
}

#[derive(Clone, Copy)]
enum Direction {
    Upper,
    Lower,
}

struct Analyzer<'a> {
    net: &'a Dnn,
    region: &'a BoxRegion,
    layers: Vec<Vec<NeuronAbstraction>>,
}

impl<'a> Analyzer<'a> {
    fn run(net: &'a Dnn, region: &'a BoxRegion) -> Result<Analyzer<'a>> {
        if region.dim() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "analysis region".into(),
                expected: net.input_dim(),
                actual: region.dim(),
            });
        }
        let mut this = Analyzer {
            net,
            region,
            layers: Vec::with_capacity(net.layers().len()),
        };
        for (k, layer) in net.layers().iter().enumerate() {
            let abstractions = match layer {
                Layer::Affine { weights, bias } => {
                    let mut v = Vec::with_capacity(weights.nrows());
                    for i in 0..weights.nrows() {
                        let form = LinearForm::new(weights.row(i).to_owned(), bias[i]);
                        let conc_upper = this.concretize(&form, k, Direction::Upper);
                        let conc_lower = this.concretize(&form, k, Direction::Lower);
                        v.push(NeuronAbstraction {
                            sym_lower: form.clone(),
                            sym_upper: form,
                            conc_lower,
                            conc_upper,
                        });
                    }
                    v
                }
                Layer::Relu { dim } => {
                    let mut v = Vec::with_capacity(*dim);
                    for i in 0..*dim {
                        let (pre_lo, pre_hi) = this.incoming_bounds(k, i);
                        v.push(this.relu_abstraction(k, i, pre_lo, pre_hi));
                    }
                    v
                }
            };
            this.layers.push(abstractions);
        }
        Ok(this)
    }

    /// Concrete bounds feeding layer `k`: the previous layer's concrete
    /// bounds, or the input box when `k == 0`.
    fn incoming_bounds(&self, k: usize, i: usize) -> (f64, f64) {
        if k == 0 {
            (self.region.lower()[i], self.region.upper()[i])
        } else {
            let n = &self.layers[k - 1][i];
            (n.conc_lower, n.conc_upper)
        }
    }

    fn relu_abstraction(&self, k: usize, i: usize, lo: f64, hi: f64) -> NeuronAbstraction {
        let dim = self.var_dim(k);
        let unit = |c: f64| {
            let mut coeffs = Array1::zeros(dim);
            coeffs[i] = c;
            LinearForm::new(coeffs, 0.0)
        };
        if lo >= 0.0 {
            // Always active: exact identity.
            let form = unit(1.0);
            let conc_upper = self.concretize(&form, k, Direction::Upper);
            let conc_lower = self.concretize(&form, k, Direction::Lower).max(0.0);
            NeuronAbstraction {
                sym_lower: form.clone(),
                sym_upper: form,
                conc_lower,
                conc_upper,
            }
        } else if hi <= 0.0 {
            // Always off: exact zero.
            NeuronAbstraction {
                sym_lower: LinearForm::zero(dim),
                sym_upper: LinearForm::zero(dim),
                conc_lower: 0.0,
                conc_upper: 0.0,
            }
        } else {
            // Unstable: chord above, slope 0 or 1 below (smaller area wins,
            // slope 1 on ties).
            let slope = hi / (hi - lo);
            let mut upper = unit(slope);
            upper.offset = -hi * lo / (hi - lo);
            let lower = if hi >= -lo { unit(1.0) } else { LinearForm::zero(dim) };
            let conc_upper = self.concretize(&upper, k, Direction::Upper);
            let conc_lower = self.concretize(&lower, k, Direction::Lower).max(0.0);
            NeuronAbstraction {
                sym_lower: lower,
                sym_upper: upper,
                conc_lower,
                conc_upper,
            }
        }
    }

    /// Number of variables the symbolic forms of layer `k` range over.
    fn var_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.net.input_dim()
        } else {
            self.net.layers()[k - 1].output_dim()
        }
    }

    /// Substitutes a form over layer `k`'s *inputs* (that is, layer `k-1`'s
    /// outputs) backwards until it ranges over the input space.
    fn back_substitute(&self, form: &LinearForm, k: usize, dir: Direction) -> LinearForm {
        let mut cur = form.clone();
        let mut layer = k; // cur ranges over the outputs of `layer - 1`
        while layer > 0 {
            layer -= 1;
            let prev_dim = self.var_dim(layer);
            let mut coeffs = Array1::zeros(prev_dim);
            let mut offset = cur.offset;
            for (i, &c) in cur.coeffs().iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let n = &self.layers[layer][i];
                // For an upper bound a positive coefficient consumes the
                // variable's upper form; symmetric in the other three cases.
                let pick_upper = match dir {
                    Direction::Upper => c > 0.0,
                    Direction::Lower => c < 0.0,
                };
                let sub = if pick_upper { &n.sym_upper } else { &n.sym_lower };
                coeffs.scaled_add(c, sub.coeffs());
                offset += c * sub.offset;
            }
            cur = LinearForm::new(coeffs, offset);
        }
        cur
    }

    /// Concrete bound of a form over layer `k`'s inputs, via full
    /// back-substitution and the box extremum.
    fn concretize(&self, form: &LinearForm, k: usize, dir: Direction) -> f64 {
        let input_form = self.back_substitute(form, k, dir);
        match dir {
            Direction::Upper => affine_box_max(&input_form, self.region),
            Direction::Lower => affine_box_min(&input_form, self.region),
        }
    }

    /// Input-space upper bound of `y_l - y_l0`.
    fn diff_upper(&self, l: usize, l0: usize) -> LinearForm {
        let n_out = self.net.output_dim();
        let mut seed = Array1::zeros(n_out);
        seed[l] = 1.0;
        seed[l0] += -1.0;
        // The seed ranges over the outputs of the last layer, i.e. the inputs
        // of a virtual layer after it.
        self.back_substitute(&LinearForm::new(seed, 0.0), self.net.layers().len(), Direction::Upper)
    }
}

/// Runs the abstraction over every layer.  `diff_bounds` is left empty; use
/// [`output_diff_upper`] for margin bounds.
pub fn analyze(net: &Dnn, region: &BoxRegion) -> Result<AnalysisResult> {
    let analyzer = Analyzer::run(net, region)?;
    Ok(AnalysisResult {
        layers: analyzer.layers,
        diff_bounds: BTreeMap::new(),
    })
}

/// Input-space affine upper bounds of every margin `y_l - y_l0`, `l != l0`.
pub fn output_diff_upper(net: &Dnn, region: &BoxRegion, label: usize) -> Result<BTreeMap<usize, LinearForm>> {
    if label >= net.output_dim() {
        return Err(Error::ClassOutOfRange {
            class: label,
            num_classes: net.output_dim(),
        });
    }
    let analyzer = Analyzer::run(net, region)?;
    let mut out = BTreeMap::new();
    for l in 0..net.output_dim() {
        if l != label {
            out.insert(l, analyzer.diff_upper(l, label));
        }
    }
    Ok(out)
}

/// Proves local robustness on `region` if every margin bound is strictly
/// negative at its box maximum.
pub fn verify(net: &Dnn, region: &BoxRegion, label: usize) -> Result<Verdict> {
    let diffs = output_diff_upper(net, region, label)?;
    let all_negative = diffs.values().all(|form| affine_box_max(form, region) < 0.0);
    Ok(if all_negative { Verdict::Verified } else { Verdict::Unknown })
}
