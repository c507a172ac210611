//! Learnable monotone piecewise-linear activation functions on `[0, 1]`.
//!
//! Each function splits `[0, 1]` into `d` equal segments whose slopes are
//! the absolute values of `d` unconstrained weights, normalized by the
//! total so that `f(0) = 0` and `f(1) = 1`. Evaluation interpolates
//! between cached normalized cumulative sums (the segment knots), so a
//! single call is constant-time and a knot rebuild is linear in `d`.
//! Taking `|w|` makes the realized function monotonically non-decreasing
//! no matter where the optimizer moves the weights.
//!
//! Gradients flow through both the interpolation and the normalization
//! (including the `Σ|w|` denominator), with `sign(0) = 0` at `w = 0`,
//! matching the subgradient conventions of [`crate::autodiff`].

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{Cv, Tape, Var};

/// Default segment count.
pub const DEFAULT_SEGMENTS: usize = 16;

/// How far outside `[0, 1]` an input may drift (floating-point slack
/// from upstream logistic/product pipelines) before the clamp warns.
const CLAMP_WARN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlinError {
    /// `Σ|w| = 0`: the normalization is undefined.
    AllZeroWeights,
    /// A weight was NaN or infinite.
    NonFiniteWeight,
    /// No segments.
    EmptyWeights,
}

impl fmt::Display for PlinError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlinError::AllZeroWeights => write!(f, "piecewise-linear weights sum to zero"),
            PlinError::NonFiniteWeight => write!(f, "piecewise-linear weight is not finite"),
            PlinError::EmptyWeights => write!(f, "piecewise-linear function needs at least one segment"),
        }
    }
}

/// Clamps an input to `[0, 1]`, warning when it is farther outside than
/// floating-point drift can explain.
#[inline]
fn clamp_unit(x: f64) -> f64 {
    if x < -CLAMP_WARN_TOL || x > 1.0 + CLAMP_WARN_TOL {
        log::warn!("piecewise-linear input {x} outside [0, 1]; clamping");
    }
    x.clamp(0.0, 1.0)
}

/// Segment index and position within it for a clamped input.
#[inline]
fn segment(xc: f64, d: usize) -> (usize, f64) {
    let dx = xc * d as f64;
    let m = (dx as usize).min(d - 1);
    (m, dx - m as f64)
}

/// Interpolates between two knots, clipped to the upper knot so rounding
/// can never break monotonicity across a segment boundary.
#[inline]
fn lerp_clip(lo: f64, hi: f64, frac: f64) -> f64 {
    (lo + frac * (hi - lo)).min(hi)
}

/// One monotone piecewise-linear function with cached knots.
#[derive(Clone, Debug, PartialEq)]
pub struct PlinFunction {
    weights: Vec<f64>,
    // knots[i] = clamp01(Σ_{j<=i} |w_j| / Σ|w|); knots[0] = 0, knots[d] = 1.
    knots: Vec<f64>,
}

impl PlinFunction {
    /// All weights 1: the identity function on `[0, 1]`.
    pub fn identity(d: usize) -> Self {
        PlinFunction::from_weights(vec![1.0; d]).expect("identity weights are valid")
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self, PlinError> {
        let mut f = PlinFunction {
            knots: Vec::new(),
            weights,
        };
        f.rebuild_knots()?;
        Ok(f)
    }

    /// Replaces the weights and rebuilds the cached knots. Call once per
    /// optimizer step; evaluation never touches raw weights.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<(), PlinError> {
        self.weights.clear();
        self.weights.extend_from_slice(weights);
        self.rebuild_knots()
    }

    fn rebuild_knots(&mut self) -> Result<(), PlinError> {
        let d = self.weights.len();
        if d == 0 {
            return Err(PlinError::EmptyWeights);
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(PlinError::NonFiniteWeight);
        }
        let mut total = 0.0;
        for &w in &self.weights {
            total += w.abs();
        }
        if total == 0.0 {
            return Err(PlinError::AllZeroWeights);
        }
        let inv = 1.0 / total;
        self.knots.clear();
        self.knots.resize(d + 1, 0.0);
        let mut acc = 0.0;
        for i in 1..d {
            acc += self.weights[i - 1].abs();
            self.knots[i] = (acc * inv).clamp(0.0, 1.0);
        }
        self.knots[0] = 0.0;
        self.knots[d] = 1.0;
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Evaluates the function. Inputs outside `[0, 1]` are clamped.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let d = self.weights.len();
        let (m, frac) = segment(clamp_unit(x), d);
        lerp_clip(self.knots[m], self.knots[m + 1], frac)
    }

    /// Elementwise [`PlinFunction::eval`] over a matrix.
    pub fn eval_matrix(&self, m: &crate::matrix::SquareMatrix) -> crate::matrix::SquareMatrix {
        m.map(|v| self.eval(v))
    }

    /// Value plus derivatives with respect to the input and every weight,
    /// obtained by recording a single evaluation.
    pub fn gradients(&self, x: f64) -> PlinGradients {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape);
        let xv = tape.input(x);
        let out = rec
            .cv
            .eval(&mut tape, Cv::V(xv))
            .as_var()
            .expect("variable input always records a node");
        let grads = tape.backward(out);
        PlinGradients {
            value: tape.value(out),
            wrt_input: grads.wrt(xv),
            wrt_weights: rec.weight_vars.iter().map(|&w| grads.wrt(w)).collect(),
        }
    }

    /// Records the weight-to-knot computation on a tape so evaluations
    /// can be differentiated with respect to the weights.
    pub fn record(&self, tape: &mut Tape) -> PlinRecording {
        let d = self.weights.len();
        let weight_vars: Vec<Var> = self.weights.iter().map(|&w| tape.input(w)).collect();
        let mut knots = Vec::with_capacity(d + 1);
        knots.push(Cv::C(0.0));
        if d > 1 {
            let mut partials = Vec::with_capacity(d);
            let mut acc = tape.abs(weight_vars[0]);
            partials.push(acc);
            for &w in &weight_vars[1..] {
                let a = tape.abs(w);
                acc = tape.add(acc, a);
                partials.push(acc);
            }
            let inv = tape.recip(partials[d - 1]);
            for &s in &partials[..d - 1] {
                let r = tape.mul(s, inv);
                knots.push(Cv::V(tape.clamp01(r)));
            }
        }
        knots.push(Cv::C(1.0));
        PlinRecording {
            cv: PlinCv { d, knots },
            weight_vars,
        }
    }

    /// The function with its knots as plain constants: evaluating through
    /// this folds to ordinary arithmetic (no recording).
    pub fn as_const_cv(&self) -> PlinCv {
        PlinCv {
            d: self.weights.len(),
            knots: self.knots.iter().map(|&k| Cv::C(k)).collect(),
        }
    }
}

/// Derivatives of a single evaluation; see [`PlinFunction::gradients`].
#[derive(Clone, Debug)]
pub struct PlinGradients {
    pub value: f64,
    pub wrt_input: f64,
    pub wrt_weights: Vec<f64>,
}

/// A piecewise-linear function whose knots are tape values or constants.
pub struct PlinCv {
    d: usize,
    knots: Vec<Cv>,
}

/// A [`PlinFunction`] recorded on a tape: the evaluator plus the weight
/// leaves gradients are read from.
pub struct PlinRecording {
    pub cv: PlinCv,
    pub weight_vars: Vec<Var>,
}

impl PlinCv {
    /// Evaluates at `x`, folding to a constant when nothing on the path
    /// is a tape node. Executes the same operations in the same order as
    /// [`PlinFunction::eval`], so values agree bitwise.
    pub fn eval(&self, tape: &mut Tape, x: Cv) -> Cv {
        let xv = x.value(tape);
        let xc = clamp_unit(xv);
        let (m, frac) = segment(xc, self.d);
        let lo = self.knots[m];
        let hi = self.knots[m + 1];
        let lo_v = lo.value(tape);
        let hi_v = hi.value(tape);
        let value = lerp_clip(lo_v, hi_v, frac);

        let mut edges: [(Var, f64); 3] = [(Var::PLACEHOLDER, 0.0); 3];
        let mut n_edges = 0;
        if let Cv::V(v) = x {
            // Zero slope once the input is clamped.
            let local = if xv == xc { self.d as f64 * (hi_v - lo_v) } else { 0.0 };
            edges[n_edges] = (v, local);
            n_edges += 1;
        }
        if let Cv::V(v) = lo {
            edges[n_edges] = (v, 1.0 - frac);
            n_edges += 1;
        }
        if let Cv::V(v) = hi {
            edges[n_edges] = (v, frac);
            n_edges += 1;
        }
        if n_edges == 0 {
            Cv::C(value)
        } else {
            Cv::V(tape.push_node(value, &edges[..n_edges]))
        }
    }
}

/// The role each of the eight activation functions plays in the
/// counting component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlinRole {
    /// f1: attention-matrix entries.
    Attention,
    /// f2: distance-matrix entries.
    Distance,
    /// f3: similarity kernel terms.
    Similarity,
    /// f4: attention side of the X comparison matrix.
    XAttention,
    /// f5: distance side of the X comparison matrix.
    XDistance,
    /// f6: attention-weight confidence.
    ConfAttention,
    /// f7: distance confidence.
    ConfDistance,
    /// f8: output confidence scale.
    OutputScale,
}

impl PlinRole {
    pub const ALL: [PlinRole; 8] = [
        PlinRole::Attention,
        PlinRole::Distance,
        PlinRole::Similarity,
        PlinRole::XAttention,
        PlinRole::XDistance,
        PlinRole::ConfAttention,
        PlinRole::ConfDistance,
        PlinRole::OutputScale,
    ];

    pub fn index(self) -> usize {
        match self {
            PlinRole::Attention => 0,
            PlinRole::Distance => 1,
            PlinRole::Similarity => 2,
            PlinRole::XAttention => 3,
            PlinRole::XDistance => 4,
            PlinRole::ConfAttention => 5,
            PlinRole::ConfDistance => 6,
            PlinRole::OutputScale => 7,
        }
    }

    /// Conventional short label: `f1` through `f8`.
    pub fn label(self) -> &'static str {
        ["f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8"][self.index()]
    }
}

/// The eight independently parameterized activation functions.
#[derive(Clone, Debug, PartialEq)]
pub struct PlinBank {
    fns: [PlinFunction; 8],
}

impl PlinBank {
    /// All eight functions identity-initialized with `d` segments.
    pub fn identity(d: usize) -> Self {
        PlinBank {
            fns: core::array::from_fn(|_| PlinFunction::identity(d)),
        }
    }

    /// Builds a bank from eight weight rows.
    pub fn from_weights(rows: [Vec<f64>; 8]) -> Result<Self, PlinError> {
        let mut it = rows.into_iter();
        let fns = [
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
            PlinFunction::from_weights(it.next().unwrap())?,
        ];
        Ok(PlinBank { fns })
    }

    pub fn f(&self, role: PlinRole) -> &PlinFunction {
        &self.fns[role.index()]
    }

    pub fn segments(&self) -> usize {
        self.fns[0].segments()
    }

    /// Weights of all eight functions flattened in role order.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(8 * self.segments());
        for f in &self.fns {
            out.extend_from_slice(f.weights());
        }
        out
    }

    /// Inverse of [`PlinBank::flat_weights`]; rebuilds every knot cache.
    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<(), PlinError> {
        let d = self.segments();
        assert_eq!(flat.len(), 8 * d, "expected 8 x {d} weights");
        for (k, f) in self.fns.iter_mut().enumerate() {
            f.set_weights(&flat[k * d..(k + 1) * d])?;
        }
        Ok(())
    }

    /// Records all eight functions; `weight_vars` is flattened in role
    /// order to match [`PlinBank::flat_weights`].
    pub fn record(&self, tape: &mut Tape) -> BankRecording {
        let mut weight_vars = Vec::with_capacity(8 * self.segments());
        let fns = core::array::from_fn(|k| {
            let rec = self.fns[k].record(tape);
            weight_vars.extend_from_slice(&rec.weight_vars);
            rec.cv
        });
        BankRecording { fns, weight_vars }
    }

    /// Constant (non-recording) evaluators for all eight functions.
    pub fn as_const_cv(&self) -> BankRecording {
        BankRecording {
            fns: core::array::from_fn(|k| self.fns[k].as_const_cv()),
            weight_vars: Vec::new(),
        }
    }
}

/// Tape-side view of a [`PlinBank`]; see [`PlinBank::record`].
pub struct BankRecording {
    fns: [PlinCv; 8],
    pub weight_vars: Vec<Var>,
}

impl BankRecording {
    pub fn f(&self, role: PlinRole) -> &PlinCv {
        &self.fns[role.index()]
    }
}
