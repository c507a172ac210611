//! Minimal reverse-mode differentiation on a flat tape.
//!
//! A [`Tape`] records one forward pass as a Wengert list: every node keeps
//! its forward value plus the local partial derivatives to its inputs, so
//! the backward sweep is a single reverse pass over a flat edge array with
//! a fixed accumulation order. Recording is per forward pass; a cleared
//! tape keeps its buffers so the rebuild cost in training loops stays low.
//!
//! Subgradient conventions (fixed here, relied on everywhere else):
//! `|x|` and `max(0, x)` both take derivative 0 at `x = 0`, and the square
//! root uses the guarded backward `1 / (2 max(sqrt|x|, 1e-8))` so an
//! all-zero count matrix does not produce an infinite gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Guard for the square-root backward pass.
const SQRT_GUARD: f64 = 1e-8;

/// Floor used in relative-error comparisons of gradients.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    /// Initializer for fixed-size edge scratch arrays; slots holding it
    /// must never be pushed.
    pub(crate) const PLACEHOLDER: Var = Var(0);
}

#[derive(Clone, Copy)]
struct Edge {
    src: u32,
    local: f64,
}

/// Records a single-threaded forward computation for reverse-mode
/// differentiation. Node values and adjoint accumulators are stored in
/// flat arrays indexed by [`Var`].
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    // offsets[i]..offsets[i + 1] indexes the edges of node i.
    offsets: Vec<u32>,
    edges: Vec<Edge>,
}

/// Position marker for [`Tape::truncate`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    nodes: usize,
    edges: usize,
}

/// Adjoints of every node after a backward sweep.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// The derivative of the seeded output with respect to `v`.
    #[inline]
    pub fn wrt(&self, v: Var) -> f64 {
        self.adj[v.0 as usize]
    }
}

// Shared value kernels. The constant-folding layer and the recorded nodes
// must produce bitwise-identical values, so both go through these.
#[inline]
pub(crate) fn val_relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub(crate) fn val_oma(x: f64, y: f64) -> f64 {
    1.0 - (x - y).abs()
}

#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn sqrt_local(x: f64) -> f64 {
    1.0 / (2.0 * math::sqrt(x.abs()).max(SQRT_GUARD))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            offsets: vec![0],
            edges: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Forward value of `v`.
    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    /// Drops all nodes but keeps allocated capacity.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.offsets.clear();
        self.offsets.push(0);
        self.edges.clear();
    }

    /// Marks the current end of the tape so everything recorded after it
    /// can be dropped with [`Tape::truncate`].
    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.vals.len(),
            edges: self.edges.len(),
        }
    }

    /// Rolls the tape back to `mark`. Handles recorded before the mark
    /// stay valid.
    pub fn truncate(&mut self, mark: TapeMark) {
        self.vals.truncate(mark.nodes);
        self.offsets.truncate(mark.nodes + 1);
        self.edges.truncate(mark.edges);
    }

    /// Records an independent input (leaf) node.
    #[inline]
    pub fn input(&mut self, value: f64) -> Var {
        self.push_node(value, &[])
    }

    /// Records a node with an explicit forward value and local partials.
    ///
    /// Each `(src, local)` pair must satisfy `local = ∂value/∂src` at the
    /// recorded point; the backward sweep relies on nothing else.
    #[inline]
    pub fn push_node(&mut self, value: f64, edges: &[(Var, f64)]) -> Var {
        debug_assert!(self.vals.len() < u32::MAX as usize);
        let idx = self.vals.len() as u32;
        self.vals.push(value);
        for &(src, local) in edges {
            debug_assert!(src.0 < idx);
            self.edges.push(Edge { src: src.0, local });
        }
        self.offsets.push(self.edges.len() as u32);
        Var(idx)
    }

    #[inline]
    pub fn add(&mut self, x: Var, y: Var) -> Var {
        self.push_node(self.value(x) + self.value(y), &[(x, 1.0), (y, 1.0)])
    }

    #[inline]
    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        self.push_node(self.value(x) - self.value(y), &[(x, 1.0), (y, -1.0)])
    }

    #[inline]
    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        self.push_node(vx * vy, &[(x, vy), (y, vx)])
    }

    #[inline]
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.push_node(self.value(x) + c, &[(x, 1.0)])
    }

    #[inline]
    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.push_node(self.value(x) * c, &[(x, c)])
    }

    /// `c - x`.
    #[inline]
    pub fn rsub_const(&mut self, c: f64, x: Var) -> Var {
        self.push_node(c - self.value(x), &[(x, -1.0)])
    }

    #[inline]
    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        self.push_node(v.abs(), &[(x, sign0(v))])
    }

    /// `max(0, x)` with derivative 0 at the kink.
    #[inline]
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let local = if v > 0.0 { 1.0 } else { 0.0 };
        self.push_node(val_relu(v), &[(x, local)])
    }

    /// Square root with exact forward value and guarded backward.
    #[inline]
    pub fn sqrt_guarded(&mut self, x: Var) -> Var {
        let v = self.value(x);
        self.push_node(math::sqrt(v), &[(x, sqrt_local(v))])
    }

    #[inline]
    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let r = 1.0 / v;
        self.push_node(r, &[(x, -r * r)])
    }

    /// Clamp to `[0, 1]`; gradient passes through inside the interval and
    /// is 0 outside.
    #[inline]
    pub fn clamp01(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let local = if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 };
        self.push_node(v.clamp(0.0, 1.0), &[(x, local)])
    }

    /// `1 - |x - y|`, the similarity kernel of the component.
    #[inline]
    pub fn one_minus_abs_diff(&mut self, x: Var, y: Var) -> Var {
        let s = sign0(self.value(x) - self.value(y));
        self.push_node(val_oma(self.value(x), self.value(y)), &[(x, -s), (y, s)])
    }

    /// Left-to-right sum of a slice of nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = 0.0;
        for &x in xs {
            acc += self.value(x);
        }
        let idx = self.vals.len() as u32;
        self.vals.push(acc);
        for &x in xs {
            debug_assert!(x.0 < idx);
            self.edges.push(Edge { src: x.0, local: 1.0 });
        }
        self.offsets.push(self.edges.len() as u32);
        Var(idx)
    }

    /// Ordered sequential product of a slice of nodes. Locals are built
    /// from prefix/suffix products so zero factors are handled exactly.
    pub fn product(&mut self, xs: &[Var]) -> Var {
        let n = xs.len();
        let idx = self.vals.len() as u32;
        let edge_start = self.edges.len();
        let mut acc = 1.0;
        for &x in xs {
            debug_assert!(x.0 < idx);
            // Local for x_k is prefix(k); the suffix factor comes below.
            self.edges.push(Edge { src: x.0, local: acc });
            acc *= self.value(x);
        }
        let mut suffix = 1.0;
        for k in (0..n).rev() {
            self.edges[edge_start + k].local *= suffix;
            suffix *= self.value(xs[k]);
        }
        self.vals.push(acc);
        self.offsets.push(self.edges.len() as u32);
        Var(idx)
    }

    /// Reverse sweep seeding `∂out/∂out = 1`. Accumulation order is the
    /// fixed reverse order of recording, so repeated runs are
    /// bitwise-identical.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut adj = Vec::new();
        self.backward_into(out, &mut adj);
        Gradients { adj }
    }

    /// [`Tape::backward`] into a caller-owned buffer (cleared and resized
    /// here) so hot loops can reuse the allocation.
    pub fn backward_into(&self, out: Var, adj: &mut Vec<f64>) {
        adj.clear();
        adj.resize(self.vals.len(), 0.0);
        adj[out.0 as usize] = 1.0;
        for i in (0..=out.0 as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (start, end) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            for e in &self.edges[start..end] {
                adj[e.src as usize] += a * e.local;
            }
        }
    }
}

/// A value that is either a plain constant or a recorded tape node.
///
/// The component's forward pass is written once against `Cv`; with
/// all-constant inputs every operation folds to plain arithmetic (the
/// fast evaluation path), and with tape-backed inputs the same code
/// records the gradient graph. Both paths execute the same float
/// operations in the same order, so their values are bitwise-identical.
#[derive(Clone, Copy, Debug)]
pub enum Cv {
    C(f64),
    V(Var),
}

impl Cv {
    #[inline]
    pub fn value(self, tape: &Tape) -> f64 {
        match self {
            Cv::C(c) => c,
            Cv::V(v) => tape.value(v),
        }
    }

    #[inline]
    pub fn as_var(self) -> Option<Var> {
        match self {
            Cv::C(_) => None,
            Cv::V(v) => Some(v),
        }
    }
}

impl Tape {
    #[inline]
    pub fn add_cv(&mut self, x: Cv, y: Cv) -> Cv {
        match (x, y) {
            (Cv::C(a), Cv::C(b)) => Cv::C(a + b),
            (Cv::V(a), Cv::V(b)) => Cv::V(self.add(a, b)),
            (Cv::V(a), Cv::C(b)) | (Cv::C(b), Cv::V(a)) => Cv::V(self.add_const(a, b)),
        }
    }

    #[inline]
    pub fn sub_cv(&mut self, x: Cv, y: Cv) -> Cv {
        match (x, y) {
            (Cv::C(a), Cv::C(b)) => Cv::C(a - b),
            (Cv::V(a), Cv::V(b)) => Cv::V(self.sub(a, b)),
            (Cv::V(a), Cv::C(b)) => Cv::V(self.add_const(a, -b)),
            (Cv::C(a), Cv::V(b)) => Cv::V(self.rsub_const(a, b)),
        }
    }

    #[inline]
    pub fn mul_cv(&mut self, x: Cv, y: Cv) -> Cv {
        match (x, y) {
            (Cv::C(a), Cv::C(b)) => Cv::C(a * b),
            (Cv::V(a), Cv::V(b)) => Cv::V(self.mul(a, b)),
            (Cv::V(a), Cv::C(b)) | (Cv::C(b), Cv::V(a)) => Cv::V(self.mul_const(a, b)),
        }
    }

    #[inline]
    pub fn mul_const_cv(&mut self, x: Cv, c: f64) -> Cv {
        match x {
            Cv::C(a) => Cv::C(a * c),
            Cv::V(a) => Cv::V(self.mul_const(a, c)),
        }
    }

    #[inline]
    pub fn abs_cv(&mut self, x: Cv) -> Cv {
        match x {
            Cv::C(a) => Cv::C(a.abs()),
            Cv::V(a) => Cv::V(self.abs(a)),
        }
    }

    #[inline]
    pub fn relu_cv(&mut self, x: Cv) -> Cv {
        match x {
            Cv::C(a) => Cv::C(val_relu(a)),
            Cv::V(a) => Cv::V(self.relu(a)),
        }
    }

    #[inline]
    pub fn sqrt_cv(&mut self, x: Cv) -> Cv {
        match x {
            Cv::C(a) => Cv::C(math::sqrt(a)),
            Cv::V(a) => Cv::V(self.sqrt_guarded(a)),
        }
    }

    #[inline]
    pub fn recip_cv(&mut self, x: Cv) -> Cv {
        match x {
            Cv::C(a) => Cv::C(1.0 / a),
            Cv::V(a) => Cv::V(self.recip(a)),
        }
    }

    #[inline]
    pub fn oma_cv(&mut self, x: Cv, y: Cv) -> Cv {
        match (x, y) {
            (Cv::C(a), Cv::C(b)) => Cv::C(val_oma(a, b)),
            (Cv::V(a), Cv::V(b)) => Cv::V(self.one_minus_abs_diff(a, b)),
            // Mixed: keep the exact expression 1 - |x - y|.
            (a, b) => {
                let d = self.sub_cv(a, b);
                let ad = self.abs_cv(d);
                self.sub_cv(Cv::C(1.0), ad)
            }
        }
    }

    /// Left-to-right sum. All-constant slices fold; all-node slices use a
    /// single n-ary node; mixed slices fall back to an ordered chain so
    /// the accumulation order (and thus rounding) never changes.
    pub fn sum_cv(&mut self, xs: &[Cv]) -> Cv {
        if xs.iter().all(|x| matches!(x, Cv::C(_))) {
            let mut acc = 0.0;
            for x in xs {
                acc += x.value(self);
            }
            return Cv::C(acc);
        }
        if xs.iter().all(|x| matches!(x, Cv::V(_))) {
            let vars: Vec<Var> = xs.iter().map(|x| x.as_var().unwrap()).collect();
            return Cv::V(self.sum(&vars));
        }
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add_cv(acc, x);
        }
        acc
    }

    /// Ordered sequential product with the same folding rules as
    /// [`Tape::sum_cv`].
    pub fn product_cv(&mut self, xs: &[Cv]) -> Cv {
        if xs.iter().all(|x| matches!(x, Cv::C(_))) {
            let mut acc = 1.0;
            for x in xs {
                acc *= x.value(self);
            }
            return Cv::C(acc);
        }
        if xs.iter().all(|x| matches!(x, Cv::V(_))) {
            let vars: Vec<Var> = xs.iter().map(|x| x.as_var().unwrap()).collect();
            return Cv::V(self.product(&vars));
        }
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.mul_cv(acc, x);
        }
        acc
    }
}

/// One coordinate of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckEntry {
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub rel_err: f64,
    /// False when the function was not finite at a perturbed point; such
    /// coordinates are excluded from [`GradReport::max_rel_err`].
    pub finite: bool,
}

/// Analytic-versus-numeric gradient comparison over every coordinate.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradReport {
    /// Maximum relative error over the finite coordinates (0 if none).
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.finite)
            .map(|e| e.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.finite)
    }

    /// Index and error of the worst finite coordinate.
    pub fn worst(&self) -> Option<(usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.finite)
            .max_by(|a, b| a.1.rel_err.total_cmp(&b.1.rel_err))
            .map(|(i, e)| (i, e.rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape's analytic gradient of `f` at `point` against
/// central finite differences with the given `step`.
///
/// `f` records a scalar output from the leaf nodes it is handed; it is
/// re-recorded at each perturbed point for the numeric side. Coordinates
/// where the function is not finite at a perturbed point are flagged and
/// never raise an error; inspect the report instead.
pub fn check_gradients<F>(mut f: F, point: &[f64], step: f64) -> GradReport
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    let mut tape = Tape::new();
    let mut vars: Vec<Var> = point.iter().map(|&p| tape.input(p)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<f64> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut eval = |p: &[f64]| -> f64 {
        tape.clear();
        vars.clear();
        vars.extend(p.iter().map(|&x| tape.input(x)));
        let out = f(&mut tape, &vars);
        tape.value(out)
    };

    let mut perturbed = point.to_vec();
    let mut entries = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        perturbed[i] = point[i] + step;
        let fp = eval(&perturbed);
        perturbed[i] = point[i] - step;
        let fm = eval(&perturbed);
        perturbed[i] = point[i];

        let a = analytic[i];
        if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
            entries.push(GradCheckEntry {
                analytic: a,
                numeric: f64::NAN,
                rel_err: f64::NAN,
                finite: false,
            });
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        entries.push(GradCheckEntry {
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
            finite: true,
        });
    }
    GradReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.input(3.0);
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 6.0);
    }

    #[test]
    fn sqrt_gradient() {
        // f(x) = sqrt(x) at x = 4 -> df/dx = 0.25
        let mut tape = Tape::new();
        let x = tape.input(4.0);
        let y = tape.sqrt_guarded(x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 0.25);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(0.0);
        let y = tape.abs(x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 0.0);

        // One-sided differences bracketing 0 give [-1, +1]; the chosen
        // convention lies inside, so it is a valid subgradient.
        let h = 1e-6_f64;
        let right = (h.abs() - 0.0) / h;
        let left = (0.0 - (-h).abs()) / h;
        assert!(left <= 0.0 && 0.0 <= right);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(0.0);
        let y = tape.relu(x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn bilinear_check() {
        // f(x, y) = x * y at (2, 5)
        let report = check_gradients(
            |tape, vars| tape.mul(vars[0], vars[1]),
            &[2.0, 5.0],
            1e-5,
        );
        assert!(report.max_rel_err() < 1e-6, "{:?}", report);
        assert!(report.all_finite());
    }

    #[test]
    fn sqrt_at_zero_flagged_non_finite() {
        let report = check_gradients(|tape, vars| tape.sqrt_guarded(vars[0]), &[0.0], 1e-6);
        assert!(!report.entries[0].finite);
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn fan_out_accumulates_once_per_use() {
        // f(x) = x * x + x -> df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.input(3.0);
        let sq = tape.mul(x, x);
        let y = tape.add(sq, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x), 7.0);
    }

    #[test]
    fn backward_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let xs: Vec<Var> = [0.3, 0.7, 0.1, 0.9].iter().map(|&v| tape.input(v)).collect();
            let p = tape.product(&xs);
            let s = tape.sum(&xs);
            let r = tape.recip(s);
            let m = tape.mul(p, r);
            let out = tape.sqrt_guarded(m);
            let g = tape.backward(out);
            xs.iter().map(|&x| g.wrt(x).to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn product_handles_zero_factors() {
        let mut tape = Tape::new();
        let xs: Vec<Var> = [2.0, 0.0, 5.0].iter().map(|&v| tape.input(v)).collect();
        let p = tape.product(&xs);
        assert_eq!(tape.value(p), 0.0);
        let g = tape.backward(p);
        assert_eq!(g.wrt(xs[0]), 0.0);
        assert_eq!(g.wrt(xs[1]), 10.0);
        assert_eq!(g.wrt(xs[2]), 0.0);
    }

    #[test]
    fn cv_folding_matches_recorded_values() {
        let vals = [0.37, 0.91];
        // Folded.
        let mut t1 = Tape::new();
        let folded = {
            let x = Cv::C(vals[0]);
            let y = Cv::C(vals[1]);
            let o = t1.oma_cv(x, y);
            let p = t1.mul_cv(o, x);
            let s = t1.sum_cv(&[p, y, o]);
            let r = t1.sqrt_cv(s);
            r.value(&t1)
        };
        // Recorded.
        let mut t2 = Tape::new();
        let recorded = {
            let x = Cv::V(t2.input(vals[0]));
            let y = Cv::V(t2.input(vals[1]));
            let o = t2.oma_cv(x, y);
            let p = t2.mul_cv(o, x);
            let s = t2.sum_cv(&[p, y, o]);
            let r = t2.sqrt_cv(s);
            r.value(&t2)
        };
        assert_eq!(folded.to_bits(), recorded.to_bits());
    }

    #[test]
    fn truncate_restores_mark() {
        let mut tape = Tape::new();
        let x = tape.input(2.0);
        let y = tape.mul(x, x);
        let mark = tape.mark();
        let z = tape.add(y, x);
        let _ = tape.abs(z);
        tape.truncate(mark);
        assert_eq!(tape.len(), 2);
        // Recording continues cleanly after truncation.
        let w = tape.add_const(y, 1.0);
        assert_eq!(tape.value(w), 5.0);
    }
}
