//! The differentiable counting component.
//!
//! From `n` attention weights in `[0, 1]` and their bounding boxes, the
//! component builds a weighted digraph (the outer product of the
//! weights), removes intra-object edges by masking with box distances,
//! scales away inter-object duplicate edges using a row-similarity
//! estimate of how many proposals share each object, and reads the count
//! off the total edge weight: a complete digraph with self-loops on `V`
//! vertices has `V^2` edges, so `c = sqrt(sum C)`.
//!
//! The count is expanded into an `(n+1)`-vector by linear interpolation
//! between the two nearest one-hot encodings, and optionally scaled by a
//! confidence factor derived from how far the weights and distances sit
//! from 0.5.
//!
//! Every step is written against [`Cv`] values: called with constants it
//! folds to plain arithmetic (the evaluation path), called with tape
//! nodes it records the gradient graph. Both execute identical float
//! operations, so the two paths agree bitwise.

use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{Cv, Tape};
use crate::math;
use crate::matrix::SquareMatrix;
use crate::plin::{BankRecording, PlinBank, PlinRole};

/// Axis-aligned rectangle inside the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// # Panics
    ///
    /// Panics unless `x1 <= x2`, `y1 <= y2` and all coordinates lie in
    /// `[0, 1]`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        assert!(x1 <= x2 && y1 <= y2, "box corners out of order");
        assert!(
            (0.0..=1.0).contains(&x1)
                && (0.0..=1.0).contains(&y1)
                && (0.0..=1.0).contains(&x2)
                && (0.0..=1.0).contains(&y2),
            "box outside the unit square"
        );
        BoundingBox { x1, y1, x2, y2 }
    }

    /// Axis-aligned square with the given top-left corner and side.
    pub fn square(x: f64, y: f64, side: f64) -> Self {
        BoundingBox::new(x, y, x + side, y + side)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Intersection over union. A pair of zero-area boxes counts as
    /// non-overlapping (0), so degenerate input cannot divide by zero.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// See [`BoundingBox::iou`].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputError {
    Empty,
    LengthMismatch { weights: usize, boxes: usize },
    WeightOutOfRange { index: usize },
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputError::Empty => write!(f, "component input needs at least one proposal"),
            InputError::LengthMismatch { weights, boxes } => {
                write!(f, "{weights} weights but {boxes} boxes")
            }
            InputError::WeightOutOfRange { index } => {
                write!(f, "attention weight {index} outside [0, 1]")
            }
        }
    }
}

/// `n` attention weights with their boxes. Weights are held in `[0, 1]`;
/// sub-1e-9 floating-point drift is clamped, anything worse is an error.
#[derive(Clone, Debug)]
pub struct ComponentInput {
    weights: Vec<f64>,
    boxes: Vec<BoundingBox>,
}

impl ComponentInput {
    pub fn new(weights: Vec<f64>, boxes: Vec<BoundingBox>) -> Result<Self, InputError> {
        if weights.len() != boxes.len() {
            return Err(InputError::LengthMismatch {
                weights: weights.len(),
                boxes: boxes.len(),
            });
        }
        if weights.is_empty() {
            return Err(InputError::Empty);
        }
        let mut weights = weights;
        for (i, w) in weights.iter_mut().enumerate() {
            if !(-1e-9..=1.0 + 1e-9).contains(w) {
                return Err(InputError::WeightOutOfRange { index: i });
            }
            *w = w.clamp(0.0, 1.0);
        }
        Ok(ComponentInput { weights, boxes })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }
}

/// Every intermediate of one forward pass, as plain values.
#[derive(Clone, Debug)]
pub struct ComponentTrace {
    /// Outer product of the attention weights (A).
    pub attention: SquareMatrix,
    /// Pairwise box distances `1 - IoU` with a zero diagonal (D).
    pub distance: SquareMatrix,
    /// Attention matrix with intra-object edges masked out (A-tilde).
    pub dedup: SquareMatrix,
    /// The differently-activated dedup variant whose rows are compared
    /// for similarity (X).
    pub comparison: SquareMatrix,
    /// Pairwise proposal similarity (Sim).
    pub similarity: SquareMatrix,
    /// Per-vertex duplicate-count scales (s).
    pub scales: Vec<f64>,
    /// Final edge-weight matrix (C).
    pub count_matrix: SquareMatrix,
    /// The count scalar `c = sqrt(sum C)`.
    pub count: f64,
    /// `(n+1)`-vector expansion of the count (o).
    pub expanded: Vec<f64>,
    /// Average distance of activated weights from 0.5 (p_a).
    pub conf_attention: f64,
    /// Average distance of activated distances from 0.5 (p_D).
    pub conf_distance: f64,
    /// Confidence-scaled output, equal to `expanded` when confidence
    /// scaling is off (o-tilde).
    pub output: Vec<f64>,
}

/// Tape-side mirror of [`ComponentTrace`].
pub struct TraceCv {
    pub attention: Vec<Cv>,
    pub distance: SquareMatrix,
    pub dedup: Vec<Cv>,
    pub comparison: Vec<Cv>,
    pub similarity: Vec<Cv>,
    pub scales: Vec<Cv>,
    pub count_matrix: Vec<Cv>,
    pub count: Cv,
    pub expanded: Vec<Cv>,
    pub conf_attention: Cv,
    pub conf_distance: Cv,
    pub output: Vec<Cv>,
}

impl TraceCv {
    fn n(&self) -> usize {
        self.scales.len()
    }

    /// Extracts plain values from the recorded trace.
    pub fn values(&self, tape: &Tape) -> ComponentTrace {
        let n = self.n();
        let mat = |cvs: &[Cv]| SquareMatrix::from_fn(n, |i, j| cvs[i * n + j].value(tape));
        ComponentTrace {
            attention: mat(&self.attention),
            distance: self.distance.clone(),
            dedup: mat(&self.dedup),
            comparison: mat(&self.comparison),
            similarity: mat(&self.similarity),
            scales: self.scales.iter().map(|s| s.value(tape)).collect(),
            count_matrix: mat(&self.count_matrix),
            count: self.count.value(tape),
            expanded: self.expanded.iter().map(|o| o.value(tape)).collect(),
            conf_attention: self.conf_attention.value(tape),
            conf_distance: self.conf_distance.value(tape),
            output: self.output.iter().map(|o| o.value(tape)).collect(),
        }
    }
}

/// Full forward pass on plain values.
pub fn forward(input: &ComponentInput, bank: &PlinBank, use_confidence: bool) -> ComponentTrace {
    let mut tape = Tape::new();
    let bank_cv = bank.as_const_cv();
    let weights: Vec<Cv> = input.weights.iter().map(|&w| Cv::C(w)).collect();
    let trace = forward_cv(&mut tape, &weights, &input.boxes, &bank_cv, use_confidence);
    debug_assert!(tape.is_empty(), "constant forward must not record");
    trace.values(&tape)
}

/// Full forward pass against [`Cv`] inputs; records whenever a weight or
/// a bank knot is a tape node. Box geometry is never differentiated.
pub fn forward_cv(
    tape: &mut Tape,
    weights: &[Cv],
    boxes: &[BoundingBox],
    bank: &BankRecording,
    use_confidence: bool,
) -> TraceCv {
    let n = weights.len();
    assert_eq!(n, boxes.len(), "weight/box count mismatch");
    assert!(n > 0, "component input needs at least one proposal");

    let distance = distance_matrix(boxes);
    let attention = attention_cv(tape, weights);
    let dedup = dedup_cv(tape, &attention, &distance, bank, n);
    let (comparison, similarity) = similarity_cv(tape, weights, &attention, &distance, bank, n);
    let scales = scales_cv(tape, &similarity, n);
    let count_matrix = count_matrix_cv(tape, &dedup, &scales, weights, bank, n);
    let count = {
        let total = tape.sum_cv(&count_matrix);
        tape.sqrt_cv(total)
    };
    let expanded = expand_cv(tape, count, n);
    let (conf_attention, conf_distance, scale) = confidence_cv(tape, weights, &distance, bank, n);
    let output = if use_confidence {
        expanded.iter().map(|&o| tape.mul_cv(scale, o)).collect()
    } else {
        expanded.clone()
    };

    TraceCv {
        attention,
        distance,
        dedup,
        comparison,
        similarity,
        scales,
        count_matrix,
        count,
        expanded,
        conf_attention,
        conf_distance,
        output,
    }
}

fn attention_cv(tape: &mut Tape, weights: &[Cv]) -> Vec<Cv> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(tape.mul_cv(weights[i], weights[j]));
        }
    }
    out
}

fn dedup_cv(
    tape: &mut Tape,
    attention: &[Cv],
    distance: &SquareMatrix,
    bank: &BankRecording,
    n: usize,
) -> Vec<Cv> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let fa = bank.f(PlinRole::Attention).eval(tape, attention[i * n + j]);
            let fd = bank
                .f(PlinRole::Distance)
                .eval(tape, Cv::C(distance.get(i, j)));
            out.push(tape.mul_cv(fa, fd));
        }
    }
    out
}

fn similarity_cv(
    tape: &mut Tape,
    weights: &[Cv],
    attention: &[Cv],
    distance: &SquareMatrix,
    bank: &BankRecording,
    n: usize,
) -> (Vec<Cv>, Vec<Cv>) {
    let mut comparison = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let fa = bank.f(PlinRole::XAttention).eval(tape, attention[i * n + j]);
            let fd = bank
                .f(PlinRole::XDistance)
                .eval(tape, Cv::C(distance.get(i, j)));
            comparison.push(tape.mul_cv(fa, fd));
        }
    }

    // Sim is symmetric; compute the upper triangle and mirror the shared
    // node. The product runs over all n columns in order, preceded by the
    // weight-comparison term that keeps a lone proposal dissimilar from
    // the zero rows.
    let mut similarity = alloc::vec![Cv::C(0.0); n * n];
    let mut terms: Vec<Cv> = Vec::with_capacity(n + 1);
    for i in 0..n {
        for j in i..n {
            terms.clear();
            let wsim = tape.oma_cv(weights[i], weights[j]);
            terms.push(bank.f(PlinRole::Similarity).eval(tape, wsim));
            for k in 0..n {
                let rsim = tape.oma_cv(comparison[i * n + k], comparison[j * n + k]);
                terms.push(bank.f(PlinRole::Similarity).eval(tape, rsim));
            }
            let sim = tape.product_cv(&terms);
            similarity[i * n + j] = sim;
            similarity[j * n + i] = sim;
        }
    }
    (comparison, similarity)
}

fn scales_cv(tape: &mut Tape, similarity: &[Cv], n: usize) -> Vec<Cv> {
    let mut scales = Vec::with_capacity(n);
    for i in 0..n {
        let row_sum = tape.sum_cv(&similarity[i * n..(i + 1) * n]);
        // Sim_ii is within rounding of 1, so a zero row sum means the
        // upstream invariants broke.
        assert!(
            row_sum.value(tape) > 0.0,
            "similarity row sum must be positive"
        );
        scales.push(tape.recip_cv(row_sum));
    }
    scales
}

fn count_matrix_cv(
    tape: &mut Tape,
    dedup: &[Cv],
    scales: &[Cv],
    weights: &[Cv],
    bank: &BankRecording,
    n: usize,
) -> Vec<Cv> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let ss = tape.mul_cv(scales[i], scales[j]);
            let edge = tape.mul_cv(dedup[i * n + j], ss);
            if i == j {
                // Self-loops scale by s, not s^2: duplicates add loops
                // linearly, not quadratically.
                let sq = tape.mul_cv(weights[i], weights[i]);
                let fsq = bank.f(PlinRole::Attention).eval(tape, sq);
                let self_loop = tape.mul_cv(scales[i], fsq);
                out.push(tape.add_cv(edge, self_loop));
            } else {
                out.push(edge);
            }
        }
    }
    out
}

fn expand_cv(tape: &mut Tape, count: Cv, n: usize) -> Vec<Cv> {
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let diff = tape.sub_cv(count, Cv::C(i as f64));
        let dist = tape.abs_cv(diff);
        let tri = tape.sub_cv(Cv::C(1.0), dist);
        out.push(tape.relu_cv(tri));
    }
    out
}

fn confidence_cv(
    tape: &mut Tape,
    weights: &[Cv],
    distance: &SquareMatrix,
    bank: &BankRecording,
    n: usize,
) -> (Cv, Cv, Cv) {
    let mut terms = Vec::with_capacity(n * n);
    for &w in weights {
        let fw = bank.f(PlinRole::ConfAttention).eval(tape, w);
        let centered = tape.sub_cv(fw, Cv::C(0.5));
        terms.push(tape.abs_cv(centered));
    }
    let sum = tape.sum_cv(&terms);
    let conf_attention = tape.mul_const_cv(sum, 1.0 / n as f64);

    terms.clear();
    for i in 0..n {
        for j in 0..n {
            let fd = bank
                .f(PlinRole::ConfDistance)
                .eval(tape, Cv::C(distance.get(i, j)));
            let centered = tape.sub_cv(fd, Cv::C(0.5));
            terms.push(tape.abs_cv(centered));
        }
    }
    let sum = tape.sum_cv(&terms);
    let conf_distance = tape.mul_const_cv(sum, 1.0 / (n * n) as f64);

    let p = tape.add_cv(conf_attention, conf_distance);
    let scale = bank.f(PlinRole::OutputScale).eval(tape, p);
    (conf_attention, conf_distance, scale)
}

// ---------------------------------------------------------------------
// Plain-value forms of the individual pipeline steps.
// ---------------------------------------------------------------------

/// Outer product `A_ij = a_i a_j`.
pub fn attention_matrix(weights: &[f64]) -> SquareMatrix {
    SquareMatrix::from_fn(weights.len(), |i, j| weights[i] * weights[j])
}

/// `D_ij = 1 - IoU(b_i, b_j)` with the diagonal pinned to exactly 0:
/// self-distance is zero by definition even for degenerate boxes.
pub fn distance_matrix(boxes: &[BoundingBox]) -> SquareMatrix {
    let n = boxes.len();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - boxes[i].iou(&boxes[j]);
            m.set(i, j, d);
            m.set(j, i, d);
        }
    }
    m
}

/// `A-tilde = f1(A) ⊙ f2(D)`; the zero diagonal of D removes self-loops.
pub fn dedup_intra(
    attention: &SquareMatrix,
    distance: &SquareMatrix,
    bank: &PlinBank,
) -> SquareMatrix {
    let f1 = bank.f(PlinRole::Attention);
    let f2 = bank.f(PlinRole::Distance);
    SquareMatrix::from_fn(attention.n(), |i, j| {
        f1.eval(attention.get(i, j)) * f2.eval(distance.get(i, j))
    })
}

/// Row-similarity of proposals: `X = f4(A) ⊙ f5(D)` and
/// `Sim_ij = f3(1 - |a_i - a_j|) · prod_k f3(1 - |X_ik - X_jk|)`.
pub fn similarity_matrix(
    weights: &[f64],
    attention: &SquareMatrix,
    distance: &SquareMatrix,
    bank: &PlinBank,
) -> (SquareMatrix, SquareMatrix) {
    let n = weights.len();
    let f3 = bank.f(PlinRole::Similarity);
    let f4 = bank.f(PlinRole::XAttention);
    let f5 = bank.f(PlinRole::XDistance);
    let comparison = SquareMatrix::from_fn(n, |i, j| {
        f4.eval(attention.get(i, j)) * f5.eval(distance.get(i, j))
    });
    let mut similarity = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut acc = f3.eval(crate::autodiff::val_oma(weights[i], weights[j]));
            for k in 0..n {
                acc *= f3.eval(crate::autodiff::val_oma(
                    comparison.get(i, k),
                    comparison.get(j, k),
                ));
            }
            similarity.set(i, j, acc);
            similarity.set(j, i, acc);
        }
    }
    (comparison, similarity)
}

/// `s_i = 1 / sum_j Sim_ij`.
pub fn vertex_scales(similarity: &SquareMatrix) -> Vec<f64> {
    let n = similarity.n();
    (0..n)
        .map(|i| {
            let mut row_sum = 0.0;
            for j in 0..n {
                row_sum += similarity.get(i, j);
            }
            assert!(row_sum > 0.0, "similarity row sum must be positive");
            1.0 / row_sum
        })
        .collect()
}

/// `C = A-tilde ⊙ s sᵀ + diag(s ⊙ f1(a ⊙ a))`.
pub fn count_matrix(
    dedup: &SquareMatrix,
    scales: &[f64],
    weights: &[f64],
    bank: &PlinBank,
) -> SquareMatrix {
    let f1 = bank.f(PlinRole::Attention);
    SquareMatrix::from_fn(dedup.n(), |i, j| {
        let edge = dedup.get(i, j) * (scales[i] * scales[j]);
        if i == j {
            edge + scales[i] * f1.eval(weights[i] * weights[i])
        } else {
            edge
        }
    })
}

/// `c = sqrt(sum C)`.
pub fn count_scalar(count_matrix: &SquareMatrix) -> f64 {
    math::sqrt(count_matrix.sum())
}

/// Expands a count in `[0, n]` to the `(n+1)`-vector
/// `o_i = max(0, 1 - |c - i|)`: one-hot at integers, a two-point linear
/// interpolation in between.
pub fn expand_count(count: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| (1.0 - (count - i as f64).abs()).max(0.0))
        .collect()
}

/// Confidence scaling: mean distances of `f6(a)` and `f7(D)` from 0.5,
/// and the output scaled by `f8(p_a + p_D)`.
pub fn confidence(
    weights: &[f64],
    distance: &SquareMatrix,
    expanded: &[f64],
    bank: &PlinBank,
) -> (f64, f64, Vec<f64>) {
    let n = weights.len();
    let mut sum = 0.0;
    for &w in weights {
        sum += (bank.f(PlinRole::ConfAttention).eval(w) - 0.5).abs();
    }
    let conf_attention = sum * (1.0 / n as f64);

    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += (bank.f(PlinRole::ConfDistance).eval(distance.get(i, j)) - 0.5).abs();
        }
    }
    let conf_distance = sum * (1.0 / (n * n) as f64);

    let scale = bank
        .f(PlinRole::OutputScale)
        .eval(conf_attention + conf_distance);
    let output = expanded.iter().map(|&o| scale * o).collect();
    (conf_attention, conf_distance, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    fn unit_box() -> BoundingBox {
        BoundingBox::new(0.1, 0.1, 0.3, 0.3)
    }

    fn disjoint_box() -> BoundingBox {
        BoundingBox::new(0.6, 0.6, 0.8, 0.8)
    }

    #[test]
    fn iou_examples() {
        let b = unit_box();
        assert_eq!(b.iou(&b), 1.0);
        assert_eq!(unit_box().iou(&disjoint_box()), 0.0);
        // Intersection 0.125, union 0.375.
        let b1 = BoundingBox::new(0.0, 0.0, 0.5, 0.5);
        let b2 = BoundingBox::new(0.25, 0.0, 0.75, 0.5);
        assert_eq!(b1.iou(&b2), 1.0 / 3.0);
    }

    #[test]
    fn iou_degenerate_boxes_are_disjoint() {
        let p = BoundingBox::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(p.iou(&p), 0.0);
        assert_eq!(p.iou(&unit_box()), 0.0);
    }

    #[test]
    fn attention_matrix_examples() {
        let a = attention_matrix(&[1.0, 0.0]);
        assert_eq!(a.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        let a = attention_matrix(&[0.5, 0.5]);
        assert!(a.as_slice().iter().all(|&v| v == 0.25));
        let a = attention_matrix(&[1.0, 1.0, 1.0]);
        assert!(a.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn distance_matrix_examples() {
        let same = distance_matrix(&[unit_box(), unit_box(), unit_box()]);
        assert!(same.as_slice().iter().all(|&v| v == 0.0));

        let apart = distance_matrix(&[unit_box(), disjoint_box()]);
        assert_eq!(apart.get(0, 0), 0.0);
        assert_eq!(apart.get(0, 1), 1.0);

        let b1 = BoundingBox::new(0.0, 0.0, 0.5, 0.5);
        let b2 = BoundingBox::new(0.25, 0.0, 0.75, 0.5);
        let d = distance_matrix(&[b1, b2]);
        assert!((d.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    /// Three proposals, unit weights, boxes 1 and 2 identical and box 3
    /// disjoint: the worked grid the matrix examples hand-evaluate.
    fn three_proposal_case() -> (Vec<f64>, Vec<BoundingBox>) {
        (
            alloc::vec![1.0, 1.0, 1.0],
            alloc::vec![unit_box(), unit_box(), disjoint_box()],
        )
    }

    #[test]
    fn dedup_three_proposals() {
        let (w, b) = three_proposal_case();
        let bank = PlinBank::identity(16);
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        assert_eq!(dd.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dedup_diagonal_always_zero_and_zero_weight_rows_vanish() {
        let bank = PlinBank::identity(16);
        let w = alloc::vec![0.7, 0.0, 0.4];
        let b = alloc::vec![unit_box(), disjoint_box(), BoundingBox::square(0.4, 0.1, 0.25)];
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        for i in 0..3 {
            assert_eq!(dd.get(i, i), 0.0);
            assert_eq!(dd.get(1, i), 0.0);
            assert_eq!(dd.get(i, 1), 0.0);
        }
    }

    #[test]
    fn similarity_three_proposals() {
        let (w, b) = three_proposal_case();
        let bank = PlinBank::identity(16);
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        assert_eq!(sim.as_slice(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn similarity_opposite_weights_is_zero() {
        let bank = PlinBank::identity(16);
        let w = alloc::vec![1.0, 0.0];
        let b = alloc::vec![unit_box(), disjoint_box()];
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        assert_eq!(sim.get(0, 1), 0.0);
        assert_eq!(sim.get(0, 0), 1.0);
        assert_eq!(sim.get(1, 1), 1.0);
    }

    #[test]
    fn vertex_scales_examples() {
        let (w, b) = three_proposal_case();
        let bank = PlinBank::identity(16);
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        assert_eq!(vertex_scales(&sim), alloc::vec![0.5, 0.5, 1.0]);

        // k exact duplicates -> each scale 1/k.
        let w = alloc::vec![1.0; 4];
        let b = alloc::vec![unit_box(); 4];
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        assert_eq!(vertex_scales(&sim), alloc::vec![0.25; 4]);
    }

    #[test]
    fn count_matrix_three_proposals_sums_to_four() {
        let (w, b) = three_proposal_case();
        let bank = PlinBank::identity(16);
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        let s = vertex_scales(&sim);
        let c = count_matrix(&dd, &s, &w, &bank);
        assert_eq!(c.sum(), 4.0);
        assert_eq!(count_scalar(&c), 2.0);
    }

    #[test]
    fn count_matrix_single_proposal() {
        let bank = PlinBank::identity(16);
        let w = alloc::vec![1.0];
        let b = alloc::vec![unit_box()];
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        let s = vertex_scales(&sim);
        let c = count_matrix(&dd, &s, &w, &bank);
        assert_eq!(c.as_slice(), &[1.0]);
    }

    #[test]
    fn count_matrix_zero_weights_is_zero() {
        let bank = PlinBank::identity(16);
        let w = alloc::vec![0.0, 0.0, 0.0];
        let b = alloc::vec![unit_box(), disjoint_box(), BoundingBox::square(0.2, 0.6, 0.2)];
        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        let (_, sim) = similarity_matrix(&w, &att, &dist, &bank);
        let s = vertex_scales(&sim);
        let c = count_matrix(&dd, &s, &w, &bank);
        assert!(c.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(count_scalar(&c), 0.0);
    }

    #[test]
    fn expand_count_examples() {
        assert_eq!(expand_count(2.0, 4), alloc::vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(expand_count(0.0, 3), alloc::vec![1.0, 0.0, 0.0, 0.0]);

        let o = expand_count(1.94, 4);
        assert!((o[1] - 0.06).abs() < 1e-12);
        assert!((o[2] - 0.94).abs() < 1e-12);
        assert_eq!(o[0], 0.0);
        assert_eq!(o[3], 0.0);
        assert_eq!(o[4], 0.0);
    }

    #[test]
    fn confidence_examples() {
        let bank = PlinBank::identity(16);
        // Binary weights, binary off-diagonal distances.
        let w = alloc::vec![1.0, 0.0, 1.0];
        let b = alloc::vec![unit_box(), disjoint_box(), BoundingBox::square(0.1, 0.6, 0.2)];
        let dist = distance_matrix(&b);
        let o = alloc::vec![0.0, 1.0, 0.0, 0.0];
        let (pa, pd, scaled) = confidence(&w, &dist, &o, &bank);
        assert_eq!(pa, 0.5);
        assert_eq!(pd, 0.5);
        assert_eq!(scaled, o);

        // All weights at 0.5 carry no confidence.
        let w = alloc::vec![0.5; 3];
        let (pa, _, _) = confidence(&w, &dist, &o, &bank);
        assert_eq!(pa, 0.0);
    }

    #[test]
    fn forward_matches_composed_ops() {
        let bank =
            PlinBank::from_weights(core::array::from_fn(|k| {
                (0..16).map(|i| 0.2 + ((i * 7 + k * 3) % 11) as f64 * 0.3).collect()
            }))
            .unwrap();
        let w = alloc::vec![0.9, 0.45, 0.0, 0.7];
        let b = alloc::vec![
            unit_box(),
            BoundingBox::square(0.15, 0.1, 0.2),
            disjoint_box(),
            BoundingBox::square(0.3, 0.5, 0.3),
        ];
        let input = ComponentInput::new(w.clone(), b.clone()).unwrap();
        let trace = forward(&input, &bank, true);

        let att = attention_matrix(&w);
        let dist = distance_matrix(&b);
        let dd = dedup_intra(&att, &dist, &bank);
        let (x, sim) = similarity_matrix(&w, &att, &dist, &bank);
        let s = vertex_scales(&sim);
        let cm = count_matrix(&dd, &s, &w, &bank);
        let c = count_scalar(&cm);
        let o = expand_count(c, w.len());
        let (pa, pd, scaled) = confidence(&w, &dist, &o, &bank);

        assert_eq!(trace.attention, att);
        assert_eq!(trace.distance, dist);
        assert_eq!(trace.dedup, dd);
        assert_eq!(trace.comparison, x);
        assert_eq!(trace.similarity, sim);
        assert_eq!(trace.scales, s);
        assert_eq!(trace.count_matrix, cm);
        assert_eq!(trace.count.to_bits(), c.to_bits());
        assert_eq!(trace.expanded, o);
        assert_eq!(trace.conf_attention.to_bits(), pa.to_bits());
        assert_eq!(trace.conf_distance.to_bits(), pd.to_bits());
        assert_eq!(trace.output, scaled);
    }

    #[test]
    fn forward_figure_one_scenario() {
        // Four proposals covering two relevant objects: proposals 1 and 2
        // duplicate one object, proposal 3 is a second object, proposal 4
        // is irrelevant.
        let bank = PlinBank::identity(16);
        let input = ComponentInput::new(
            alloc::vec![1.0, 1.0, 1.0, 0.0],
            alloc::vec![
                unit_box(),
                unit_box(),
                disjoint_box(),
                BoundingBox::square(0.6, 0.1, 0.2),
            ],
        )
        .unwrap();
        let trace = forward(&input, &bank, true);
        assert!((trace.count - 2.0).abs() < 1e-12);
        let expect = alloc::vec![0.0, 0.0, 1.0, 0.0, 0.0];
        for (o, e) in trace.output.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_all_zero_weights() {
        let bank = PlinBank::identity(16);
        let input = ComponentInput::new(
            alloc::vec![0.0, 0.0, 0.0],
            alloc::vec![unit_box(), unit_box(), disjoint_box()],
        )
        .unwrap();
        let trace = forward(&input, &bank, true);
        assert_eq!(trace.count, 0.0);
        assert_eq!(trace.expanded[0], 1.0);
        // expanded[0] is 1, so output[0] is exactly the confidence scale
        // f8(p_a + p_D).
        let scale = bank
            .f(PlinRole::OutputScale)
            .eval(trace.conf_attention + trace.conf_distance);
        assert_eq!(trace.output[0], scale);
        assert!(trace.output[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_without_confidence_passes_expanded_through() {
        let bank = PlinBank::identity(16);
        let input = ComponentInput::new(
            alloc::vec![0.8, 0.3],
            alloc::vec![unit_box(), BoundingBox::square(0.15, 0.12, 0.2)],
        )
        .unwrap();
        let trace = forward(&input, &bank, false);
        assert_eq!(trace.output, trace.expanded);
    }

    #[test]
    fn input_validation() {
        assert_eq!(
            ComponentInput::new(alloc::vec![0.5], alloc::vec![]).unwrap_err(),
            InputError::LengthMismatch { weights: 1, boxes: 0 }
        );
        assert_eq!(
            ComponentInput::new(alloc::vec![], alloc::vec![]).unwrap_err(),
            InputError::Empty
        );
        assert_eq!(
            ComponentInput::new(alloc::vec![1.5], alloc::vec![unit_box()]).unwrap_err(),
            InputError::WeightOutOfRange { index: 0 }
        );
        // Sub-tolerance drift is clamped, not rejected.
        let input = ComponentInput::new(alloc::vec![1.0 + 1e-12], alloc::vec![unit_box()]).unwrap();
        assert_eq!(input.weights()[0], 1.0);
    }

    #[test]
    fn tape_forward_matches_value_forward_bitwise() {
        let bank =
            PlinBank::from_weights(core::array::from_fn(|k| {
                (0..16)
                    .map(|i| 0.1 + ((i * 5 + k * 7) % 13) as f64 * 0.21)
                    .collect()
            }))
            .unwrap();
        let w = alloc::vec![0.13, 0.87, 0.5, 0.02, 0.66];
        let b = alloc::vec![
            unit_box(),
            BoundingBox::square(0.12, 0.08, 0.22),
            disjoint_box(),
            BoundingBox::square(0.4, 0.4, 0.35),
            BoundingBox::square(0.05, 0.55, 0.3),
        ];
        let input = ComponentInput::new(w.clone(), b.clone()).unwrap();
        let value_trace = forward(&input, &bank, true);

        let mut tape = Tape::new();
        let bank_rec = bank.record(&mut tape);
        let weight_cvs: Vec<Cv> = w.iter().map(|&x| Cv::V(tape.input(x))).collect();
        let tape_trace = forward_cv(&mut tape, &weight_cvs, &b, &bank_rec, true).values(&tape);

        assert_eq!(value_trace.count.to_bits(), tape_trace.count.to_bits());
        for (a, b) in value_trace.output.iter().zip(&tape_trace.output) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(value_trace.similarity, tape_trace.similarity);
        assert_eq!(value_trace.count_matrix, tape_trace.count_matrix);
        assert_eq!(value_trace.scales, tape_trace.scales);
        assert_eq!(
            value_trace.conf_attention.to_bits(),
            tape_trace.conf_attention.to_bits()
        );
        assert_eq!(
            value_trace.conf_distance.to_bits(),
            tape_trace.conf_distance.to_bits()
        );
    }

    #[test]
    fn count_gradient_matches_finite_differences() {
        // Smooth interior point: gradients of c with respect to the
        // attention weights.
        let bank = PlinBank::identity(16);
        let boxes = alloc::vec![
            unit_box(),
            BoundingBox::square(0.14, 0.12, 0.2),
            disjoint_box(),
            BoundingBox::square(0.42, 0.13, 0.27),
        ];
        let point = [0.83, 0.41, 0.57, 0.22];
        let report = check_gradients(
            |tape, vars| {
                let bank_rec = bank.as_const_cv();
                let weight_cvs: Vec<Cv> = vars.iter().map(|&v| Cv::V(v)).collect();
                let trace = forward_cv(tape, &weight_cvs, &boxes, &bank_rec, true);
                trace.count.as_var().expect("count depends on weights")
            },
            &point,
            1e-6,
        );
        assert!(
            report.max_rel_err() < 1e-4,
            "worst coordinate: {:?}",
            report.worst()
        );
    }
}
