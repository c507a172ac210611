//! Deterministic generator for the toy counting task.
//!
//! A sample places `n` square boxes of side `l` uniformly in the unit
//! square, marks a uniform number of them (0 through `max_count`) as true
//! objects, scores every box by its maximum IoU with any true box, and
//! mixes that score with uniform noise: `a = (1 - q) score + q z`. `l`
//! controls how much boxes overlap; `q` trades signal for noise.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::rand_core::RngCore;

use crate::counter::BoundingBox;
use crate::rng::{next_index, next_range, next_unit, SampleStream, StreamDomain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyConfigError {
    SideLengthOutOfRange,
    NoiseOutOfRange,
    TooManyTrueBoxes,
    NoBoxes,
}

impl fmt::Display for ToyConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyConfigError::SideLengthOutOfRange => write!(f, "side length must lie in (0, 1]"),
            ToyConfigError::NoiseOutOfRange => write!(f, "noise must lie in [0, 1]"),
            ToyConfigError::TooManyTrueBoxes => write!(f, "max_count must not exceed n_boxes"),
            ToyConfigError::NoBoxes => write!(f, "need at least one box"),
        }
    }
}

/// Parameters of the toy task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    /// Side length of every box, in (0, 1].
    pub l: f64,
    /// Noise mixing factor in [0, 1]: 0 is pure score, 1 is pure noise.
    pub q: f64,
    pub n_boxes: usize,
    /// Labels are drawn uniformly from `0..=max_count`.
    pub max_count: usize,
    pub seed: u64,
}

impl ToyConfig {
    /// Standard task: 10 boxes, labels 0 through 10.
    pub fn new(l: f64, q: f64, seed: u64) -> Result<Self, ToyConfigError> {
        let cfg = ToyConfig {
            l,
            q,
            n_boxes: 10,
            max_count: 10,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ToyConfigError> {
        if !(self.l > 0.0 && self.l <= 1.0) {
            return Err(ToyConfigError::SideLengthOutOfRange);
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(ToyConfigError::NoiseOutOfRange);
        }
        if self.n_boxes == 0 {
            return Err(ToyConfigError::NoBoxes);
        }
        if self.max_count > self.n_boxes {
            return Err(ToyConfigError::TooManyTrueBoxes);
        }
        Ok(())
    }
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub boxes: Vec<BoundingBox>,
    /// Mixed attention weights, one per box, in [0, 1].
    pub weights: Vec<f64>,
    /// Which boxes were chosen as true objects.
    pub true_flags: Vec<bool>,
    /// The classification label: number of true boxes.
    pub true_count: usize,
    /// Max-IoU score of each box against the true boxes (diagnostic).
    pub scores: Vec<f64>,
}

/// Draws one sample. The draw order (label, box corners, true subset,
/// noise) is part of the reproducibility contract.
pub fn generate_sample(cfg: &ToyConfig, rng: &mut impl RngCore) -> ToySample {
    cfg.validate().expect("invalid toy config");
    let n = cfg.n_boxes;

    let true_count = next_index(rng, cfg.max_count as u64 + 1) as usize;

    let hi = 1.0 - cfg.l;
    let boxes: Vec<BoundingBox> = (0..n)
        .map(|_| {
            let x = next_range(rng, 0.0, hi);
            let y = next_range(rng, 0.0, hi);
            BoundingBox::square(x, y, cfg.l)
        })
        .collect();

    // Partial Fisher-Yates: the first true_count slots become the true
    // subset, drawn without replacement.
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..true_count {
        let j = k + next_index(rng, (n - k) as u64) as usize;
        order.swap(k, j);
    }
    let mut true_flags = vec![false; n];
    for &i in &order[..true_count] {
        true_flags[i] = true;
    }

    let mut scores = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for b in &boxes {
        let mut score = 0.0;
        for (t, flag) in boxes.iter().zip(&true_flags) {
            if *flag {
                score = b.iou(t).max(score);
            }
        }
        let z = next_unit(rng);
        weights.push((1.0 - cfg.q) * score + cfg.q * z);
        scores.push(score);
    }

    ToySample {
        boxes,
        weights,
        true_flags,
        true_count,
        scores,
    }
}

/// Generates `count` independent samples for one batch of a stream
/// domain. Deterministic in `(cfg.seed, domain, batch)`; different batch
/// indices use disjoint substreams.
pub fn generate_batch(
    cfg: &ToyConfig,
    count: usize,
    domain: StreamDomain,
    batch: u64,
) -> Vec<ToySample> {
    assert!(count > 0, "batch must be non-empty");
    let stream = SampleStream::new(cfg.seed, domain, batch);
    (0..count)
        .map(|i| generate_sample(cfg, &mut stream.rng_for(i as u64)))
        .collect()
}
