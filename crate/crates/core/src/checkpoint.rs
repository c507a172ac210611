//! Plain-text checkpoint format.
//!
//! A checkpoint is a `key = value` file holding the activation-function
//! weight table, the classifier head, and enough metadata to re-run the
//! evaluation it came from. Floats are written with 17 significant
//! digits, which round-trips `f64` exactly, so write → read → write is
//! byte-identical.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use crate::plin::{PlinBank, PlinError, PlinRole};
use crate::train::{ClassifierHead, ModelKind};

pub const FORMAT_TAG: &str = "boxcount-checkpoint-v1";

/// Formats a float with 17 significant digits (lossless for `f64`).
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// FNV-1a, used to fingerprint training configurations in metadata.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub use_confidence: bool,
    pub nms_iou: f64,
    /// Toy-task parameters the model was trained on.
    pub l: f64,
    pub q: f64,
    pub seed: u64,
    pub n_boxes: usize,
    pub max_count: usize,
    /// FNV-1a fingerprint of the canonical training-config string.
    pub config_hash: u64,
    pub bank: PlinBank,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    UnknownFormat,
    MissingKey(String),
    BadValue(String),
    WrongCount(String),
    Plin(PlinError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::UnknownFormat => write!(f, "not a {FORMAT_TAG} file"),
            CheckpointError::MissingKey(k) => write!(f, "missing key `{k}`"),
            CheckpointError::BadValue(k) => write!(f, "unparseable value for `{k}`"),
            CheckpointError::WrongCount(k) => write!(f, "wrong number of values for `{k}`"),
            CheckpointError::Plin(e) => write!(f, "invalid activation weights: {e}"),
        }
    }
}

impl From<PlinError> for CheckpointError {
    fn from(e: PlinError) -> Self {
        CheckpointError::Plin(e)
    }
}

fn write_floats(out: &mut String, key: &str, values: &[f64]) {
    let _ = write!(out, "{key} =");
    for v in values {
        let _ = write!(out, " {}", format_float(*v));
    }
    out.push('\n');
}

impl Checkpoint {
    /// Serializes in a fixed key order; see the module docs for the
    /// round-trip guarantee.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = {FORMAT_TAG}");
        let _ = writeln!(out, "model = {}", self.kind.as_str());
        let _ = writeln!(out, "d = {}", self.bank.segments());
        let _ = writeln!(out, "n_boxes = {}", self.n_boxes);
        let _ = writeln!(out, "max_count = {}", self.max_count);
        let _ = writeln!(out, "l = {}", format_float(self.l));
        let _ = writeln!(out, "q = {}", format_float(self.q));
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "confidence = {}",
            if self.use_confidence { "on" } else { "off" }
        );
        let _ = writeln!(out, "nms_iou = {}", format_float(self.nms_iou));
        let _ = writeln!(out, "config_hash = {:016x}", self.config_hash);
        let _ = writeln!(out, "rng = {}", crate::rng::ALGORITHM);
        for role in PlinRole::ALL {
            write_floats(
                &mut out,
                &format!("plin.{}", role.label()),
                self.bank.f(role).weights(),
            );
        }
        for class in 0..self.head.classes() {
            write_floats(
                &mut out,
                &format!("head.w{class}"),
                self.head.class_weights(class),
            );
        }
        write_floats(&mut out, "head.bias", self.head.bias());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim(), v.trim());
            }
        }

        let get = |k: &str| -> Result<&str, CheckpointError> {
            map.get(k).copied().ok_or_else(|| CheckpointError::MissingKey(k.to_string()))
        };
        let parse_f64 = |k: &str| -> Result<f64, CheckpointError> {
            get(k)?.parse().map_err(|_| CheckpointError::BadValue(k.to_string()))
        };
        let parse_usize = |k: &str| -> Result<usize, CheckpointError> {
            get(k)?.parse().map_err(|_| CheckpointError::BadValue(k.to_string()))
        };
        let parse_floats = |k: &str, count: usize| -> Result<Vec<f64>, CheckpointError> {
            let vals: Result<Vec<f64>, _> =
                get(k)?.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|_| CheckpointError::BadValue(k.to_string()))?;
            if vals.len() != count {
                return Err(CheckpointError::WrongCount(k.to_string()));
            }
            Ok(vals)
        };

        if get("format")? != FORMAT_TAG {
            return Err(CheckpointError::UnknownFormat);
        }
        let kind: ModelKind = get("model")?
            .parse()
            .map_err(|_| CheckpointError::BadValue("model".to_string()))?;
        let d = parse_usize("d")?;
        let n_boxes = parse_usize("n_boxes")?;
        let max_count = parse_usize("max_count")?;
        let l = parse_f64("l")?;
        let q = parse_f64("q")?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| CheckpointError::BadValue("seed".to_string()))?;
        let use_confidence = match get("confidence")? {
            "on" => true,
            "off" => false,
            _ => return Err(CheckpointError::BadValue("confidence".to_string())),
        };
        let nms_iou = parse_f64("nms_iou")?;
        let config_hash = u64::from_str_radix(get("config_hash")?, 16)
            .map_err(|_| CheckpointError::BadValue("config_hash".to_string()))?;

        let mut rows: [Vec<f64>; 8] = Default::default();
        for role in PlinRole::ALL {
            rows[role.index()] = parse_floats(&format!("plin.{}", role.label()), d)?;
        }
        let bank = PlinBank::from_weights(rows)?;

        let classes = max_count + 1;
        let features = n_boxes + 1;
        let mut head_rows = Vec::with_capacity(classes);
        for class in 0..classes {
            head_rows.push(parse_floats(&format!("head.w{class}"), features)?);
        }
        let bias = parse_floats("head.bias", classes)?;
        let head = ClassifierHead::from_parts(head_rows, bias);

        Ok(Checkpoint {
            kind,
            use_confidence,
            nms_iou,
            l,
            q,
            seed,
            n_boxes,
            max_count,
            config_hash,
            bank,
            head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut bank = PlinBank::identity(4);
        let mut flat = bank.flat_weights();
        flat[3] = 0.1234567890123456789;
        flat[17] = -2.5;
        bank.set_flat_weights(&flat).unwrap();
        let mut head = ClassifierHead::zeros(4, 3);
        head.set(1, 2, 1.0 / 3.0);
        head.set_bias(0, -7.25);
        Checkpoint {
            kind: ModelKind::Counting,
            use_confidence: true,
            nms_iou: 0.5,
            l: 0.3,
            q: 0.25,
            seed: 9,
            n_boxes: 3,
            max_count: 2,
            config_hash: 0xdeadbeef12345678,
            bank,
            head,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let text = ck.to_text();
        let parsed = Checkpoint::from_text(&text).unwrap();
        assert_eq!(parsed, ck);
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn seventeen_digit_floats_round_trip() {
        for &x in &[1.0 / 3.0, 0.1, 1e-300, -0.0, 123456.789012345678, 5e-324] {
            let s = format_float(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn parse_errors_are_specific() {
        assert_eq!(
            Checkpoint::from_text("format = something-else\n").unwrap_err(),
            CheckpointError::UnknownFormat
        );
        let ck = sample_checkpoint();
        let text = ck.to_text().replace("\nq = ", "\nq_gone = ");
        assert_eq!(
            Checkpoint::from_text(&text).unwrap_err(),
            CheckpointError::MissingKey("q".to_string())
        );
    }
}
