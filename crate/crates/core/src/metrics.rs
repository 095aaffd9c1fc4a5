//! Pixel confusion counts and the precision / recall / F1 / IoU report.
//! Counts are pooled over every evaluated pixel (micro-averaging).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// A binary mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: Shape,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                if v == 0.0 {
                    Ok(0)
                } else if v == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::Validation(format!("mask value {v} is not binary")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Mask { shape: t.shape(), data })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| T::lit(v as f64)).collect()).expect("mask shape")
    }

    /// Mirror every row.
    pub fn flip_horizontal(&self) -> Mask {
        let w = self.shape.w().max(1);
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Mask { shape: self.shape, data }
    }
}

/// `1` where `p >= threshold`.
pub fn binarize<T: Float>(probabilities: &Tensor<T>, threshold: f64) -> Result<Mask> {
    check_threshold(threshold)?;
    let data = probabilities
        .data()
        .iter()
        .map(|&p| u8::from(p.as_f64() >= threshold))
        .collect();
    Ok(Mask {
        shape: probabilities.shape(),
        data,
    })
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::config(
            "model.threshold",
            format!("{threshold} must lie strictly between 0 and 1"),
        ))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// Add the per-pixel outcomes of `pred` against `truth`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Validation(format!(
                "prediction has {} pixels, ground truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                (0, 0) => self.tn += 1,
                _ => {
                    return Err(Error::Validation(format!(
                        "masks must be binary, found prediction {p} / truth {t}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self> {
        let mut c = ConfusionCounts::default();
        c.accumulate(pred, truth)?;
        Ok(c)
    }
}

/// Which ratios had a zero denominator (and were reported as 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.iou
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn report(counts: ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_) = (counts.tp as f64, counts.fp as f64, counts.fn_ as f64);
    let (precision, dp) = ratio(tp, tp + fp);
    let (recall, dr) = ratio(tp, tp + fn_);
    let (f1, df) = ratio(2.0 * precision * recall, precision + recall);
    let (iou, di) = ratio(tp, tp + fp + fn_);
    MetricsReport {
        precision,
        recall,
        f1,
        iou,
        counts,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            f1: df,
            iou: di,
        },
    }
}

/// Two-decimal percentage, e.g. `0.7335 -> "73.35"`.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

pub fn parse_percent(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map(|v| v / 100.0)
        .map_err(|_| Error::Validation(format!("not a percentage: {s:?}")))
}

impl MetricsReport {
    /// `key=value` lines: metrics as two-decimal percentages, then raw counts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("iou", self.iou),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
        ] {
            let _ = writeln!(s, "{k}={}", percent(v));
        }
        let c = &self.counts;
        let _ = writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn);
        let d = &self.degenerate;
        let flags: Vec<&str> = [
            (d.precision, "precision"),
            (d.recall, "recall"),
            (d.f1, "f1"),
            (d.iou, "iou"),
        ]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect();
        let _ = writeln!(s, "degenerate={}", if flags.is_empty() { "none".to_string() } else { flags.join(",") });
        s
    }

    /// Parse the metric lines of [`to_text`](Self::to_text) back into fractions
    /// `(iou, f1, precision, recall)`.
    pub fn parse_text_metrics(text: &str) -> Result<[f64; 4]> {
        let mut out = [None; 4];
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let slot = match k.trim() {
                "iou" => 0,
                "f1" => 1,
                "precision" => 2,
                "recall" => 3,
                _ => continue,
            };
            out[slot] = Some(parse_percent(v)?);
        }
        let mut vals = [0.0; 4];
        for (i, o) in out.iter().enumerate() {
            vals[i] = o.ok_or_else(|| Error::Validation("report is missing a metric line".into()))?;
        }
        Ok(vals)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
