use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::BinaryMask;

/// Pixel counts of one prediction against its ground truth.
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

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// The same counts with foreground and background exchanged.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dims(
            "confusion_counts",
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`, or `None` when the class is neither present nor
/// predicted.
pub fn iou(c: &ConfusionCounts) -> Option<f64> {
    let denom = c.tp + c.fp + c.fn_;
    (denom > 0).then(|| c.tp as f64 / denom as f64)
}

/// Per-class IoU of pooled counts and their mean over classes with a
/// non-empty denominator. `None` when no class qualifies.
pub fn class_mean_iou(per_class: &BTreeMap<usize, ConfusionCounts>) -> Option<(f64, BTreeMap<usize, f64>)> {
    let ious: BTreeMap<usize, f64> = per_class
        .iter()
        .filter_map(|(k, c)| iou(c).map(|v| (*k, v)))
        .collect();
    if ious.is_empty() {
        return None;
    }
    let mean = ious.values().sum::<f64>() / ious.len() as f64;
    Some((mean, ious))
}

/// Mean of the foreground and background IoU of pooled counts. A side that
/// never occurs in either mask counts as perfectly segmented.
pub fn binary_iou(foreground: &ConfusionCounts, background: &ConfusionCounts) -> f64 {
    let fg = iou(foreground).unwrap_or(1.0);
    let bg = iou(background).unwrap_or(1.0);
    0.5 * (fg + bg)
}

/// Foreground IoU of one episode; an empty prediction of an empty mask
/// scores 1.
pub fn episode_iou(c: &ConfusionCounts) -> f64 {
    iou(c).unwrap_or(1.0)
}

/// Mean of per-episode foreground IoUs.
pub fn positive_iou(per_episode: &[f64]) -> Result<f64> {
    if per_episode.is_empty() {
        return Err(Error::InvalidArgument("positive IoU needs at least one episode".into()));
    }
    Ok(per_episode.iter().sum::<f64>() / per_episode.len() as f64)
}

/// Arithmetic mean of per-fold scores.
pub fn fold_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no fold values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
