//! Segmentation metrics and the training objective.
//!
//! Evaluation: predictions are probability maps, ground truth is binary.
//! Probabilities binarize at [`EVAL_THRESHOLD`] (strictly greater than).
//! Dataset scores average per-image metrics, never pooled pixel counts, so
//! small objects are not drowned out by large ones.
//!
//! Convention for an image where prediction and ground truth are both empty
//! (`tp + fp + fn == 0`): dice, iou, precision and recall all score 1.
//! A prediction that misses a nonempty ground truth entirely scores 0.
//!
//! Training: each side output's logits are upsampled to label resolution and
//! charged mean binary cross entropy plus soft dice; stage losses sum
//! unweighted.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability cutoff for binarizing predictions.
pub const EVAL_THRESHOLD: f64 = 0.5;

/// Floor for probabilities inside logs in the value-level losses.
const PROB_FLOOR: f64 = 1e-12;

/// Pixel-level confusion tallies for one binarized prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `2tp / (2tp + fp + fn)`, 1 when both sides are empty.
    pub fn dice(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2.0 * self.tp as f64 + self.fp as f64 + self.fn_ as f64)
    }

    /// `tp / (tp + fp + fn)`, 1 when both sides are empty.
    pub fn iou(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        self.tp as f64 / (self.tp + self.fp + self.fn_) as f64
    }

    /// `tp / (tp + fp)`; an empty prediction against a nonempty truth is 0.
    pub fn precision(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        if self.tp + self.fp == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fp) as f64
    }

    /// `tp / (tp + fn)`; a nonempty prediction against an empty truth is 0.
    pub fn recall(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        if self.tp + self.fn_ == 0 {
            return 0.0;
        }
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid(op, "empty tensors"));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite { op, what: "prediction".into() });
    }
    Ok(())
}

fn check_binary(op: &'static str, gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "ground truth must be exactly 0 or 1"));
    }
    Ok(())
}

/// Tally a probability map against a binary mask at `thresh`.
pub fn confusion(pred: &Tensor, gt: &Tensor, thresh: f64) -> Result<ConfusionCounts> {
    check_pair("confusion", pred, gt)?;
    check_binary("confusion", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p > thresh, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean absolute error between a probability map and a binary mask.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let n = pred.numel() as f64;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p - g).abs()).sum();
    Ok(s / n)
}

/// Scores for a single image. All values in `[0, 1]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub mae: f64,
}

pub fn image_metrics(pred: &Tensor, gt: &Tensor, thresh: f64) -> Result<ImageMetrics> {
    let c = confusion(pred, gt, thresh)?;
    Ok(ImageMetrics {
        dice: c.dice(),
        iou: c.iou(),
        precision: c.precision(),
        recall: c.recall(),
        accuracy: c.accuracy(),
        mae: mae(pred, gt)?,
    })
}

/// Per-image means over a dataset. Fractions in `[0, 1]`; reports scale to
/// percent at formatting time only.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub n_images: usize,
    pub m_iou: f64,
    pub m_dice: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Evaluate (prediction, ground truth) pairs at [`EVAL_THRESHOLD`].
pub fn evaluate_pairs(pairs: &[(Tensor, Tensor)]) -> Result<(Vec<ImageMetrics>, DatasetMetrics)> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate", "no images"));
    }
    let per: Vec<ImageMetrics> = pairs
        .iter()
        .map(|(p, g)| image_metrics(p, g, EVAL_THRESHOLD))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    let summary = DatasetMetrics {
        n_images: per.len(),
        m_iou: mean(|m| m.iou),
        m_dice: mean(|m| m.dice),
        mae: mean(|m| m.mae),
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
    };
    Ok((per, summary))
}

/// One named dataset's summary, as written to reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRow {
    pub dataset: String,
    #[serde(flatten)]
    pub metrics: DatasetMetrics,
}

/// CSV summary: fixed header, one row per dataset, metric columns in percent
/// with one decimal.
pub fn csv_report(rows: &[DatasetRow]) -> String {
    let mut out = String::from("dataset,n_images,mIoU,mDice,MAE,accuracy,precision,recall\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
            r.dataset,
            m.n_images,
            100.0 * m.m_iou,
            100.0 * m.m_dice,
            100.0 * m.mae,
            100.0 * m.accuracy,
            100.0 * m.precision,
            100.0 * m.recall,
        ));
    }
    out
}

/// JSON summary at full precision, one object per dataset.
pub fn json_report(rows: &[DatasetRow]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(rows)?;
    s.push('\n');
    Ok(s)
}

// ---- losses ----

/// Mean binary cross entropy on probabilities, probabilities floored at
/// `1e-12` inside the logs. Value-level mirror of the graph op, for oracles
/// and reporting.
pub fn bce_on_probs(p: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair("bce_on_probs", p, g)?;
    let n = p.numel() as f64;
    let mut acc = 0.0;
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        acc -= gv * pv.max(PROB_FLOOR).ln() + (1.0 - gv) * (1.0 - pv).max(PROB_FLOOR).ln();
    }
    Ok(acc / n)
}

/// `1 - 2*sum(p*g) / (sum(p) + sum(g) + 1)` on probabilities.
pub fn dice_loss_on_probs(p: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair("dice_loss_on_probs", p, g)?;
    let s_pg: f64 = p.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
    let s_p: f64 = p.data().iter().sum();
    let s_g: f64 = g.data().iter().sum();
    Ok(1.0 - 2.0 * s_pg / (s_p + s_g + 1.0))
}

pub fn bce_dice_on_probs(p: &Tensor, g: &Tensor) -> Result<f64> {
    Ok(bce_on_probs(p, g)? + dice_loss_on_probs(p, g)?)
}

/// Graph-level BCE + soft dice on one logits map.
pub fn bce_dice_g(g: &mut Graph, logits: NodeId, target: &Tensor) -> Result<NodeId> {
    let bce = g.bce_with_logits(logits, target)?;
    let probs = g.sigmoid(logits);
    let dice = g.soft_dice(probs, target)?;
    g.add(bce, dice)
}

/// Deep-supervision objective: each `(logits, upscale)` side output is
/// bilinearly upsampled to the target's resolution, charged BCE + dice, and
/// the stage losses sum unweighted. `upscale == 1` means already full size.
pub fn deep_supervision_g(
    g: &mut Graph,
    sides: &[(NodeId, usize)],
    target: &Tensor,
) -> Result<NodeId> {
    if sides.is_empty() {
        return Err(Error::invalid("deep_supervision", "no side outputs"));
    }
    let mut total: Option<NodeId> = None;
    for &(logits, up) in sides {
        let full = if up == 1 { logits } else { g.bilinear_upsample(logits, up)? };
        if g.value(full).shape() != target.shape() {
            return Err(Error::shape(
                "deep_supervision",
                format!(
                    "side output {:?} at upscale {} vs target {:?}",
                    g.value(logits).shape(),
                    up,
                    target.shape()
                ),
            ));
        }
        let term = bce_dice_g(g, full, target)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}
