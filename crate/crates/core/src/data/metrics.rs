use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tracker::BBox;

/// Center-error thresholds 0, 1, ..., 50 px.
pub const PR_POINTS: usize = 51;
/// Overlap thresholds 0, 0.05, ..., 1.
pub const SR_POINTS: usize = 21;

fn check_len(pred: &[BBox], gt: &[BBox]) -> Result<(), DataError> {
    if pred.len() != gt.len() {
        return Err(DataError::Mismatch(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(DataError::Mismatch("no frames to evaluate".into()));
    }
    Ok(())
}

/// Fraction of frames whose center error is at most `threshold_px`.
pub fn precision_rate(pred: &[BBox], gt: &[BBox], threshold_px: f64) -> Result<f64, DataError> {
    check_len(pred, gt)?;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.center_distance(g) <= threshold_px)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>, DataError> {
    (0..PR_POINTS).map(|t| precision_rate(pred, gt, t as f64)).collect()
}

/// Fraction of frames with IoU above each overlap threshold, and the
/// trapezoidal area under that curve.
pub fn success_rate(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64), DataError> {
    check_len(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let curve: Vec<f64> = (0..SR_POINTS)
        .map(|i| {
            let t = i as f64 / (SR_POINTS - 1) as f64;
            ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
        })
        .collect();
    let step = 1.0 / (SR_POINTS - 1) as f64;
    let auc = curve.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
    Ok((curve, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub threshold_px: f64,
    pub pr_at: f64,
    pub sr_auc: f64,
    pub pr_curve: Vec<f64>,
    pub sr_curve: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(pred: &[BBox], gt: &[BBox], threshold_px: f64) -> Result<Self, DataError> {
        let (sr_curve, sr_auc) = success_rate(pred, gt)?;
        Ok(MetricsReport {
            frames: gt.len(),
            threshold_px,
            pr_at: precision_rate(pred, gt, threshold_px)?,
            sr_auc,
            pr_curve: precision_curve(pred, gt)?,
            sr_curve,
        })
    }

    /// Two-column CSV of the precision curve.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold_px,precision\n");
        for (t, v) in self.pr_curve.iter().enumerate() {
            s.push_str(&format!("{t},{v:.6}\n"));
        }
        s
    }

    pub fn sr_csv(&self) -> String {
        let mut s = String::from("iou_threshold,success\n");
        for (i, v) in self.sr_curve.iter().enumerate() {
            s.push_str(&format!("{:.2},{v:.6}\n", i as f64 / (SR_POINTS - 1) as f64));
        }
        s
    }
}
