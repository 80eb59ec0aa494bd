use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// One-pass evaluation summary of a tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub success_auc: f64,
    pub precision_at_20px: f64,
    pub norm_precision_auc: f64,
    pub ao: f64,
    pub sr_050: f64,
    pub sr_075: f64,
    pub per_frame_iou: Vec<f64>,
}

impl MetricReport {
    /// Flat `key: value` text, one scalar field per line.
    pub fn to_text(&self) -> String {
        format!(
            "success_auc: {}\nprecision_at_20px: {}\nnorm_precision_auc: {}\nao: {}\nsr_050: {}\nsr_075: {}\nframes: {}\n",
            self.success_auc,
            self.precision_at_20px,
            self.norm_precision_auc,
            self.ao,
            self.sr_050,
            self.sr_075,
            self.per_frame_iou.len()
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const PRECISION_RADIUS_PX: f64 = 20.0;

fn fraction(values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pred(v)).count() as f64 / values.len() as f64
}

/// Mean of `fraction(values passing τ)` over the grid `τ_k = k·max/100`, k = 0..=100.
fn curve_area(values: &[f64], max: f64, pass: impl Fn(f64, f64) -> bool) -> f64 {
    (0..=100).map(|k| fraction(values, |v| pass(v, k as f64 * max / 100.0))).sum::<f64>() / 101.0
}

/// Success AUC counts a frame at threshold τ when IoU ≥ τ, so a perfect
/// result scores exactly 1. Success rates use strict `IoU > t`.
pub fn compute_metrics(results: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    if results.len() != gt.len() {
        return Err(Error::Input(format!("{} results for {} ground-truth frames", results.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Input("no frames to evaluate".into()));
    }
    let ious = results.iter().zip(gt).map(|(r, g)| iou(r, g)).collect::<Result<Vec<_>>>()?;
    let center_err: Vec<f64> = results.iter().zip(gt).map(|(r, g)| (r.cx - g.cx).hypot(r.cy - g.cy)).collect();
    let norm_err: Vec<f64> = results.iter().zip(gt).map(|(r, g)| ((r.cx - g.cx) / g.w).hypot((r.cy - g.cy) / g.h)).collect();
    Ok(MetricReport {
        success_auc: curve_area(&ious, 1.0, |v, t| v >= t),
        precision_at_20px: fraction(&center_err, |e| e <= PRECISION_RADIUS_PX),
        norm_precision_auc: curve_area(&norm_err, 0.5, |e, t| e <= t),
        ao: ious.iter().sum::<f64>() / ious.len() as f64,
        sr_050: fraction(&ious, |v| v > 0.5),
        sr_075: fraction(&ious, |v| v > 0.75),
        per_frame_iou: ious,
    })
}
