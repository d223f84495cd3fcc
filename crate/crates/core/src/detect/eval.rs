//! Center-distance average precision over a set of frames.

use std::cmp::Ordering;

use serde::Serialize;

use super::boxes::OrientedBox;

/// Matching thresholds in meters.
pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// A box tagged with the frame it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBox {
    pub frame: u64,
    pub bbox: OrientedBox,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    /// `(recall, precision)` after each ranked prediction.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub per_threshold: Vec<ThresholdResult>,
    pub map: f64,
    /// Set when there was no ground truth; every AP is then reported as 0.
    pub no_ground_truth: bool,
}

impl EvalResult {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-12)
            .map(|t| t.ap)
    }

    pub fn ap4(&self) -> f64 {
        self.ap_at(4.0).unwrap_or(0.0)
    }

    pub fn aps(&self) -> Vec<f64> {
        self.per_threshold.iter().map(|t| t.ap).collect()
    }
}

fn ranking(a: &FrameBox, b: &FrameBox) -> Ordering {
    b.bbox
        .score_or_zero()
        .total_cmp(&a.bbox.score_or_zero())
        .then(a.frame.cmp(&b.frame))
        .then(a.bbox.center[0].total_cmp(&b.bbox.center[0]))
        .then(a.bbox.center[1].total_cmp(&b.bbox.center[1]))
        .then(a.bbox.width.total_cmp(&b.bbox.width))
        .then(a.bbox.length.total_cmp(&b.bbox.length))
        .then(a.bbox.yaw.total_cmp(&b.bbox.yaw))
}

/// Area under the all-point interpolated precision-recall curve.
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

fn curve_at(ranked: &[&FrameBox], gts: &[FrameBox], threshold: f64) -> Vec<(f64, f64)> {
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let total = gts.len() as f64;
    ranked
        .iter()
        .enumerate()
        .map(|(rank, pred)| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, gt)| !matched[*g] && gt.frame == pred.frame)
                .map(|(g, gt)| (g, gt.bbox.center_distance(&pred.bbox)))
                .filter(|&(_, d)| d <= threshold)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((g, _)) = best {
                matched[g] = true;
                tp += 1;
            }
            (tp as f64 / total, tp as f64 / (rank + 1) as f64)
        })
        .collect()
}

/// Greedy matching in descending score order: each prediction takes the
/// nearest unmatched ground truth of its frame within the threshold.
pub fn evaluate(preds: &[FrameBox], gts: &[FrameBox], thresholds: &[f64]) -> EvalResult {
    let mut ranked: Vec<&FrameBox> = preds.iter().collect();
    ranked.sort_by(|a, b| ranking(a, b));
    let no_ground_truth = gts.is_empty();
    let per_threshold: Vec<ThresholdResult> = thresholds
        .iter()
        .map(|&threshold| {
            if no_ground_truth {
                return ThresholdResult {
                    threshold,
                    ap: 0.0,
                    curve: Vec::new(),
                };
            }
            let curve = curve_at(&ranked, gts, threshold);
            ThresholdResult {
                threshold,
                ap: average_precision(&curve),
                curve,
            }
        })
        .collect();
    let map = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64
    };
    EvalResult {
        per_threshold,
        map,
        no_ground_truth,
    }
}
