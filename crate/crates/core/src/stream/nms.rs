use serde::{Deserialize, Serialize};

use super::Detection;
use crate::geometry::bbox_iou;

/// Gaussian Soft-NMS parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsParams {
    /// Overlaps at or below this IoU are left untouched.
    pub iou_threshold: f64,
    /// Gaussian decay `sigma` in `score * exp(-iou^2 / sigma)`.
    pub sigma: f64,
    /// Boxes whose score ends below this are dropped.
    pub score_floor: f64,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.0,
            sigma: 0.5,
            score_floor: 0.3,
        }
    }
}

/// Soft-NMS that also reports each survivor's index in the input, so
/// per-detection attachments (poses) can follow their box.
///
/// Classes are processed independently. The output is sorted by score,
/// descending, with the lower input index first on ties.
pub fn soft_nms_indexed(detections: &[Detection], params: &SoftNmsParams) -> Vec<(usize, Detection)> {
    let mut classes: Vec<_> = detections.iter().map(|d| d.class).collect();
    classes.sort();
    classes.dedup();

    let mut kept: Vec<(usize, Detection)> = Vec::with_capacity(detections.len());
    for class in classes {
        let mut pool: Vec<(usize, Detection)> = detections
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, d)| d.class == class && d.score >= params.score_floor)
            .collect();
        while !pool.is_empty() {
            let best = pool
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
                .map(|(pos, _)| pos)
                .expect("pool is non-empty");
            let top = pool.swap_remove(best);
            for (_, other) in pool.iter_mut() {
                let iou = bbox_iou(&top.1.bbox, &other.bbox);
                if iou > params.iou_threshold {
                    other.score *= (-iou * iou / params.sigma).exp();
                }
            }
            pool.retain(|(_, d)| d.score >= params.score_floor);
            kept.push(top);
        }
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    kept
}

pub fn soft_nms(detections: &[Detection], params: &SoftNmsParams) -> Vec<Detection> {
    soft_nms_indexed(detections, params)
        .into_iter()
        .map(|(_, d)| d)
        .collect()
}
