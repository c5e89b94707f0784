//! Evaluation metrics: 11-point interpolated AP over a greedy score-ordered
//! matching, with IoU (boxes), OKS (poses) or temporal IoU (action segments)
//! as the similarity gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::ActionState;
use crate::geometry::{bbox_iou, BBox};
use crate::stream::{Detection, KeypointName, MachineClass, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no ground truth: AP is undefined")]
    NoGroundTruth,
    #[error("no class has a defined AP")]
    NoClasses,
    #[error("gate must lie in (0, 1], got {0}")]
    InvalidGate(f64),
    #[error("object scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("ground-truth pose has no visible keypoints")]
    NoVisibleKeypoints,
    #[error("segment end {end} must exceed start {start}")]
    InvalidSegment { start: f64, end: f64 },
}

/// One ranked prediction after matching against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredMatch {
    pub score: f64,
    pub true_positive: bool,
}

/// Predictions and ground truth for one image (or video).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance<P, G> {
    pub predictions: Vec<(f64, P)>,
    pub truths: Vec<G>,
}

impl<P, G> Default for Instance<P, G> {
    fn default() -> Self {
        Self {
            predictions: Vec::new(),
            truths: Vec::new(),
        }
    }
}

fn check_gate(gate: f64) -> Result<(), MetricsError> {
    if gate > 0.0 && gate <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidGate(gate))
    }
}

/// Greedy matching in descending score order across all instances; equal
/// scores keep input order (earlier instance, then earlier prediction). Each
/// prediction takes the most similar unmatched truth of its own instance
/// whose similarity reaches `gate`.
pub fn match_predictions<P, G>(
    instances: &[Instance<P, G>],
    gate: f64,
    similarity: impl Fn(&P, &G) -> f64,
) -> Vec<ScoredMatch> {
    let mut order: Vec<(usize, usize)> = instances
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| (0..inst.predictions.len()).map(move |p| (i, p)))
        .collect();
    order.sort_by(|&(ia, pa), &(ib, pb)| {
        instances[ib].predictions[pb]
            .0
            .total_cmp(&instances[ia].predictions[pa].0)
    });

    let mut taken: Vec<Vec<bool>> = instances.iter().map(|i| vec![false; i.truths.len()]).collect();
    order
        .into_iter()
        .map(|(i, p)| {
            let (score, pred) = &instances[i].predictions[p];
            let mut best: Option<(usize, f64)> = None;
            for (g, truth) in instances[i].truths.iter().enumerate() {
                if taken[i][g] {
                    continue;
                }
                let sim = similarity(pred, truth);
                if sim >= gate && best.is_none_or(|(_, s)| sim > s) {
                    best = Some((g, sim));
                }
            }
            if let Some((g, _)) = best {
                taken[i][g] = true;
            }
            ScoredMatch {
                score: *score,
                true_positive: best.is_some(),
            }
        })
        .collect()
}

/// 11-point interpolated AP from ranked matches: the mean over recall levels
/// r = 0.0, 0.1, ..., 1.0 of the highest precision reached at recall >= r.
pub fn interpolated_ap(ranked: &[ScoredMatch], truth_count: usize) -> Result<f64, MetricsError> {
    if truth_count == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let n = truth_count as f64;
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(k, m)| {
            tp += usize::from(m.true_positive);
            (tp as f64 / n, tp as f64 / (k + 1) as f64)
        })
        .collect();
    let total: f64 = (0..=10)
        .map(|level| {
            let r = f64::from(level) / 10.0;
            curve
                .iter()
                .filter(|(recall, _)| *recall >= r)
                .map(|(_, precision)| *precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / 11.0)
}

fn generic_ap<P, G>(
    instances: &[Instance<P, G>],
    gate: f64,
    similarity: impl Fn(&P, &G) -> f64,
) -> Result<f64, MetricsError> {
    check_gate(gate)?;
    let truth_count = instances.iter().map(|i| i.truths.len()).sum();
    if truth_count == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    interpolated_ap(&match_predictions(instances, gate, similarity), truth_count)
}

/// Box AP for a single class at an IoU gate.
pub fn average_precision_11pt(instances: &[Instance<BBox, BBox>], iou_gate: f64) -> Result<f64, MetricsError> {
    generic_ap(instances, iou_gate, bbox_iou)
}

/// Unweighted mean over classes.
pub fn mean_ap<K>(per_class: &BTreeMap<K, f64>) -> Result<f64, MetricsError> {
    if per_class.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Per-class box AP over frames of detections. Classes without ground truth
/// are reported as undefined.
pub fn detection_ap_by_class(
    predictions: &[Vec<Detection>],
    truths: &[Vec<Detection>],
    iou_gate: f64,
) -> BTreeMap<MachineClass, Result<f64, MetricsError>> {
    let frames = predictions.len().max(truths.len());
    let mut classes: Vec<MachineClass> = predictions
        .iter()
        .chain(truths)
        .flatten()
        .map(|d| d.class)
        .collect();
    classes.sort();
    classes.dedup();
    classes
        .into_iter()
        .map(|class| {
            let instances: Vec<Instance<BBox, BBox>> = (0..frames)
                .map(|f| Instance {
                    predictions: predictions
                        .get(f)
                        .into_iter()
                        .flatten()
                        .filter(|d| d.class == class)
                        .map(|d| (d.score, d.bbox))
                        .collect(),
                    truths: truths
                        .get(f)
                        .into_iter()
                        .flatten()
                        .filter(|d| d.class == class)
                        .map(|d| d.bbox)
                        .collect(),
                })
                .collect();
            (class, average_precision_11pt(&instances, iou_gate))
        })
        .collect()
}

/// Per-keypoint OKS constants, indexed like [`KeypointName`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappas(pub [f64; 10]);

impl Default for Kappas {
    fn default() -> Self {
        Kappas([0.5; 10])
    }
}

impl Kappas {
    pub fn get(&self, name: KeypointName) -> f64 {
        self.0[name.index()]
    }
}

/// Object keypoint similarity: the mean over truth keypoints with positive
/// confidence of `exp(-d^2 / (2 s^2 k^2))`.
pub fn oks(pred: &Pose, truth: &Pose, scale: f64, kappas: &Kappas) -> Result<f64, MetricsError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MetricsError::InvalidScale(scale));
    }
    let mut sum = 0.0;
    let mut visible = 0usize;
    for (name, t) in truth.iter() {
        if t.confidence <= 0.0 {
            continue;
        }
        let d = pred.get(name).position.distance(t.position);
        let k = kappas.get(name);
        sum += (-(d * d) / (2.0 * scale * scale * k * k)).exp();
        visible += 1;
    }
    if visible == 0 {
        return Err(MetricsError::NoVisibleKeypoints);
    }
    Ok(sum / visible as f64)
}

/// Ground-truth pose with the area of its object box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPose {
    pub pose: Pose,
    pub area: f64,
}

impl TruthPose {
    pub fn scale(&self) -> f64 {
        self.area.sqrt()
    }

    fn has_visible(&self) -> bool {
        self.pose.iter().any(|(_, kp)| kp.confidence > 0.0)
    }
}

/// Keypoint AP with OKS gating, averaged over `thresholds`. Truth poses
/// without visible keypoints are ignored.
pub fn keypoint_ap(
    instances: &[Instance<Pose, TruthPose>],
    thresholds: &[f64],
    kappas: &Kappas,
) -> Result<f64, MetricsError> {
    let usable: Vec<Instance<Pose, TruthPose>> = instances
        .iter()
        .map(|inst| Instance {
            predictions: inst.predictions.clone(),
            truths: inst.truths.iter().copied().filter(TruthPose::has_visible).collect(),
        })
        .collect();
    if thresholds.is_empty() {
        return Err(MetricsError::InvalidGate(f64::NAN));
    }
    let mut total = 0.0;
    for &t in thresholds {
        total += generic_ap(&usable, t, |p: &Pose, g: &TruthPose| {
            oks(p, &g.pose, g.scale(), kappas).unwrap_or(0.0)
        })?;
    }
    Ok(total / thresholds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalSegment {
    pub label: ActionState,
    pub start: f64,
    pub end: f64,
}

impl TemporalSegment {
    pub fn new(label: ActionState, start: f64, end: f64) -> Result<Self, MetricsError> {
        if end > start {
            Ok(Self { label, start, end })
        } else {
            Err(MetricsError::InvalidSegment { start, end })
        }
    }
}

pub fn temporal_iou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-label segment AP at a temporal-IoU gate; each instance is one video.
pub fn action_ap_by_label(
    instances: &[Instance<TemporalSegment, TemporalSegment>],
    tiou_gate: f64,
) -> BTreeMap<ActionState, Result<f64, MetricsError>> {
    let mut labels: Vec<ActionState> = instances
        .iter()
        .flat_map(|i| i.predictions.iter().map(|(_, s)| s.label).chain(i.truths.iter().map(|s| s.label)))
        .collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let filtered: Vec<Instance<TemporalSegment, TemporalSegment>> = instances
                .iter()
                .map(|i| Instance {
                    predictions: i.predictions.iter().copied().filter(|(_, s)| s.label == label).collect(),
                    truths: i.truths.iter().copied().filter(|s| s.label == label).collect(),
                })
                .collect();
            (label, generic_ap(&filtered, tiou_gate, temporal_iou))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::stream::Keypoint;

    fn tp(score: f64) -> ScoredMatch {
        ScoredMatch { score, true_positive: true }
    }

    fn fp(score: f64) -> ScoredMatch {
        ScoredMatch { score, true_positive: false }
    }

    #[test]
    fn perfect_detector() {
        let inst = Instance {
            predictions: vec![(0.9, BBox::new(0.0, 0.0, 10.0, 10.0)), (0.8, BBox::new(50.0, 0.0, 10.0, 10.0))],
            truths: vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(50.0, 0.0, 10.0, 10.0)],
        };
        assert_eq!(average_precision_11pt(&[inst], 0.5), Ok(1.0));
    }

    #[test]
    fn nothing_matches() {
        let inst = Instance {
            predictions: vec![(0.9, BBox::new(100.0, 100.0, 10.0, 10.0))],
            truths: vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
        };
        assert_eq!(average_precision_11pt(&[inst], 0.5), Ok(0.0));
        let none: Instance<BBox, BBox> = Instance { predictions: vec![], truths: vec![BBox::new(0.0, 0.0, 1.0, 1.0)] };
        assert_eq!(average_precision_11pt(&[none], 0.5), Ok(0.0));
    }

    #[test]
    fn undefined_without_ground_truth() {
        let empty: Instance<BBox, BBox> = Instance::default();
        assert_eq!(average_precision_11pt(&[empty], 0.5), Err(MetricsError::NoGroundTruth));
        assert_eq!(average_precision_11pt(&[], 0.5), Err(MetricsError::NoGroundTruth));
        assert_eq!(average_precision_11pt(&[], 0.0), Err(MetricsError::InvalidGate(0.0)));
    }

    // Hand-computed precision/recall tables.
    #[test]
    fn hand_table_tp_fp_tp() {
        // ranks: TP FP TP, 2 truths
        // recall    0.5 0.5 1.0
        // precision 1.0 0.5 0.667
        // r in 0..0.5 -> 1.0 (6 levels), r in 0.6..1.0 -> 2/3 (5 levels)
        let ap = interpolated_ap(&[tp(0.9), fp(0.8), tp(0.7)], 2).unwrap();
        assert!((ap - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn hand_table_fp_first_missed_truth() {
        // ranks: FP TP TP FP, 4 truths
        // recall    0    0.25 0.5  0.5
        // precision 0    0.5  0.667 0.5
        // levels 0.0..0.5 -> 2/3 (6 levels), 0.6..1.0 -> 0
        let ap = interpolated_ap(&[fp(0.9), tp(0.8), tp(0.7), fp(0.6)], 4).unwrap();
        assert!((ap - 6.0 * (2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn hand_table_interpolation_lifts_earlier_levels() {
        // ranks: TP FP FP TP TP, 3 truths
        // recall    1/3 1/3 1/3 2/3 1
        // precision 1   .5  1/3 .5  .6
        // levels 0.0..0.3 -> 1 (4), 0.4..1.0 -> 0.6 (7)
        let ap = interpolated_ap(&[tp(0.9), fp(0.8), fp(0.7), tp(0.6), tp(0.5)], 3).unwrap();
        assert!((ap - (4.0 + 7.0 * 0.6) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn greedy_match_uses_each_truth_once() {
        let truth = BBox::new(0.0, 0.0, 10.0, 10.0);
        let inst = Instance { predictions: vec![(0.6, truth), (0.9, truth)], truths: vec![truth] };
        let matches = match_predictions(&[inst], 0.5, bbox_iou);
        assert_eq!(matches, vec![tp(0.9), fp(0.6)]);
    }

    #[test]
    fn equal_scores_keep_input_order() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(100.0, 0.0, 10.0, 10.0);
        let inst = Instance { predictions: vec![(0.5, b), (0.5, a)], truths: vec![a] };
        let matches = match_predictions(&[inst], 0.5, bbox_iou);
        assert_eq!(matches, vec![fp(0.5), tp(0.5)]);
    }

    #[test]
    fn mean_ap_examples() {
        let one = BTreeMap::from([(MachineClass::Excavator, 0.7)]);
        assert_eq!(mean_ap(&one), Ok(0.7));
        let two = BTreeMap::from([(MachineClass::Excavator, 0.0), (MachineClass::Loader, 1.0)]);
        assert_eq!(mean_ap(&two), Ok(0.5));
        let reported = BTreeMap::from([(MachineClass::Excavator, 0.93), (MachineClass::Loader, 0.852)]);
        assert!((mean_ap(&reported).unwrap() - 0.891).abs() < 1e-12);
        assert_eq!(mean_ap::<MachineClass>(&BTreeMap::new()), Err(MetricsError::NoClasses));
    }

    fn pose_at(points: &[(f64, f64)], conf: f64) -> Pose {
        let mut pose = Pose::default();
        for (name, &(x, y)) in KeypointName::ALL.iter().zip(points.iter().cycle()) {
            pose.set(*name, Keypoint::new(Point::new(x, y), conf));
        }
        pose
    }

    #[test]
    fn oks_examples() {
        let truth = pose_at(&[(10.0, 20.0), (30.0, 5.0)], 1.0);
        assert_eq!(oks(&truth, &truth, 40.0, &Kappas::default()), Ok(1.0));

        // one visible keypoint at distance 1, scale 1, kappa 0.5: exp(-2)
        let mut one = Pose::uniform(Point::new(0.0, 0.0), 0.0);
        one.set(KeypointName::ArmJoint, Keypoint::new(Point::new(0.0, 0.0), 1.0));
        let mut pred = one;
        pred.set(KeypointName::ArmJoint, Keypoint::new(Point::new(1.0, 0.0), 1.0));
        let v = oks(&pred, &one, 1.0, &Kappas::default()).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.135_335_283_2).abs() < 1e-10);

        assert_eq!(oks(&pred, &Pose::default(), 1.0, &Kappas::default()), Err(MetricsError::NoVisibleKeypoints));
        assert_eq!(oks(&pred, &one, 0.0, &Kappas::default()), Err(MetricsError::InvalidScale(0.0)));
    }

    #[test]
    fn keypoint_ap_extremes() {
        let truth = pose_at(&[(10.0, 20.0), (30.0, 5.0), (70.0, 40.0)], 1.0);
        let far = pose_at(&[(500.0, 500.0)], 1.0);
        let good = Instance { predictions: vec![(0.9, truth)], truths: vec![TruthPose { pose: truth, area: 1600.0 }] };
        assert_eq!(keypoint_ap(&[good], &[0.5, 0.75], &Kappas::default()), Ok(1.0));
        let bad = Instance { predictions: vec![(0.9, far)], truths: vec![TruthPose { pose: truth, area: 1600.0 }] };
        assert_eq!(keypoint_ap(&[bad], &[0.5, 0.75], &Kappas::default()), Ok(0.0));
    }

    #[test]
    fn temporal_iou_examples() {
        let a = TemporalSegment::new(ActionState::Digging, 0.0, 10.0).unwrap();
        let b = TemporalSegment::new(ActionState::Digging, 5.0, 15.0).unwrap();
        let c = TemporalSegment::new(ActionState::Digging, 20.0, 25.0).unwrap();
        assert_eq!(temporal_iou(&a, &a), 1.0);
        assert_eq!(temporal_iou(&a, &c), 0.0);
        assert!((temporal_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!(TemporalSegment::new(ActionState::Digging, 3.0, 3.0).is_err());
    }

    #[test]
    fn action_ap_per_label() {
        let seg = |l, s, e| TemporalSegment::new(l, s, e).unwrap();
        let inst = Instance {
            predictions: vec![
                (1.0, seg(ActionState::Digging, 0.0, 9.0)),
                (1.0, seg(ActionState::Dumping, 30.0, 31.0)),
            ],
            truths: vec![seg(ActionState::Digging, 0.0, 10.0), seg(ActionState::Dumping, 12.0, 20.0)],
        };
        let aps = action_ap_by_label(&[inst], 0.5);
        assert_eq!(aps[&ActionState::Digging], Ok(1.0));
        assert_eq!(aps[&ActionState::Dumping], Ok(0.0));
    }
}
