use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Detection, MachineClass};
use crate::geometry::{bbox_iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    pub id: TrackId,
    pub class: MachineClass,
    pub bbox: BBox,
    /// Consecutive frames without a matching detection.
    pub misses: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Minimum IoU between a track's last box and a detection to associate them.
    pub iou_threshold: f64,
    /// A track survives this many consecutive misses and is retired on the next.
    pub max_misses: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_misses: 25,
        }
    }
}

/// Result of associating one frame of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackUpdate {
    pub tracks: Vec<Track>,
    /// Track id for each input detection, by detection index.
    pub assignment: Vec<TrackId>,
    pub next_id: TrackId,
}

/// Greedy per-class IoU association.
///
/// Candidate pairs of the same class with IoU at or above the threshold are
/// taken in descending IoU order (ties: lower detection index, then lower
/// track id). Unmatched detections open new tracks; unmatched tracks gain a
/// miss and are dropped once they exceed `max_misses`.
pub fn track_update(
    tracks: &[Track],
    detections: &[Detection],
    next_id: TrackId,
    params: &TrackerParams,
) -> TrackUpdate {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        for (t, track) in tracks.iter().enumerate() {
            if track.class != det.class {
                continue;
            }
            let iou = bbox_iou(&track.bbox, &det.bbox);
            if iou >= params.iou_threshold && iou > 0.0 {
                pairs.push((iou, d, t));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(tracks[a.2].id.cmp(&tracks[b.2].id))
    });

    let mut det_track: Vec<Option<usize>> = vec![None; detections.len()];
    let mut track_taken = vec![false; tracks.len()];
    for (_, d, t) in pairs {
        if det_track[d].is_none() && !track_taken[t] {
            det_track[d] = Some(t);
            track_taken[t] = true;
        }
    }

    let mut updated: Vec<Track> = Vec::with_capacity(tracks.len() + detections.len());
    for (t, track) in tracks.iter().enumerate() {
        if track_taken[t] {
            continue;
        }
        let misses = track.misses + 1;
        if misses <= params.max_misses {
            updated.push(Track { misses, ..*track });
        }
    }

    let mut next = next_id;
    let mut assignment = Vec::with_capacity(detections.len());
    for (d, det) in detections.iter().enumerate() {
        let id = match det_track[d] {
            Some(t) => tracks[t].id,
            None => {
                let id = next;
                next = TrackId(next.0 + 1);
                id
            }
        };
        updated.push(Track {
            id,
            class: det.class,
            bbox: det.bbox,
            misses: 0,
        });
        assignment.push(id);
    }
    updated.sort_by_key(|t| t.id);
    TrackUpdate {
        tracks: updated,
        assignment,
        next_id: next,
    }
}

/// Stateful wrapper around [`track_update`] for one stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackerParams,
    tracks: Vec<Track>,
    next_id: TrackId,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: TrackId(1),
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn update(&mut self, detections: &[Detection]) -> Vec<TrackId> {
        let update = track_update(&self.tracks, detections, self.next_id, &self.params);
        self.tracks = update.tracks;
        self.next_id = update.next_id;
        update.assignment
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn det(class: MachineClass, x: f64, y: f64) -> Detection {
        Detection::new(class, BBox::new(x, y, 100.0, 80.0), 0.9)
    }

    #[test]
    fn slow_mover_keeps_one_id() {
        let mut tracker = Tracker::new(TrackerParams::default());
        let ids: HashSet<TrackId> = (0..10)
            .flat_map(|k| tracker.update(&[det(MachineClass::Excavator, 2.0 * k as f64, 50.0)]))
            .collect();
        assert_eq!(ids.len(), 1);
    }

    #[test]
    fn different_classes_never_merge() {
        let mut tracker = Tracker::new(TrackerParams::default());
        for _ in 0..5 {
            let ids = tracker.update(&[
                det(MachineClass::Excavator, 0.0, 0.0),
                det(MachineClass::Loader, 600.0, 0.0),
            ]);
            assert_eq!(ids, vec![TrackId(1), TrackId(2)]);
        }
        // a loader on top of the excavator opens its own track
        let ids = tracker.update(&[
            det(MachineClass::Loader, 0.0, 0.0),
            det(MachineClass::Excavator, 0.0, 0.0),
        ]);
        assert_eq!(ids, vec![TrackId(3), TrackId(1)]);
    }

    #[test]
    fn gap_shorter_than_cap_keeps_identity() {
        let params = TrackerParams {
            max_misses: 5,
            ..TrackerParams::default()
        };
        let mut tracker = Tracker::new(params);
        let first = tracker.update(&[det(MachineClass::Excavator, 100.0, 100.0)])[0];
        for _ in 0..4 {
            assert!(tracker.update(&[]).is_empty());
        }
        assert_eq!(tracker.tracks()[0].misses, 4);
        // reappears shifted by 20 px: IoU (80*80)/(2*8000 - 6400) = 0.667
        let again = tracker.update(&[det(MachineClass::Excavator, 120.0, 100.0)])[0];
        assert_eq!(again, first);
    }

    #[test]
    fn retires_after_cap() {
        let params = TrackerParams {
            max_misses: 2,
            ..TrackerParams::default()
        };
        let mut tracker = Tracker::new(params);
        tracker.update(&[det(MachineClass::Truck, 0.0, 0.0)]);
        tracker.update(&[]);
        tracker.update(&[]);
        assert_eq!(tracker.tracks().len(), 1);
        tracker.update(&[]);
        assert!(tracker.tracks().is_empty());
        assert_eq!(tracker.update(&[det(MachineClass::Truck, 0.0, 0.0)]), vec![TrackId(2)]);
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        let params = TrackerParams::default();
        let tracks = [
            Track { id: TrackId(1), class: MachineClass::Loader, bbox: BBox::new(0.0, 0.0, 100.0, 100.0), misses: 0 },
            Track { id: TrackId(2), class: MachineClass::Loader, bbox: BBox::new(40.0, 0.0, 100.0, 100.0), misses: 0 },
        ];
        let dets = [
            Detection::new(MachineClass::Loader, BBox::new(10.0, 0.0, 100.0, 100.0), 0.9),
            Detection::new(MachineClass::Loader, BBox::new(45.0, 0.0, 100.0, 100.0), 0.9),
        ];
        let up = track_update(&tracks, &dets, TrackId(3), &params);
        assert_eq!(up.assignment, vec![TrackId(1), TrackId(2)]);
    }

    proptest! {
        #[test]
        fn assignment_is_injective(
            frames in prop::collection::vec(
                prop::collection::vec((0usize..3, 0.0f64..400.0, 0.0f64..400.0), 0..6), 1..12)
        ) {
            let mut tracker = Tracker::new(TrackerParams::default());
            for frame in frames {
                let dets: Vec<Detection> = frame
                    .iter()
                    .map(|&(c, x, y)| det(MachineClass::ALL[c], x, y))
                    .collect();
                let ids = tracker.update(&dets);
                prop_assert_eq!(ids.len(), dets.len());
                let unique: HashSet<_> = ids.iter().collect();
                prop_assert_eq!(unique.len(), ids.len());
                let live: HashSet<_> = tracker.tracks().iter().map(|t| t.id).collect();
                prop_assert_eq!(live.len(), tracker.tracks().len());
            }
        }
    }
}
