//! Rule-based excavator action recognition.
//!
//! Each excavator track runs its own [`ExcavatorMonitor`]: a short window of
//! consecutive poses gives body and arm motion, the bucket/arm probe gives the
//! working-area location, and [`step_state`] maps (previous state, location,
//! stillness) to the next state. Per-frame labels are then merged into an
//! [`ActionTimeline`].

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{classify_location, BBox, LocationLabel, Region};
use crate::stream::{KeypointName, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionState {
    Digging,
    SwingAfterDigging,
    Dumping,
    SwingForDigging,
    Idle,
    Unknown,
}

impl ActionState {
    pub const ALL: [ActionState; 6] = [
        ActionState::Digging,
        ActionState::SwingAfterDigging,
        ActionState::Dumping,
        ActionState::SwingForDigging,
        ActionState::Idle,
        ActionState::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionState::Digging => "digging",
            ActionState::SwingAfterDigging => "swing_after_digging",
            ActionState::Dumping => "dumping",
            ActionState::SwingForDigging => "swing_for_digging",
            ActionState::Idle => "idle",
            ActionState::Unknown => "unknown",
        }
    }

    pub fn is_swing(self) -> bool {
        matches!(self, ActionState::SwingAfterDigging | ActionState::SwingForDigging)
    }
}

impl fmt::Display for ActionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionState::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action state `{s}`"))
    }
}

/// Not enough consecutive poses to measure motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("motion window holds {have} poses, need at least 2")]
pub struct InsufficientHistory {
    pub have: usize,
}

/// The last `capacity` poses of one track, frame-consecutive.
#[derive(Debug, Clone)]
pub struct MotionWindow {
    capacity: usize,
    entries: VecDeque<(u64, Pose)>,
}

impl MotionWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 2, "motion window needs room for two poses");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// Appends a pose; a gap in frame indices restarts the window.
    pub fn push(&mut self, frame: u64, pose: Pose) {
        if let Some(&(last, _)) = self.entries.back() {
            if last.checked_add(1) != Some(frame) {
                self.entries.clear();
            }
        }
        self.entries.push_back((frame, pose));
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Mean over `names` of each keypoint's mean per-frame displacement, px/frame.
    pub fn mean_displacement(&self, names: &[KeypointName]) -> Result<f64, InsufficientHistory> {
        let n = self.entries.len();
        if n < 2 {
            return Err(InsufficientHistory { have: n });
        }
        let steps = (n - 1) as f64;
        let total: f64 = names
            .iter()
            .map(|&name| {
                let path: f64 = self
                    .entries
                    .iter()
                    .zip(self.entries.iter().skip(1))
                    .map(|((_, a), (_, b))| a.get(name).position.distance(b.get(name).position))
                    .sum();
                path / steps
            })
            .sum();
        Ok(total / names.len() as f64)
    }
}

pub fn body_motion(window: &MotionWindow) -> Result<f64, InsufficientHistory> {
    window.mean_displacement(&KeypointName::BODY)
}

pub fn arm_motion(window: &MotionWindow) -> Result<f64, InsufficientHistory> {
    window.mean_displacement(&KeypointName::ARM)
}

/// Strictly below the threshold counts as still.
pub fn is_still(motion: f64, threshold: f64) -> bool {
    motion < threshold
}

/// One transition of the action state machine.
///
/// Rules, first match wins:
/// 1. body and arm still for at least `idle_grace` seconds: idle;
/// 2. probe in the digging area with the body still: digging;
/// 3. body moving: swing for digging after dumping (or while already
///    swinging for digging), otherwise swing after digging;
/// 4. probe in the dumping area, body still, arm moving: dumping;
/// 5. otherwise hold `prev`.
pub fn step_state(
    prev: ActionState,
    loc: LocationLabel,
    body_still: bool,
    arm_still: bool,
    idle_elapsed: f64,
    idle_grace: f64,
) -> ActionState {
    if body_still && arm_still && idle_elapsed >= idle_grace {
        ActionState::Idle
    } else if body_still && loc == LocationLabel::InDigging {
        ActionState::Digging
    } else if !body_still {
        match prev {
            ActionState::Dumping | ActionState::SwingForDigging => ActionState::SwingForDigging,
            _ => ActionState::SwingAfterDigging,
        }
    } else if loc == LocationLabel::InDumping && !arm_still {
        ActionState::Dumping
    } else {
        prev
    }
}

/// Stillness threshold, absolute or relative to the excavator's box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stillness {
    /// Pixels per frame.
    Px(f64),
    /// Fraction of the bounding-box diagonal per frame.
    BboxFraction(f64),
}

impl Stillness {
    pub fn resolve(&self, bbox: &BBox) -> f64 {
        match *self {
            Stillness::Px(px) => px,
            Stillness::BboxFraction(frac) => frac * bbox.diagonal(),
        }
    }

    fn is_positive(&self) -> bool {
        match *self {
            Stillness::Px(v) | Stillness::BboxFraction(v) => v.is_finite() && v > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivityParams {
    pub stillness: Stillness,
    pub arm_stillness: Stillness,
    /// Poses per motion window.
    pub motion_window: usize,
    pub idle_grace_s: f64,
    /// Timeline segments shorter than this are folded into their predecessor.
    pub min_segment_s: f64,
    /// Minimum keypoint confidence for a location probe.
    pub conf_floor: f64,
}

impl Default for ActivityParams {
    fn default() -> Self {
        Self {
            stillness: Stillness::Px(1.5),
            arm_stillness: Stillness::Px(1.5),
            motion_window: 5,
            idle_grace_s: 3.0,
            min_segment_s: 0.5,
            conf_floor: 0.3,
        }
    }
}

impl ActivityParams {
    pub fn validate(&self) -> Result<(), String> {
        if !self.stillness.is_positive() || !self.arm_stillness.is_positive() {
            return Err("stillness thresholds must be positive".into());
        }
        if self.motion_window < 2 {
            return Err("motion_window must be at least 2".into());
        }
        if !(self.idle_grace_s >= 0.0 && self.min_segment_s >= 0.0) {
            return Err("idle_grace_s and min_segment_s must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.conf_floor) {
            return Err("conf_floor must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Per-track action state machine.
#[derive(Debug, Clone)]
pub struct ExcavatorMonitor {
    params: ActivityParams,
    fps: f64,
    window: MotionWindow,
    state: ActionState,
    still_since: Option<u64>,
}

impl ExcavatorMonitor {
    pub fn new(params: ActivityParams, fps: f64) -> Self {
        Self {
            window: MotionWindow::new(params.motion_window),
            params,
            fps,
            state: ActionState::Unknown,
            still_since: None,
        }
    }

    pub fn state(&self) -> ActionState {
        self.state
    }

    /// Feeds one observation and returns the state for `frame`. Until the
    /// window is full, or while the location is indeterminate, the previous
    /// state is held.
    pub fn observe(&mut self, frame: u64, pose: &Pose, bbox: &BBox, regions: &[Region]) -> ActionState {
        let restarted = self
            .window
            .entries
            .back()
            .is_some_and(|&(last, _)| last.checked_add(1) != Some(frame));
        if restarted {
            self.still_since = None;
        }
        self.window.push(frame, *pose);
        if !self.window.is_full() {
            return self.state;
        }
        let (Ok(body), Ok(arm)) = (body_motion(&self.window), arm_motion(&self.window)) else {
            return self.state;
        };
        let body_still = is_still(body, self.params.stillness.resolve(bbox));
        let arm_still = is_still(arm, self.params.arm_stillness.resolve(bbox));
        let idle_elapsed = if body_still && arm_still {
            let since = *self.still_since.get_or_insert(frame);
            (frame - since) as f64 / self.fps
        } else {
            self.still_since = None;
            0.0
        };
        let Ok(loc) = classify_location(pose, regions, self.params.conf_floor) else {
            return self.state;
        };
        self.state = step_state(
            self.state,
            loc,
            body_still,
            arm_still,
            idle_elapsed,
            self.params.idle_grace_s,
        );
        self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state: ActionState,
    pub start_frame: u64,
    /// Inclusive.
    pub end_frame: u64,
    pub duration_s: f64,
}

impl Segment {
    fn new(state: ActionState, start_frame: u64, end_frame: u64, fps: f64) -> Self {
        Self {
            state,
            start_frame,
            end_frame,
            duration_s: (end_frame - start_frame + 1) as f64 / fps,
        }
    }

    pub fn frames(&self) -> u64 {
        self.end_frame - self.start_frame + 1
    }

    pub fn start_s(&self, fps: f64) -> f64 {
        self.start_frame as f64 / fps
    }

    pub fn end_s(&self, fps: f64) -> f64 {
        (self.end_frame + 1) as f64 / fps
    }
}

/// Per-frame labels and the debounced segments derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTimeline {
    pub fps: f64,
    pub frames: Vec<(u64, ActionState)>,
    pub segments: Vec<Segment>,
}

impl ActionTimeline {
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }
}

/// Merges per-frame labels into segments. `states` must be in ascending
/// frame order; each label covers the frames up to the next entry.
///
/// Runs shorter than `min_duration` seconds are absorbed into the preceding
/// segment; a short leading run has nothing to join and is kept.
pub fn build_timeline(states: &[(u64, ActionState)], fps: f64, min_duration: f64) -> ActionTimeline {
    let mut runs: Vec<Segment> = Vec::new();
    for (i, &(frame, state)) in states.iter().enumerate() {
        let end = states.get(i + 1).map_or(frame, |&(next, _)| next - 1);
        match runs.last_mut() {
            Some(run) if run.state == state => *run = Segment::new(state, run.start_frame, end, fps),
            _ => runs.push(Segment::new(state, frame, end, fps)),
        }
    }

    let mut segments: Vec<Segment> = Vec::with_capacity(runs.len());
    for run in runs {
        match segments.last_mut() {
            Some(prev) if run.state == prev.state || run.duration_s < min_duration => {
                *prev = Segment::new(prev.state, prev.start_frame, run.end_frame, fps);
            }
            _ => segments.push(run),
        }
    }
    ActionTimeline {
        fps,
        frames: states.to_vec(),
        segments,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, RegionLabel};
    use crate::stream::Keypoint;
    use ActionState::*;
    use LocationLabel::*;

    fn shifted(base: &Pose, names: &[KeypointName], dx: f64, dy: f64) -> Pose {
        let mut pose = *base;
        for &name in names {
            let kp = pose.get(name);
            pose.set(
                name,
                Keypoint::new(Point::new(kp.position.x + dx, kp.position.y + dy), kp.confidence),
            );
        }
        pose
    }

    fn base_pose() -> Pose {
        let mut pose = Pose::default();
        for (i, name) in KeypointName::ALL.into_iter().enumerate() {
            pose.set(name, Keypoint::new(Point::new(10.0 * i as f64, 5.0 * i as f64), 0.9));
        }
        pose
    }

    fn window_of(poses: impl IntoIterator<Item = Pose>) -> MotionWindow {
        let poses: Vec<Pose> = poses.into_iter().collect();
        let mut window = MotionWindow::new(poses.len().max(2));
        for (f, p) in poses.into_iter().enumerate() {
            window.push(f as u64, p);
        }
        window
    }

    #[test]
    fn static_body_has_zero_motion() {
        let w = window_of(std::iter::repeat_n(base_pose(), 5));
        assert_eq!(body_motion(&w), Ok(0.0));
    }

    #[test]
    fn three_four_translation_is_five() {
        let base = base_pose();
        let w = window_of((0..5).map(|k| shifted(&base, &KeypointName::BODY, 3.0 * k as f64, 4.0 * k as f64)));
        assert!((body_motion(&w).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_body_keypoint_moving_averages_over_four() {
        let base = base_pose();
        let w = window_of((0..5).map(|k| shifted(&base, &[KeypointName::Body1], 2.0 * k as f64, 0.0)));
        assert!((body_motion(&w).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn underfull_window_is_an_error() {
        let w = window_of([base_pose()]);
        assert_eq!(body_motion(&w), Err(InsufficientHistory { have: 1 }));
    }

    #[test]
    fn gap_resets_window() {
        let mut w = MotionWindow::new(5);
        w.push(0, base_pose());
        w.push(1, base_pose());
        w.push(3, base_pose());
        assert_eq!(w.len(), 1);
        for f in 4..10 {
            w.push(f, base_pose());
        }
        assert!(w.is_full());
        assert_eq!(w.len(), 5);
    }

    #[test]
    fn stillness_is_strict() {
        assert!(is_still(0.0, 1.5));
        assert!(!is_still(1.5, 1.5));
        assert!(!is_still(5.0, 1.5));
    }

    #[test]
    fn transition_rules() {
        assert_eq!(step_state(SwingForDigging, InDigging, true, false, 0.0, 3.0), Digging);
        assert_eq!(step_state(Dumping, InDumping, false, false, 0.0, 3.0), SwingForDigging);
        assert_eq!(step_state(Digging, InDigging, false, false, 0.0, 3.0), SwingAfterDigging);
        assert_eq!(step_state(Dumping, InDumping, true, true, 3.0, 3.0), Idle);
        assert_eq!(step_state(Dumping, InDumping, true, true, 2.9, 3.0), Dumping);
        assert_eq!(step_state(SwingAfterDigging, InDumping, true, false, 0.0, 3.0), Dumping);
        assert_eq!(step_state(SwingForDigging, InDigging, false, false, 0.0, 3.0), SwingForDigging);
        assert_eq!(step_state(Unknown, Elsewhere, false, true, 0.0, 3.0), SwingAfterDigging);
        assert_eq!(step_state(SwingAfterDigging, Elsewhere, true, false, 0.0, 3.0), SwingAfterDigging);
        assert_eq!(step_state(Unknown, Elsewhere, true, true, 0.5, 3.0), Unknown);
        // prolonged stillness outside the dumping area still reads as idle
        assert_eq!(step_state(Digging, InDigging, true, true, 10.0, 3.0), Idle);
    }

    #[test]
    fn transition_matrix_excludes_impossible_swings() {
        let locs = [InDigging, InDumping, Elsewhere];
        for prev in ActionState::ALL {
            for loc in locs {
                for body in [false, true] {
                    for arm in [false, true] {
                        for elapsed in [0.0, 5.0] {
                            let next = step_state(prev, loc, body, arm, elapsed, 3.0);
                            assert!(!(prev == Digging && next == SwingForDigging));
                            assert!(!(prev == Dumping && next == SwingAfterDigging));
                            assert_eq!(next, step_state(prev, loc, body, arm, elapsed, 3.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_second_of_digging() {
        let states: Vec<_> = (0..25).map(|f| (f, Digging)).collect();
        let tl = build_timeline(&states, 25.0, 0.5);
        assert_eq!(tl.segments.len(), 1);
        assert_eq!(tl.segments[0].duration_s, 1.0);
    }

    #[test]
    fn flicker_absorbed_into_first_segment() {
        // 10 frames alternating, min 0.2 s = 5 frames at 25 fps; every run is
        // one frame, so each folds into the segment before it
        let states: Vec<_> = (0..10)
            .map(|f| (f, if f % 2 == 0 { Digging } else { SwingAfterDigging }))
            .collect();
        let tl = build_timeline(&states, 25.0, 0.2);
        assert_eq!(
            tl.segments,
            vec![Segment { state: Digging, start_frame: 0, end_frame: 9, duration_s: 0.4 }]
        );
    }

    #[test]
    fn short_run_joins_predecessor_then_merges() {
        // dig x10, swing x2, dig x10 -> one digging segment
        let labels: Vec<ActionState> = std::iter::repeat_n(Digging, 10)
            .chain(std::iter::repeat_n(SwingAfterDigging, 2))
            .chain(std::iter::repeat_n(Digging, 10))
            .collect();
        let states: Vec<_> = labels.into_iter().enumerate().map(|(f, s)| (f as u64, s)).collect();
        let tl = build_timeline(&states, 25.0, 0.2);
        assert_eq!(tl.segments.len(), 1);
        assert_eq!(tl.segments[0].frames(), 22);
    }

    #[test]
    fn empty_timeline() {
        let tl = build_timeline(&[], 25.0, 0.5);
        assert!(tl.is_empty());
        assert!(tl.segments.is_empty());
    }

    #[test]
    fn monitor_holds_during_warm_up_and_indeterminate_location() {
        let regions = [Region::rect(RegionLabel::Digging, -100.0, -100.0, 400.0, 400.0).unwrap()];
        let mut monitor = ExcavatorMonitor::new(ActivityParams::default(), 25.0);
        let bbox = BBox::new(0.0, 0.0, 100.0, 100.0);
        let pose = base_pose();
        for f in 0..4 {
            assert_eq!(monitor.observe(f, &pose, &bbox, &regions), Unknown);
        }
        assert_eq!(monitor.observe(4, &pose, &bbox, &regions), Digging);
        let blind = Pose::uniform(Point::new(0.0, 0.0), 0.0);
        // body jumps but no probe is trusted: hold
        for f in 5..12 {
            assert_eq!(monitor.observe(f, &blind, &bbox, &regions), Digging);
        }
    }

    #[test]
    fn bbox_fraction_threshold() {
        let bbox = BBox::new(0.0, 0.0, 300.0, 400.0);
        assert!((Stillness::BboxFraction(0.004).resolve(&bbox) - 2.0).abs() < 1e-12);
        assert_eq!(Stillness::Px(1.5).resolve(&bbox), 1.5);
    }
}
