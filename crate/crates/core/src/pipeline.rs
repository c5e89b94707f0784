//! Per-stream analysis: Soft-NMS, tracking, per-excavator action recognition,
//! the safety monitor, and finally cycles and productivity per excavator.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::activity::{build_timeline, ActionState, ActionTimeline, ExcavatorMonitor};
use crate::config::SiteConfig;
use crate::geometry::BBox;
use crate::productivity::{build_report, detect_cycles, CycleDetection, ProductivityError, ProductivityReport};
use crate::safety::{Alert, Observation, PauseSignal, PauseTransition, SafetyMonitor};
use crate::stream::{soft_nms_indexed, MachineClass, PerceptionFrame, StreamHeader, TrackId, Tracker};

/// A deduplicated, tracked detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrackedObject {
    pub id: TrackId,
    pub class: MachineClass,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub frame: u64,
    pub time_s: f64,
    pub objects: Vec<TrackedObject>,
    /// Action state of every posed excavator in this frame.
    pub states: Vec<(TrackId, ActionState)>,
    pub alerts: Vec<Alert>,
    pub transition: Option<PauseTransition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackAnalysis {
    pub track: TrackId,
    pub timeline: ActionTimeline,
    pub cycles: CycleDetection,
    pub report: ProductivityReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub fps: f64,
    pub frames: usize,
    pub excavators: Vec<TrackAnalysis>,
    pub alerts: Vec<Alert>,
    pub transitions: Vec<PauseTransition>,
    pub signal: PauseSignal,
}

impl Analysis {
    /// The excavator observed for the most frames; ties go to the lower id.
    pub fn primary(&self) -> Option<&TrackAnalysis> {
        self.excavators
            .iter()
            .max_by(|a, b| {
                a.timeline
                    .frames
                    .len()
                    .cmp(&b.timeline.frames.len())
                    .then(b.track.cmp(&a.track))
            })
    }

    /// Report for the primary excavator, or an all-zero report when there is none.
    pub fn primary_report(&self, site: &SiteConfig) -> ProductivityReport {
        match self.primary() {
            Some(t) => t.report.clone(),
            None => {
                let empty = build_timeline(&[], self.fps, 0.0);
                build_report(&empty, &CycleDetection::default(), &site.productivity)
                    .expect("validated bucket parameters")
            }
        }
    }
}

pub struct Analyzer {
    site: SiteConfig,
    fps: f64,
    tracker: Tracker,
    monitors: BTreeMap<TrackId, ExcavatorMonitor>,
    states: BTreeMap<TrackId, Vec<(u64, ActionState)>>,
    safety: SafetyMonitor,
    alerts: Vec<Alert>,
    transitions: Vec<PauseTransition>,
    frames: usize,
}

impl Analyzer {
    pub fn new(site: SiteConfig, header: &StreamHeader) -> Self {
        Self {
            tracker: Tracker::new(site.tracking),
            safety: SafetyMonitor::new(site.safety, site.activity.conf_floor),
            fps: header.fps,
            site,
            monitors: BTreeMap::new(),
            states: BTreeMap::new(),
            alerts: Vec::new(),
            transitions: Vec::new(),
            frames: 0,
        }
    }

    pub fn signal(&self) -> PauseSignal {
        self.safety.signal()
    }

    pub fn process(&mut self, frame: &PerceptionFrame) -> FrameOutcome {
        self.frames += 1;
        let time_s = frame.index as f64 / self.fps;
        let kept = soft_nms_indexed(&frame.detections, &self.site.nms);
        let detections: Vec<_> = kept.iter().map(|(_, d)| *d).collect();
        let ids = self.tracker.update(&detections);

        let mut objects = Vec::with_capacity(kept.len());
        let mut observations = Vec::with_capacity(kept.len());
        let mut states = Vec::new();
        for ((source, det), &id) in kept.iter().zip(&ids) {
            let pose = if det.class == MachineClass::Excavator {
                frame.pose_for(*source)
            } else {
                None
            };
            if let Some(pose) = pose {
                let monitor = self
                    .monitors
                    .entry(id)
                    .or_insert_with(|| ExcavatorMonitor::new(self.site.activity, self.fps));
                let state = monitor.observe(frame.index, pose, &det.bbox, &self.site.regions);
                self.states.entry(id).or_default().push((frame.index, state));
                states.push((id, state));
            }
            objects.push(TrackedObject {
                id,
                class: det.class,
                bbox: det.bbox,
                score: det.score,
            });
            observations.push(Observation {
                id,
                class: det.class,
                bbox: det.bbox,
                pose,
            });
        }

        let outcome = self
            .safety
            .evaluate(frame.index, time_s, &observations, &self.site.regions);
        self.alerts.extend(outcome.alerts.iter().cloned());
        self.transitions.extend(outcome.transition);
        FrameOutcome {
            frame: frame.index,
            time_s,
            objects,
            states,
            alerts: outcome.alerts,
            transition: outcome.transition,
        }
    }

    pub fn finish(self) -> Result<Analysis, ProductivityError> {
        let mut excavators = Vec::with_capacity(self.states.len());
        for (track, states) in self.states {
            let timeline = build_timeline(&states, self.fps, self.site.activity.min_segment_s);
            let cycles = detect_cycles(&timeline);
            let report = build_report(&timeline, &cycles, &self.site.productivity)?;
            excavators.push(TrackAnalysis {
                track,
                timeline,
                cycles,
                report,
            });
        }
        Ok(Analysis {
            fps: self.fps,
            frames: self.frames,
            excavators,
            alerts: self.alerts,
            transitions: self.transitions,
            signal: self.safety.signal(),
        })
    }
}

pub fn analyze_frames(
    site: &SiteConfig,
    header: &StreamHeader,
    frames: &[PerceptionFrame],
) -> Result<Analysis, ProductivityError> {
    let mut analyzer = Analyzer::new(site.clone(), header);
    for frame in frames {
        analyzer.process(frame);
    }
    analyzer.finish()
}
