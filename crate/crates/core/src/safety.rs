//! Multi-machine collision monitor: machines are attributed to working
//! regions every frame; shared occupancy raises an alert and latches a pause
//! signal that clears only after a run of alert-free frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{classify_location, locate_point, BBox, LocationLabel, Region, RegionLabel};
use crate::stream::{MachineClass, Pose, TrackId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub frame: u64,
    pub time_s: f64,
    pub region: RegionLabel,
    /// Involved tracks, ascending by id.
    pub tracks: Vec<(TrackId, MachineClass)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PauseSignal {
    pub active: bool,
    pub raised_at: Option<u64>,
    pub cleared_at: Option<u64>,
    /// Consecutive alert-free frames while active.
    pub quiet_frames: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", content = "frame", rename_all = "snake_case")]
pub enum PauseTransition {
    PauseRaised(u64),
    PauseCleared(u64),
}

/// One tracked object in the current frame.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub id: TrackId,
    pub class: MachineClass,
    pub bbox: BBox,
    pub pose: Option<&'a Pose>,
}

/// Places every observation in a region. Posed excavators use the bucket/arm
/// probe; anything else, or a pose without a trusted probe, falls back to the
/// bottom-center of its box.
pub fn locate_machines(
    observations: &[Observation<'_>],
    regions: &[Region],
    conf_floor: f64,
) -> BTreeMap<TrackId, LocationLabel> {
    observations
        .iter()
        .map(|obs| {
            let by_pose = obs
                .pose
                .and_then(|pose| classify_location(pose, regions, conf_floor).ok());
            let loc = by_pose.unwrap_or_else(|| locate_point(obs.bbox.bottom_center(), regions));
            (obs.id, loc)
        })
        .collect()
}

/// Raises one alert per region holding two or more machines, or a human
/// together with at least one machine.
pub fn check_collision(
    frame: u64,
    time_s: f64,
    locations: &BTreeMap<TrackId, LocationLabel>,
    classes: &BTreeMap<TrackId, MachineClass>,
) -> Vec<Alert> {
    let mut alerts = Vec::new();
    for region in RegionLabel::ALL {
        let occupants: Vec<(TrackId, MachineClass)> = locations
            .iter()
            .filter(|(_, loc)| loc.region() == Some(region))
            .filter_map(|(id, _)| classes.get(id).map(|c| (*id, *c)))
            .filter(|(_, c)| c.is_machine() || *c == MachineClass::Human)
            .collect();
        let machines = occupants.iter().filter(|(_, c)| c.is_machine()).count();
        let humans = occupants.len() - machines;
        if machines >= 2 || (machines >= 1 && humans >= 1) {
            alerts.push(Alert {
                frame,
                time_s,
                region,
                tracks: occupants,
            });
        }
    }
    alerts
}

/// Advances the pause latch by one frame.
pub fn update_pause(
    signal: PauseSignal,
    alerts: &[Alert],
    frame: u64,
    clearance_window: u32,
) -> PauseSignal {
    match (signal.active, alerts.is_empty()) {
        (false, true) => signal,
        (false, false) => PauseSignal {
            active: true,
            raised_at: Some(frame),
            cleared_at: None,
            quiet_frames: 0,
        },
        (true, false) => PauseSignal {
            quiet_frames: 0,
            ..signal
        },
        (true, true) => {
            let quiet = signal.quiet_frames + 1;
            if quiet >= clearance_window {
                PauseSignal {
                    active: false,
                    cleared_at: Some(frame),
                    quiet_frames: 0,
                    ..signal
                }
            } else {
                PauseSignal {
                    quiet_frames: quiet,
                    ..signal
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyParams {
    /// Alert-free frames required before the pause clears.
    pub clearance_frames: u32,
}

impl Default for SafetyParams {
    fn default() -> Self {
        Self {
            clearance_frames: 25,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SafetyOutcome {
    pub alerts: Vec<Alert>,
    pub transition: Option<PauseTransition>,
}

/// Per-stream evaluator combining location, collision check and pause latch.
#[derive(Debug, Clone)]
pub struct SafetyMonitor {
    params: SafetyParams,
    conf_floor: f64,
    signal: PauseSignal,
}

impl SafetyMonitor {
    pub fn new(params: SafetyParams, conf_floor: f64) -> Self {
        Self {
            params,
            conf_floor,
            signal: PauseSignal::default(),
        }
    }

    pub fn signal(&self) -> PauseSignal {
        self.signal
    }

    pub fn evaluate(
        &mut self,
        frame: u64,
        time_s: f64,
        observations: &[Observation<'_>],
        regions: &[Region],
    ) -> SafetyOutcome {
        let locations = locate_machines(observations, regions, self.conf_floor);
        let classes: BTreeMap<TrackId, MachineClass> =
            observations.iter().map(|o| (o.id, o.class)).collect();
        let alerts = check_collision(frame, time_s, &locations, &classes);
        let next = update_pause(self.signal, &alerts, frame, self.params.clearance_frames);
        let transition = match (self.signal.active, next.active) {
            (false, true) => Some(PauseTransition::PauseRaised(frame)),
            (true, false) => Some(PauseTransition::PauseCleared(frame)),
            _ => None,
        };
        self.signal = next;
        SafetyOutcome { alerts, transition }
    }
}
