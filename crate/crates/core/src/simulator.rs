//! Deterministic synthetic construction-site scenarios.
//!
//! One excavator repeats dig → swing → dump → swing (optionally idling after a
//! dump) with phase durations drawn from uniform ranges. The upper body
//! rotates rigidly about a pivot during swings and is static otherwise; the
//! bucket and arm keypoints also move radially in a zigzag while digging and
//! dumping. Extra machines stand still inside fixed boxes.
//!
//! Randomness comes from ChaCha8 seeded with `seed`: stream 0 draws the phase
//! schedule and stream 1 draws observation noise, so enabling noise never
//! changes the schedule.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::ActionState;
use crate::config::{read_toml, ConfigError};
use crate::geometry::{locate_point, validate_regions, BBox, GeometryError, LocationLabel, Point, Region, RegionLabel};
use crate::stream::{
    Detection, Keypoint, KeypointName, MachineClass, PerceptionFrame, Pose, PoseAttachment, StreamHeader,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("inconsistent scenario: {0}")]
    Inconsistent(String),
    #[error("inconsistent scenario: {0}")]
    Geometry(#[from] GeometryError),
    #[error("injection frames {first}..={last} outside stream of {frames} frames")]
    InjectionRange { first: u64, last: u64, frames: u64 },
}

fn inconsistent(msg: impl Into<String>) -> SimError {
    SimError::Inconsistent(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Digging,
    SwingToDump,
    Dumping,
    SwingToDig,
    Idle,
}

/// Uniform duration range in seconds, written `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct DurationRange {
    pub min: f64,
    pub max: f64,
}

impl DurationRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(seconds: f64) -> Self {
        Self::new(seconds, seconds)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

impl From<[f64; 2]> for DurationRange {
    fn from([min, max]: [f64; 2]) -> Self {
        Self { min, max }
    }
}

impl From<DurationRange> for [f64; 2] {
    fn from(r: DurationRange) -> Self {
        [r.min, r.max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseDurations {
    pub digging: DurationRange,
    pub swing: DurationRange,
    pub dumping: DurationRange,
    pub idle: DurationRange,
}

impl Default for PhaseDurations {
    fn default() -> Self {
        Self {
            digging: DurationRange::new(6.0, 9.0),
            swing: DurationRange::new(3.0, 5.0),
            dumping: DurationRange::new(4.0, 7.0),
            idle: DurationRange::new(4.0, 8.0),
        }
    }
}

/// Image-space excavator model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcavatorRig {
    pub pivot: [f64; 2],
    /// Heading (degrees, image axes) with the bucket over the digging area.
    pub dig_heading_deg: f64,
    /// Heading over the dumping area; swings interpolate linearly between the two.
    pub dump_heading_deg: f64,
    /// Distance of the four body keypoints from the pivot.
    pub body_radius_px: f64,
    /// Distance of the bucket joint from the pivot.
    pub bucket_reach_px: f64,
    /// Radial bucket/arm displacement per frame while digging or dumping.
    pub arm_step_px: f64,
    /// Zigzag half-period in frames.
    pub arm_stroke_steps: u32,
    pub keypoint_confidence: f64,
    pub detection_score: f64,
    pub bbox_margin_px: f64,
}

impl Default for ExcavatorRig {
    fn default() -> Self {
        Self {
            pivot: [960.0, 640.0],
            dig_heading_deg: 180.0,
            dump_heading_deg: 360.0,
            body_radius_px: 300.0,
            bucket_reach_px: 440.0,
            arm_step_px: 8.0,
            arm_stroke_steps: 5,
            keypoint_confidence: 0.9,
            detection_score: 0.95,
            bbox_margin_px: 20.0,
        }
    }
}

struct PartTemplate {
    name: KeypointName,
    radius: f64,
    angle: f64,
    arm: bool,
}

impl ExcavatorRig {
    fn parts(&self) -> [PartTemplate; 10] {
        let reach = self.bucket_reach_px;
        let body = self.body_radius_px;
        let deg = PI / 180.0;
        let part = |name, radius, angle_deg: f64, arm| PartTemplate {
            name,
            radius,
            angle: angle_deg * deg,
            arm,
        };
        [
            part(KeypointName::BucketEnd1, reach + 30.0, 4.0, true),
            part(KeypointName::BucketEnd2, reach + 30.0, -4.0, true),
            part(KeypointName::BucketJoint, reach, 0.0, true),
            part(KeypointName::ArmJoint, 0.72 * reach, 0.0, true),
            part(KeypointName::BoomCylinder, 0.45 * reach, 6.0, false),
            part(KeypointName::BoomBase, 0.25 * reach, 0.0, false),
            part(KeypointName::Body1, body, 35.0, false),
            part(KeypointName::Body2, body, -35.0, false),
            part(KeypointName::Body3, body, 145.0, false),
            part(KeypointName::Body4, body, -145.0, false),
        ]
    }

    fn pivot(&self) -> Point {
        Point::new(self.pivot[0], self.pivot[1])
    }

    fn keypoint(&self, part: &PartTemplate, heading: f64, arm_offset: f64) -> Point {
        let r = part.radius + if part.arm { arm_offset } else { 0.0 };
        let a = heading + part.angle;
        let p = self.pivot();
        Point::new(p.x + r * a.cos(), p.y + r * a.sin())
    }

    fn bucket_joint(&self, heading: f64, arm_offset: f64) -> Point {
        let p = self.pivot();
        let r = self.bucket_reach_px + arm_offset;
        Point::new(p.x + r * heading.cos(), p.y + r * heading.sin())
    }

    fn dig_heading(&self) -> f64 {
        self.dig_heading_deg.to_radians()
    }

    fn dump_heading(&self) -> f64 {
        self.dump_heading_deg.to_radians()
    }

    fn max_arm_offset(&self) -> f64 {
        self.arm_step_px * f64::from(self.arm_stroke_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterMachine {
    pub class: MachineClass,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub enter_s: f64,
    #[serde(default)]
    pub exit_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub keypoint_sigma_px: f64,
    pub drop_probability: f64,
    pub bbox_sigma_px: f64,
}

impl NoiseModel {
    pub fn is_clean(&self) -> bool {
        self.keypoint_sigma_px == 0.0 && self.drop_probability == 0.0 && self.bbox_sigma_px == 0.0
    }
}

/// Recognizer settings the ground-truth labels are derived for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverParams {
    pub motion_window: usize,
    pub idle_grace_s: f64,
    /// Label runs shorter than this are folded into the run before them.
    pub min_segment_s: f64,
}

impl Default for ObserverParams {
    fn default() -> Self {
        Self {
            motion_window: 5,
            idle_grace_s: 3.0,
            min_segment_s: 0.5,
        }
    }
}

fn default_source() -> String {
    "sim".to_owned()
}

fn default_extent() -> (u32, u32) {
    (1920, 1080)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub fps: f64,
    pub duration_s: f64,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_source")]
    pub source: String,
    pub regions: Vec<Region>,
    #[serde(default = "default_start_phase")]
    pub start_phase: Phase,
    #[serde(default)]
    pub durations: PhaseDurations,
    /// Chance of an idle phase after each dump.
    #[serde(default)]
    pub idle_probability: f64,
    #[serde(default)]
    pub excavator: ExcavatorRig,
    #[serde(default)]
    pub roster: Vec<RosterMachine>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub observer: ObserverParams,
}

fn default_width() -> u32 {
    default_extent().0
}

fn default_height() -> u32 {
    default_extent().1
}

fn default_start_phase() -> Phase {
    Phase::Digging
}

impl ScenarioConfig {
    /// Default rig and regions over a 1920x1080 frame.
    pub fn new(seed: u64, fps: f64, duration_s: f64) -> Self {
        Self {
            seed,
            fps,
            duration_s,
            width: 1920,
            height: 1080,
            source: default_source(),
            regions: vec![
                Region::rect(RegionLabel::Digging, 300.0, 480.0, 460.0, 340.0).expect("valid rect"),
                Region::rect(RegionLabel::Dumping, 1200.0, 480.0, 440.0, 340.0).expect("valid rect"),
            ],
            start_phase: Phase::Digging,
            durations: PhaseDurations::default(),
            idle_probability: 0.0,
            excavator: ExcavatorRig::default(),
            roster: Vec::new(),
            noise: NoiseModel::default(),
            observer: ObserverParams::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let config: ScenarioConfig = read_toml(path.as_ref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).round() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(inconsistent("fps must be positive"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(inconsistent("duration_s must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(inconsistent("image extent must be positive"));
        }
        let d = &self.durations;
        for (name, r) in [("digging", d.digging), ("swing", d.swing), ("dumping", d.dumping), ("idle", d.idle)] {
            if !(r.min > 0.0 && r.max >= r.min && r.max.is_finite()) {
                return Err(inconsistent(format!("{name} duration range must be positive with min <= max")));
            }
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.idle_probability) || !unit(self.noise.drop_probability) {
            return Err(inconsistent("probabilities must lie in [0, 1]"));
        }
        if !(self.noise.keypoint_sigma_px >= 0.0 && self.noise.bbox_sigma_px >= 0.0) {
            return Err(inconsistent("noise sigmas must be non-negative"));
        }
        if !(self.observer.min_segment_s >= 0.0 && self.observer.idle_grace_s >= 0.0) {
            return Err(inconsistent("observer durations must be non-negative"));
        }
        if self.observer.motion_window < 2 {
            return Err(inconsistent("observer.motion_window must be at least 2"));
        }
        validate_regions(&self.regions)?;

        let rig = &self.excavator;
        if rig.dig_heading_deg == rig.dump_heading_deg {
            return Err(inconsistent("dig and dump headings must differ"));
        }
        if !(rig.arm_step_px > 0.0 && rig.arm_stroke_steps > 0) {
            return Err(inconsistent("arm_step_px and arm_stroke_steps must be positive"));
        }
        if !(unit(rig.keypoint_confidence) && unit(rig.detection_score)) {
            return Err(inconsistent("confidences must lie in [0, 1]"));
        }
        let max_offset = rig.max_arm_offset();
        for (heading, label) in [
            (rig.dig_heading(), RegionLabel::Digging),
            (rig.dump_heading(), RegionLabel::Dumping),
        ] {
            for k in 0..=rig.arm_stroke_steps {
                let offset = rig.arm_step_px * f64::from(k);
                let probe = rig.bucket_joint(heading, offset);
                if locate_point(probe, &self.regions) != label.location() {
                    return Err(inconsistent(format!(
                        "bucket joint at offset {offset} (max {max_offset}) is not inside the {label} region"
                    )));
                }
            }
        }
        for m in &self.roster {
            let [x, y, w, h] = m.bbox;
            if !(w > 0.0 && h > 0.0 && x >= 0.0 && y >= 0.0 && x + w <= f64::from(self.width) && y + h <= f64::from(self.height)) {
                return Err(inconsistent(format!("{} box lies outside the image", m.class)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub start_frame: u64,
    /// Exclusive.
    pub end_frame: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSpan {
    pub start_frame: u64,
    pub end_frame: u64,
}

/// A machine present in the scene; `key` 0 is the excavator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineIdentity {
    pub key: u32,
    pub class: MachineClass,
    pub first_frame: u64,
    /// Inclusive.
    pub last_frame: u64,
    /// Static box; `None` for the excavator.
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fps: f64,
    /// Frames before the first full motion window.
    pub warm_up_frames: u64,
    pub phases: Vec<PhaseSpan>,
    /// Label per frame, as the recognizer should report it.
    pub states: Vec<ActionState>,
    /// Debounce length the cycles were counted with.
    pub min_segment_s: f64,
    /// First frame of every confirmed digging segment.
    pub digging_starts: Vec<u64>,
    pub cycles: Vec<CycleSpan>,
    pub machines: Vec<MachineIdentity>,
    pub excavator_locations: Vec<LocationLabel>,
    pub alert_frames: Vec<u64>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn digging_segments(&self) -> usize {
        self.digging_starts.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedStream {
    pub header: StreamHeader,
    pub frames: Vec<PerceptionFrame>,
    pub truth: GroundTruth,
    regions: Vec<Region>,
}

impl SimulatedStream {
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
}

fn zigzag(k: u64, half_period: u32) -> f64 {
    let period = 2 * u64::from(half_period);
    let p = k % period;
    let step = if p <= u64::from(half_period) { p } else { period - p };
    step as f64
}

fn schedule(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<PhaseSpan> {
    let total = config.frame_count();
    let d = &config.durations;
    let mut spans = Vec::new();
    let mut phase = config.start_phase;
    let mut t = 0.0;
    let mut start = 0;
    while start < total {
        let range = match phase {
            Phase::Digging => d.digging,
            Phase::SwingToDump | Phase::SwingToDig => d.swing,
            Phase::Dumping => d.dumping,
            Phase::Idle => d.idle,
        };
        t += range.draw(rng);
        let end = ((t * config.fps).round() as u64).min(total);
        if end > start {
            spans.push(PhaseSpan {
                phase,
                start_frame: start,
                end_frame: end,
            });
        }
        start = end;
        phase = match phase {
            Phase::Digging => Phase::SwingToDump,
            Phase::SwingToDump => Phase::Dumping,
            Phase::Dumping if config.idle_probability > 0.0 && rng.random_bool(config.idle_probability) => {
                Phase::Idle
            }
            Phase::Dumping | Phase::Idle => Phase::SwingToDig,
            Phase::SwingToDig => Phase::Digging,
        };
    }
    spans
}

/// Heading and radial arm offset per frame.
fn kinematics(rig: &ExcavatorRig, spans: &[PhaseSpan]) -> Vec<(Phase, f64, f64)> {
    let (dig, dump) = (rig.dig_heading(), rig.dump_heading());
    let mut out = Vec::new();
    for span in spans {
        let n = (span.end_frame - span.start_frame) as f64;
        for f in span.start_frame..span.end_frame {
            let k = f - span.start_frame;
            let progress = (k + 1) as f64 / n;
            let (heading, offset) = match span.phase {
                Phase::Digging => (dig, rig.arm_step_px * zigzag(k, rig.arm_stroke_steps)),
                Phase::Dumping => (dump, rig.arm_step_px * zigzag(k, rig.arm_stroke_steps)),
                Phase::Idle => (dump, 0.0),
                Phase::SwingToDump => (dig + (dump - dig) * progress, 0.0),
                Phase::SwingToDig => (dump + (dig - dump) * progress, 0.0),
            };
            out.push((span.phase, heading, offset));
        }
    }
    out
}

/// Labels each frame with the state a recognizer using `observer`'s window
/// and idle grace must report, from the scripted motion alone.
fn label_states(kin: &[(Phase, f64, f64)], observer: &ObserverParams, fps: f64) -> Vec<ActionState> {
    let w = observer.motion_window;
    let body_moved: Vec<bool> = (0..kin.len()).map(|t| t > 0 && kin[t].1 != kin[t - 1].1).collect();
    let arm_moved: Vec<bool> = (0..kin.len())
        .map(|t| t > 0 && (kin[t].1 != kin[t - 1].1 || kin[t].2 != kin[t - 1].2))
        .collect();
    let mut states = Vec::with_capacity(kin.len());
    let mut prev = ActionState::Unknown;
    let mut still_since: Option<usize> = None;
    for (t, &(phase, ..)) in kin.iter().enumerate() {
        if t + 1 < w {
            states.push(ActionState::Unknown);
            continue;
        }
        // the window's displacements land on frames t-w+2 ..= t
        let recent = (t + 2 - w)..=t;
        let body_still = !recent.clone().any(|i| body_moved[i]);
        let arm_still = !recent.clone().any(|i| arm_moved[i]);
        let idle_ready = if body_still && arm_still {
            let since = *still_since.get_or_insert(t);
            (t - since) as f64 / fps >= observer.idle_grace_s
        } else {
            still_since = None;
            false
        };
        let state = if idle_ready {
            ActionState::Idle
        } else if !body_still {
            match prev {
                ActionState::Dumping | ActionState::SwingForDigging => ActionState::SwingForDigging,
                _ => ActionState::SwingAfterDigging,
            }
        } else {
            match phase {
                Phase::Digging => ActionState::Digging,
                Phase::Dumping if !arm_still => ActionState::Dumping,
                _ => prev,
            }
        };
        states.push(state);
        prev = state;
    }
    states
}

/// Digging starts that survive folding short runs into their predecessor
/// (a short leading run has no predecessor and stays).
fn digging_starts(states: &[ActionState], fps: f64, min_segment_s: f64) -> Vec<u64> {
    let mut runs: Vec<(ActionState, usize, usize)> = Vec::new();
    for (t, &s) in states.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.0 == s => run.2 += 1,
            _ => runs.push((s, t, 1)),
        }
    }
    // surviving runs as (state, start frame)
    let mut kept: Vec<(ActionState, usize)> = Vec::new();
    for (i, &(state, start, len)) in runs.iter().enumerate() {
        let short = (len as f64) / fps < min_segment_s;
        if i > 0 && short {
            continue;
        }
        if kept.last().is_some_and(|&(prev, _)| prev == state) {
            continue;
        }
        kept.push((state, start));
    }
    kept.iter()
        .filter(|(s, _)| *s == ActionState::Digging)
        .map(|&(_, t)| t as u64)
        .collect()
}

fn cycles_from_starts(starts: &[u64]) -> Vec<CycleSpan> {
    starts
        .windows(2)
        .map(|w| CycleSpan {
            start_frame: w[0],
            end_frame: w[1],
        })
        .collect()
}

/// Frames where two machines, or a human and a machine, share a region.
fn truth_alert_frames(truth: &GroundTruth, regions: &[Region]) -> Vec<u64> {
    let others: Vec<(MachineIdentity, LocationLabel)> = truth
        .machines
        .iter()
        .filter_map(|m| m.bbox.map(|b| (*m, locate_point(b.bottom_center(), regions))))
        .collect();
    let mut frames = Vec::new();
    for (t, &excavator_loc) in truth.excavator_locations.iter().enumerate() {
        let t = t as u64;
        let present = std::iter::once((MachineClass::Excavator, excavator_loc)).chain(
            others
                .iter()
                .filter(|(m, _)| m.first_frame <= t && t <= m.last_frame)
                .map(|(m, loc)| (m.class, *loc)),
        );
        let mut counts = [(0usize, 0usize); 2];
        for (class, loc) in present {
            let slot = match loc {
                LocationLabel::InDigging => 0,
                LocationLabel::InDumping => 1,
                LocationLabel::Elsewhere => continue,
            };
            if class.is_machine() {
                counts[slot].0 += 1;
            } else if class == MachineClass::Human {
                counts[slot].1 += 1;
            }
        }
        if counts.iter().any(|&(m, h)| m >= 2 || (m >= 1 && h >= 1)) {
            frames.push(t);
        }
    }
    frames
}

struct Noise {
    rng: ChaCha8Rng,
    model: NoiseModel,
    keypoint: Option<Normal<f64>>,
    bbox: Option<Normal<f64>>,
}

impl Noise {
    fn new(seed: u64, model: NoiseModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let normal = |sigma: f64| (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
        Self {
            rng,
            model,
            keypoint: normal(model.keypoint_sigma_px),
            bbox: normal(model.bbox_sigma_px),
        }
    }

    fn dropped(&mut self) -> bool {
        self.model.drop_probability > 0.0 && self.rng.random_bool(self.model.drop_probability)
    }

    fn jitter_point(&mut self, p: Point) -> Point {
        match self.keypoint {
            Some(n) => Point::new(p.x + n.sample(&mut self.rng), p.y + n.sample(&mut self.rng)),
            None => p,
        }
    }

    fn jitter_box(&mut self, b: BBox, width: u32, height: u32) -> BBox {
        let b = match self.bbox {
            Some(n) => {
                let mut d = [0.0; 4];
                for v in &mut d {
                    *v = n.sample(&mut self.rng);
                }
                BBox::new(b.x + d[0], b.y + d[1], b.w + d[2], b.h + d[3])
            }
            None => b,
        };
        clamp_box(b.x, b.y, b.x + b.w, b.y + b.h, width, height)
    }
}

fn clamp_box(x0: f64, y0: f64, x1: f64, y1: f64, width: u32, height: u32) -> BBox {
    let (w, h) = (f64::from(width), f64::from(height));
    let x0 = x0.clamp(0.0, w - 1.0);
    let y0 = y0.clamp(0.0, h - 1.0);
    let x1 = x1.clamp(x0 + 1.0, w);
    let y1 = y1.clamp(y0 + 1.0, h);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

pub fn generate(config: &ScenarioConfig) -> Result<SimulatedStream, SimError> {
    config.validate()?;
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spans = schedule(config, &mut schedule_rng);
    let kin = kinematics(&config.excavator, &spans);
    let states = label_states(&kin, &config.observer, config.fps);
    let starts = digging_starts(&states, config.fps, config.observer.min_segment_s);
    let rig = &config.excavator;
    let parts = rig.parts();

    let roster: Vec<MachineIdentity> = config
        .roster
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let last_possible = kin.len().saturating_sub(1) as u64;
            let first = (m.enter_s * config.fps).round() as u64;
            let last = m
                .exit_s
                .map_or(last_possible, |s| ((s * config.fps).round() as u64).saturating_sub(1))
                .min(last_possible);
            let [x, y, w, h] = m.bbox;
            MachineIdentity {
                key: i as u32 + 1,
                class: m.class,
                first_frame: first,
                last_frame: last,
                bbox: Some(BBox::new(x, y, w, h)),
            }
        })
        .collect();

    let mut noise = Noise::new(config.seed, config.noise);
    let mut frames = Vec::with_capacity(kin.len());
    let mut excavator_locations = Vec::with_capacity(kin.len());
    for (t, &(_, heading, offset)) in kin.iter().enumerate() {
        let t = t as u64;
        excavator_locations.push(locate_point(rig.bucket_joint(heading, offset), &config.regions));
        let mut frame = PerceptionFrame::new(t);

        let truth_points: Vec<Point> = parts.iter().map(|p| rig.keypoint(p, heading, offset)).collect();
        if !noise.dropped() {
            let mut pose = Pose::default();
            for (part, &p) in parts.iter().zip(&truth_points) {
                pose.set(part.name, Keypoint::new(noise.jitter_point(p), rig.keypoint_confidence));
            }
            let m = rig.bbox_margin_px;
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in &truth_points {
                x0 = x0.min(p.x);
                y0 = y0.min(p.y);
                x1 = x1.max(p.x);
                y1 = y1.max(p.y);
            }
            let bbox = clamp_box(x0 - m, y0 - m, x1 + m, y1 + m, config.width, config.height);
            let bbox = noise.jitter_box(bbox, config.width, config.height);
            frame.detections.push(Detection::new(MachineClass::Excavator, bbox, rig.detection_score));
            frame.poses.push(PoseAttachment { det: 0, pose });
        }
        for m in &roster {
            if t < m.first_frame || t > m.last_frame || noise.dropped() {
                continue;
            }
            let bbox = noise.jitter_box(m.bbox.expect("roster box"), config.width, config.height);
            frame.detections.push(Detection::new(m.class, bbox, 0.9));
        }
        frames.push(frame);
    }

    let mut machines = vec![MachineIdentity {
        key: 0,
        class: MachineClass::Excavator,
        first_frame: 0,
        last_frame: kin.len().saturating_sub(1) as u64,
        bbox: None,
    }];
    machines.extend(roster);
    let mut truth = GroundTruth {
        fps: config.fps,
        warm_up_frames: config.observer.motion_window as u64 - 1,
        phases: spans,
        cycles: cycles_from_starts(&starts),
        digging_starts: starts,
        min_segment_s: config.observer.min_segment_s,
        states,
        machines,
        excavator_locations,
        alert_frames: Vec::new(),
    };
    truth.alert_frames = truth_alert_frames(&truth, &config.regions);

    Ok(SimulatedStream {
        header: StreamHeader::new(config.fps, config.width, config.height, config.source.clone()),
        frames,
        truth,
        regions: config.regions.clone(),
    })
}

/// A machine placed into an existing stream for a frame range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub class: MachineClass,
    pub first_frame: u64,
    /// Inclusive.
    pub last_frame: u64,
    /// Defaults to a 120x80 box standing on the first digging region's centroid.
    pub bbox: Option<BBox>,
}

pub fn inject_collision(stream: &mut SimulatedStream, injection: &Injection) -> Result<(), SimError> {
    let frames = stream.frames.len() as u64;
    if injection.first_frame > injection.last_frame || injection.last_frame >= frames {
        return Err(SimError::InjectionRange {
            first: injection.first_frame,
            last: injection.last_frame,
            frames,
        });
    }
    let bbox = match injection.bbox {
        Some(b) => b,
        None => {
            let dig = stream
                .regions
                .iter()
                .find(|r| r.label() == RegionLabel::Digging)
                .ok_or_else(|| inconsistent("no digging region to inject into"))?;
            let c = dig.centroid();
            BBox::new(c.x - 60.0, c.y - 80.0, 120.0, 80.0)
        }
    };
    let (w, h) = (f64::from(stream.header.width), f64::from(stream.header.height));
    if !(bbox.w > 0.0 && bbox.h > 0.0 && bbox.x >= 0.0 && bbox.y >= 0.0 && bbox.right() <= w && bbox.bottom() <= h) {
        return Err(inconsistent("injected box lies outside the image"));
    }
    for frame in &mut stream.frames[injection.first_frame as usize..=injection.last_frame as usize] {
        frame.detections.push(Detection::new(injection.class, bbox, 0.9));
    }
    let key = stream.truth.machines.iter().map(|m| m.key).max().unwrap_or(0) + 1;
    stream.truth.machines.push(MachineIdentity {
        key,
        class: injection.class,
        first_frame: injection.first_frame,
        last_frame: injection.last_frame,
        bbox: Some(bbox),
    });
    stream.truth.alert_frames = truth_alert_frames(&stream.truth, &stream.regions);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_config(seed: u64, duration_s: f64) -> ScenarioConfig {
        let mut config = ScenarioConfig::new(seed, 25.0, duration_s);
        config.durations = PhaseDurations {
            digging: DurationRange::fixed(7.0),
            swing: DurationRange::fixed(4.5),
            dumping: DurationRange::fixed(6.5),
            idle: DurationRange::fixed(5.0),
        };
        config
    }

    #[test]
    fn zigzag_shape() {
        let seq: Vec<f64> = (0..8).map(|k| zigzag(k, 3)).collect();
        assert_eq!(seq, vec![0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut config = ScenarioConfig::new(42, 25.0, 60.0);
        config.noise = NoiseModel { keypoint_sigma_px: 2.0, drop_probability: 0.05, bbox_sigma_px: 1.0 };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        config.seed = 43;
        assert_ne!(generate(&config).unwrap().frames, a.frames);
    }

    #[test]
    fn noise_does_not_change_schedule() {
        let clean = ScenarioConfig::new(7, 25.0, 120.0);
        let mut noisy = clean.clone();
        noisy.noise = NoiseModel { keypoint_sigma_px: 2.0, drop_probability: 0.05, bbox_sigma_px: 2.0 };
        assert_eq!(generate(&clean).unwrap().truth, generate(&noisy).unwrap().truth);
    }

    #[test]
    fn short_scenario_is_single_digging_phase() {
        let sim = generate(&fixed_config(1, 3.0)).unwrap();
        assert_eq!(sim.truth.phases.len(), 1);
        assert!(sim.truth.cycles.is_empty());
        let w = sim.truth.warm_up_frames as usize;
        assert!(sim.truth.states[w..].iter().all(|s| *s == ActionState::Digging));
    }

    #[test]
    fn fixed_cycle_schedule() {
        let sim = generate(&fixed_config(1, 100.0)).unwrap();
        // digs start at 0, 22.5, 45, 67.5, 90 s
        let dig_starts: Vec<u64> = sim
            .truth
            .phases
            .iter()
            .filter(|p| p.phase == Phase::Digging)
            .map(|p| p.start_frame)
            .collect();
        assert_eq!(dig_starts, vec![0, 563, 1125, 1688, 2250]);
        // recognizer lags 3 frames (window 5) behind each swing's end; the first
        // start follows the 4-frame warm-up
        let starts: Vec<u64> = sim.truth.cycles.iter().map(|c| c.start_frame).collect();
        assert_eq!(starts, vec![4, 566, 1128, 1691]);
    }

    #[test]
    fn truncated_final_dig_is_not_a_start() {
        // the third dig begins 0.2 s before the end
        let sim = generate(&fixed_config(1, 45.2)).unwrap();
        assert_eq!(sim.truth.digging_starts, vec![4, 566]);
        let sim = generate(&fixed_config(1, 46.0)).unwrap();
        assert_eq!(sim.truth.digging_starts, vec![4, 566, 1128]);
    }

    #[test]
    fn swing_labels_follow_previous_state() {
        let mut config = fixed_config(3, 200.0);
        config.idle_probability = 1.0;
        let sim = generate(&config).unwrap();
        let s = &sim.truth.states;
        assert!(s.contains(&ActionState::Idle));
        for w in s.windows(2) {
            assert!(!(w[0] == ActionState::Digging && w[1] == ActionState::SwingForDigging));
            assert!(!(w[0] == ActionState::Dumping && w[1] == ActionState::SwingAfterDigging));
        }
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut config = ScenarioConfig::new(1, 25.0, 10.0);
        config.regions[1] = Region::rect(RegionLabel::Dumping, 700.0, 480.0, 100.0, 100.0).unwrap();
        assert!(matches!(generate(&config), Err(SimError::Geometry(GeometryError::Overlapping))));

        let mut config = ScenarioConfig::new(1, 25.0, 10.0);
        config.excavator.dump_heading_deg = 90.0;
        assert!(matches!(generate(&config), Err(SimError::Inconsistent(_))));

        let mut config = ScenarioConfig::new(1, 25.0, 10.0);
        config.durations.swing = DurationRange::new(0.0, 1.0);
        assert!(matches!(generate(&config), Err(SimError::Inconsistent(_))));
    }

    #[test]
    fn injected_loader_alerts_while_excavator_digs() {
        let mut config = fixed_config(1, 20.0);
        config.durations.digging = DurationRange::fixed(12.0);
        let mut sim = generate(&config).unwrap();
        assert!(sim.truth.alert_frames.is_empty());
        inject_collision(
            &mut sim,
            &Injection { class: MachineClass::Loader, first_frame: 100, last_frame: 200, bbox: None },
        )
        .unwrap();
        assert_eq!(sim.truth.alert_frames, (100..=200).collect::<Vec<u64>>());
        assert_eq!(sim.frames[150].detections.len(), 2);
        assert_eq!(sim.frames[201].detections.len(), 1);
    }

    #[test]
    fn injection_outside_digging_area_adds_no_alerts() {
        let mut sim = generate(&fixed_config(1, 20.0)).unwrap();
        inject_collision(
            &mut sim,
            &Injection {
                class: MachineClass::Loader,
                first_frame: 100,
                last_frame: 200,
                bbox: Some(BBox::new(50.0, 50.0, 100.0, 80.0)),
            },
        )
        .unwrap();
        assert!(sim.truth.alert_frames.is_empty());
    }

    #[test]
    fn injection_range_checked() {
        let mut sim = generate(&fixed_config(1, 4.0)).unwrap();
        let err = inject_collision(
            &mut sim,
            &Injection { class: MachineClass::Human, first_frame: 50, last_frame: 100, bbox: None },
        );
        assert!(matches!(err, Err(SimError::InjectionRange { frames: 100, .. })));
    }

    #[test]
    fn scenario_toml_round_trip() {
        let config = fixed_config(9, 30.0);
        let text = toml::to_string(&config).unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), config);
    }
}
