//! Perception-stream model: the records produced upstream by the detector
//! and pose estimator, plus their reader/writer, Soft-NMS deduplication and
//! detection-based track association.

mod nms;
mod parse;
mod track;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Point};

pub use nms::{soft_nms, soft_nms_indexed, SoftNmsParams};
pub use parse::{
    parse_stream, write_frame, write_header, write_stream, ParseMode, StreamError,
    StreamErrorKind, StreamReader, ParsedStream,
};
pub use track::{track_update, Track, TrackId, TrackUpdate, Tracker, TrackerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineClass {
    Excavator,
    Loader,
    Human,
    Truck,
    Crane,
    Cone,
    Hook,
    Car,
    Shovel,
}

impl MachineClass {
    pub const ALL: [MachineClass; 9] = [
        MachineClass::Excavator,
        MachineClass::Loader,
        MachineClass::Human,
        MachineClass::Truck,
        MachineClass::Crane,
        MachineClass::Cone,
        MachineClass::Hook,
        MachineClass::Car,
        MachineClass::Shovel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MachineClass::Excavator => "excavator",
            MachineClass::Loader => "loader",
            MachineClass::Human => "human",
            MachineClass::Truck => "truck",
            MachineClass::Crane => "crane",
            MachineClass::Cone => "cone",
            MachineClass::Hook => "hook",
            MachineClass::Car => "car",
            MachineClass::Shovel => "shovel",
        }
    }

    /// Moving plant that counts towards the two-machines-in-a-region rule.
    pub fn is_machine(self) -> bool {
        matches!(
            self,
            MachineClass::Excavator | MachineClass::Loader | MachineClass::Truck | MachineClass::Crane
        )
    }
}

impl fmt::Display for MachineClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MachineClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MachineClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: MachineClass,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(class: MachineClass, bbox: BBox, score: f64) -> Self {
        Self { class, bbox, score }
    }
}

/// The ten excavator parts, in wire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeypointName {
    BucketEnd1,
    BucketEnd2,
    BucketJoint,
    ArmJoint,
    BoomCylinder,
    BoomBase,
    Body1,
    Body2,
    Body3,
    Body4,
}

impl KeypointName {
    pub const ALL: [KeypointName; 10] = [
        KeypointName::BucketEnd1,
        KeypointName::BucketEnd2,
        KeypointName::BucketJoint,
        KeypointName::ArmJoint,
        KeypointName::BoomCylinder,
        KeypointName::BoomBase,
        KeypointName::Body1,
        KeypointName::Body2,
        KeypointName::Body3,
        KeypointName::Body4,
    ];

    /// Keypoints whose joint motion decides whether the upper body swings.
    pub const BODY: [KeypointName; 4] = [
        KeypointName::Body1,
        KeypointName::Body2,
        KeypointName::Body3,
        KeypointName::Body4,
    ];

    /// Bucket and arm keypoints.
    pub const ARM: [KeypointName; 4] = [
        KeypointName::BucketEnd1,
        KeypointName::BucketEnd2,
        KeypointName::BucketJoint,
        KeypointName::ArmJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KeypointName::BucketEnd1 => "bucket_end1",
            KeypointName::BucketEnd2 => "bucket_end2",
            KeypointName::BucketJoint => "bucket_joint",
            KeypointName::ArmJoint => "arm_joint",
            KeypointName::BoomCylinder => "boom_cylinder",
            KeypointName::BoomBase => "boom_base",
            KeypointName::Body1 => "body1",
            KeypointName::Body2 => "body2",
            KeypointName::Body3 => "body3",
            KeypointName::Body4 => "body4",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for KeypointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeypointName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KeypointName::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub position: Point,
    pub confidence: f64,
}

impl Keypoint {
    pub const fn new(position: Point, confidence: f64) -> Self {
        Self {
            position,
            confidence,
        }
    }
}

/// A complete excavator pose: all ten keypoints, indexed by [`KeypointName`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    keypoints: [Keypoint; 10],
}

impl Pose {
    pub fn new(keypoints: [Keypoint; 10]) -> Self {
        Self { keypoints }
    }

    /// Every keypoint at the same place and confidence.
    pub fn uniform(position: Point, confidence: f64) -> Self {
        Self::new([Keypoint::new(position, confidence); 10])
    }

    pub fn get(&self, name: KeypointName) -> Keypoint {
        self.keypoints[name.index()]
    }

    pub fn set(&mut self, name: KeypointName, keypoint: Keypoint) {
        self.keypoints[name.index()] = keypoint;
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeypointName, Keypoint)> + '_ {
        KeypointName::ALL.into_iter().zip(self.keypoints.iter().copied())
    }
}

/// A pose attached to the detection at index `det` of the same frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseAttachment {
    pub det: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerceptionFrame {
    pub index: u64,
    pub detections: Vec<Detection>,
    pub poses: Vec<PoseAttachment>,
}

impl PerceptionFrame {
    pub fn new(index: u64) -> Self {
        Self {
            index,
            ..Self::default()
        }
    }

    pub fn pose_for(&self, det: usize) -> Option<&Pose> {
        self.poses.iter().find(|p| p.det == det).map(|p| &p.pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub source: String,
}

impl StreamHeader {
    pub fn new(fps: f64, width: u32, height: u32, source: impl Into<String>) -> Self {
        Self {
            fps,
            width,
            height,
            source: source.into(),
        }
    }
}
