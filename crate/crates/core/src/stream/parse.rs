//! Line-delimited JSON reader and writer.
//!
//! The first non-blank line is a header object `{fps, width, height, source}`;
//! every following line is one frame object
//! `{index, detections: [{class, bbox: [x, y, w, h], score}], poses: [{det, keypoints: {name: [x, y, conf]}}]}`.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use super::{
    Detection, Keypoint, KeypointName, MachineClass, PerceptionFrame, Pose, PoseAttachment,
    StreamHeader,
};
use crate::geometry::{BBox, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Any invalid record aborts the read.
    #[default]
    Strict,
    /// Invalid frame records are skipped and counted; unknown fields are ignored.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamErrorKind {
    #[error("read failed: {0}")]
    Io(String),
    #[error("missing header record")]
    MissingHeader,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("unknown keypoint `{0}`")]
    UnknownKeypoint(String),
    #[error("duplicate keypoint `{0}`")]
    DuplicateKeypoint(String),
    #[error("missing keypoint `{0}`")]
    MissingKeypoint(&'static str),
    #[error("frame index {index} does not follow {previous}")]
    NonMonotoneIndex { previous: u64, index: u64 },
    #[error("fps must be positive, got {0}")]
    InvalidFps(f64),
    #[error("image extent must be positive, got {width}x{height}")]
    InvalidExtent { width: u32, height: u32 },
    #[error("detection {det}: {reason}")]
    InvalidDetection { det: usize, reason: String },
    #[error("pose {pose}: {reason}")]
    InvalidPose { pose: usize, reason: String },
}

/// A stream error tagged with the 1-based line it occurred on.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct StreamError {
    pub line: usize,
    pub kind: StreamErrorKind,
}

impl StreamError {
    fn new(line: usize, kind: StreamErrorKind) -> Self {
        Self { line, kind }
    }
}

#[derive(Serialize, Deserialize)]
struct WireHeader {
    fps: f64,
    width: u32,
    height: u32,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct WireFrame {
    index: u64,
    detections: Vec<WireDetection>,
    poses: Vec<WirePose>,
}

#[derive(Serialize, Deserialize)]
struct WireDetection {
    class: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct WirePose {
    det: usize,
    keypoints: WireKeypoints,
}

/// Keypoint map kept as ordered pairs so duplicate names survive parsing.
struct WireKeypoints(Vec<(String, [f64; 3])>);

impl Serialize for WireKeypoints {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (name, value) in &self.0 {
            map.serialize_entry(name, value)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for WireKeypoints {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairsVisitor;

        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = WireKeypoints;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of keypoint name to [x, y, confidence]")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut pairs = Vec::with_capacity(access.size_hint().unwrap_or(10));
                while let Some((name, value)) = access.next_entry::<String, [f64; 3]>()? {
                    pairs.push((name, value));
                }
                Ok(WireKeypoints(pairs))
            }
        }

        deserializer.deserialize_map(PairsVisitor)
    }
}

const HEADER_FIELDS: &[&str] = &["fps", "width", "height", "source"];
const FRAME_FIELDS: &[&str] = &["index", "detections", "poses"];
const DETECTION_FIELDS: &[&str] = &["class", "bbox", "score"];
const POSE_FIELDS: &[&str] = &["det", "keypoints"];

fn reject_unknown(object: &Value, allowed: &[&str], path: &str) -> Result<(), StreamErrorKind> {
    if let Value::Object(map) = object {
        if let Some(key) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(StreamErrorKind::UnknownField(format!("{path}{key}")));
        }
    }
    Ok(())
}

fn check_frame_fields(value: &Value) -> Result<(), StreamErrorKind> {
    reject_unknown(value, FRAME_FIELDS, "")?;
    if let Some(Value::Array(dets)) = value.get("detections") {
        for (i, det) in dets.iter().enumerate() {
            reject_unknown(det, DETECTION_FIELDS, &format!("detections[{i}]."))?;
        }
    }
    if let Some(Value::Array(poses)) = value.get("poses") {
        for (i, pose) in poses.iter().enumerate() {
            reject_unknown(pose, POSE_FIELDS, &format!("poses[{i}]."))?;
        }
    }
    Ok(())
}

fn malformed(err: serde_json::Error) -> StreamErrorKind {
    StreamErrorKind::Malformed(err.to_string())
}

fn parse_header(line: &str, mode: ParseMode) -> Result<StreamHeader, StreamErrorKind> {
    if mode == ParseMode::Strict {
        let value: Value = serde_json::from_str(line).map_err(malformed)?;
        reject_unknown(&value, HEADER_FIELDS, "")?;
    }
    let wire: WireHeader = serde_json::from_str(line).map_err(malformed)?;
    if !(wire.fps.is_finite() && wire.fps > 0.0) {
        return Err(StreamErrorKind::InvalidFps(wire.fps));
    }
    if wire.width == 0 || wire.height == 0 {
        return Err(StreamErrorKind::InvalidExtent {
            width: wire.width,
            height: wire.height,
        });
    }
    Ok(StreamHeader {
        fps: wire.fps,
        width: wire.width,
        height: wire.height,
        source: wire.source,
    })
}

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn convert_detection(
    det: usize,
    wire: WireDetection,
    header: &StreamHeader,
) -> Result<Detection, StreamErrorKind> {
    let class: MachineClass = wire.class.parse().map_err(StreamErrorKind::UnknownClass)?;
    let invalid = |reason: &str| StreamErrorKind::InvalidDetection {
        det,
        reason: reason.to_owned(),
    };
    let [x, y, w, h] = wire.bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(invalid("bbox width and height must be positive"));
    }
    if !(x >= 0.0 && y >= 0.0 && x + w <= f64::from(header.width) && y + h <= f64::from(header.height)) {
        return Err(invalid("bbox outside image extent"));
    }
    if !unit_interval(wire.score) {
        return Err(invalid("score outside [0, 1]"));
    }
    Ok(Detection::new(class, BBox::new(x, y, w, h), wire.score))
}

fn convert_pose(
    index: usize,
    wire: WirePose,
    detections: &[Detection],
) -> Result<PoseAttachment, StreamErrorKind> {
    let invalid = |reason: String| StreamErrorKind::InvalidPose {
        pose: index,
        reason,
    };
    match detections.get(wire.det) {
        None => return Err(invalid(format!("references missing detection {}", wire.det))),
        Some(d) if d.class != MachineClass::Excavator => {
            return Err(invalid(format!(
                "references detection {} of class {}",
                wire.det, d.class
            )))
        }
        Some(_) => {}
    }
    let mut slots: [Option<Keypoint>; 10] = [None; 10];
    for (name, [x, y, conf]) in wire.keypoints.0 {
        let key: KeypointName = name.parse().map_err(StreamErrorKind::UnknownKeypoint)?;
        if slots[key.index()].is_some() {
            return Err(StreamErrorKind::DuplicateKeypoint(name));
        }
        if !unit_interval(conf) {
            return Err(invalid(format!("{key} confidence outside [0, 1]")));
        }
        slots[key.index()] = Some(Keypoint::new(Point::new(x, y), conf));
    }
    let mut pose = Pose::default();
    for key in KeypointName::ALL {
        let kp = slots[key.index()].ok_or(StreamErrorKind::MissingKeypoint(key.as_str()))?;
        pose.set(key, kp);
    }
    Ok(PoseAttachment {
        det: wire.det,
        pose,
    })
}

fn parse_frame(
    line: &str,
    header: &StreamHeader,
    mode: ParseMode,
) -> Result<PerceptionFrame, StreamErrorKind> {
    if mode == ParseMode::Strict {
        let value: Value = serde_json::from_str(line).map_err(malformed)?;
        check_frame_fields(&value)?;
    }
    let wire: WireFrame = serde_json::from_str(line).map_err(malformed)?;
    let detections = wire
        .detections
        .into_iter()
        .enumerate()
        .map(|(i, d)| convert_detection(i, d, header))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = HashSet::new();
    let mut poses = Vec::with_capacity(wire.poses.len());
    for (i, p) in wire.poses.into_iter().enumerate() {
        let attached = convert_pose(i, p, &detections)?;
        if !seen.insert(attached.det) {
            return Err(StreamErrorKind::InvalidPose {
                pose: i,
                reason: format!("second pose for detection {}", attached.det),
            });
        }
        poses.push(attached);
    }
    Ok(PerceptionFrame {
        index: wire.index,
        detections,
        poses,
    })
}

/// Sequential reader over a perception stream. The header is consumed on
/// construction; frames are yielded by iteration.
pub struct StreamReader<R> {
    reader: R,
    mode: ParseMode,
    header: StreamHeader,
    line_no: usize,
    last_index: Option<u64>,
    skipped: usize,
    done: bool,
    buf: String,
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(mut reader: R, mode: ParseMode) -> Result<Self, StreamError> {
        let mut buf = String::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader
                .read_line(&mut buf)
                .map_err(|e| StreamError::new(line_no + 1, StreamErrorKind::Io(e.to_string())))?;
            if n == 0 {
                return Err(StreamError::new(line_no.max(1), StreamErrorKind::MissingHeader));
            }
            line_no += 1;
            if !buf.trim().is_empty() {
                break;
            }
        }
        let header = parse_header(buf.trim(), mode).map_err(|k| StreamError::new(line_no, k))?;
        Ok(Self {
            reader,
            mode,
            header,
            line_no,
            last_index: None,
            skipped: 0,
            done: false,
            buf,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    /// Number of frame records dropped in lenient mode so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn next_frame(&mut self) -> Option<Result<PerceptionFrame, StreamError>> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    return Some(Err(StreamError::new(
                        self.line_no + 1,
                        StreamErrorKind::Io(e.to_string()),
                    )))
                }
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = parse_frame(line, &self.header, self.mode).and_then(|frame| {
                match self.last_index {
                    Some(previous) if frame.index <= previous => {
                        Err(StreamErrorKind::NonMonotoneIndex {
                            previous,
                            index: frame.index,
                        })
                    }
                    _ => Ok(frame),
                }
            });
            match parsed {
                Ok(frame) => {
                    self.last_index = Some(frame.index);
                    return Some(Ok(frame));
                }
                Err(_) if self.mode == ParseMode::Lenient => self.skipped += 1,
                Err(kind) => return Some(Err(StreamError::new(self.line_no, kind))),
            }
        }
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<PerceptionFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_frame();
        if matches!(item, None | Some(Err(_))) {
            self.done = true;
        }
        item
    }
}

/// A fully read stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedStream {
    pub header: StreamHeader,
    pub frames: Vec<PerceptionFrame>,
    /// Records skipped in lenient mode.
    pub skipped: usize,
}

pub fn parse_stream<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParsedStream, StreamError> {
    let mut reader = StreamReader::new(reader, mode)?;
    let frames = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok(ParsedStream {
        header: reader.header,
        frames,
        skipped: reader.skipped,
    })
}

fn json_line<W: Write, T: Serialize>(mut out: W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")
}

pub fn write_header<W: Write>(out: W, header: &StreamHeader) -> io::Result<()> {
    json_line(
        out,
        &WireHeader {
            fps: header.fps,
            width: header.width,
            height: header.height,
            source: header.source.clone(),
        },
    )
}

pub fn write_frame<W: Write>(out: W, frame: &PerceptionFrame) -> io::Result<()> {
    let wire = WireFrame {
        index: frame.index,
        detections: frame
            .detections
            .iter()
            .map(|d| WireDetection {
                class: d.class.as_str().to_owned(),
                bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                score: d.score,
            })
            .collect(),
        poses: frame
            .poses
            .iter()
            .map(|p| WirePose {
                det: p.det,
                keypoints: WireKeypoints(
                    p.pose
                        .iter()
                        .map(|(name, kp)| {
                            (
                                name.as_str().to_owned(),
                                [kp.position.x, kp.position.y, kp.confidence],
                            )
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    json_line(out, &wire)
}

pub fn write_stream<W: Write>(
    mut out: W,
    header: &StreamHeader,
    frames: &[PerceptionFrame],
) -> io::Result<()> {
    write_header(&mut out, header)?;
    for frame in frames {
        write_frame(&mut out, frame)?;
    }
    Ok(())
}
