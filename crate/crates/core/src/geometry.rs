//! Working-area regions and the planar primitives shared by the rest of the
//! crate: points, axis-aligned boxes, polygon containment and box IoU.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{KeypointName, Pose};

/// Relative tolerance used when deciding whether a point lies on a polygon edge.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }
}

/// Axis-aligned box in pixels, top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Ground-contact point used to place machines without a pose.
    pub fn bottom_center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.bottom())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

/// Intersection over union of two boxes with positive extent.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Digging,
    Dumping,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 2] = [RegionLabel::Digging, RegionLabel::Dumping];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionLabel::Digging => "digging",
            RegionLabel::Dumping => "dumping",
        }
    }

    pub fn location(self) -> LocationLabel {
        match self {
            RegionLabel::Digging => LocationLabel::InDigging,
            RegionLabel::Dumping => LocationLabel::InDumping,
        }
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationLabel {
    InDigging,
    InDumping,
    Elsewhere,
}

impl LocationLabel {
    pub fn region(self) -> Option<RegionLabel> {
        match self {
            LocationLabel::InDigging => Some(RegionLabel::Digging),
            LocationLabel::InDumping => Some(RegionLabel::Dumping),
            LocationLabel::Elsewhere => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LocationLabel::InDigging => "in_digging",
            LocationLabel::InDumping => "in_dumping",
            LocationLabel::Elsewhere => "elsewhere",
        }
    }
}

impl fmt::Display for LocationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocationLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in_digging" => Ok(LocationLabel::InDigging),
            "in_dumping" => Ok(LocationLabel::InDumping),
            "elsewhere" => Ok(LocationLabel::Elsewhere),
            other => Err(format!("unknown location `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("{label} region needs at least 3 vertices, got {count}")]
    TooFewVertices { label: RegionLabel, count: usize },
    #[error("{label} region has a non-finite vertex")]
    NonFinite { label: RegionLabel },
    #[error("{label} region has zero area")]
    ZeroArea { label: RegionLabel },
    #[error("{label} region polygon self-intersects (edges {first} and {second})")]
    SelfIntersecting {
        label: RegionLabel,
        first: usize,
        second: usize,
    },
    #[error("digging and dumping regions overlap")]
    Overlapping,
}

/// A labeled simple polygon in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegion", into = "RawRegion")]
pub struct Region {
    label: RegionLabel,
    polygon: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    label: RegionLabel,
    polygon: Vec<[f64; 2]>,
}

impl TryFrom<RawRegion> for Region {
    type Error = GeometryError;

    fn try_from(raw: RawRegion) -> Result<Self, Self::Error> {
        Region::new(
            raw.label,
            raw.polygon.into_iter().map(|[x, y]| Point::new(x, y)).collect(),
        )
    }
}

impl From<Region> for RawRegion {
    fn from(region: Region) -> Self {
        RawRegion {
            label: region.label,
            polygon: region.polygon.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl Region {
    /// Builds a region, rejecting degenerate or self-intersecting polygons.
    pub fn new(label: RegionLabel, polygon: Vec<Point>) -> Result<Self, GeometryError> {
        if polygon.len() < 3 {
            return Err(GeometryError::TooFewVertices {
                label,
                count: polygon.len(),
            });
        }
        if polygon.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite { label });
        }
        if let Some((first, second)) = first_self_intersection(&polygon) {
            return Err(GeometryError::SelfIntersecting {
                label,
                first,
                second,
            });
        }
        if signed_area(&polygon).abs() <= f64::EPSILON {
            return Err(GeometryError::ZeroArea { label });
        }
        Ok(Self { label, polygon })
    }

    /// Axis-aligned rectangle region, handy for fixtures and configs.
    pub fn rect(label: RegionLabel, x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Region::new(
            label,
            vec![
                Point::new(x, y),
                Point::new(x + w, y),
                Point::new(x + w, y + h),
                Point::new(x, y + h),
            ],
        )
    }

    pub fn label(&self) -> RegionLabel {
        self.label
    }

    pub fn polygon(&self) -> &[Point] {
        &self.polygon
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.polygon).abs()
    }

    /// Area-weighted centroid; lies inside for convex polygons.
    pub fn centroid(&self) -> Point {
        let a = signed_area(&self.polygon);
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in edges(&self.polygon) {
            let cross = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * cross;
            cy += (p.y + q.y) * cross;
        }
        Point::new(cx / (6.0 * a), cy / (6.0 * a))
    }

    pub fn contains(&self, point: Point) -> bool {
        point_in_region(point, self)
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        edges(&self.polygon)
    }
}

fn edges(polygon: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    polygon
        .iter()
        .copied()
        .zip(polygon.iter().copied().cycle().skip(1))
}

fn signed_area(polygon: &[Point]) -> f64 {
    edges(polygon)
        .map(|(p, q)| p.x * q.y - q.x * p.y)
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let scale = (b.x - a.x).abs().max((b.y - a.y).abs()).max(1.0);
    if cross(a, b, p).abs() > EDGE_EPS * scale * scale {
        return false;
    }
    let tol = EDGE_EPS * scale;
    p.x >= a.x.min(b.x) - tol
        && p.x <= a.x.max(b.x) + tol
        && p.y >= a.y.min(b.y) - tol
        && p.y <= a.y.max(b.y) + tol
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

fn first_self_intersection(polygon: &[Point]) -> Option<(usize, usize)> {
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (polygon[j], polygon[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Even-odd containment test. Points on an edge or vertex count as inside.
pub fn point_in_region(point: Point, region: &Region) -> bool {
    let mut inside = false;
    for (a, b) in region.edges() {
        if on_segment(point, a, b) {
            return true;
        }
        if (a.y > point.y) != (b.y > point.y) {
            let x_cross = a.x + (point.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if point.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// True when two regions share any point (edge crossing or containment).
pub fn regions_overlap(a: &Region, b: &Region) -> bool {
    for (p, q) in a.edges() {
        for (r, s) in b.edges() {
            if segments_intersect(p, q, r, s) {
                return true;
            }
        }
    }
    a.contains(b.polygon[0]) || b.contains(a.polygon[0])
}

/// Rejects configurations where a digging polygon touches a dumping polygon.
pub fn validate_regions(regions: &[Region]) -> Result<(), GeometryError> {
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.label != b.label && regions_overlap(a, b) {
                return Err(GeometryError::Overlapping);
            }
        }
    }
    Ok(())
}

/// Returned when no probe keypoint clears the confidence floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("location indeterminate: no probe keypoint above the confidence floor")]
pub struct Indeterminate;

/// Candidate probe points in priority order (bucket joint, arm joint,
/// bucket-end midpoint) with their confidences.
pub fn probe_points(pose: &Pose) -> [(Point, f64); 3] {
    let bucket_joint = pose.get(KeypointName::BucketJoint);
    let arm_joint = pose.get(KeypointName::ArmJoint);
    let end1 = pose.get(KeypointName::BucketEnd1);
    let end2 = pose.get(KeypointName::BucketEnd2);
    [
        (bucket_joint.position, bucket_joint.confidence),
        (arm_joint.position, arm_joint.confidence),
        (
            end1.position.midpoint(end2.position),
            end1.confidence.min(end2.confidence),
        ),
    ]
}

/// The point that decides where the bucket/arm is: the most confident probe
/// at or above `conf_floor`, earlier probes winning ties.
pub fn select_probe(pose: &Pose, conf_floor: f64) -> Result<Point, Indeterminate> {
    let mut best: Option<(Point, f64)> = None;
    for (point, conf) in probe_points(pose) {
        if conf < conf_floor {
            continue;
        }
        if best.is_none_or(|(_, c)| conf > c) {
            best = Some((point, conf));
        }
    }
    best.map(|(p, _)| p).ok_or(Indeterminate)
}

/// Label of the region containing `point`, or `Elsewhere`.
pub fn locate_point(point: Point, regions: &[Region]) -> LocationLabel {
    regions
        .iter()
        .find(|r| r.contains(point))
        .map_or(LocationLabel::Elsewhere, |r| r.label.location())
}

pub fn classify_location(
    pose: &Pose,
    regions: &[Region],
    conf_floor: f64,
) -> Result<LocationLabel, Indeterminate> {
    select_probe(pose, conf_floor).map(|p| locate_point(p, regions))
}
