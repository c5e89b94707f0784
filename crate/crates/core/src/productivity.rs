//! Working cycles and excavation productivity.
//!
//! A cycle runs from the start of one digging segment to the start of the
//! next. Productivity (m³/hr) is cycles per hour times bucket volume times
//! bucket full rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{ActionState, ActionTimeline, Segment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProductivityError {
    #[error("{name} must be non-negative and finite, got {value}")]
    InvalidFactor { name: &'static str, value: f64 },
    #[error("ground-truth cycle count must be positive")]
    ZeroGroundTruth,
}

/// Time spent in each phase of one cycle; the two swing variants are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub digging_s: f64,
    pub swinging_s: f64,
    pub dumping_s: f64,
    pub idle_s: f64,
    pub unknown_s: f64,
}

impl PhaseBreakdown {
    fn add(&mut self, state: ActionState, seconds: f64) {
        match state {
            ActionState::Digging => self.digging_s += seconds,
            ActionState::SwingAfterDigging | ActionState::SwingForDigging => self.swinging_s += seconds,
            ActionState::Dumping => self.dumping_s += seconds,
            ActionState::Idle => self.idle_s += seconds,
            ActionState::Unknown => self.unknown_s += seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// First frame of a digging segment.
    pub start_frame: u64,
    /// First frame of the next digging segment.
    pub end_frame: u64,
    pub duration_s: f64,
    pub phases: PhaseBreakdown,
}

/// Completed cycles plus the open cycle after the last digging start.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleDetection {
    pub cycles: Vec<CycleRecord>,
    /// From the last digging start to the end of the timeline.
    pub trailing: Option<CycleRecord>,
}

fn breakdown(segments: &[Segment]) -> PhaseBreakdown {
    let mut phases = PhaseBreakdown::default();
    for seg in segments {
        phases.add(seg.state, seg.duration_s);
    }
    phases
}

/// N digging segments give N - 1 cycles.
pub fn detect_cycles(timeline: &ActionTimeline) -> CycleDetection {
    let fps = timeline.fps;
    let digs: Vec<usize> = timeline
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.state == ActionState::Digging)
        .map(|(i, _)| i)
        .collect();
    let cycles = digs
        .windows(2)
        .map(|pair| {
            let (a, b) = (pair[0], pair[1]);
            let start = timeline.segments[a].start_frame;
            let end = timeline.segments[b].start_frame;
            CycleRecord {
                start_frame: start,
                end_frame: end,
                duration_s: (end - start) as f64 / fps,
                phases: breakdown(&timeline.segments[a..b]),
            }
        })
        .collect();
    let trailing = digs.last().map(|&last| {
        let start = timeline.segments[last].start_frame;
        let end = timeline.segments.last().map_or(start, |s| s.end_frame + 1);
        CycleRecord {
            start_frame: start,
            end_frame: end,
            duration_s: (end - start) as f64 / fps,
            phases: breakdown(&timeline.segments[last..]),
        }
    });
    CycleDetection { cycles, trailing }
}

fn check_factor(name: &'static str, value: f64) -> Result<f64, ProductivityError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ProductivityError::InvalidFactor { name, value })
    }
}

/// Cycles/hr × bucket volume (m³) × bucket full rate.
pub fn compute_productivity(
    cycles_per_hr: f64,
    bucket_volume_m3: f64,
    full_rate: f64,
) -> Result<f64, ProductivityError> {
    Ok(check_factor("cycles_per_hr", cycles_per_hr)?
        * check_factor("bucket_volume_m3", bucket_volume_m3)?
        * check_factor("full_rate", full_rate)?)
}

/// Agreement between detected and true cycle counts, symmetric in over- and
/// under-counting.
pub fn cycle_accuracy(detected: u64, ground_truth: u64) -> Result<f64, ProductivityError> {
    if ground_truth == 0 {
        return Err(ProductivityError::ZeroGroundTruth);
    }
    Ok(detected.min(ground_truth) as f64 / detected.max(ground_truth) as f64)
}

/// Which interval the cycle rate is normalized by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateBasis {
    /// From the first digging start to the last one.
    #[default]
    DiggingSpan,
    /// The whole timeline.
    WholeStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketParams {
    pub bucket_volume_m3: f64,
    pub full_rate: f64,
    #[serde(default)]
    pub rate_basis: RateBasis,
}

impl BucketParams {
    pub fn validate(&self) -> Result<(), ProductivityError> {
        check_factor("bucket_volume_m3", self.bucket_volume_m3)?;
        check_factor("full_rate", self.full_rate)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductivityReport {
    pub cycles: usize,
    pub rate_basis: RateBasis,
    /// Denominator of the cycle rate.
    pub rate_hours: f64,
    pub cycles_per_hr: f64,
    pub mean_cycle_s: Option<f64>,
    pub bucket_volume_m3: f64,
    pub full_rate: f64,
    pub productivity_m3_per_hr: f64,
    /// Length of the analysed timeline.
    pub observed_s: f64,
    pub state_seconds: BTreeMap<ActionState, f64>,
}

impl ProductivityReport {
    pub fn state_share(&self, state: ActionState) -> f64 {
        if self.observed_s > 0.0 {
            self.state_seconds.get(&state).copied().unwrap_or(0.0) / self.observed_s
        } else {
            0.0
        }
    }
}

pub fn build_report(
    timeline: &ActionTimeline,
    detection: &CycleDetection,
    bucket: &BucketParams,
) -> Result<ProductivityReport, ProductivityError> {
    let mut state_seconds: BTreeMap<ActionState, f64> = BTreeMap::new();
    for seg in &timeline.segments {
        *state_seconds.entry(seg.state).or_default() += seg.duration_s;
    }
    let observed_s = timeline.duration_s();
    let cycles = detection.cycles.len();
    let span_frames = match (detection.cycles.first(), detection.cycles.last()) {
        (Some(first), Some(last)) => last.end_frame - first.start_frame,
        _ => 0,
    };
    let rate_seconds = match bucket.rate_basis {
        RateBasis::DiggingSpan => span_frames as f64 / timeline.fps,
        RateBasis::WholeStream => observed_s,
    };
    let rate_hours = rate_seconds / 3600.0;
    let cycles_per_hr = if rate_hours > 0.0 {
        cycles as f64 / rate_hours
    } else {
        0.0
    };
    let mean_cycle_s = (cycles > 0).then(|| span_frames as f64 / timeline.fps / cycles as f64);
    Ok(ProductivityReport {
        cycles,
        rate_basis: bucket.rate_basis,
        rate_hours,
        cycles_per_hr,
        mean_cycle_s,
        bucket_volume_m3: bucket.bucket_volume_m3,
        full_rate: bucket.full_rate,
        productivity_m3_per_hr: compute_productivity(
            cycles_per_hr,
            bucket.bucket_volume_m3,
            bucket.full_rate,
        )?,
        observed_s,
        state_seconds,
    })
}
