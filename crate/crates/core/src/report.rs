//! CSV and text renderings of an analysis, the live watch records, and the
//! action-segment files read by the evaluator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::json;

use crate::activity::{build_timeline, ActionState, ActionTimeline};
use crate::metrics::TemporalSegment;
use crate::pipeline::{Analysis, TrackAnalysis};
use crate::productivity::ProductivityReport;
use crate::safety::{Alert, PauseTransition};
use crate::simulator::GroundTruth;

pub const TIMELINE_HEADER: &str = "track,segment,start_s,end_s,state";
pub const STATES_HEADER: &str = "track,frame,state";
pub const CYCLES_HEADER: &str = "track,cycle,start_s,end_s,duration_s,digging_s,swinging_s,dumping_s,idle_s";
pub const ALERTS_HEADER: &str = "frame,time_s,region,tracks";
pub const SEGMENTS_HEADER: &str = "clip,state,start,end,score";

pub fn timeline_csv(analysis: &Analysis) -> String {
    let mut out = format!("{TIMELINE_HEADER}\n");
    for t in &analysis.excavators {
        for (i, seg) in t.timeline.segments.iter().enumerate() {
            let fps = t.timeline.fps;
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{}",
                t.track,
                i,
                seg.start_s(fps),
                seg.end_s(fps),
                seg.state
            );
        }
    }
    out
}

pub fn states_csv(analysis: &Analysis) -> String {
    let mut out = format!("{STATES_HEADER}\n");
    for t in &analysis.excavators {
        for (frame, state) in &t.timeline.frames {
            let _ = writeln!(out, "{},{},{}", t.track, frame, state);
        }
    }
    out
}

pub fn cycles_csv(analysis: &Analysis) -> String {
    let mut out = format!("{CYCLES_HEADER}\n");
    for t in &analysis.excavators {
        let fps = t.timeline.fps;
        for (i, c) in t.cycles.cycles.iter().enumerate() {
            let p = c.phases;
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
                t.track,
                i + 1,
                c.start_frame as f64 / fps,
                c.end_frame as f64 / fps,
                c.duration_s,
                p.digging_s,
                p.swinging_s,
                p.dumping_s,
                p.idle_s
            );
        }
    }
    out
}

fn tracks_field(alert: &Alert) -> String {
    alert
        .tracks
        .iter()
        .map(|(id, class)| format!("{id}:{class}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn alerts_csv(alerts: &[Alert]) -> String {
    let mut out = format!("{ALERTS_HEADER}\n");
    for a in alerts {
        let _ = writeln!(out, "{},{:.3},{},{}", a.frame, a.time_s, a.region, tracks_field(a));
    }
    out
}

/// Ordered `key,value` rows for the primary excavator's report.
pub fn report_rows(analysis: &Analysis, report: &ProductivityReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| rows.push((k.to_owned(), v));
    put(
        "track",
        analysis.primary().map_or_else(String::new, |t: &TrackAnalysis| t.track.to_string()),
    );
    put("frames", analysis.frames.to_string());
    put("observed_s", format!("{:.2}", report.observed_s));
    put("cycles", report.cycles.to_string());
    put(
        "rate_basis",
        match report.rate_basis {
            crate::productivity::RateBasis::DiggingSpan => "digging_span".into(),
            crate::productivity::RateBasis::WholeStream => "whole_stream".into(),
        },
    );
    put("rate_span_s", format!("{:.2}", report.rate_hours * 3600.0));
    put("cycles_per_hr", format!("{:.2}", report.cycles_per_hr));
    put(
        "mean_cycle_s",
        report.mean_cycle_s.map_or_else(String::new, |s| format!("{s:.2}")),
    );
    put("bucket_volume_m3", report.bucket_volume_m3.to_string());
    put("full_rate", report.full_rate.to_string());
    put("productivity_m3_per_hr", format!("{:.2}", report.productivity_m3_per_hr));
    for state in ActionState::ALL {
        put(&format!("share_{state}"), format!("{:.4}", report.state_share(state)));
    }
    put("alerts", analysis.alerts.len().to_string());
    put("pause_active", analysis.signal.active.to_string());
    rows
}

pub fn report_csv(rows: &[(String, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("key,value") {
        return Err("report.csv must start with a key,value header".into());
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once(',')
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .ok_or_else(|| format!("line {}: expected key,value", i + 2))
        })
        .collect()
}

pub fn render_report_text(rows: &[(String, String)]) -> String {
    let get = |key: &str| {
        rows.iter()
            .find(|(k, _)| k == key)
            .map_or("-", |(_, v)| if v.is_empty() { "-" } else { v.as_str() })
    };
    let mut out = String::new();
    let _ = writeln!(out, "Excavator productivity");
    let _ = writeln!(out, "  track                 {}", get("track"));
    let _ = writeln!(out, "  observed              {} s over {} frames", get("observed_s"), get("frames"));
    let _ = writeln!(out, "  cycles                {}", get("cycles"));
    let _ = writeln!(out, "  rate span             {} s ({})", get("rate_span_s"), get("rate_basis"));
    let _ = writeln!(out, "  cycles per hour       {}", get("cycles_per_hr"));
    let _ = writeln!(out, "  mean cycle            {} s", get("mean_cycle_s"));
    let _ = writeln!(out, "  bucket volume         {} m3", get("bucket_volume_m3"));
    let _ = writeln!(out, "  bucket full rate      {}", get("full_rate"));
    let _ = writeln!(out, "  productivity          {} m3/hr", get("productivity_m3_per_hr"));
    let _ = writeln!(out, "Time share by state");
    for (k, v) in rows {
        if let Some(state) = k.strip_prefix("share_") {
            let pct = v.parse::<f64>().map_or_else(|_| v.clone(), |s| format!("{:.1}%", s * 100.0));
            let _ = writeln!(out, "  {state:<21} {pct}");
        }
    }
    let _ = writeln!(out, "Safety");
    let _ = writeln!(out, "  alerts                {}", get("alerts"));
    let _ = writeln!(out, "  pause active at end   {}", get("pause_active"));
    out
}

pub fn alert_record(alert: &Alert) -> String {
    let tracks: Vec<_> = alert
        .tracks
        .iter()
        .map(|(id, class)| json!({ "id": id, "class": class }))
        .collect();
    json!({
        "type": "alert",
        "frame": alert.frame,
        "time_s": alert.time_s,
        "region": alert.region,
        "tracks": tracks,
    })
    .to_string()
}

pub fn pause_record(transition: &PauseTransition) -> String {
    let (kind, frame) = match *transition {
        PauseTransition::PauseRaised(f) => ("pause_raised", f),
        PauseTransition::PauseCleared(f) => ("pause_cleared", f),
    };
    json!({ "type": kind, "frame": frame }).to_string()
}

/// Segments of a timeline as evaluator rows; rule-based output carries score 1.
pub fn timeline_segments_csv(clip: &str, timeline: &ActionTimeline, out: &mut String) {
    for seg in &timeline.segments {
        if seg.state == ActionState::Unknown {
            continue;
        }
        let _ = writeln!(out, "{clip},{},{},{},1", seg.state, seg.start_frame, seg.end_frame + 1);
    }
}

/// Ground-truth label runs of a simulated stream in evaluator form.
pub fn truth_segments_csv(clip: &str, truth: &GroundTruth) -> String {
    let states: Vec<(u64, ActionState)> = truth.states.iter().enumerate().map(|(f, s)| (f as u64, *s)).collect();
    let timeline = build_timeline(&states, truth.fps, truth.min_segment_s);
    let mut out = format!("{SEGMENTS_HEADER}\n");
    timeline_segments_csv(clip, &timeline, &mut out);
    out
}

/// Action segments per clip: `(score, segment)` predictions and bare truths.
/// Frames are half-open `[start, end)`; a missing score reads as 1.
pub fn parse_segments_csv(text: &str) -> Result<BTreeMap<String, Vec<(f64, TemporalSegment)>>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SEGMENTS_HEADER || h.trim() == "clip,state,start,end" => {}
        _ => return Err(format!("line 1: expected header {SEGMENTS_HEADER}")),
    }
    let mut clips: BTreeMap<String, Vec<(f64, TemporalSegment)>> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(format!("line {n}: expected 4 or 5 fields"));
        }
        let state = ActionState::from_str(fields[1]).map_err(|_| format!("line {n}: unknown state {}", fields[1]))?;
        let num = |s: &str| f64::from_str(s).map_err(|_| format!("line {n}: bad number {s}"));
        let (start, end) = (num(fields[2])?, num(fields[3])?);
        let score = fields.get(4).map_or(Ok(1.0), |s| num(s))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("line {n}: score must lie in [0, 1]"));
        }
        let seg = TemporalSegment::new(state, start, end).map_err(|e| format!("line {n}: {e}"))?;
        clips.entry(fields[0].to_owned()).or_default().push((score, seg));
    }
    Ok(clips)
}
