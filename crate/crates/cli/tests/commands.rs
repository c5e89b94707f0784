use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use sitewatch_core::stream::write_stream;
use sitewatch_core::{BBox, Detection, MachineClass, PerceptionFrame, StreamHeader};

const SITE: &str = r#"
[[regions]]
label = "digging"
polygon = [[300, 480], [760, 480], [760, 820], [300, 820]]

[[regions]]
label = "dumping"
polygon = [[1200, 480], [1640, 480], [1640, 820], [1200, 820]]

[safety]
clearance_frames = 25

[productivity]
bucket_volume_m3 = 0.4
full_rate = 1.01
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sitewatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_site(dir: &Path) -> PathBuf {
    let path = dir.join("site.toml");
    std::fs::write(&path, SITE).unwrap();
    path
}

/// Excavator and loader both standing in the digging area on `busy` frames,
/// the excavator alone otherwise.
fn collision_stream(frames: u64, busy: impl Fn(u64) -> bool) -> Vec<u8> {
    let header = StreamHeader::new(25.0, 1920, 1080, "fixture");
    let frames: Vec<PerceptionFrame> = (0..frames)
        .map(|i| {
            let mut f = PerceptionFrame::new(i);
            f.detections
                .push(Detection::new(MachineClass::Excavator, BBox::new(350.0, 500.0, 200.0, 150.0), 0.9));
            if busy(i) {
                f.detections
                    .push(Detection::new(MachineClass::Loader, BBox::new(560.0, 600.0, 150.0, 100.0), 0.9));
            }
            f
        })
        .collect();
    let mut buf = Vec::new();
    write_stream(&mut buf, &header, &frames).unwrap();
    buf
}

fn watch(site: &Path, input: &[u8]) -> Output {
    let mut child = bin()
        .args(["watch", "-c", s(site)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn records(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn watch_reports_collision_and_pause_clearance() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let out = watch(&site, &collision_stream(40, |i| i < 5));
    assert_eq!(out.status.code(), Some(0));
    let recs = records(&out);
    let alerts: Vec<_> = recs.iter().filter(|r| r["type"] == "alert").collect();
    assert_eq!(alerts.len(), 5);
    assert_eq!(alerts[0]["region"], "digging");
    assert_eq!(alerts[0]["tracks"].as_array().unwrap().len(), 2);
    assert!(recs.iter().any(|r| r["type"] == "pause_raised" && r["frame"] == 0));
    // last alert at frame 4, quiet frames 5..=29
    assert!(recs.iter().any(|r| r["type"] == "pause_cleared" && r["frame"] == 29));
}

#[test]
fn watch_exit_status_reflects_active_pause() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let out = watch(&site, &collision_stream(20, |i| i >= 10));
    assert_eq!(out.status.code(), Some(5));
    let quiet = watch(&site, &collision_stream(20, |_| false));
    assert_eq!(quiet.status.code(), Some(0));
    assert!(quiet.stdout.is_empty());
}

#[test]
fn analyze_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "{\"fps\":25.0,\"width\":1920,\"height\":1080,\"source\":\"cam\"}\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["analyze", "-c", s(&site), "-i", s(&input), "-o", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let timeline = std::fs::read_to_string(out_dir.join("timeline.csv")).unwrap();
    assert_eq!(timeline, "track,segment,start_s,end_s,state\n");
    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(report.contains("\ncycles,0\n"));
    assert!(report.contains("\nproductivity_m3_per_hr,0.00\n"));
}

#[test]
fn analyze_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let stream = collision_stream(10, |_| false);
    let mut lines: Vec<String> = String::from_utf8(stream).unwrap().lines().map(str::to_owned).collect();
    lines[6] = "{\"index\": 6, \"detections\": [".into();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, lines.join("\n")).unwrap();
    let out_dir = dir.path().join("out");

    let out = run(&["analyze", "-c", s(&site), "-i", s(&input), "-o", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 7:"));

    let lenient = run(&["analyze", "-c", s(&site), "-i", s(&input), "-o", s(&out_dir), "--lenient"]);
    assert_eq!(lenient.status.code(), Some(0));

    let missing = run(&["analyze", "-c", s(&dir.path().join("nope.toml")), "-i", s(&input), "-o", s(&out_dir)]);
    assert_eq!(missing.status.code(), Some(4));

    let bad_site = dir.path().join("bad_site.toml");
    std::fs::write(&bad_site, SITE.replace("full_rate = 1.01", "full_rate = -2.0")).unwrap();
    let invalid = run(&["analyze", "-c", s(&bad_site), "-i", s(&input), "-o", s(&out_dir)]);
    assert_eq!(invalid.status.code(), Some(2));

    let no_stream = run(&["analyze", "-c", s(&site), "-i", s(&dir.path().join("none.jsonl")), "-o", s(&out_dir)]);
    assert_eq!(no_stream.status.code(), Some(4));
}

const SCENARIO: &str = r#"
seed = 5
fps = 25.0
duration_s = 60.0
idle_probability = 0.5

[[regions]]
label = "digging"
polygon = [[300, 480], [760, 480], [760, 820], [300, 820]]

[[regions]]
label = "dumping"
polygon = [[1200, 480], [1640, 480], [1640, 820], [1200, 820]]
"#;

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let scenario = dir.join("scenario.toml");
    std::fs::write(&scenario, SCENARIO).unwrap();
    let sim = dir.join("sim");
    let mut args = vec!["simulate", "-c", s(&scenario), "-o", s(&sim)];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    sim
}

#[test]
fn simulate_inject_then_analyze_and_rerender() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let sim = simulate(dir.path(), &["--inject", "loader:100-200"]);
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sim.join("ground_truth.json")).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["analyze", "-c", s(&site), "-i", s(&sim.join("stream.jsonl")), "-o", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0));

    let alerts = std::fs::read_to_string(out_dir.join("alerts.csv")).unwrap();
    let frames: Vec<u64> = alerts.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    let truth_frames: Vec<u64> = truth["alert_frames"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(frames, truth_frames);

    let report = run(&["report", "-i", s(&out_dir)]);
    assert_eq!(report.status.code(), Some(0));
    assert_eq!(report.stdout, out.stdout);
    assert_eq!(run(&["report", "-i", s(&dir.path().join("missing"))]).status.code(), Some(4));
}

#[test]
fn simulate_rejects_bad_injection_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.toml");
    std::fs::write(&scenario, SCENARIO).unwrap();
    let out = run(&["simulate", "-c", s(&scenario), "-o", s(dir.path()), "--inject", "loader:100-99999"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["simulate", "-c", s(&scenario), "-o", s(dir.path()), "--inject", "bulldozer:1-2"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&scenario, SCENARIO.replace("[[300, 480]", "[[1300, 480]")).unwrap();
    let out = run(&["simulate", "-c", s(&scenario), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn ap_rows(csv: &str) -> Vec<(String, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_owned(), v.parse().unwrap_or(f64::NAN))
        })
        .collect()
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let site = write_site(dir.path());
    let sim = simulate(dir.path(), &["--inject", "human:10-50"]);
    let stream = sim.join("stream.jsonl");

    let det_csv = dir.path().join("det.csv");
    let out = run(&["eval", "--task", "det", "--pred", s(&stream), "--truth", s(&stream), "-o", s(&det_csv)]);
    assert_eq!(out.status.code(), Some(0));
    let rows = ap_rows(&std::fs::read_to_string(&det_csv).unwrap());
    assert_eq!(rows.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>(), ["excavator", "human", "mAP"]);
    assert!(rows.iter().all(|(_, v)| *v == 1.0));

    let pose_csv = dir.path().join("pose.csv");
    let out = run(&["eval", "--task", "pose", "--pred", s(&stream), "--truth", s(&stream), "--oks", "0.5,0.75", "-o", s(&pose_csv)]);
    assert_eq!(out.status.code(), Some(0));
    let rows = ap_rows(&std::fs::read_to_string(&pose_csv).unwrap());
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|(_, v)| *v == 1.0));

    // zero-noise analysis reproduces the truth segments exactly
    let out_dir = dir.path().join("out");
    assert!(run(&["analyze", "-c", s(&site), "-i", s(&stream), "-o", s(&out_dir)]).status.success());
    let action_csv = dir.path().join("action.csv");
    let out = run(&[
        "eval",
        "--task",
        "action",
        "--pred",
        s(&out_dir.join("segments.csv")),
        "--truth",
        s(&sim.join("truth_segments.csv")),
        "-o",
        s(&action_csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = ap_rows(&std::fs::read_to_string(&action_csv).unwrap());
    assert!(rows.iter().any(|(k, _)| k == "digging"));
    assert!(rows.iter().all(|(_, v)| *v == 1.0));
}

#[test]
fn eval_empty_ground_truth_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(&pred, collision_stream(3, |_| true)).unwrap();
    let truth = dir.path().join("truth.jsonl");
    std::fs::write(&truth, "{\"fps\":25.0,\"width\":1920,\"height\":1080,\"source\":\"t\"}\n").unwrap();
    let out = run(&["eval", "--task", "det", "--pred", s(&pred), "--truth", s(&truth)]);
    assert_eq!(out.status.code(), Some(3));
    let seg = dir.path().join("seg.csv");
    std::fs::write(&seg, "clip,state,start,end\nx,digging,0,10,0.4,9\n").unwrap();
    let out = run(&["eval", "--task", "action", "--pred", s(&seg), "--truth", s(&seg)]);
    assert_eq!(out.status.code(), Some(3));
}
