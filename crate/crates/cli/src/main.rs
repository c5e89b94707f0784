//! `sitewatch`: simulate, analyze, watch, evaluate and re-render construction
//! site perception streams.
//!
//! Exit codes: 0 ok, 2 config, 3 parse (including evaluator schema errors and
//! empty ground truth), 4 I/O, 5 when `watch` ends with the pause still raised.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sitewatch_core::metrics::{
    action_ap_by_label, detection_ap_by_class, keypoint_ap, mean_ap, Instance, Kappas, MetricsError, TemporalSegment,
    TruthPose,
};
use sitewatch_core::report;
use sitewatch_core::simulator::SimError;
use sitewatch_core::stream::{parse_stream, write_stream, StreamErrorKind, StreamReader};
use sitewatch_core::{
    generate, inject_collision, Analyzer, BBox, ConfigError, Detection, Injection, MachineClass, ParseMode,
    PerceptionFrame, Pose, ScenarioConfig, SiteConfig, StreamError, StreamHeader,
};

#[derive(Parser)]
#[command(name = "sitewatch", version, about = "Excavator activity, safety and productivity from perception streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream and its ground truth.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Extra machine as `class:first-last` (frames, inclusive), placed in the digging area.
        #[arg(long, value_parser = parse_injection)]
        inject: Vec<Injection>,
    },
    /// Analyze one or more streams and write timeline, cycles, report and alerts.
    Analyze {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, required = true)]
        input: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Skip invalid records instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Read a stream on stdin and print alert and pause records as they happen.
    Watch {
        #[arg(short, long)]
        config: PathBuf,
        /// Also append alerts to this CSV file.
        #[arg(long)]
        alerts: Option<PathBuf>,
        #[arg(long)]
        lenient: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Box IoU gate for detection.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// OKS thresholds for pose; AP is averaged over them.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.75])]
        oks: Vec<f64>,
        /// Temporal IoU gate for action segments.
        #[arg(long, default_value_t = 0.5)]
        tiou: f64,
        /// Write the table as CSV here as well.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-render the text report from an analyze output directory.
    Report {
        #[arg(short, long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Det,
    Pose,
    Action,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Parse(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Parse(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Parse(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn stream_failure(path: &Path, e: StreamError) -> Failure {
    let msg = format!("{}: {e}", path.display());
    match e.kind {
        StreamErrorKind::Io(_) => Failure::Io(msg),
        _ => Failure::Parse(msg),
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn parse_injection(text: &str) -> Result<Injection, String> {
    let (class, range) = text
        .split_once(':')
        .ok_or("expected class:first-last")?;
    let class: MachineClass = class.parse().map_err(|c| format!("unknown class `{c}`"))?;
    let (first, last) = range.split_once('-').ok_or("expected class:first-last")?;
    let frame = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("bad frame `{s}`"));
    Ok(Injection {
        class,
        first_frame: frame(first)?,
        last_frame: frame(last)?,
        bbox: None,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| io_failure(path, e))
}

fn simulate(config: &Path, output: &Path, injections: &[Injection]) -> Result<(), Failure> {
    let scenario = ScenarioConfig::load(config)?;
    let mut sim = generate(&scenario)?;
    for injection in injections {
        inject_collision(&mut sim, injection)?;
    }
    fs::create_dir_all(output).map_err(|e| io_failure(output, e))?;
    let stream_path = output.join("stream.jsonl");
    let file = File::create(&stream_path).map_err(|e| io_failure(&stream_path, e))?;
    let mut out = BufWriter::new(file);
    write_stream(&mut out, &sim.header, &sim.frames)
        .and_then(|()| out.flush())
        .map_err(|e| io_failure(&stream_path, e))?;
    let truth = serde_json::to_string_pretty(&sim.truth).expect("ground truth serializes");
    write_file(&output.join("ground_truth.json"), &truth)?;
    write_file(
        &output.join("truth_segments.csv"),
        &report::truth_segments_csv(&sim.header.source, &sim.truth),
    )?;
    println!(
        "{} frames, {} cycles, {} alert frames -> {}",
        sim.frames.len(),
        sim.truth.cycles.len(),
        sim.truth.alert_frames.len(),
        output.display()
    );
    Ok(())
}

fn analyze_one(site: &SiteConfig, input: &Path, output: &Path, mode: ParseMode) -> Result<String, Failure> {
    let mut reader = StreamReader::new(open(input)?, mode).map_err(|e| stream_failure(input, e))?;
    let header = reader.header().clone();
    let mut analyzer = Analyzer::new(site.clone(), &header);
    for frame in reader.by_ref() {
        let frame = frame.map_err(|e| stream_failure(input, e))?;
        analyzer.process(&frame);
    }
    let skipped = reader.skipped();
    let analysis = analyzer.finish().map_err(|e| Failure::Config(e.to_string()))?;
    let summary = analysis.primary_report(site);
    let rows = report::report_rows(&analysis, &summary);

    fs::create_dir_all(output).map_err(|e| io_failure(output, e))?;
    write_file(&output.join("timeline.csv"), &report::timeline_csv(&analysis))?;
    write_file(&output.join("states.csv"), &report::states_csv(&analysis))?;
    write_file(&output.join("cycles.csv"), &report::cycles_csv(&analysis))?;
    write_file(&output.join("alerts.csv"), &report::alerts_csv(&analysis.alerts))?;
    write_file(&output.join("report.csv"), &report::report_csv(&rows))?;
    let mut segments = format!("{}\n", report::SEGMENTS_HEADER);
    if let Some(primary) = analysis.primary() {
        report::timeline_segments_csv(&header.source, &primary.timeline, &mut segments);
    }
    write_file(&output.join("segments.csv"), &segments)?;
    let mut text = report::render_report_text(&rows);
    if skipped > 0 {
        text.push_str(&format!("Skipped records       {skipped}\n"));
    }
    write_file(&output.join("report.txt"), &text)?;
    Ok(text)
}

fn analyze(config: &Path, inputs: &[PathBuf], output: &Path, lenient: bool) -> Result<(), Failure> {
    let site = SiteConfig::load(config)?;
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    if let [input] = inputs {
        print!("{}", analyze_one(&site, input, output, mode)?);
        return Ok(());
    }
    // one pipeline per input, each into its own subdirectory
    let results: Vec<(PathBuf, Result<String, Failure>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .iter()
            .map(|input| {
                let stem = input.file_stem().map_or_else(|| "stream".into(), |s| s.to_owned());
                let dir = output.join(stem);
                let site = &site;
                (input.clone(), scope.spawn(move || analyze_one(site, input, &dir, mode)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(input, h)| (input, h.join().expect("analysis thread")))
            .collect()
    });
    let mut first_failure = None;
    for (input, result) in results {
        match result {
            Ok(text) => print!("== {}\n{text}", input.display()),
            Err(f) => {
                eprintln!("error: {}", f.message());
                first_failure.get_or_insert(f);
            }
        }
    }
    first_failure.map_or(Ok(()), Err)
}

fn watch(config: &Path, alerts_path: Option<&Path>, lenient: bool) -> Result<ExitCode, Failure> {
    let site = SiteConfig::load(config)?;
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let stdin = io::stdin();
    let stdin_path = Path::new("<stdin>");
    let mut reader = StreamReader::new(stdin.lock(), mode).map_err(|e| stream_failure(stdin_path, e))?;
    let mut analyzer = Analyzer::new(site, reader.header());
    let mut log = match alerts_path {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| io_failure(p, e))?;
            writeln!(f, "{}", report::ALERTS_HEADER).map_err(|e| io_failure(p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let stdout_path = Path::new("<stdout>");
    for frame in reader.by_ref() {
        let frame = frame.map_err(|e| stream_failure(stdin_path, e))?;
        let outcome = analyzer.process(&frame);
        for alert in &outcome.alerts {
            writeln!(out, "{}", report::alert_record(alert)).map_err(|e| io_failure(stdout_path, e))?;
        }
        if let Some(t) = &outcome.transition {
            writeln!(out, "{}", report::pause_record(t)).map_err(|e| io_failure(stdout_path, e))?;
        }
        out.flush().map_err(|e| io_failure(stdout_path, e))?;
        if let Some((p, f)) = log.as_mut() {
            if !outcome.alerts.is_empty() {
                let csv = report::alerts_csv(&outcome.alerts);
                let body = csv.split_once('\n').map_or("", |(_, b)| b);
                f.write_all(body.as_bytes()).map_err(|e| io_failure(p, e))?;
            }
        }
    }
    Ok(if analyzer.signal().active {
        ExitCode::from(5)
    } else {
        ExitCode::SUCCESS
    })
}

struct Table {
    header: &'static str,
    rows: Vec<(String, String)>,
}

impl Table {
    fn csv(&self) -> String {
        let mut out = format!("{},ap\n", self.header);
        for (k, v) in &self.rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    fn text(&self) -> String {
        let mut out = format!("{:<24} AP\n", self.header);
        for (k, v) in &self.rows {
            out.push_str(&format!("{k:<24} {v}\n"));
        }
        out
    }
}

fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<PerceptionFrame>), Failure> {
    let parsed = parse_stream(open(path)?, ParseMode::Strict).map_err(|e| stream_failure(path, e))?;
    Ok((parsed.header, parsed.frames))
}

/// Frames of both files aligned by index.
fn aligned_frames(pred: &Path, truth: &Path) -> Result<Vec<(PerceptionFrame, PerceptionFrame)>, Failure> {
    let (ph, pf) = read_stream(pred)?;
    let (th, tf) = read_stream(truth)?;
    if (ph.width, ph.height) != (th.width, th.height) {
        return Err(Failure::Parse(format!(
            "image extents differ: {}x{} vs {}x{}",
            ph.width, ph.height, th.width, th.height
        )));
    }
    let mut by_index: BTreeMap<u64, (PerceptionFrame, PerceptionFrame)> = BTreeMap::new();
    for f in pf {
        let i = f.index;
        by_index.entry(i).or_insert_with(|| (PerceptionFrame::new(i), PerceptionFrame::new(i))).0 = f;
    }
    for f in tf {
        let i = f.index;
        by_index.entry(i).or_insert_with(|| (PerceptionFrame::new(i), PerceptionFrame::new(i))).1 = f;
    }
    Ok(by_index.into_values().collect())
}

fn metric_failure(e: MetricsError) -> Failure {
    match e {
        MetricsError::InvalidGate(_) => Failure::Config(e.to_string()),
        _ => Failure::Parse(e.to_string()),
    }
}

fn class_table<K: ToString + Ord + Clone>(
    header: &'static str,
    per_class: BTreeMap<K, Result<f64, MetricsError>>,
) -> Result<Table, Failure> {
    let mut defined = BTreeMap::new();
    let mut rows = Vec::new();
    for (k, ap) in per_class {
        match ap {
            Ok(v) => {
                rows.push((k.to_string(), format!("{v:.6}")));
                defined.insert(k, v);
            }
            Err(MetricsError::NoGroundTruth) => rows.push((k.to_string(), "undefined".into())),
            Err(e) => return Err(metric_failure(e)),
        }
    }
    if defined.is_empty() {
        return Err(Failure::Parse("ground truth is empty".into()));
    }
    let m = mean_ap(&defined).map_err(metric_failure)?;
    rows.push(("mAP".into(), format!("{m:.6}")));
    Ok(Table { header, rows })
}

fn posed(frame: &PerceptionFrame) -> impl Iterator<Item = (&Detection, &Pose)> + '_ {
    frame
        .poses
        .iter()
        .filter_map(|p| frame.detections.get(p.det).map(|d| (d, &p.pose)))
}

fn eval(task: Task, pred: &Path, truth: &Path, iou: f64, oks: &[f64], tiou: f64) -> Result<Table, Failure> {
    let gate_ok = |g: f64| g > 0.0 && g <= 1.0;
    match task {
        Task::Det => {
            if !gate_ok(iou) {
                return Err(Failure::Config(format!("--iou must lie in (0, 1], got {iou}")));
            }
            let frames = aligned_frames(pred, truth)?;
            let (p, t): (Vec<Vec<Detection>>, Vec<Vec<Detection>>) =
                frames.into_iter().map(|(p, t)| (p.detections, t.detections)).unzip();
            class_table("class", detection_ap_by_class(&p, &t, iou))
        }
        Task::Pose => {
            if oks.is_empty() || !oks.iter().all(|&g| gate_ok(g)) {
                return Err(Failure::Config("--oks thresholds must lie in (0, 1]".into()));
            }
            let frames = aligned_frames(pred, truth)?;
            let instances: Vec<Instance<Pose, TruthPose>> = frames
                .iter()
                .map(|(p, t)| Instance {
                    predictions: posed(p).map(|(d, pose)| (d.score, *pose)).collect(),
                    truths: posed(t)
                        .map(|(d, pose)| TruthPose {
                            pose: *pose,
                            area: BBox::area(&d.bbox),
                        })
                        .collect(),
                })
                .collect();
            let kappas = Kappas::default();
            let mut rows = Vec::new();
            for &g in oks {
                let ap = keypoint_ap(&instances, &[g], &kappas).map_err(|e| match e {
                    MetricsError::NoGroundTruth => Failure::Parse("ground truth has no visible poses".into()),
                    e => metric_failure(e),
                })?;
                rows.push((format!("oks@{g}"), format!("{ap:.6}")));
            }
            let mean = keypoint_ap(&instances, oks, &kappas).map_err(metric_failure)?;
            rows.push(("mean".into(), format!("{mean:.6}")));
            Ok(Table { header: "threshold", rows })
        }
        Task::Action => {
            if !gate_ok(tiou) {
                return Err(Failure::Config(format!("--tiou must lie in (0, 1], got {tiou}")));
            }
            let read = |path: &Path| -> Result<BTreeMap<String, Vec<(f64, TemporalSegment)>>, Failure> {
                let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
                report::parse_segments_csv(&text).map_err(|e| Failure::Parse(format!("{}: {e}", path.display())))
            };
            let (p, mut t) = (read(pred)?, read(truth)?);
            let mut clips: BTreeMap<String, Instance<TemporalSegment, TemporalSegment>> = BTreeMap::new();
            for (clip, segs) in p {
                clips.entry(clip).or_default().predictions = segs;
            }
            for (clip, segs) in std::mem::take(&mut t) {
                clips.entry(clip).or_default().truths = segs.into_iter().map(|(_, s)| s).collect();
            }
            let instances: Vec<_> = clips.into_values().collect();
            class_table("state", action_ap_by_label(&instances, tiou))
        }
    }
}

fn render(input: &Path) -> Result<(), Failure> {
    let path = input.join("report.csv");
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let rows = report::parse_report_csv(&text).map_err(|e| Failure::Parse(format!("{}: {e}", path.display())))?;
    print!("{}", report::render_report_text(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Simulate { config, output, inject } => simulate(&config, &output, &inject)?,
        Command::Analyze {
            config,
            input,
            output,
            lenient,
        } => analyze(&config, &input, &output, lenient)?,
        Command::Watch { config, alerts, lenient } => return watch(&config, alerts.as_deref(), lenient),
        Command::Eval {
            task,
            pred,
            truth,
            iou,
            oks,
            tiou,
            output,
        } => {
            let table = eval(task, &pred, &truth, iou, &oks, tiou)?;
            print!("{}", table.text());
            if let Some(path) = output {
                write_file(&path, &table.csv())?;
            }
        }
        Command::Report { input } => render(&input)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
