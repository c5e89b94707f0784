//! Downstream analysis of construction-site perception streams: excavator
//! action recognition, multi-machine collision alerts, cycle detection and
//! productivity, evaluation metrics, and a scenario simulator.

pub mod activity;
pub mod config;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod productivity;
pub mod report;
pub mod safety;
pub mod simulator;
pub mod stream;

pub use activity::{ActionState, ActionTimeline, ActivityParams, ExcavatorMonitor, Segment, Stillness};
pub use config::{ConfigError, SiteConfig};
pub use geometry::{BBox, LocationLabel, Point, Region, RegionLabel};
pub use pipeline::{analyze_frames, Analysis, Analyzer, FrameOutcome, TrackAnalysis};
pub use productivity::{BucketParams, CycleDetection, CycleRecord, ProductivityReport, RateBasis};
pub use safety::{Alert, PauseSignal, PauseTransition, SafetyParams};
pub use simulator::{generate, inject_collision, GroundTruth, Injection, ScenarioConfig, SimulatedStream};
pub use stream::{
    Detection, Keypoint, KeypointName, MachineClass, ParseMode, PerceptionFrame, Pose, PoseAttachment,
    StreamError, StreamHeader, TrackId,
};
