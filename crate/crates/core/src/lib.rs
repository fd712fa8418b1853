//! Multicore interference characterization.
//!
//! Interference-generator kernels are run against victim workloads on
//! pinned cores; the resulting traces become execution-time profiles,
//! channel verdicts, WCET bounds and certification-support reports.
//!
//! The modules follow the workflow: [`platform`] describes the machine and
//! its channels, [`kernels`] stress them, [`harness`] runs scenarios,
//! [`counters`] observe resource use, [`analysis`] turns traces into
//! verdicts and [`report`] assembles the evidence. [`pipeline`] drives the
//! whole thing from a [`config::CampaignConfig`].

pub mod analysis;
pub mod config;
pub mod counters;
pub mod harness;
pub mod kernels;
pub mod pipeline;
pub mod platform;
pub mod report;

pub use analysis::{
    build_profile, combine_margins, compare, estimate_wcet, evaluate_requirement, ChannelVerdict, DetectionPolicy,
    ExecutionTimeProfile, InterferenceAssessment, Margin, Requirement, SensitivityMatrix, WcetEstimate,
};
pub use config::{Campaign, CampaignConfig};
pub use counters::{CounterBackend, CounterEvent, CounterVerdict, SimulatedBackend, SimulatedModel};
pub use harness::{ResourceUsageProfile, RunTrace, Scenario, TraceRecord, Workload};
pub use kernels::{AccessPattern, KernelSpec};
pub use platform::{load_topology, ChannelCatalog, CoreId, InterferenceChannel, ResourceKind, Topology};
pub use report::Report;

/// Version string embedded in every trace, analysis and report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
