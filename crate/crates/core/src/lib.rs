//! Metapopulation SEIQRD simulation with mobility policies chosen by a
//! group of per-region decision agents.
//!
//! The usual entry point is [`ScenarioConfig`] plus [`run_episode`]; the
//! output directory layout is written by [`report::write_report`].

pub mod agents;
pub mod analytics;
pub mod calibration;
pub mod dynamics;
pub mod ingest;
pub mod orchestrator;
pub mod policy;
pub mod report;
pub mod rt;
pub mod scenario;
pub mod special;

pub use agents::{
    backend_from_spec, DecisionBackend, ExpertBackend, Observation, PolicyAction, RandomBackend,
    RemoteBackend, ScriptStep, ScriptedBackend,
};
pub use calibration::{calibrate, CalibrationConfig, CalibrationResult, ObservedSeries};
pub use dynamics::{simulate, Simulator, Trajectory};
pub use orchestrator::{compare_paradigms, run_episode, ArmSummary, ComparisonTable, EpisodeReport, Paradigm};
pub use policy::{PolicyType, TirAllocation};
pub use rt::{estimate_rt, RtConfig, RtSeries, SerialInterval};
pub use scenario::{
    BackendSpec, CompartmentState, CycleCalendar, EpiParams, MobilitySchedule, PolicySettings, Rates,
    Region, RegionSet, ScenarioBuilder, ScenarioConfig, Strategy,
};

/// Any error the library can return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] scenario::ValidationError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Rt(#[from] rt::RtError),
    #[error(transparent)]
    Analytics(#[from] analytics::AnalyticsError),
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Orchestrator(#[from] orchestrator::OrchestratorError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
}
