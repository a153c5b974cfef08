use std::path::PathBuf;

use thiserror::Error;

use crate::broker::VmState;
use crate::infrastructure::{CloudletId, HostId, VmId};
use crate::kernel::{EntityId, EventTag, SimTime};

/// Fatal simulation errors. Each one signals a logic bug in the caller or in
/// a policy, never an ordinary "no capacity" outcome.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("event {tag:?} scheduled at {at} but clock is already {now}")]
    EventInPast { now: SimTime, at: SimTime, tag: EventTag },
    #[error("entity `{0}` registered after the simulation started")]
    RegistrationAfterStart(String),
    #[error("entity `{0}` is already registered")]
    DuplicateEntity(String),
    #[error("no entity with id {0:?}")]
    UnknownEntity(EntityId),
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("vm {vm:?}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { vm: VmId, from: VmState, to: VmState },
    #[error("vm {0:?} was already submitted")]
    DuplicateSubmission(VmId),
    #[error("unknown vm {0:?}")]
    UnknownVm(VmId),
    #[error("cloudlet {cloudlet:?} is bound to vm {bound:?}, not {requested:?}")]
    CloudletBoundElsewhere { cloudlet: CloudletId, bound: VmId, requested: VmId },
    #[error("vm {vm:?} is not resident on host {host:?}")]
    NotResident { vm: VmId, host: HostId },
    #[error("vm {0:?} is not a spot instance")]
    NotSpot(VmId),
    #[error("vm {vm:?} cannot be interrupted in state {state:?}")]
    NotInterruptible { vm: VmId, state: VmState },
    #[error("processing update for vm {vm:?} goes backwards ({delta} s)")]
    NegativeDelta { vm: VmId, delta: f64 },
    #[error("vm {vm:?} needs {needed:?} but policy picked host {host:?} which cannot hold it")]
    PolicyChoseFullHost { vm: VmId, host: HostId, needed: crate::infrastructure::Dimension },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("no machine has a value for `{0}`; cannot fill missing entries")]
    NoValueToFill(&'static str),
    #[error("schema map: {0}")]
    Schema(String),
}

/// Configuration problems, each tagged with the JSON path of the offending field.
#[derive(Debug, Error)]
#[error("{}", .0.iter().map(|e| format!("{}: {}", e.path, e.message)).collect::<Vec<_>>().join("; "))]
pub struct ConfigError(pub Vec<FieldError>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// Umbrella error for the scenario pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
