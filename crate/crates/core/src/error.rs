use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("invalid leaf: {0}")]
    InvalidLeaf(String),

    #[error("cast error at {path}: {reason}")]
    Cast { path: String, reason: String },

    #[error("cast overflow: value {value} does not fit in {target}")]
    CastOverflow { value: String, target: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid sharding: {0}")]
    InvalidSharding(String),

    #[error("dimension {dim} of extent {extent} is not divisible by {parts} partitions")]
    Indivisible { dim: usize, extent: usize, parts: usize },

    #[error("topology changed since save ({0}); supply an abstract state with target shardings")]
    TopologyMismatch(String),

    #[error("invalid chunk grid: {0}")]
    InvalidChunkGrid(String),

    #[error("misaligned write: {0}")]
    Misaligned(String),

    #[error("duplicate chunk key {0}")]
    DuplicateChunk(String),

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("inconsistent process metadata: {0}")]
    Inconsistent(String),

    #[error("storage error on {key}: {reason}")]
    Storage { key: String, reason: String },

    #[error("storage crashed (fault injection) before operation {op} on {key}")]
    Crashed { op: u64, key: String },

    #[error("key not found: {0}")]
    NotFound(String),

    #[error("checkpoint already exists at {0}")]
    AlreadyExists(String),

    #[error("checkpoint at {0} is not finalized")]
    NotFinalized(String),

    #[error("barrier {name} timed out after {waited_ms} ms ({arrived}/{expected} arrived)")]
    BarrierTimeout { name: String, waited_ms: u64, arrived: usize, expected: usize },

    #[error("barrier {name} aborted: process {process} failed")]
    PeerFailed { name: String, process: usize },

    #[error("barrier name {0} reused within one operation")]
    BarrierReused(String),

    #[error("process {0} crashed")]
    ProcessCrashed(usize),

    #[error("worker {worker} failed: {source}")]
    Worker { worker: usize, source: Box<Error> },

    #[error("wrong coordination mode: {0}")]
    WrongMode(String),

    #[error("broadcast payload of {0} bytes exceeds the 1 MiB limit")]
    BroadcastTooLarge(usize),

    #[error("structure mismatch: missing {missing:?}, unexpected {extra:?}")]
    StructureMismatch { missing: Vec<String>, extra: Vec<String> },

    #[error("invalid checkpointable name {0:?}")]
    InvalidName(String),

    #[error("unknown handler {0}")]
    UnknownHandler(String),

    #[error("step {step} is not after latest step {latest}")]
    NonMonotonicStep { step: u64, latest: u64 },

    #[error("safetensors parse error: {0}")]
    Safetensors(String),

    #[error("metadata parse error in {key}: {reason}")]
    Metadata { key: String, reason: String },

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn metadata(key: &str, e: impl std::fmt::Display) -> Self {
        Error::Metadata { key: key.to_string(), reason: e.to_string() }
    }
}
