//! Error types shared across the crate.
//!
//! Plan validation and tensor-file loading report one named variant per
//! violated rule so callers (and the CLI exit-code mapping) can tell user
//! mistakes apart from runtime failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("prompt must start with BOS id {expected}; found {found:?}")]
    MissingBos { expected: u32, found: Option<u32> },

    #[error("cache length mismatch at layer {layer}: expected {expected}, found {found}")]
    CacheInconsistent {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("cache full: capacity {max_seq} positions")]
    CacheFull { max_seq: usize },

    #[error("info source required for mode {mode} but none was given")]
    InfoSourceMissing { mode: &'static str },

    #[error("info source form {info} does not match plan source form {plan}")]
    InfoFormMismatch {
        info: &'static str,
        plan: &'static str,
    },

    #[error("info span {start}..{end} invalid for prompt of length {len} (must be non-empty and exclude position 0)")]
    InfoSpan {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("dual-track attention called at unscheduled layer {layer}")]
    UnscheduledLayer { layer: usize },

    #[error("dual-track attention requires an empty cache at layer {layer} (found {len} cached positions)")]
    NotSequenceStart { layer: usize, len: usize },

    #[error("invalid attention weights at step {step} layer {layer} head {head}: {reason}")]
    InvalidWeights {
        step: usize,
        layer: usize,
        head: usize,
        reason: String,
    },

    #[error("trace contains no records")]
    EmptyTrace,

    #[error("trace step {step} mixes query positions {a} and {b}")]
    TraceMixedPositions { step: usize, a: usize, b: usize },

    #[error("trace has no rows for layer {layer} (layers up to {max_layer} are present)")]
    TraceLayerGap { layer: usize, max_layer: usize },

    #[error("BOS position {bos} outside weight rows of length {len}")]
    BosOutOfRange { bos: usize, len: usize },

    #[error("analysis inputs differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {min} values, got {got}")]
    TooFewValues { min: usize, got: usize },

    #[error("rank correlation undefined: an input has zero rank variance")]
    DegenerateRanks,

    #[error("checkpoint {checkpoint} outside generated range 1..={gen_steps}")]
    CheckpointOutOfRange {
        checkpoint: usize,
        gen_steps: usize,
    },

    #[error(transparent)]
    Plan(#[from] PlanError),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Violations of the injection-plan contract. Each rule has its own variant.
#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("scheduled layer {layer} out of range for {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("explicit schedule lists layer {layer} more than once")]
    DuplicateLayer { layer: usize },

    #[error("every_k schedule requires k >= 1")]
    ZeroStride,

    #[error("schedule resolves to no layers")]
    EmptySchedule,

    #[error("alpha {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f32 },

    #[error("soft mode requires a strength schedule")]
    StrengthMissing,

    #[error("mode {mode} does not take a strength schedule")]
    StrengthForbidden { mode: &'static str },

    #[error("mode {mode} requires pooled source form")]
    PooledRequired { mode: &'static str },

    #[error("linear decay requires alpha_start < alpha_end (got {start} >= {end})")]
    DecayEndpoints { start: f32, end: f32 },

    #[error("linear increase requires alpha_start > alpha_end (got {start} <= {end})")]
    IncreaseEndpoints { start: f32, end: f32 },
}

/// Tensor-file parsing and I/O failures, one variant per defect class.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"STKW\"")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },

    #[error("header is not valid JSON: {0}")]
    HeaderJson(String),

    #[error("tensor {name}: unsupported dtype {dtype:?} (only \"f32\")")]
    BadDtype { name: String, dtype: String },

    #[error("tensor {name}: offset {offset} not 64-byte aligned")]
    Misaligned { name: String, offset: u64 },

    #[error("tensor {name}: data span exceeds file size")]
    SpanOutOfBounds { name: String },

    #[error("tensors {a} and {b} overlap in the payload")]
    Overlap { a: String, b: String },

    #[error("tensor {name}: shape {shape:?} does not match expected {expected:?}")]
    TensorShape {
        name: String,
        shape: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0} in model file")]
    UnexpectedTensor(String),

    #[error("model file carries no config metadata")]
    MetadataMissing,

    #[error("unsupported activation {0:?} (this build implements \"gelu_tanh\")")]
    ActivationUnsupported(String),

    #[error("tensor {name}: non-finite value in payload")]
    NonFinitePayload { name: String },
}

impl FormatError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
