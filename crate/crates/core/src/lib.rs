//! Desk-scale decoder-only transformer runtime with a BOS-anchored context
//! injection engine and attention instrumentation.
//!
//! The crate is organized around six pieces:
//!
//! * [`tensor`]: row-major f32 tensors and deterministic core ops.
//! * [`model`] / [`cache`] / [`runtime`]: model description, KV cache, and
//!   greedy prefill/decode.
//! * [`anchor`]: construction of the injected content (`InfoSource`).
//! * [`inject`]: injection plans and the three intervention modes (hard
//!   value replacement, soft blending, dual-track cross-attention).
//! * [`trace`] / [`analysis`]: attention-weight recording plus the drift,
//!   rank-correlation and value-norm analyses built on it.
//! * [`weights_io`]: the STKW tensor file format and the seeded toy-model
//!   generator.

pub mod analysis;
pub mod anchor;
pub mod cache;
pub mod error;
pub mod inject;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod trace;
pub mod weights_io;

pub use anchor::{InfoSource, SourceForm};
pub use cache::KvCache;
pub use error::{Error, FormatError, PlanError, Result};
pub use inject::{Injection, InjectionPlan, LayerSchedule, Mode, ResolvedPlan, StrengthSchedule};
pub use model::{Model, ModelConfig, ModelWeights};
pub use runtime::{generate, prefill, GenOptions, GenerationOutput};
pub use tensor::Tensor;
pub use trace::{AttentionTrace, TraceRecorder};
