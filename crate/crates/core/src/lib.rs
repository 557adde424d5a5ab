//! Deterministic episodic tracing and audit for robot task executions.
//!
//! An [`model::Episode`] records one task execution in three layers (raw
//! sensor frames, symbolic state transitions, semantic annotations) plus a
//! belief timeline. Episodes are encoded in a canonical text form, stored
//! content-addressed in a [`store::Store`], replayed from their symbolic
//! layer, and audited by a pipeline of verifiers whose verdicts are
//! synthesized into an [`verify::AuditTrail`].
//!
//! Module map:
//!
//! - [`model`]: episode data model, canonical encoding, task-tree extraction
//! - [`store`]: content-addressed immutable object store
//! - [`simworld`]: deterministic tabletop micro-world and imagination cycle
//! - [`perception`]: perception pipeline trees over noisy observations
//! - [`rules`]: validity-condition rule language
//! - [`query`]: query language over stored episodes
//! - [`replay`]: replay from trace and re-execution diffs
//! - [`verify`]: verifier pipeline, metareasoner and audit trails
//! - [`scenario`]: reference scenes and seeded plan generation

pub mod canon;
pub mod expr;
pub mod hash;
pub mod model;
pub mod perception;
pub mod query;
pub mod replay;
pub mod rng;
pub mod rules;
pub mod scenario;
pub mod simworld;
pub mod store;
pub mod verify;

pub use hash::ContentHash;
pub use model::Episode;
pub use store::{ObjectKind, Store};
