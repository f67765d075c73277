//! Deterministic multi-node simulation and small-scope exhaustive
//! exploration.
//!
//! [`engine::run`] executes a [`scenario::Scenario`] — nodes each carry a
//! policy replica, epoch cache, enforcement point, and audit log — and
//! returns metrics, a byte-reproducible event log, and the per-node audit
//! logs. [`explore::explore`] exhaustively enumerates the enforcement
//! state machine at small scope and reports any state violating the
//! safety or prefix-alignment invariants.

pub mod engine;
pub mod explore;
pub mod metrics;
pub mod scenario;

pub use engine::{audit_complete, converge_check, provenance_bound, run, RunOutput};
pub use explore::{explore, explore_with_backend, ExplorationReport, ModelConfig};
pub use metrics::{esw_bound, flagged_at_rate, legacy_exposure, RunMetrics};
pub use scenario::{ActionKind, Scenario, Workload};
