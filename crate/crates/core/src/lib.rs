//! Core of a multi-user session gateway.
//!
//! * [`model`]: usernames, session records and the lifecycle state machine.
//! * [`spawner`]: the spawner contract and the local-process spawner.
//! * [`batch`]: templated batch-scheduler spawning and the builtin dialects.
//! * [`profiles`]: administrator profiles and the wrapping spawner.
//! * [`routes`]: the dynamic routing table.

pub mod batch;
pub mod model;
pub mod profiles;
pub mod routes;
pub mod spawner;

pub use model::{
    normalize_username, session_transition, ExecutionStatus, LifecycleEvent, LifecyclePhase, Profile,
    Scalar, SessionRecord, UserRecord, Username,
};
