//! Core data model and rules for shared augmented-reality sessions.
//!
//! - [`scene`]: sessions, node trees, transforms, meshes, alignment
//! - [`protocol`]: event envelopes, wire codec, state encodings, framing
//! - [`interp`]: coordinate-convention and gesture interpreters
//! - [`models`]: collaboration models and their composition
//! - [`conflict`]: concurrent-update detection and resolution
//! - [`users`]: user registry and hierarchy

pub mod conflict;
pub mod interp;
pub mod models;
pub mod protocol;
pub mod scene;
pub mod users;

pub use conflict::{ConflictLog, ConflictStrategy};
pub use models::{CollaborationModel, CompositeModel, Verdict};
pub use protocol::{ConnectionMethod, Convention, DeviceProfile, EventEnvelope, Payload, StateFormat};
pub use scene::{Node, NodeId, Session, SessionStatus, Transform, ROOT_ID};
