//! Authoritative session server.
//!
//! [`pipeline`] holds the transport-free per-session logic; [`service`] wires it
//! to TCP, WebSocket, UDP and MQTT listeners.

pub mod clock;
pub mod pipeline;
pub mod service;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use pipeline::{Member, Outbound, SessionConfig, SessionSettings, SessionWorker};
pub use service::{Server, ServerConfig, ServerError};
