//! Client side of a shared AR session.
//!
//! [`ClientSession::connect`] performs the handshake and returns a session whose
//! scene mirror changes only when the server broadcasts something, including
//! the echo of this client's own events. Sends go through a queue, so they can
//! be issued from any thread and from inside observers via an [`EventSender`].

mod transport;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use sara_core::protocol::{
    decode_event, decode_obj_text, decode_session_state, derived_id, encode_event, encode_session_state, new_event_id,
    ConnectionMethod, Convention, DeviceProfile, EventEnvelope, NodeSpec, Payload, RawInteraction, StateFormat,
};
use sara_core::scene::{quat_norm, Node, NodeId, SessionStatus, Transform};

pub use transport::Endpoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("bad token: {0}")]
    BadToken(String),
    #[error("unknown user: {0}")]
    UnknownUser(String),
    #[error("unknown session: {0}")]
    UnknownSession(String),
    #[error("rejected by server ({rule_id}): {reason}")]
    Rejected { rule_id: String, reason: String },
    #[error("not connected")]
    NotConnected,
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("world origin rotation must be a unit quaternion")]
    InvalidOrigin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Role {
    Provider,
    #[default]
    Consumer,
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub endpoint: Endpoint,
    pub user_id: String,
    pub token: String,
    pub session_id: String,
    pub format: StateFormat,
    pub convention: Convention,
    pub profile: DeviceProfile,
    pub role: Role,
    /// Derive event ids from this seed instead of drawing random ones.
    pub id_seed: Option<u64>,
    pub handshake_timeout: Duration,
}

impl ConnectOptions {
    pub fn new(endpoint: Endpoint, user_id: impl Into<String>, token: impl Into<String>, session_id: impl Into<String>) -> Self {
        Self {
            endpoint,
            user_id: user_id.into(),
            token: token.into(),
            session_id: session_id.into(),
            format: StateFormat::CustomJson,
            convention: Convention::RightHanded,
            profile: DeviceProfile::DesktopPointer,
            role: Role::Consumer,
            id_seed: None,
            handshake_timeout: Duration::from_secs(10),
        }
    }
}

/// How the local frame is tied to the session frame.
#[derive(Debug, Clone, PartialEq)]
pub enum WorldCenterPolicy {
    ManualPoint { origin: Transform },
    /// Stands in for marker detection: the origin a camera would have measured.
    MarkerSimulated { marker_id: String, origin: Transform },
}

impl WorldCenterPolicy {
    pub fn origin(&self) -> &Transform {
        match self {
            Self::ManualPoint { origin } | Self::MarkerSimulated { origin, .. } => origin,
        }
    }
}

/// What a received event did to the mirror.
#[derive(Debug, Clone, PartialEq)]
pub enum MirrorChange {
    NodeAdded(NodeId),
    /// The removed node and its whole subtree.
    NodeRemoved(Vec<NodeId>),
    NodeUpdated { node_id: NodeId, property_path: String },
    StateReplaced,
    /// OBJ clients keep geometry text instead of a tree.
    GeometryReplaced,
    /// Interactions, model events and rejections leave the mirror alone.
    Unchanged,
}

impl MirrorChange {
    pub fn is_mutation(&self) -> bool {
        !matches!(self, Self::Unchanged)
    }
}

/// Passed to observers for every received event.
pub struct Notification<'a> {
    pub event: &'a EventEnvelope,
    pub change: &'a MirrorChange,
    /// Mirror revision after the event; bumps by one per mutating event.
    pub revision: u64,
    pub mirror: &'a SessionStatus,
}

type Observer = Box<dyn FnMut(&Notification<'_>) + Send>;

struct MirrorState {
    status: SessionStatus,
    revision: u64,
    obj: Option<String>,
    received: Vec<EventEnvelope>,
    errors: Vec<String>,
}

struct Inner {
    user_id: String,
    session_id: String,
    client_id: String,
    convention: Convention,
    profile: DeviceProfile,
    format: StateFormat,
    role: Role,
    method: ConnectionMethod,
    state: Mutex<MirrorState>,
    observers: Mutex<Vec<Observer>>,
    out: mpsc::UnboundedSender<String>,
    sent: AtomicU64,
    received: AtomicU64,
    connected: AtomicBool,
    changed: Notify,
    world: Mutex<WorldCenterPolicy>,
    id_seed: Option<u64>,
    next_id: AtomicU64,
}

impl Inner {
    fn next_event_id(&self) -> String {
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        match self.id_seed {
            Some(seed) => derived_id(&format!("{seed}/{}/{n}", self.user_id), "event"),
            None => new_event_id(),
        }
    }

    fn send(&self, payload: Payload) -> Result<String, ClientError> {
        if !self.connected.load(Ordering::SeqCst) {
            return Err(ClientError::NotConnected);
        }
        let e = EventEnvelope::new(self.user_id.clone(), self.session_id.clone(), payload).with_id(self.next_event_id());
        let id = e.event_id.clone();
        // count before queueing so a quiescence check never sees the echo ahead of the send
        self.sent.fetch_add(1, Ordering::SeqCst);
        if self.out.send(encode_event(&e)).is_err() {
            self.sent.fetch_sub(1, Ordering::SeqCst);
            self.connected.store(false, Ordering::SeqCst);
            return Err(ClientError::NotConnected);
        }
        Ok(id)
    }

    fn apply(state: &mut MirrorState, e: &EventEnvelope) -> Result<MirrorChange, String> {
        let err = |x: &dyn std::fmt::Display| x.to_string();
        Ok(match &e.payload {
            Payload::SetSessionState { format: StateFormat::Obj, state_base64 } => {
                state.obj = Some(decode_obj_text(state_base64).map_err(|x| err(&x))?);
                MirrorChange::GeometryReplaced
            }
            Payload::SetSessionState { format, state_base64 } => {
                let status = decode_session_state(state_base64, *format).map_err(|x| err(&x))?;
                state.status.replace_tree(status);
                MirrorChange::StateReplaced
            }
            Payload::AddNode { parent_id, node } => {
                let id = state.status.attach_node(parent_id, node.clone().into_node()).map_err(|x| err(&x))?;
                MirrorChange::NodeAdded(id)
            }
            Payload::RemoveNode { node_id } => {
                let gone = state.status.detach_node(node_id).map_err(|x| err(&x))?;
                MirrorChange::NodeRemoved(gone.into_iter().map(|n| n.id).collect())
            }
            Payload::IncrementalUpdate { node_id, property_path, new_value } => {
                state.status.apply_property_update(node_id, property_path, new_value).map_err(|x| err(&x))?;
                MirrorChange::NodeUpdated { node_id: node_id.clone(), property_path: property_path.clone() }
            }
            _ => MirrorChange::Unchanged,
        })
    }

    fn on_frame(&self, text: &str) {
        let e = match decode_event(text) {
            Ok(e) => e,
            Err(err) => {
                tracing::warn!(error = %err, "undecodable frame from server");
                self.state.lock().unwrap().errors.push(err.to_string());
                self.received.fetch_add(1, Ordering::SeqCst);
                return;
            }
        };
        {
            let mut state = self.state.lock().unwrap();
            let change = match Self::apply(&mut state, &e) {
                Ok(c) => c,
                Err(msg) => {
                    tracing::warn!(event = %e.event_id, error = %msg, "mirror could not apply broadcast");
                    state.errors.push(msg);
                    MirrorChange::Unchanged
                }
            };
            if change.is_mutation() {
                state.revision += 1;
            }
            let note = Notification { event: &e, change: &change, revision: state.revision, mirror: &state.status };
            for obs in self.observers.lock().unwrap().iter_mut() {
                obs(&note);
            }
            state.received.push(e);
        }
        self.received.fetch_add(1, Ordering::SeqCst);
        self.changed.notify_waiters();
    }
}

/// Cheap handle for sending from observers or other threads.
#[derive(Clone)]
pub struct EventSender(Arc<Inner>);

impl EventSender {
    pub fn send(&self, payload: Payload) -> Result<String, ClientError> {
        self.0.send(payload)
    }

    pub fn user_id(&self) -> &str {
        &self.0.user_id
    }
}

pub struct ClientSession {
    inner: Arc<Inner>,
    tasks: Vec<JoinHandle<()>>,
}

impl Drop for ClientSession {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn next_frame(incoming: &mut mpsc::UnboundedReceiver<String>, timeout: Duration) -> Result<EventEnvelope, ClientError> {
    let text = tokio::time::timeout(timeout, incoming.recv())
        .await
        .map_err(|_| ClientError::Timeout)?
        .ok_or_else(|| ClientError::Transport("connection closed during handshake".into()))?;
    decode_event(&text).map_err(|e| ClientError::Protocol(e.to_string()))
}

fn handshake_error(rule_id: &str, reason: String) -> ClientError {
    match rule_id {
        "auth.bad_token" => ClientError::BadToken(reason),
        "auth.unknown_user" => ClientError::UnknownUser(reason),
        "session.unknown" => ClientError::UnknownSession(reason),
        _ => ClientError::Rejected { rule_id: rule_id.into(), reason },
    }
}

impl ClientSession {
    /// NewUserConnection, wait for Ack, ConnectToSession, wait for the initial state.
    pub async fn connect(opts: ConnectOptions) -> Result<Self, ClientError> {
        let mqtt_client_id = format!("{}-{}", opts.user_id, uuid::Uuid::new_v4().simple());
        let method = opts.endpoint.method();
        let link = transport::open(&opts.endpoint, &opts.session_id, &mqtt_client_id).await?;
        let transport::Link { out, mut incoming, tasks } = link;
        let mut inner = Inner {
            user_id: opts.user_id.clone(),
            session_id: opts.session_id.clone(),
            client_id: String::new(),
            convention: opts.convention,
            profile: opts.profile,
            format: opts.format,
            role: opts.role,
            method,
            state: Mutex::new(MirrorState {
                status: SessionStatus::new(),
                revision: 0,
                obj: None,
                received: Vec::new(),
                errors: Vec::new(),
            }),
            observers: Mutex::new(Vec::new()),
            out,
            sent: AtomicU64::new(0),
            received: AtomicU64::new(0),
            connected: AtomicBool::new(true),
            changed: Notify::new(),
            world: Mutex::new(WorldCenterPolicy::ManualPoint { origin: Transform::default() }),
            id_seed: opts.id_seed,
            next_id: AtomicU64::new(0),
        };
        let wait = opts.handshake_timeout;

        inner.send(Payload::NewUserConnection {
            user_id: opts.user_id.clone(),
            connection_method: method,
            convention: opts.convention,
            device_profile: opts.profile,
            token: Some(opts.token.clone()),
            client_id: (method == ConnectionMethod::Mqtt).then(|| mqtt_client_id.clone()),
        })?;
        let ack = next_frame(&mut incoming, wait).await?;
        inner.received.fetch_add(1, Ordering::SeqCst);
        inner.client_id = match ack.payload {
            Payload::Ack { client_id } => client_id,
            Payload::EventRejected { rule_id, reason, .. } => return Err(handshake_error(&rule_id, reason)),
            other => return Err(ClientError::Protocol(format!("expected Ack, got `{}`", other.type_tag()))),
        };

        inner.send(Payload::ConnectToSession {
            session_id: opts.session_id.clone(),
            user_id: opts.user_id.clone(),
            reception_format: opts.format,
        })?;
        let first = next_frame(&mut incoming, wait).await?;
        inner.received.fetch_add(1, Ordering::SeqCst);
        match &first.payload {
            Payload::SetSessionState { .. } => {
                let state = inner.state.get_mut().unwrap();
                Inner::apply(state, &first).map_err(ClientError::Protocol)?;
            }
            // UDP members get a notice in place of full state and start from an empty mirror
            Payload::EventRejected { rule_id, .. } if rule_id == "protocol.udp_policy" => {}
            Payload::EventRejected { rule_id, reason, .. } => return Err(handshake_error(rule_id, reason.clone())),
            other => return Err(ClientError::Protocol(format!("expected session state, got `{}`", other.type_tag()))),
        }
        inner.state.get_mut().unwrap().revision = 0;

        let inner = Arc::new(inner);
        let mut tasks = tasks;
        let reader = inner.clone();
        tasks.push(tokio::spawn(async move {
            while let Some(text) = incoming.recv().await {
                reader.on_frame(&text);
            }
            reader.connected.store(false, Ordering::SeqCst);
            reader.changed.notify_waiters();
        }));
        Ok(Self { inner, tasks })
    }

    pub fn client_id(&self) -> &str {
        &self.inner.client_id
    }

    pub fn user_id(&self) -> &str {
        &self.inner.user_id
    }

    pub fn session_id(&self) -> &str {
        &self.inner.session_id
    }

    pub fn convention(&self) -> Convention {
        self.inner.convention
    }

    pub fn profile(&self) -> DeviceProfile {
        self.inner.profile
    }

    pub fn format(&self) -> StateFormat {
        self.inner.format
    }

    pub fn role(&self) -> Role {
        self.inner.role
    }

    pub fn method(&self) -> ConnectionMethod {
        self.inner.method
    }

    pub fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    /// Copy of the mirrored scene, in this client's convention.
    pub fn mirror(&self) -> SessionStatus {
        self.inner.state.lock().unwrap().status.clone()
    }

    pub fn with_mirror<R>(&self, f: impl FnOnce(&SessionStatus) -> R) -> R {
        f(&self.inner.state.lock().unwrap().status)
    }

    pub fn revision(&self) -> u64 {
        self.inner.state.lock().unwrap().revision
    }

    /// Latest OBJ geometry, for clients that asked for OBJ.
    pub fn obj_text(&self) -> Option<String> {
        self.inner.state.lock().unwrap().obj.clone()
    }

    /// Every event received after the handshake, in arrival order.
    pub fn received_events(&self) -> Vec<EventEnvelope> {
        self.inner.state.lock().unwrap().received.clone()
    }

    pub fn rejections(&self) -> Vec<EventEnvelope> {
        self.inner
            .state
            .lock()
            .unwrap()
            .received
            .iter()
            .filter(|e| matches!(e.payload, Payload::EventRejected { .. }))
            .cloned()
            .collect()
    }

    /// Broadcasts the mirror failed to apply; empty in a healthy session.
    pub fn mirror_errors(&self) -> Vec<String> {
        self.inner.state.lock().unwrap().errors.clone()
    }

    /// `(frames sent, frames received)`, handshake included.
    pub fn counters(&self) -> (u64, u64) {
        // received first: a frame is counted as received only after any reply it caused was
        // counted as sent, so this order never shows a reply-less receive
        let received = self.inner.received.load(Ordering::SeqCst);
        (self.inner.sent.load(Ordering::SeqCst), received)
    }

    /// Registers a callback run for each received event, in arrival order.
    /// Observers must not call back into this session's mirror accessors; use the
    /// `mirror` field of the notification and an [`EventSender`] instead.
    pub fn on_event(&self, f: impl FnMut(&Notification<'_>) + Send + 'static) {
        self.inner.observers.lock().unwrap().push(Box::new(f));
    }

    pub fn sender(&self) -> EventSender {
        EventSender(self.inner.clone())
    }

    pub fn send(&self, payload: Payload) -> Result<String, ClientError> {
        self.inner.send(payload)
    }

    pub fn send_interaction(&self, raw: RawInteraction) -> Result<String, ClientError> {
        self.send(Payload::RawInteraction(raw))
    }

    pub fn send_update(&self, node_id: &str, property_path: &str, value: Value) -> Result<String, ClientError> {
        self.send(Payload::IncrementalUpdate { node_id: node_id.into(), property_path: property_path.into(), new_value: value })
    }

    pub fn send_add_node(&self, parent_id: &str, node: &Node) -> Result<String, ClientError> {
        self.send(Payload::AddNode { parent_id: parent_id.into(), node: NodeSpec::from_node(node) })
    }

    pub fn send_remove_node(&self, node_id: &str) -> Result<String, ClientError> {
        self.send(Payload::RemoveNode { node_id: node_id.into() })
    }

    pub fn send_model_event(&self, payload: Payload) -> Result<String, ClientError> {
        if !payload.is_model_control() {
            return Err(ClientError::Protocol(format!("`{}` is not a model event", payload.type_tag())));
        }
        self.send(payload)
    }

    /// Replaces the whole session scene. Meant for providers, but any role may try;
    /// the session's collaboration models decide.
    pub fn inject_scene(&self, status: &SessionStatus) -> Result<String, ClientError> {
        let state_base64 = encode_session_state(status, StateFormat::CustomJson).map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.send(Payload::SetSessionState { format: StateFormat::CustomJson, state_base64 })
    }

    pub fn set_world_origin(&self, policy: WorldCenterPolicy) -> Result<(), ClientError> {
        if (quat_norm(policy.origin().rotation) - 1.0).abs() > 1e-9 || !policy.origin().is_valid() {
            return Err(ClientError::InvalidOrigin);
        }
        *self.inner.world.lock().unwrap() = policy;
        Ok(())
    }

    pub fn world_origin(&self) -> WorldCenterPolicy {
        self.inner.world.lock().unwrap().clone()
    }

    /// Session-frame transform seen from the local frame.
    pub fn to_local(&self, t: &Transform) -> Transform {
        to_local(self.inner.world.lock().unwrap().origin(), t)
    }

    /// Local-frame transform expressed in the session frame.
    pub fn to_session(&self, t: &Transform) -> Transform {
        to_session(self.inner.world.lock().unwrap().origin(), t)
    }

    /// Waits until `pred` holds for the mirror, re-checking after each received event.
    pub async fn wait_for(&self, timeout: Duration, mut pred: impl FnMut(&SessionStatus) -> bool) -> Result<(), ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.inner.changed.notified();
            if self.with_mirror(&mut pred) {
                return Ok(());
            }
            if !self.is_connected() {
                return Err(ClientError::NotConnected);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(ClientError::Timeout);
            }
        }
    }

    /// Waits until at least `n` events have been received after the handshake.
    pub async fn wait_for_events(&self, n: usize, timeout: Duration) -> Result<(), ClientError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.inner.changed.notified();
            if self.inner.state.lock().unwrap().received.len() >= n {
                return Ok(());
            }
            if !self.is_connected() {
                return Err(ClientError::NotConnected);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(ClientError::Timeout);
            }
        }
    }

    /// Stops sending and receiving; pending frames are flushed by the writer.
    pub fn close(self) {
        self.inner.connected.store(false, Ordering::SeqCst);
    }
}

pub fn to_local(origin: &Transform, t: &Transform) -> Transform {
    origin.inverse().compose(t)
}

pub fn to_session(origin: &Transform, t: &Transform) -> Transform {
    origin.compose(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn identity_origin_is_a_no_op() {
        let t = Transform::at([1.0, 2.0, 3.0]);
        assert_eq!(to_local(&Transform::default(), &t), t);
    }

    #[test]
    fn translated_origin_shifts_points() {
        let origin = Transform::at([1.0, 0.0, 0.0]);
        assert_eq!(to_local(&origin, &Transform::at([0.0, 0.0, 0.0])).position, [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_origins_differ_by_the_origin_offset() {
        let a = Transform::at([1.0, 0.0, 0.0]);
        let b = Transform::at([0.0, 2.0, -1.0]);
        let p = Transform::at([0.5, 0.5, 0.5]);
        let (la, lb) = (to_local(&a, &p).position, to_local(&b, &p).position);
        let diff = [la[0] - lb[0], la[1] - lb[1], la[2] - lb[2]];
        let origin_diff = [b.position[0] - a.position[0], b.position[1] - a.position[1], b.position[2] - a.position[2]];
        assert!(close(diff, origin_diff));
    }

    #[test]
    fn rotated_origin_round_trips() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let origin = Transform { position: [3.0, -1.0, 2.0], rotation: [0.0, h, 0.0, h], scale: [1.0; 3] };
        let t = Transform { position: [0.2, 0.4, -0.7], rotation: [h, 0.0, 0.0, h], scale: [1.0; 3] };
        let back = to_local(&origin, &to_session(&origin, &t));
        assert!(close(back.position, t.position));
        for (x, y) in back.rotation.iter().zip(t.rotation) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
