//! Transports, client registry and session hosting around [`SessionWorker`].
//!
//! Every transport turns a connection into a [`Conn`] fed with decoded text
//! frames and an outbound queue drained by a per-connection writer task. A
//! session is a worker behind a mutex that is held for the whole dispatch, so
//! events of one session are processed strictly one after another while
//! different sessions proceed in parallel.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use axum::serve::ListenerExt;
use futures_util::{SinkExt, StreamExt};
use rumqttc::{AsyncClient, Event, MqttOptions, Packet, QoS};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use sara_core::interp::GestureTable;
use sara_core::protocol::{
    decode_event, derived_id, encode_event, mqtt_inbox_topic, parse_mqtt_session_topic, tcp_frame, ConnectionMethod,
    EventEnvelope, Payload, StateFormat, SYSTEM_SENDER, UDP_MAX_DATAGRAM,
};
use sara_core::scene::SessionStatus;
use sara_core::users::{UsersError, UsersService};
use sara_core::CompositeModel;

use crate::clock::Clock;
use crate::pipeline::{Member, Outbound, SessionConfig, SessionWorker};

/// Topic filter the server subscribes to on the broker.
pub const MQTT_SESSION_FILTER: &str = "sara/v1/session/+/events";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("port already in use: {0}")]
    PortInUse(SocketAddr),
    #[error("MQTT broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: IpAddr,
    /// `None` disables a transport; port 0 picks a free port.
    pub tcp_port: Option<u16>,
    pub ws_port: Option<u16>,
    pub udp_port: Option<u16>,
    pub mqtt_url: Option<String>,
    pub snapshot_dir: Option<PathBuf>,
    pub snapshot_interval: Duration,
    pub session_config: SessionConfig,
    pub conflict_window_ms: u64,
    pub auto_create_sessions: bool,
    pub turn_timeout_ms: Option<u64>,
    pub gestures: GestureTable,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            tcp_port: Some(7400),
            ws_port: Some(7401),
            udp_port: Some(7402),
            mqtt_url: None,
            snapshot_dir: None,
            snapshot_interval: Duration::from_secs(30),
            session_config: SessionConfig::default(),
            conflict_window_ms: sara_core::conflict::DEFAULT_WINDOW_MS,
            auto_create_sessions: true,
            turn_timeout_ms: None,
            gestures: GestureTable::default(),
        }
    }
}

impl ServerConfig {
    /// Loopback TCP, WebSocket and UDP on free ports; handy for tests.
    pub fn ephemeral() -> Self {
        Self { tcp_port: Some(0), ws_port: Some(0), udp_port: Some(0), ..Self::default() }
    }
}

#[derive(Debug, Default)]
struct Counters {
    /// Frames read from the client.
    received: AtomicU64,
    /// Frames queued to the client.
    sent: AtomicU64,
}

struct ClientEntry {
    user_id: String,
    tx: mpsc::UnboundedSender<EventEnvelope>,
    counters: Arc<Counters>,
}

type SharedWorker = Arc<Mutex<SessionWorker>>;

struct Shared {
    config: ServerConfig,
    users: Arc<UsersService>,
    clock: Arc<dyn Clock>,
    gestures: Arc<GestureTable>,
    clients: Mutex<HashMap<String, ClientEntry>>,
    sessions: Mutex<HashMap<String, SharedWorker>>,
    transports: Mutex<Vec<&'static str>>,
    shutdown: watch::Receiver<bool>,
}

/// Read-only view of one hosted session.
#[derive(Debug, Clone)]
pub struct SessionInfo {
    pub session_id: String,
    pub revision: u64,
    pub state_hash: String,
    pub status: SessionStatus,
    pub models: CompositeModel,
    pub broadcast_order: Vec<String>,
    pub members: Vec<Member>,
    pub max_in_pipeline: usize,
}

impl Shared {
    fn route(&self, out: Vec<Outbound>) {
        let clients = self.clients.lock().unwrap();
        for o in out {
            if let Some(c) = clients.get(&o.client_id) {
                if c.tx.send(o.event).is_ok() {
                    c.counters.sent.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
    }

    fn session(&self, session_id: &str) -> Option<SharedWorker> {
        self.sessions.lock().unwrap().get(session_id).cloned()
    }

    fn session_or_create(&self, session_id: &str) -> Option<SharedWorker> {
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(w) = sessions.get(session_id) {
            return Some(w.clone());
        }
        if !self.config.auto_create_sessions && !self.config.session_config.sessions.contains_key(session_id) {
            return None;
        }
        let settings = self.config.session_config.settings_for(session_id);
        let worker = SessionWorker::new(session_id, settings, self.config.conflict_window_ms, self.gestures.clone());
        tracing::info!(session = session_id, "session created");
        let w = Arc::new(Mutex::new(worker));
        sessions.insert(session_id.to_string(), w.clone());
        Some(w)
    }

    fn health(&self) -> String {
        let mut out = String::from("status: ok\n");
        out.push_str(&format!("transports: {}\n", self.transports.lock().unwrap().join(",")));
        let sessions: Vec<(String, SharedWorker)> =
            self.sessions.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.push_str(&format!("sessions: {}\n", sessions.len()));
        let mut lines: Vec<String> = sessions
            .iter()
            .map(|(sid, w)| {
                let w = w.lock().unwrap();
                format!("session {sid} revision {} members {} hash {}\n", w.revision(), w.member_count(), w.state_hash())
            })
            .collect();
        lines.sort();
        out.extend(lines);
        out
    }

    fn snapshot_texts(&self) -> Vec<(String, String)> {
        let sessions: Vec<(String, SharedWorker)> =
            self.sessions.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sessions.into_iter().map(|(sid, w)| (sid, w.lock().unwrap().snapshot())).collect()
    }

    fn write_snapshots(&self) -> Result<usize, ServerError> {
        let Some(dir) = &self.config.snapshot_dir else { return Ok(0) };
        std::fs::create_dir_all(dir)?;
        let texts = self.snapshot_texts();
        for (sid, text) in &texts {
            let path = dir.join(snapshot_file_name(sid));
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, text)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(texts.len())
    }
}

/// File name for a session snapshot; ids outside a safe alphabet are hex encoded.
pub fn snapshot_file_name(session_id: &str) -> String {
    let safe = !session_id.is_empty()
        && session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !session_id.starts_with("x-");
    if safe {
        format!("{session_id}.json")
    } else {
        let hex: String = session_id.bytes().map(|b| format!("{b:02x}")).collect();
        format!("x-{hex}.json")
    }
}

fn load_snapshots(dir: &Path, gestures: &Arc<GestureTable>) -> Result<HashMap<String, SharedWorker>, ServerError> {
    let mut out = HashMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let worker = SessionWorker::restore(&text, gestures.clone())
            .map_err(|e| ServerError::Snapshot(format!("{}: {e}", path.display())))?;
        tracing::info!(session = worker.session_id(), revision = worker.revision(), "session restored");
        out.insert(worker.session_id().to_string(), Arc::new(Mutex::new(worker)));
    }
    Ok(out)
}

/// One client connection, independent of transport.
struct Conn {
    shared: Arc<Shared>,
    method: ConnectionMethod,
    tx: mpsc::UnboundedSender<EventEnvelope>,
    client: Option<Registered>,
}

struct Registered {
    member: Member,
    counters: Arc<Counters>,
    session: Option<(String, SharedWorker)>,
}

impl Conn {
    fn new(shared: Arc<Shared>, method: ConnectionMethod, tx: mpsc::UnboundedSender<EventEnvelope>) -> Self {
        Self { shared, method, tx, client: None }
    }

    fn reply(&self, e: EventEnvelope) {
        if self.tx.send(e).is_ok() {
            if let Some(c) = &self.client {
                c.counters.sent.fetch_add(1, Ordering::SeqCst);
            }
        }
    }

    fn reject(&self, rejected_id: &str, rule_id: &str, reason: impl Into<String>) {
        let session_id = self.client.as_ref().and_then(|c| c.session.as_ref()).map(|(s, _)| s.clone()).unwrap_or_default();
        self.reply(EventEnvelope {
            event_id: derived_id(rejected_id, "rejected"),
            sender_id: SYSTEM_SENDER.into(),
            session_id,
            ts: self.shared.clock.now_ms(),
            payload: Payload::EventRejected {
                rejected_event_id: rejected_id.to_string(),
                reason: reason.into(),
                rule_id: rule_id.into(),
            },
        });
    }

    /// Handles one text frame; returns `false` when the connection must close.
    fn on_frame(&mut self, text: &str) -> bool {
        let keep = self.handle(text);
        if let Some(c) = &self.client {
            c.counters.received.fetch_add(1, Ordering::SeqCst);
        }
        keep
    }

    fn handle(&mut self, text: &str) -> bool {
        let e = match decode_event(text) {
            Ok(e) => e,
            Err(err) => {
                self.reject("", "protocol.malformed", err.to_string());
                return self.client.is_some();
            }
        };
        if self.client.is_none() {
            return self.hello(e);
        }
        match &e.payload {
            Payload::NewUserConnection { .. } => {
                self.reject(&e.event_id, "protocol.duplicate_hello", "connection already registered");
                true
            }
            Payload::ConnectToSession { session_id, user_id, reception_format } => {
                let (sid, uid, fmt) = (session_id.clone(), user_id.clone(), *reception_format);
                self.connect_to_session(&e, &sid, &uid, fmt);
                true
            }
            Payload::SetSessionState { .. } if self.method == ConnectionMethod::Udp => {
                self.reject(&e.event_id, "protocol.udp_policy", "full session state cannot travel over UDP");
                true
            }
            _ => {
                let client = self.client.as_ref().expect("registered");
                let Some((_, worker)) = &client.session else {
                    self.reject(&e.event_id, "session.not_joined", "NotInSession: connect to a session first");
                    return true;
                };
                let now = self.shared.clock.now_ms();
                let out = worker.lock().unwrap().dispatch(&client.member.client_id, e, now, self.shared.users.as_ref());
                self.shared.route(out);
                true
            }
        }
    }

    fn hello(&mut self, e: EventEnvelope) -> bool {
        let Payload::NewUserConnection { user_id, connection_method, convention, device_profile, token, client_id } = e.payload.clone()
        else {
            self.reject(&e.event_id, "protocol.violation", format!("ProtocolViolation: expected NewUserConnection, got `{}`", e.type_tag()));
            return false;
        };
        if connection_method != self.method {
            self.reject(
                &e.event_id,
                "protocol.method_mismatch",
                format!("announced {connection_method:?} but connected over {:?}", self.method),
            );
            return false;
        }
        if let Err(err) = self.shared.users.login(&user_id, token.as_deref().unwrap_or("")) {
            let rule = match err {
                UsersError::UnknownUser(_) => "auth.unknown_user",
                _ => "auth.bad_token",
            };
            self.reject(&e.event_id, rule, err.to_string());
            return false;
        }
        let client_id = match (self.method, client_id) {
            (ConnectionMethod::Mqtt, Some(id)) if !id.is_empty() => id,
            (ConnectionMethod::Mqtt, _) => user_id.clone(),
            _ => uuid::Uuid::new_v4().to_string(),
        };
        let counters = Arc::new(Counters::default());
        let member = Member {
            client_id: client_id.clone(),
            user_id: user_id.clone(),
            method: self.method,
            format: StateFormat::CustomJson,
            convention,
            profile: device_profile,
        };
        self.shared
            .clients
            .lock()
            .unwrap()
            .insert(client_id.clone(), ClientEntry { user_id: user_id.clone(), tx: self.tx.clone(), counters: counters.clone() });
        self.client = Some(Registered { member, counters, session: None });
        tracing::info!(client = %client_id, user = %user_id, method = ?self.method, "client registered");
        self.reply(EventEnvelope {
            event_id: derived_id(&e.event_id, "ack"),
            sender_id: SYSTEM_SENDER.into(),
            session_id: e.session_id,
            ts: self.shared.clock.now_ms(),
            payload: Payload::Ack { client_id },
        });
        true
    }

    fn connect_to_session(&mut self, e: &EventEnvelope, session_id: &str, user_id: &str, format: StateFormat) {
        let client = self.client.as_ref().expect("registered");
        if user_id != client.member.user_id || e.sender_id != client.member.user_id {
            self.reject(&e.event_id, "protocol.sender", "ConnectToSession for another user");
            return;
        }
        if format == StateFormat::Collada {
            self.reject(&e.event_id, "protocol.unsupported_format", "COLLADA is not supported");
            return;
        }
        self.leave_session();
        let Some(worker) = self.shared.session_or_create(session_id) else {
            self.reject(&e.event_id, "session.unknown", format!("UnknownSession: `{session_id}`"));
            return;
        };
        let client = self.client.as_mut().expect("registered");
        client.member.format = format;
        let member = client.member.clone();
        client.session = Some((session_id.to_string(), worker.clone()));
        let now = self.shared.clock.now_ms();
        tracing::info!(client = %member.client_id, session = session_id, "joined session");
        let out = worker.lock().unwrap().join(member, &e.event_id, now, self.shared.users.as_ref());
        self.shared.route(out);
    }

    fn leave_session(&mut self) {
        if let Some(client) = self.client.as_mut() {
            if let Some((_, worker)) = client.session.take() {
                worker.lock().unwrap().leave(&client.member.client_id);
            }
        }
    }

    fn close(&mut self) {
        self.leave_session();
        let Some(client) = self.client.take() else { return };
        let still_connected = {
            let mut clients = self.shared.clients.lock().unwrap();
            clients.remove(&client.member.client_id);
            clients.values().any(|c| c.user_id == client.member.user_id)
        };
        if !still_connected {
            let _ = self.shared.users.logout(&client.member.user_id);
        }
        tracing::info!(client = %client.member.client_id, "client disconnected");
    }
}

pub struct Server {
    shared: Arc<Shared>,
    shutdown_tx: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    tcp_addr: Option<SocketAddr>,
    ws_addr: Option<SocketAddr>,
    udp_addr: Option<SocketAddr>,
}

async fn bind_tcp(bind: IpAddr, port: u16) -> Result<TcpListener, ServerError> {
    let addr = SocketAddr::new(bind, port);
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServerError::PortInUse(addr),
        _ => e.into(),
    })
}

impl Server {
    pub async fn start(config: ServerConfig, users: Arc<UsersService>, clock: Arc<dyn Clock>) -> Result<Self, ServerError> {
        let gestures = Arc::new(config.gestures.clone());
        let restored = match &config.snapshot_dir {
            Some(dir) => load_snapshots(dir, &gestures)?,
            None => HashMap::new(),
        };
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let shared = Arc::new(Shared {
            config: config.clone(),
            users,
            clock,
            gestures,
            clients: Mutex::new(HashMap::new()),
            sessions: Mutex::new(restored),
            transports: Mutex::new(Vec::new()),
            shutdown: shutdown_rx,
        });
        let mut server = Server { shared: shared.clone(), shutdown_tx, tasks: Vec::new(), tcp_addr: None, ws_addr: None, udp_addr: None };

        if let Some(port) = config.tcp_port {
            let listener = bind_tcp(config.bind, port).await?;
            server.tcp_addr = Some(listener.local_addr()?);
            server.tasks.push(tokio::spawn(serve_tcp(listener, shared.clone())));
            shared.transports.lock().unwrap().push("tcp");
        }
        if let Some(port) = config.ws_port {
            let listener = bind_tcp(config.bind, port).await?;
            server.ws_addr = Some(listener.local_addr()?);
            server.tasks.push(tokio::spawn(serve_ws(listener, shared.clone())));
            shared.transports.lock().unwrap().push("websocket");
        }
        if let Some(port) = config.udp_port {
            let addr = SocketAddr::new(config.bind, port);
            let socket = UdpSocket::bind(addr).await.map_err(|e| match e.kind() {
                std::io::ErrorKind::AddrInUse => ServerError::PortInUse(addr),
                _ => e.into(),
            })?;
            server.udp_addr = Some(socket.local_addr()?);
            server.tasks.push(tokio::spawn(serve_udp(Arc::new(socket), shared.clone())));
            shared.transports.lock().unwrap().push("udp");
        }
        if let Some(url) = &config.mqtt_url {
            server.tasks.push(start_mqtt(url, shared.clone()).await?);
            shared.transports.lock().unwrap().push("mqtt");
        }
        if config.snapshot_dir.is_some() {
            server.tasks.push(tokio::spawn(snapshot_loop(shared.clone())));
        }
        if let Some(timeout) = config.turn_timeout_ms {
            server.tasks.push(tokio::spawn(turn_timeout_loop(shared.clone(), timeout)));
        }
        tracing::info!(transports = ?shared.transports.lock().unwrap(), "server started");
        Ok(server)
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    pub fn udp_addr(&self) -> Option<SocketAddr> {
        self.udp_addr
    }

    pub fn transports(&self) -> Vec<&'static str> {
        self.shared.transports.lock().unwrap().clone()
    }

    /// Plain-text status, the same text served at `/health`.
    pub fn health(&self) -> String {
        self.shared.health()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.shared.sessions.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn session_info(&self, session_id: &str) -> Option<SessionInfo> {
        let worker = self.shared.session(session_id)?;
        let w = worker.lock().unwrap();
        Some(SessionInfo {
            session_id: session_id.to_string(),
            revision: w.revision(),
            state_hash: w.state_hash(),
            status: w.session().status.clone(),
            models: w.session().models.clone(),
            broadcast_order: w.broadcast_order().to_vec(),
            members: w.members().cloned().collect(),
            max_in_pipeline: w.max_in_pipeline(),
        })
    }

    /// `(frames received from, frames queued to)` the client.
    pub fn client_counters(&self, client_id: &str) -> Option<(u64, u64)> {
        let clients = self.shared.clients.lock().unwrap();
        let c = clients.get(client_id)?;
        Some((c.counters.received.load(Ordering::SeqCst), c.counters.sent.load(Ordering::SeqCst)))
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().unwrap().len()
    }

    /// Writes every session to the snapshot directory now; returns how many were written.
    pub fn snapshot_now(&self) -> Result<usize, ServerError> {
        self.shared.write_snapshots()
    }

    /// Stops all transports after writing a final snapshot.
    pub async fn shutdown(self) -> Result<(), ServerError> {
        let written = self.shared.write_snapshots();
        self.stop().await;
        written.map(|_| ())
    }

    /// Stops without the final snapshot, as a crash would.
    pub async fn abort(self) {
        self.stop().await;
    }

    async fn stop(self) {
        let _ = self.shutdown_tx.send(true);
        for t in &self.tasks {
            t.abort();
        }
        for t in self.tasks {
            let _ = t.await;
        }
        // give connection tasks a moment to observe the signal and close their sockets
        tokio::time::sleep(Duration::from_millis(20)).await;
        tracing::info!("server stopped");
    }
}

async fn snapshot_loop(shared: Arc<Shared>) {
    let mut tick = tokio::time::interval(shared.config.snapshot_interval);
    tick.tick().await;
    loop {
        tick.tick().await;
        let s = shared.clone();
        match tokio::task::spawn_blocking(move || s.write_snapshots()).await {
            Ok(Ok(n)) => tracing::debug!(sessions = n, "snapshot written"),
            Ok(Err(e)) => tracing::warn!(error = %e, "snapshot failed"),
            Err(e) => tracing::warn!(error = %e, "snapshot task failed"),
        }
    }
}

async fn turn_timeout_loop(shared: Arc<Shared>, timeout_ms: u64) {
    let mut tick = tokio::time::interval(Duration::from_millis((timeout_ms / 4).clamp(10, 1000)));
    loop {
        tick.tick().await;
        let sessions: Vec<SharedWorker> = shared.sessions.lock().unwrap().values().cloned().collect();
        for w in sessions {
            let now = shared.clock.now_ms();
            let out = w.lock().unwrap().expire_turn(now, timeout_ms, shared.users.as_ref());
            shared.route(out);
        }
    }
}

async fn serve_tcp(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                tracing::debug!(%peer, "tcp connection");
                tokio::spawn(handle_tcp(stream, shared.clone()));
            }
            Err(e) => tracing::warn!(error = %e, "tcp accept failed"),
        }
    }
}

async fn handle_tcp(stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let (reader, mut writer) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<EventEnvelope>();
    let write_task = tokio::spawn(async move {
        while let Some(e) = rx.recv().await {
            if writer.write_all(tcp_frame(&e).as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = writer.shutdown().await;
    });
    let mut shutdown = shared.shutdown.clone();
    let mut conn = Conn::new(shared, ConnectionMethod::Tcp, tx);
    let mut lines = BufReader::new(reader).lines();
    loop {
        tokio::select! {
            line = lines.next_line() => match line {
                Ok(Some(line)) if line.trim().is_empty() => continue,
                Ok(Some(line)) => {
                    if !conn.on_frame(&line) {
                        break;
                    }
                }
                _ => break,
            },
            _ = shutdown.changed() => break,
        }
    }
    conn.close();
    drop(conn);
    let _ = write_task.await;
}

async fn serve_ws(listener: TcpListener, shared: Arc<Shared>) {
    let app = Router::new()
        .route("/", get(ws_upgrade))
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .with_state(shared.clone());
    let mut shutdown = shared.shutdown.clone();
    let listener = listener.tap_io(|tcp| {
        let _ = tcp.set_nodelay(true);
    });
    let _ = axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = shutdown.changed().await;
        })
        .await;
}

async fn health(State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    shared.health()
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.max_message_size(64 << 20).on_upgrade(move |socket| handle_ws(socket, shared))
}

async fn handle_ws(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<EventEnvelope>();
    let write_task = tokio::spawn(async move {
        while let Some(e) = rx.recv().await {
            if sink.send(Message::Text(encode_event(&e).into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let mut shutdown = shared.shutdown.clone();
    let mut conn = Conn::new(shared, ConnectionMethod::Websocket, tx);
    loop {
        tokio::select! {
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    if !conn.on_frame(text.as_str()) {
                        break;
                    }
                }
                Some(Ok(Message::Binary(bytes))) => {
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    if !conn.on_frame(&text) {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => break,
        }
    }
    conn.close();
    drop(conn);
    let _ = write_task.await;
}

async fn serve_udp(socket: Arc<UdpSocket>, shared: Arc<Shared>) {
    let mut peers: HashMap<SocketAddr, Conn> = HashMap::new();
    let mut buf = vec![0u8; UDP_MAX_DATAGRAM + 1];
    let mut shutdown = shared.shutdown.clone();
    loop {
        let (n, peer) = tokio::select! {
            r = socket.recv_from(&mut buf) => match r {
                Ok(x) => x,
                Err(e) => {
                    tracing::debug!(error = %e, "udp receive failed");
                    continue;
                }
            },
            _ = shutdown.changed() => break,
        };
        let text = String::from_utf8_lossy(&buf[..n]).into_owned();
        let conn = peers.entry(peer).or_insert_with(|| {
            let (tx, mut rx) = mpsc::unbounded_channel::<EventEnvelope>();
            let out = socket.clone();
            tokio::spawn(async move {
                while let Some(e) = rx.recv().await {
                    let frame = encode_event(&e);
                    if frame.len() > UDP_MAX_DATAGRAM {
                        tracing::warn!(%peer, len = frame.len(), "dropping oversized datagram");
                        continue;
                    }
                    let _ = out.send_to(frame.as_bytes(), peer).await;
                }
            });
            Conn::new(shared.clone(), ConnectionMethod::Udp, tx)
        });
        let mut keep = true;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if !conn.on_frame(line) {
                keep = false;
                break;
            }
        }
        if !keep {
            if let Some(mut c) = peers.remove(&peer) {
                c.close();
            }
        }
    }
    for (_, mut c) in peers.drain() {
        c.close();
    }
}

/// Accepts `mqtt://host:port`, `tcp://host:port` or bare `host[:port]`.
pub fn parse_broker_url(url: &str) -> Result<(String, u16), String> {
    let rest = url.split_once("://").map_or(url, |(scheme, rest)| match scheme {
        "mqtt" | "tcp" => rest,
        _ => "",
    });
    if rest.is_empty() {
        return Err(format!("unsupported broker URL `{url}`"));
    }
    let rest = rest.trim_end_matches('/');
    match rest.rsplit_once(':') {
        Some((host, port)) => Ok((host.to_string(), port.parse().map_err(|_| format!("bad port in `{url}`"))?)),
        None => Ok((rest.to_string(), 1883)),
    }
}

fn mqtt_options(url: &str) -> Result<MqttOptions, ServerError> {
    let (host, port) = parse_broker_url(url).map_err(ServerError::BrokerUnreachable)?;
    let id = format!("sara-server-{}", uuid::Uuid::new_v4().simple());
    let mut opts = MqttOptions::new(id, host, port);
    opts.set_keep_alive(Duration::from_secs(5));
    opts.set_max_packet_size(64 << 20, 64 << 20);
    Ok(opts)
}

async fn start_mqtt(url: &str, shared: Arc<Shared>) -> Result<JoinHandle<()>, ServerError> {
    let (client, mut eventloop) = AsyncClient::new(mqtt_options(url)?, 1024);
    let connack = async {
        loop {
            match eventloop.poll().await {
                Ok(Event::Incoming(Packet::ConnAck(_))) => return Ok(()),
                Ok(_) => {}
                Err(e) => return Err(ServerError::BrokerUnreachable(e.to_string())),
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(5), connack)
        .await
        .map_err(|_| ServerError::BrokerUnreachable(format!("no CONNACK from {url}")))??;
    client
        .subscribe(MQTT_SESSION_FILTER, QoS::AtLeastOnce)
        .await
        .map_err(|e| ServerError::BrokerUnreachable(e.to_string()))?;
    Ok(tokio::spawn(mqtt_loop(client, eventloop, shared)))
}

async fn mqtt_loop(client: AsyncClient, mut eventloop: rumqttc::EventLoop, shared: Arc<Shared>) {
    // MQTT has no connections, so clients are keyed by the sender of their events.
    let mut conns: HashMap<String, Conn> = HashMap::new();
    let mut shutdown = shared.shutdown.clone();
    loop {
        let event = tokio::select! {
            ev = eventloop.poll() => ev,
            _ = shutdown.changed() => break,
        };
        let publish = match event {
            Ok(Event::Incoming(Packet::Publish(p))) => p,
            Ok(_) => continue,
            Err(e) => {
                tracing::warn!(error = %e, "mqtt connection error");
                tokio::time::sleep(Duration::from_millis(500)).await;
                continue;
            }
        };
        if parse_mqtt_session_topic(&publish.topic).is_none() {
            continue;
        }
        let text = String::from_utf8_lossy(&publish.payload).into_owned();
        let Ok(e) = decode_event(&text) else {
            tracing::debug!(topic = %publish.topic, "undecodable mqtt frame dropped");
            continue;
        };
        let key = e.sender_id.clone();
        if let Payload::NewUserConnection { client_id, user_id, .. } = &e.payload {
            let inbox = mqtt_inbox_topic(client_id.as_deref().filter(|c| !c.is_empty()).unwrap_or(user_id));
            if let Some(mut old) = conns.remove(&key) {
                old.close();
            }
            let (tx, mut rx) = mpsc::unbounded_channel::<EventEnvelope>();
            let publisher = client.clone();
            tokio::spawn(async move {
                while let Some(e) = rx.recv().await {
                    if publisher.publish(inbox.clone(), QoS::AtLeastOnce, false, encode_event(&e)).await.is_err() {
                        break;
                    }
                }
            });
            conns.insert(key.clone(), Conn::new(shared.clone(), ConnectionMethod::Mqtt, tx));
        }
        let Some(conn) = conns.get_mut(&key) else { continue };
        if !conn.on_frame(&text) {
            if let Some(mut c) = conns.remove(&key) {
                c.close();
            }
        }
    }
    for (_, mut c) in conns.drain() {
        c.close();
    }
    let _ = client.disconnect().await;
}
