//! Drives a live server and SDK clients through a scenario, then compares what
//! happened with the oracle replay.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sara_client::{ClientError, ClientSession, ConnectOptions, Endpoint, Role};
use sara_core::interp::{convert_point, convert_status};
use sara_core::models::CompositeModel;
use sara_core::protocol::{state_hash, Convention, DeviceProfile, Payload, RawInteraction, StateFormat};
use sara_core::scene::Vec3;
use sara_core::users::UsersService;
use sara_core::{Node, SessionStatus, Transform};
use sara_server::{Clock, Server, ServerConfig, ServerError, SessionConfig, SystemClock, VirtualClock};
use serde_json::Value;
use thiserror::Error;

use crate::oracle::{self, NodeView, Outcome, Replay, View};
use crate::report::{ClientRecord, JoinRecord, OracleRecord, ReactionRecord, Report, RestartRecord, SetupRecord, StepRecord};
use crate::scenario::{ClientSpec, Op, RoleSpec, Scenario, TransportKind};
use crate::voxel::{cube_node, point_on_face, voxel_apply, world_nodes, BLOCK_ATTR};

/// Virtual server time at `at_ms = 0`.
pub const VIRTUAL_BASE_MS: u64 = 1_000_000;
const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("client {name}: {source}")]
    Client { name: String, source: ClientError },
    #[error("no quiescence within {0:?}")]
    Barrier(Duration),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    /// Forces one transport on every client.
    pub transport: Option<TransportKind>,
    pub virtual_time: bool,
    pub barrier_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed: 0, transport: None, virtual_time: true, barrier_timeout: Duration::from_secs(10) }
    }
}

/// Gesture names each profile uses for a click and a drag.
pub fn gestures(profile: DeviceProfile) -> (&'static str, &'static str) {
    match profile {
        DeviceProfile::DesktopPointer => ("click", "drag"),
        DeviceProfile::HandheldTouch => ("tap", "pan"),
        DeviceProfile::HmdGesture => ("air_tap", "hand_drag"),
    }
}

/// Canonical per-node content of a mirror held in `convention`.
pub fn mirror_view(mirror: &SessionStatus, convention: Convention) -> View {
    convert_status(mirror, convention)
        .nodes()
        .map(|n| {
            let v = NodeView { parent: n.parent_id.clone(), position: n.transform.position, block: n.attributes.get(BLOCK_ATTR).cloned(), mesh: n.mesh.clone() };
            (n.id.clone(), v)
        })
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOLERANCE)
}

/// First difference between two views, if any.
pub fn view_diff(got: &View, want: &View) -> Option<String> {
    let (g, w): (BTreeSet<&String>, BTreeSet<&String>) = (got.keys().collect(), want.keys().collect());
    if g != w {
        let extra: Vec<_> = g.difference(&w).take(5).collect();
        let missing: Vec<_> = w.difference(&g).take(5).collect();
        return Some(format!("node sets differ: extra {extra:?}, missing {missing:?}"));
    }
    for (id, a) in got {
        let b = &want[id];
        if a.parent != b.parent || a.block != b.block {
            return Some(format!("`{id}`: parent/block {:?}/{:?} vs {:?}/{:?}", a.parent, a.block, b.parent, b.block));
        }
        if !close(&a.position, &b.position) {
            return Some(format!("`{id}`: position {:?} vs {:?}", a.position, b.position));
        }
        let same_mesh = match (&a.mesh, &b.mesh) {
            (None, None) => true,
            (Some(x), Some(y)) => x.triangles == y.triangles && close(&x.vertices, &y.vertices) && close(&x.normals, &y.normals),
            _ => false,
        };
        if !same_mesh {
            return Some(format!("`{id}`: mesh differs"));
        }
    }
    None
}

/// `o <id>` groups of an OBJ export with the centroid of their vertices.
pub fn obj_centroids(text: &str) -> BTreeMap<String, Vec3> {
    let mut groups: BTreeMap<String, (Vec3, usize)> = BTreeMap::new();
    let mut current = None;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("o") => {
                let id = parts.next().unwrap_or_default().to_string();
                groups.entry(id.clone()).or_insert(([0.0; 3], 0));
                current = Some(id);
            }
            Some("v") => {
                let xyz: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                if let (Some(id), [x, y, z]) = (&current, xyz.as_slice()) {
                    let g = groups.get_mut(id).expect("group exists");
                    g.0 = [g.0[0] + x, g.0[1] + y, g.0[2] + z];
                    g.1 += 1;
                }
            }
            _ => {}
        }
    }
    groups.into_iter().map(|(id, (s, n))| (id, if n == 0 { s } else { s.map(|c| c / n as f64) })).collect()
}

/// Checks an OBJ client's geometry against the oracle view: one group per visible
/// mesh node, centered at the node's session position.
fn obj_diff(text: Option<String>, convention: Convention, want: &View) -> Option<String> {
    let Some(text) = text else { return Some("no geometry received".into()) };
    let got = obj_centroids(&text);
    let world = |id: &str| {
        let mut p = [0.0; 3];
        let mut cur = Some(id.to_string());
        while let Some(n) = cur {
            let v = &want[&n];
            p = [p[0] + v.position[0], p[1] + v.position[1], p[2] + v.position[2]];
            cur = v.parent.clone();
        }
        p
    };
    let meshes: BTreeSet<&String> = want.iter().filter(|(_, v)| v.mesh.is_some()).map(|(id, _)| id).collect();
    if got.keys().collect::<BTreeSet<_>>() != meshes {
        return Some(format!("OBJ groups {} vs {} mesh nodes", got.len(), meshes.len()));
    }
    for (id, c) in &got {
        let c = convert_point(*c, convention);
        if !close(&c, &world(id)) {
            return Some(format!("OBJ group `{id}` centered at {c:?}"));
        }
    }
    None
}

type Reactions = Arc<Mutex<HashMap<String, (String, String)>>>;

struct Online {
    spec: ClientSpec,
    session: ClientSession,
    /// Connected after the world was built, or reconnected after a restart.
    partial_history: bool,
}

struct Stack {
    sc: Scenario,
    opts: RunOptions,
    users: Arc<UsersService>,
    ids: BTreeMap<String, String>,
    tokens: BTreeMap<String, String>,
    config: ServerConfig,
    clock: Arc<dyn Clock>,
    virtual_clock: Option<VirtualClock>,
    server: Option<Server>,
    online: Vec<Online>,
    reactions: Reactions,
    generation: u64,
    /// Length of the broadcast order already attributed.
    seen_order: usize,
}

impl Stack {
    fn server(&self) -> &Server {
        self.server.as_ref().expect("server running")
    }

    fn transport(&self, spec: &ClientSpec) -> TransportKind {
        self.opts.transport.unwrap_or(spec.transport)
    }

    fn user(&self, name: &str) -> String {
        self.ids.get(name).cloned().unwrap_or_else(|| name.to_string())
    }

    fn endpoint(&self, kind: TransportKind) -> Endpoint {
        let s = self.server();
        match kind {
            TransportKind::Tcp => Endpoint::Tcp(s.tcp_addr().expect("tcp enabled")),
            TransportKind::Ws => Endpoint::WebSocket(format!("ws://{}/", s.ws_addr().expect("ws enabled"))),
            TransportKind::Udp => Endpoint::Udp(s.udp_addr().expect("udp enabled")),
        }
    }

    async fn connect(&mut self, spec: &ClientSpec, partial_history: bool) -> Result<(), RunError> {
        self.generation += 1;
        let user_id = &self.ids[&spec.name];
        let mut o = ConnectOptions::new(self.endpoint(self.transport(spec)), user_id, &self.tokens[&spec.name], &self.sc.session_id);
        o.format = spec.format;
        o.convention = spec.convention;
        o.profile = spec.profile;
        o.role = if spec.role == RoleSpec::Provider { Role::Provider } else { Role::Consumer };
        o.id_seed = Some(self.opts.seed.wrapping_mul(1_000).wrapping_add(self.generation));
        let session = ClientSession::connect(o).await.map_err(|source| RunError::Client { name: spec.name.clone(), source })?;
        if spec.role == RoleSpec::Provider {
            let sender = session.sender();
            let convention = spec.convention;
            let reactions = self.reactions.clone();
            session.on_event(move |n| {
                if !matches!(n.event.payload, Payload::Click { .. }) {
                    return;
                }
                if let Some(p) = voxel_apply(n.mirror, convention, &n.event.payload) {
                    let kind = match &p {
                        Payload::RemoveNode { .. } => "remove",
                        Payload::AddNode { .. } => "add",
                        _ => "update",
                    };
                    if let Ok(id) = sender.send(p) {
                        reactions.lock().unwrap().insert(n.event.event_id.clone(), (id, kind.to_string()));
                    }
                }
            });
        }
        self.online.push(Online { spec: spec.clone(), session, partial_history });
        Ok(())
    }

    /// Waits until every frame each client sent was handled and every frame the server
    /// queued was delivered.
    async fn quiesce(&self) -> Result<(), RunError> {
        let deadline = Instant::now() + self.opts.barrier_timeout;
        let mut polls = 0u32;
        loop {
            // the server side must hold still for the whole pass, or a frame queued to an
            // already checked client could slip through
            let server_side = |s: &Self| s.online.iter().map(|c| s.server().client_counters(c.session.client_id())).collect::<Vec<_>>();
            let before = server_side(self);
            let clients: Vec<_> = self.online.iter().map(|c| c.session.counters()).collect();
            let after = server_side(self);
            let settled = before == after && clients.iter().zip(&after).all(|(c, s)| Some(*c) == *s);
            if settled {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(RunError::Barrier(self.opts.barrier_timeout));
            }
            polls += 1;
            if polls < 5_000 {
                tokio::task::yield_now().await;
            } else {
                tokio::time::sleep(Duration::from_millis(1)).await;
            }
        }
    }

    fn client(&self, name: &str) -> &Online {
        self.online.iter().find(|c| c.spec.name == name).expect("validated: acting clients are online")
    }

    fn order_since(&mut self) -> Vec<String> {
        let order = self.server().session_info(&self.sc.session_id).map(|i| i.broadcast_order).unwrap_or_default();
        let fresh = order.get(self.seen_order.min(order.len())..).unwrap_or_default().to_vec();
        self.seen_order = order.len();
        fresh
    }

    fn outcome(&self, sender: &Online, event_id: &str, fresh: &[String]) -> Outcome {
        let rejected = sender.session.rejections().into_iter().find_map(|e| match e.payload {
            Payload::EventRejected { rejected_event_id, rule_id, .. } if rejected_event_id == event_id => Some(rule_id),
            _ => None,
        });
        match rejected {
            Some(rule) => Outcome::Rejected(rule),
            None if fresh.iter().any(|id| id == event_id) => Outcome::Accepted,
            None => Outcome::Merged,
        }
    }

    fn set_time(&self, at_ms: u64) {
        if let Some(v) = &self.virtual_clock {
            v.set(VIRTUAL_BASE_MS + at_ms);
        }
    }

    fn payload(&self, c: &Online, op: &Op, rng: &mut StdRng) -> Payload {
        let conv = c.spec.convention;
        let (click, drag) = gestures(c.spec.profile);
        let local = |p: Vec3| convert_point(p, conv);
        match op {
            Op::Click { node, face, tool } => {
                // aim at the clicked face of the cube as this client sees it
                let center = c.session.with_mirror(|m| m.node(node).map(|n| local(n.transform.position)));
                let jitter = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
                let point = center.map(|ctr| local(point_on_face(ctr, *face, jitter)));
                Payload::RawInteraction(RawInteraction {
                    gesture: click.into(),
                    node_id: node.clone(),
                    point,
                    delta: None,
                    tool: tool.as_ref().map(ToString::to_string),
                })
            }
            Op::Drag { node, delta } => Payload::RawInteraction(RawInteraction {
                gesture: drag.into(),
                node_id: node.clone(),
                point: None,
                delta: Some(local(*delta)),
                tool: None,
            }),
            Op::Paint { node, block } => Payload::IncrementalUpdate {
                node_id: node.clone(),
                property_path: format!("attributes.{BLOCK_ATTR}"),
                new_value: Value::String(block.clone()),
            },
            Op::Nudge { node, position } => Payload::IncrementalUpdate {
                node_id: node.clone(),
                property_path: "transform.position".into(),
                new_value: Value::from(local(*position).to_vec()),
            },
            Op::Add { parent, node, position, block } => {
                let n = match block {
                    Some(b) => cube_node(node, *position, b, conv),
                    None => Node::new(node.as_str()).with_transform(Transform::at(local(*position))),
                };
                Payload::AddNode { parent_id: parent.clone(), node: sara_core::protocol::NodeSpec::from_node(&n) }
            }
            Op::Remove { node } => Payload::RemoveNode { node_id: node.clone() },
            Op::RequestTurn => Payload::RequestTurn {},
            Op::PassTurn { to } => Payload::PassTurn { to_user: to.as_deref().map(|u| self.user(u)) },
            Op::Transfer { node, to } => Payload::TransferOwnership { node_id: node.clone(), to_user: self.user(to) },
            Op::Grant { layer, user } => Payload::GrantLayerAccess { layer_id: layer.clone(), user_id: self.user(user) },
            Op::Revoke { layer, user } => Payload::RevokeLayerAccess { layer_id: layer.clone(), user_id: self.user(user) },
            Op::Permit { user, nodes } => Payload::SetSubordinatePermissions { user_id: self.user(user), node_ids: nodes.clone() },
            Op::Join | Op::Restart => unreachable!("not an event"),
        }
    }

    async fn restart(&mut self, step: usize) -> Result<RestartRecord, RunError> {
        self.quiesce().await?;
        let before = self.server().session_info(&self.sc.session_id).ok_or_else(|| RunError::Setup("session vanished".into()))?;
        // let at least one periodic snapshot capture the quiescent state, then crash
        tokio::time::sleep(self.config.snapshot_interval * 3).await;
        let specs: Vec<ClientSpec> = self.online.drain(..).map(|c| {
            c.session.close();
            c.spec
        }).collect();
        self.server.take().expect("server running").abort().await;
        self.server = Some(Server::start(self.config.clone(), self.users.clone(), self.clock.clone()).await?);
        let after = self.server().session_info(&self.sc.session_id);
        let (revision_after, hash_after) = after.map(|i| (i.revision, i.state_hash)).unwrap_or_default();
        for spec in &specs {
            self.connect(spec, true).await?;
        }
        self.quiesce().await?;
        Ok(RestartRecord {
            step,
            identical: before.revision == revision_after && before.state_hash == hash_after,
            revision_before: before.revision,
            revision_after,
            hash_before: before.state_hash,
            hash_after,
        })
    }

    /// Whether a client's mirror can be held to the oracle, and the difference if so.
    fn check_client(&self, c: &Online, want: &View) -> (bool, Option<String>) {
        let udp_gap = self.transport(&c.spec) == TransportKind::Udp
            && (c.partial_history
                || c.session.rejections().iter().any(|e| matches!(&e.payload, Payload::EventRejected { rule_id, .. } if rule_id == "protocol.udp_policy")));
        if udp_gap {
            return (false, None);
        }
        if let Some(err) = c.session.mirror_errors().first() {
            return (true, Some(format!("mirror error: {err}")));
        }
        let diff = if c.spec.format == StateFormat::Obj {
            obj_diff(c.session.obj_text(), c.spec.convention, want)
        } else {
            view_diff(&c.session.with_mirror(|m| mirror_view(m, c.spec.convention)), want)
        };
        (true, diff)
    }
}

fn transport_name(t: TransportKind) -> &'static str {
    match t {
        TransportKind::Tcp => "tcp",
        TransportKind::Ws => "ws",
        TransportKind::Udp => "udp",
    }
}

fn enum_text<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Runs `sc` against a fresh in-process server and checks it against the oracle.
pub async fn run(sc: &Scenario, opts: &RunOptions) -> Result<Report, RunError> {
    let started = Instant::now();
    let replay: Replay = oracle::replay(sc).map_err(RunError::Oracle)?;

    let users = Arc::new(UsersService::with_seed(opts.seed));
    let mut ids = BTreeMap::new();
    let mut tokens = BTreeMap::new();
    for c in &sc.clients {
        let (id, token) = users.register(&c.name).map_err(|e| RunError::Setup(e.to_string()))?;
        ids.insert(c.name.clone(), id);
        tokens.insert(c.name.clone(), token);
    }
    let mut settings = sc.session.clone();
    let mut composite = CompositeModel { models: settings.models };
    composite.map_users(|n| ids.get(n).cloned().unwrap_or_else(|| n.to_string()));
    settings.models = composite.models;

    let snapshots = tempfile::tempdir().map_err(|e| RunError::Setup(e.to_string()))?;
    let config = ServerConfig {
        snapshot_dir: Some(snapshots.path().to_path_buf()),
        snapshot_interval: Duration::from_millis(25),
        session_config: SessionConfig { defaults: Default::default(), sessions: BTreeMap::from([(sc.session_id.clone(), settings)]) },
        ..ServerConfig::ephemeral()
    };
    let virtual_clock = opts.virtual_time.then(|| VirtualClock::new(VIRTUAL_BASE_MS));
    let clock: Arc<dyn Clock> = match &virtual_clock {
        Some(v) => Arc::new(v.clone()),
        None => Arc::new(SystemClock),
    };
    let server = Server::start(config.clone(), users.clone(), clock.clone()).await?;
    let mut stack = Stack {
        sc: sc.clone(),
        opts: opts.clone(),
        users,
        ids,
        tokens,
        config,
        clock,
        virtual_clock,
        server: Some(server),
        online: Vec::new(),
        reactions: Arc::default(),
        generation: 0,
        seen_order: 0,
    };
    let result = drive(&mut stack, &replay, started).await;
    for c in stack.online.drain(..) {
        c.session.close();
    }
    if let Some(s) = stack.server.take() {
        s.abort().await;
    }
    result
}

async fn drive(stack: &mut Stack, replay: &Replay, started: Instant) -> Result<Report, RunError> {
    let sc = stack.sc.clone();
    let provider = sc.provider().clone();
    let mut mismatches = Vec::new();

    stack.set_time(0);
    for spec in sc.clients.iter().filter(|c| !c.late) {
        stack.connect(spec, false).await?;
    }
    stack.quiesce().await?;
    stack.order_since();

    // the provider builds the world
    let mut setup_ids = Vec::new();
    {
        let p = stack.client(&provider.name);
        for (parent, node) in world_nodes(&sc.world, provider.convention) {
            let id = p.session.send_add_node(&parent, &node).map_err(|source| RunError::Client { name: provider.name.clone(), source })?;
            setup_ids.push(id);
        }
    }
    stack.quiesce().await?;
    let fresh = stack.order_since();
    let setup: Vec<Outcome> = setup_ids.iter().map(|id| stack.outcome(stack.client(&provider.name), id, &fresh)).collect();
    let setup_match = setup == replay.setup;
    if !setup_match {
        mismatches.push("world setup verdicts differ from the oracle".into());
    }

    let mut rng = StdRng::seed_from_u64(stack.opts.seed);
    let mut steps = Vec::new();
    let mut late_joins = Vec::new();
    let mut restarts = Vec::new();
    let wall_start = Instant::now();
    for (i, step) in sc.timeline.iter().enumerate() {
        if stack.opts.virtual_time {
            stack.set_time(step.at_ms);
        } else {
            let due = wall_start + Duration::from_millis(step.at_ms);
            tokio::time::sleep_until(due.into()).await;
        }
        let mut record = StepRecord { index: i, at_ms: step.at_ms, client: step.client.clone(), op: step.op.kind().into(), outcome: None, expected: None, reaction: None };
        match &step.op {
            Op::Join => {
                let spec = sc.client(&step.client).expect("validated").clone();
                stack.connect(&spec, true).await?;
                stack.quiesce().await?;
                let c = stack.client(&spec.name);
                let want = &replay.joins[&i];
                let got = c.session.with_mirror(|m| mirror_view(m, spec.convention));
                let (checked, diff) = stack.check_client(c, want);
                let diff = if checked { diff } else { Some("UDP client starts without full state".into()) };
                late_joins.push(JoinRecord { step: i, client: spec.name.clone(), nodes: got.len(), matches_oracle: diff.is_none(), detail: diff });
            }
            Op::Restart => restarts.push(stack.restart(i).await?),
            op => {
                let c = stack.client(&step.client);
                let payload = stack.payload(c, op, &mut rng);
                let id = c.session.send(payload).map_err(|source| RunError::Client { name: step.client.clone(), source })?;
                stack.quiesce().await?;
                let fresh = stack.order_since();
                let outcome = stack.outcome(stack.client(&step.client), &id, &fresh);
                let reaction = stack.reactions.lock().unwrap().get(&id).cloned();
                record.reaction = reaction.map(|(rid, kind)| ReactionRecord { kind, outcome: stack.outcome(stack.client(&provider.name), &rid, &fresh) });
                record.outcome = Some(outcome);
            }
        }
        let want = &replay.steps[i];
        record.expected = want.outcome.clone();
        let want_reaction = want.reaction.clone().map(|(kind, outcome)| ReactionRecord { kind, outcome });
        if record.outcome != want.outcome {
            mismatches.push(format!("step {i} ({}): {:?} vs oracle {:?}", record.op, record.outcome, want.outcome));
        }
        if record.reaction != want_reaction {
            mismatches.push(format!("step {i} reaction: {:?} vs oracle {:?}", record.reaction, want_reaction));
        }
        steps.push(record);
    }
    stack.quiesce().await?;

    let info = stack.server().session_info(&sc.session_id).ok_or_else(|| RunError::Setup("session vanished".into()))?;
    let server_view = mirror_view(&info.status, Convention::RightHanded);
    let state_diff = view_diff(&server_view, &replay.engine.grid.full_view());
    if let Some(d) = &state_diff {
        mismatches.push(format!("server state: {d}"));
    }
    let revision_match = info.revision == replay.engine.mutations;
    if !revision_match {
        mismatches.push(format!("server revision {} vs oracle {}", info.revision, replay.engine.mutations));
    }
    debug_assert_eq!(info.state_hash, state_hash(&info.status));

    let mut clients = Vec::new();
    for c in &stack.online {
        let want = &replay.views[&c.spec.name];
        let (checked, diff) = stack.check_client(c, want);
        let nodes = if c.spec.format == StateFormat::Obj {
            c.session.obj_text().map(|t| obj_centroids(&t).len()).unwrap_or(0)
        } else {
            c.session.with_mirror(|m| m.len())
        };
        clients.push(ClientRecord {
            name: c.spec.name.clone(),
            transport: transport_name(stack.transport(&c.spec)).into(),
            convention: enum_text(&c.spec.convention),
            format: enum_text(&c.spec.format),
            checked,
            matches_oracle: checked && diff.is_none(),
            nodes,
            detail: diff,
        });
    }
    clients.sort_by(|a, b| a.name.cmp(&b.name));

    let accepted_count = steps.iter().filter(|s| s.outcome == Some(Outcome::Accepted)).count();
    let rejected_steps: Vec<usize> = steps.iter().filter(|s| matches!(s.outcome, Some(Outcome::Rejected(_)))).map(|s| s.index).collect();
    let mut expectation_failures = Vec::new();
    if let Some(h) = &sc.expect.final_hash {
        if *h != info.state_hash {
            expectation_failures.push(format!("final hash {} vs expected {h}", info.state_hash));
        }
    }
    if let Some(r) = &sc.expect.rejected_steps {
        if *r != rejected_steps {
            expectation_failures.push(format!("rejected steps {rejected_steps:?} vs expected {r:?}"));
        }
    }
    if let Some(n) = sc.expect.accepted_count {
        if n != accepted_count {
            expectation_failures.push(format!("accepted count {accepted_count} vs expected {n}"));
        }
    }

    let verdicts_match = !mismatches.iter().any(|m| m.starts_with("step") || m.starts_with("world"));
    let converged = state_diff.is_none() && clients.iter().all(|c| !c.checked || c.matches_oracle);
    let passed = converged
        && verdicts_match
        && revision_match
        && expectation_failures.is_empty()
        && late_joins.iter().all(|j| j.matches_oracle)
        && restarts.iter().all(|r| r.identical);
    Ok(Report {
        scenario: sc.name.clone(),
        seed: stack.opts.seed,
        transport: stack.opts.transport.map(|t| transport_name(t).to_string()),
        virtual_time: stack.opts.virtual_time,
        setup: SetupRecord { events: setup.len(), accepted: setup.iter().filter(|o| o.is_accepted()).count(), matches_oracle: setup_match },
        steps,
        late_joins,
        restarts,
        clients,
        accepted_count,
        rejected_steps,
        final_revision: info.revision,
        final_hash: info.state_hash,
        oracle: OracleRecord { verdicts_match, server_state_match: state_diff.is_none(), revision_match, mismatches },
        expectation_failures,
        converged,
        passed,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}
