//! The per-session event pipeline.
//!
//! A [`SessionWorker`] owns one session and is driven by a single caller, so
//! for a given session the validate, resolve, apply and broadcast stages never
//! overlap. It does no I/O: every call returns the frames to send, addressed
//! by client id, and the service layer routes them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use sara_core::conflict::{self, ConflictLog, ConflictStrategy, LogEntry};
use sara_core::interp::{convert_payload, convert_status, normalize_interaction, GestureTable};
use sara_core::models::{Context, Verdict};
use sara_core::protocol::{
    check_udp, derived_id, encode_event, encode_session_state, state_hash, ConnectionMethod, Convention,
    DeviceProfile, EventEnvelope, Payload, StateFormat, SYSTEM_SENDER,
};
use sara_core::scene::{AlignmentInfo, NodeId, SceneError, Session, SessionStatus};
use sara_core::users::UserDirectory;
use sara_core::CollaborationModel;

/// One connected client as seen by a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub client_id: String,
    pub user_id: String,
    pub method: ConnectionMethod,
    pub format: StateFormat,
    pub convention: Convention,
    pub profile: DeviceProfile,
}

/// A frame for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub client_id: String,
    pub event: EventEnvelope,
}

/// Per-session settings taken from the session config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    #[serde(default)]
    pub models: Vec<CollaborationModel>,
    #[serde(default)]
    pub conflict_window_ms: Option<u64>,
    #[serde(default)]
    pub conflict_strategy: ConflictStrategy,
    #[serde(default)]
    pub alignment: AlignmentInfo,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self { models: vec![], conflict_window_ms: None, conflict_strategy: ConflictStrategy::default(), alignment: AlignmentInfo::NotAligned }
    }
}

/// Contents of `--session-config`: defaults plus optional per-session overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(flatten)]
    pub defaults: SessionSettings,
    #[serde(default)]
    pub sessions: BTreeMap<String, SessionSettings>,
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for s in std::iter::once(&cfg.defaults).chain(cfg.sessions.values()) {
            sara_core::CompositeModel { models: s.models.clone() }.check_config().map_err(|e| e.to_string())?;
            s.alignment.validate()?;
        }
        Ok(cfg)
    }

    pub fn settings_for(&self, session_id: &str) -> &SessionSettings {
        self.sessions.get(session_id).unwrap_or(&self.defaults)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    member: Member,
    visible: BTreeSet<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct WorkerDoc {
    session: Value,
    window_ms: u64,
    strategy: ConflictStrategy,
    #[serde(default)]
    conflict_log: Vec<LogEntry>,
    #[serde(default)]
    broadcast_order: Vec<String>,
}

#[derive(Clone)]
pub struct SessionWorker {
    session: Session,
    window_ms: u64,
    strategy: ConflictStrategy,
    log: ConflictLog,
    members: BTreeMap<String, Slot>,
    order: Vec<String>,
    gestures: Arc<GestureTable>,
    in_pipeline: usize,
    max_in_pipeline: usize,
    turn_since: Option<(String, u64)>,
}

fn scene_rule(err: &SceneError) -> &'static str {
    match err {
        SceneError::UnknownParent(_) => "scene.unknown_parent",
        SceneError::DuplicateNodeId(_) => "scene.duplicate_node",
        SceneError::UnknownNode(_) => "scene.unknown_node",
        SceneError::CannotDetachRoot => "scene.root",
        SceneError::UnknownPropertyPath(_) => "scene.property_path",
        SceneError::ValueShapeMismatch { .. } => "scene.value_shape",
        SceneError::InvalidMesh(_) => "scene.invalid_mesh",
        _ => "scene.invalid",
    }
}

fn scene_reject(err: SceneError) -> Verdict {
    Verdict::reject(scene_rule(&err), err.to_string())
}

/// Node ids an event carries, used to keep out-of-scope ids away from members.
fn referenced_nodes(p: &Payload) -> Vec<&str> {
    match p {
        Payload::SetSubordinatePermissions { node_ids, .. } => node_ids.iter().map(String::as_str).collect(),
        Payload::AddNode { parent_id, node } => vec![parent_id.as_str(), node.id.as_str()],
        other => other.target_node().into_iter().collect(),
    }
}

impl SessionWorker {
    pub fn new(session_id: &str, settings: &SessionSettings, default_window_ms: u64, gestures: Arc<GestureTable>) -> Self {
        let mut session = Session::new(session_id);
        session.models.models = settings.models.clone();
        session.alignment = settings.alignment.clone();
        Self::from_session(session, settings.conflict_window_ms.unwrap_or(default_window_ms), settings.conflict_strategy, gestures)
    }

    pub fn from_session(session: Session, window_ms: u64, strategy: ConflictStrategy, gestures: Arc<GestureTable>) -> Self {
        Self {
            session,
            window_ms,
            strategy,
            log: ConflictLog::default(),
            members: BTreeMap::new(),
            order: Vec::new(),
            gestures,
            in_pipeline: 0,
            max_in_pipeline: 0,
            turn_since: None,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn session_id(&self) -> &str {
        &self.session.session_id
    }

    pub fn revision(&self) -> u64 {
        self.session.status.revision
    }

    pub fn state_hash(&self) -> String {
        state_hash(&self.session.status)
    }

    /// Ids of accepted events in the order they were applied and broadcast.
    pub fn broadcast_order(&self) -> &[String] {
        &self.order
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values().map(|s| &s.member)
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn conflict_settings(&self) -> (u64, ConflictStrategy) {
        (self.window_ms, self.strategy)
    }

    /// Highest number of events ever inside the pipeline at once; 1 once anything ran.
    pub fn max_in_pipeline(&self) -> usize {
        self.max_in_pipeline
    }

    pub fn snapshot(&self) -> String {
        let doc = WorkerDoc {
            session: serde_json::from_str(&self.session.snapshot()).expect("session snapshot is JSON"),
            window_ms: self.window_ms,
            strategy: self.strategy,
            conflict_log: self.log.entries().cloned().collect(),
            broadcast_order: self.order.clone(),
        };
        serde_json::to_string(&doc).expect("snapshot serialization is infallible")
    }

    pub fn restore(text: &str, gestures: Arc<GestureTable>) -> Result<Self, String> {
        let doc: WorkerDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let session = Session::restore(&doc.session.to_string()).map_err(|e| e.to_string())?;
        let mut w = Self::from_session(session, doc.window_ms, doc.strategy, gestures);
        for entry in &doc.conflict_log {
            w.log.record(&entry.to_event());
        }
        w.order = doc.broadcast_order;
        Ok(w)
    }

    /// Adds a member and returns the initial state frame for it.
    pub fn join(&mut self, member: Member, connect_event_id: &str, now_ms: u64, users: &dyn UserDirectory) -> Vec<Outbound> {
        self.session.models.on_user_joined(&member.user_id);
        self.note_turn(now_ms);
        let slot = Slot { member, visible: BTreeSet::new() };
        let cid = slot.member.client_id.clone();
        self.members.insert(cid.clone(), slot);
        vec![self.resync(&cid, &derived_id(connect_event_id, &format!("state:{cid}")), SYSTEM_SENDER, now_ms, users)]
    }

    pub fn leave(&mut self, client_id: &str) -> Option<Member> {
        self.members.remove(client_id).map(|s| s.member)
    }

    fn rejection(&self, rejected: &EventEnvelope, verdict: Verdict, client_id: &str, now_ms: u64) -> Outbound {
        Outbound {
            client_id: client_id.to_string(),
            event: EventEnvelope {
                event_id: derived_id(&rejected.event_id, "rejected"),
                sender_id: SYSTEM_SENDER.into(),
                session_id: self.session.session_id.clone(),
                ts: now_ms,
                payload: Payload::EventRejected {
                    rejected_event_id: rejected.event_id.clone(),
                    reason: verdict.reason,
                    rule_id: verdict.rule_id,
                },
            },
        }
    }

    /// Runs one event from `client_id` through the pipeline.
    pub fn dispatch(&mut self, client_id: &str, mut e: EventEnvelope, now_ms: u64, users: &dyn UserDirectory) -> Vec<Outbound> {
        let Some(slot) = self.members.get(client_id) else {
            return Vec::new();
        };
        let member = slot.member.clone();
        e.ts = now_ms;
        if e.sender_id != member.user_id {
            let v = Verdict::reject("protocol.sender", format!("sender `{}` does not match the connection's user", e.sender_id));
            return vec![self.rejection(&e, v, client_id, now_ms)];
        }
        if e.session_id != self.session.session_id {
            let v = Verdict::reject("protocol.session", format!("event addressed to session `{}`", e.session_id));
            return vec![self.rejection(&e, v, client_id, now_ms)];
        }
        self.in_pipeline += 1;
        self.max_in_pipeline = self.max_in_pipeline.max(self.in_pipeline);
        let out = self.run(&member, e, now_ms, users);
        self.in_pipeline -= 1;
        out
    }

    fn run(&mut self, member: &Member, e: EventEnvelope, now_ms: u64, users: &dyn UserDirectory) -> Vec<Outbound> {
        let (e, new_state) = match self.canonicalize(member, e.clone()) {
            Ok(x) => x,
            Err(v) => return vec![self.rejection(&e, v, &member.client_id, now_ms)],
        };
        let verdict = self.session.models.validate(&e, Context { status: &self.session.status, users });
        if !verdict.accepted {
            return vec![self.rejection(&e, verdict, &member.client_id, now_ms)];
        }
        if let Err(v) = self.precheck(&e) {
            return vec![self.rejection(&e, v, &member.client_id, now_ms)];
        }
        let e = match self.resolve_conflict(e, now_ms, users) {
            Ok(e) => e,
            Err((rejected, v)) => return vec![self.rejection(&rejected, v, &member.client_id, now_ms)],
        };
        let before: BTreeMap<String, BTreeSet<NodeId>> =
            self.members.iter().map(|(c, s)| (c.clone(), s.visible.clone())).collect();
        let (e, removed) = match self.apply(e, new_state, users) {
            Ok(x) => x,
            Err((rejected, v)) => return vec![self.rejection(&rejected, v, &member.client_id, now_ms)],
        };
        self.order.push(e.event_id.clone());
        self.note_turn(now_ms);
        self.broadcast(&e, &before, &removed, users)
    }

    fn canonicalize(&self, member: &Member, mut e: EventEnvelope) -> Result<(EventEnvelope, Option<SessionStatus>), Verdict> {
        let mut new_state = None;
        e.payload = match &e.payload {
            Payload::RawInteraction(raw) => normalize_interaction(raw, member.profile, member.convention, &self.gestures)
                .map_err(|err| Verdict::reject("interp.gesture", err.to_string()))?,
            Payload::SetSessionState { format, state_base64 } => {
                if member.method == ConnectionMethod::Udp {
                    return Err(Verdict::reject("protocol.udp_policy", "full session state cannot travel over UDP"));
                }
                if *format != StateFormat::CustomJson {
                    return Err(Verdict::reject("protocol.unsupported_format", format!("cannot import {format:?} state")));
                }
                let status = sara_core::protocol::decode_session_state(state_base64, *format)
                    .map_err(|err| Verdict::reject("protocol.malformed_state", err.to_string()))?;
                let status = convert_status(&status, member.convention);
                let payload = Payload::SetSessionState {
                    format: StateFormat::CustomJson,
                    state_base64: encode_session_state(&status, StateFormat::CustomJson).expect("CUSTOM_JSON always encodes"),
                };
                new_state = Some(status);
                payload
            }
            Payload::NewUserConnection { .. }
            | Payload::ConnectToSession { .. }
            | Payload::Ack { .. }
            | Payload::EventRejected { .. } => {
                return Err(Verdict::reject("protocol.unexpected", format!("`{}` is not a session event", e.type_tag())))
            }
            other => convert_payload(other, member.convention),
        };
        Ok((e, new_state))
    }

    /// Structural checks for events that must not reach the conflict stage when they cannot apply.
    fn precheck(&self, e: &EventEnvelope) -> Result<(), Verdict> {
        let status = &self.session.status;
        match &e.payload {
            Payload::Click { node_id, .. } | Payload::Drag { node_id, .. } if !status.contains(node_id) => {
                Err(scene_reject(SceneError::UnknownNode(node_id.clone())))
            }
            Payload::IncrementalUpdate { node_id, property_path, new_value } => {
                status.check_property_update(node_id, property_path, new_value).map_err(scene_reject)
            }
            _ => Ok(()),
        }
    }

    #[allow(clippy::result_large_err)]
    fn resolve_conflict(&mut self, e: EventEnvelope, now_ms: u64, users: &dyn UserDirectory) -> Result<EventEnvelope, (EventEnvelope, Verdict)> {
        if !matches!(e.payload, Payload::IncrementalUpdate { .. }) {
            return Ok(e);
        }
        self.log.prune(now_ms, self.window_ms);
        let Some(c) = conflict::detect(&e, &self.log, self.window_ms) else {
            return Ok(e);
        };
        let res = conflict::resolve(&c, self.strategy, &self.session.models, users)
            .or_else(|_| conflict::resolve(&c, ConflictStrategy::LastWriterWins, &self.session.models, users))
            .expect("last-writer-wins never fails");
        match (res.apply, res.rejected) {
            (_, Some(rejected)) => Err(rejected),
            (Some(apply), None) => Ok(apply),
            (None, None) => unreachable!("a resolution applies or rejects"),
        }
    }

    #[allow(clippy::type_complexity, clippy::result_large_err)]
    fn apply(
        &mut self,
        mut e: EventEnvelope,
        new_state: Option<SessionStatus>,
        users: &dyn UserDirectory,
    ) -> Result<(EventEnvelope, Vec<NodeId>), (EventEnvelope, Verdict)> {
        let fail = |e: &EventEnvelope, v: Verdict| (e.clone(), v);
        let mut removed = Vec::new();
        let sender = e.sender_id.clone();
        match &mut e.payload {
            Payload::Click { .. } | Payload::Drag { .. } => {}
            Payload::IncrementalUpdate { node_id, property_path, new_value } => {
                let r = self.session.status.apply_property_update(node_id, property_path, new_value);
                r.map_err(|err| fail(&e, scene_reject(err)))?;
                self.log.record(&e);
            }
            Payload::AddNode { parent_id, node } => {
                if node.id.is_empty() {
                    node.id = derived_id(&e.event_id, "node");
                }
                let (parent, spec) = (parent_id.clone(), node.clone());
                let id = self.session.status.attach_node(&parent, spec.into_node()).map_err(|err| fail(&e, scene_reject(err)))?;
                self.session.models.on_node_added(&sender, &id, &parent, users);
            }
            Payload::RemoveNode { node_id } => {
                let gone = self.session.status.detach_node(node_id).map_err(|err| fail(&e, scene_reject(err)))?;
                removed = gone.into_iter().map(|n| n.id).collect();
                self.session.models.on_nodes_removed(&removed);
            }
            Payload::SetSessionState { .. } => {
                let status = new_state.expect("decoded during canonicalization");
                let old = self.session.status.node_ids();
                self.session.status.replace_tree(status);
                self.session.models.on_state_replaced(&sender, &old, &self.session.status, users);
            }
            p if p.is_model_control() => {
                let ctx = Context { status: &self.session.status, users };
                let payload = p.clone();
                self.session.models.apply_model_event(&payload, &sender, ctx).map_err(|v| fail(&e, v))?;
            }
            _ => unreachable!("filtered during canonicalization"),
        }
        Ok((e, removed))
    }

    fn for_member(&self, member: &Member, e: &EventEnvelope) -> EventEnvelope {
        EventEnvelope { payload: convert_payload(&e.payload, member.convention), ..e.clone() }
    }

    /// Full filtered state for one member, or the UDP notice standing in for it.
    fn resync(&mut self, client_id: &str, event_id: &str, sender: &str, now_ms: u64, users: &dyn UserDirectory) -> Outbound {
        let slot = self.members.get_mut(client_id).expect("member present");
        let visible = self.session.models.visible_nodes(&slot.member.user_id, &self.session.status, users);
        let filtered = convert_status(&self.session.status.filtered(&visible), slot.member.convention);
        slot.visible = visible;
        let member = slot.member.clone();
        let payload = if member.method == ConnectionMethod::Udp {
            Payload::EventRejected {
                rejected_event_id: event_id.to_string(),
                reason: "full session state is not sent over UDP; use a stream transport to resync".into(),
                rule_id: "protocol.udp_policy".into(),
            }
        } else {
            Payload::SetSessionState {
                format: member.format,
                state_base64: encode_session_state(&filtered, member.format).unwrap_or_else(|_| {
                    encode_session_state(&filtered, StateFormat::CustomJson).expect("CUSTOM_JSON always encodes")
                }),
            }
        };
        Outbound {
            client_id: client_id.to_string(),
            event: EventEnvelope {
                event_id: event_id.to_string(),
                sender_id: sender.to_string(),
                session_id: self.session.session_id.clone(),
                ts: now_ms,
                payload,
            },
        }
    }

    fn broadcast(
        &mut self,
        e: &EventEnvelope,
        before: &BTreeMap<String, BTreeSet<NodeId>>,
        removed: &[NodeId],
        users: &dyn UserDirectory,
    ) -> Vec<Outbound> {
        let mut out = Vec::new();
        let cids: Vec<String> = self.members.keys().cloned().collect();
        for cid in cids {
            let slot = &self.members[&cid];
            let member = slot.member.clone();
            let old = before.get(&cid).cloned().unwrap_or_default();
            let now = self.session.models.visible_nodes(&member.user_id, &self.session.status, users);
            let mut expected = old.clone();
            match &e.payload {
                Payload::AddNode { node, .. } if now.contains(&node.id) => {
                    expected.insert(node.id.clone());
                }
                Payload::RemoveNode { .. } => {
                    for r in removed {
                        expected.remove(r);
                    }
                }
                _ => {}
            }
            if matches!(e.payload, Payload::SetSessionState { .. }) {
                out.push(self.resync(&cid, &e.event_id, &e.sender_id, e.ts, users));
                continue;
            }
            if now != expected {
                // A model or structural change moved this member's horizon: send the event
                // only if it is about nodes it could see before, then the refreshed state.
                if e.payload.is_model_control() && referenced_nodes(&e.payload).iter().all(|n| old.contains(*n)) {
                    out.push(Outbound { client_id: cid.clone(), event: self.for_member(&member, e) });
                }
                let id = derived_id(&e.event_id, &format!("resync:{cid}"));
                out.push(self.resync(&cid, &id, SYSTEM_SENDER, e.ts, users));
                continue;
            }
            let relevant = match &e.payload {
                Payload::RemoveNode { node_id } => old.contains(node_id),
                p => referenced_nodes(p).iter().all(|n| now.contains(*n)),
            };
            self.members.get_mut(&cid).expect("member present").visible = now;
            let mutates = matches!(e.payload, Payload::AddNode { .. } | Payload::RemoveNode { .. } | Payload::IncrementalUpdate { .. });
            if relevant && mutates && member.format == StateFormat::Obj {
                // OBJ text has no node ids to patch, so geometry clients get the whole export again
                let id = derived_id(&e.event_id, &format!("resync:{cid}"));
                out.push(self.resync(&cid, &id, SYSTEM_SENDER, e.ts, users));
            } else if relevant {
                let ev = self.for_member(&member, e);
                if member.method == ConnectionMethod::Udp && check_udp(&ev, encode_event(&ev).len()).is_err() {
                    let id = derived_id(&e.event_id, &format!("resync:{cid}"));
                    out.push(self.resync(&cid, &id, SYSTEM_SENDER, e.ts, users));
                } else {
                    out.push(Outbound { client_id: cid.clone(), event: ev });
                }
            }
        }
        out
    }

    fn note_turn(&mut self, now_ms: u64) {
        let holder = self.session.models.turn().and_then(|t| t.holder.clone());
        match (&self.turn_since, holder) {
            (Some((h, _)), Some(cur)) if *h == cur => {}
            (_, Some(cur)) => self.turn_since = Some((cur, now_ms)),
            (_, None) => self.turn_since = None,
        }
    }

    /// When the token has sat with one holder longer than `timeout_ms`, passes it on
    /// in the holder's name.
    pub fn expire_turn(&mut self, now_ms: u64, timeout_ms: u64, users: &dyn UserDirectory) -> Vec<Outbound> {
        let Some((holder, since)) = self.turn_since.clone() else { return Vec::new() };
        if now_ms.saturating_sub(since) < timeout_ms {
            return Vec::new();
        }
        let e = EventEnvelope {
            event_id: derived_id(&format!("{holder}@{since}"), "turn_timeout"),
            sender_id: holder,
            session_id: self.session.session_id.clone(),
            ts: now_ms,
            payload: Payload::PassTurn { to_user: None },
        };
        let before: BTreeMap<String, BTreeSet<NodeId>> =
            self.members.iter().map(|(c, s)| (c.clone(), s.visible.clone())).collect();
        match self.apply(e, None, users) {
            Ok((e, removed)) => {
                self.order.push(e.event_id.clone());
                self.note_turn(now_ms);
                self.broadcast(&e, &before, &removed, users)
            }
            Err(_) => Vec::new(),
        }
    }

    /// Visible node ids recorded for a member at its last frame.
    pub fn visible_for(&self, client_id: &str) -> Option<&BTreeSet<NodeId>> {
        self.members.get(client_id).map(|s| &s.visible)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sara_core::models::{LayerState, TurnState};
    use sara_core::protocol::{decode_session_state, NodeSpec};
    use sara_core::users::NoDirectory;
    use sara_core::ROOT_ID;
    use serde_json::json;

    fn member(cid: &str, user: &str, convention: Convention) -> Member {
        Member {
            client_id: cid.into(),
            user_id: user.into(),
            method: ConnectionMethod::Tcp,
            format: StateFormat::CustomJson,
            convention,
            profile: DeviceProfile::DesktopPointer,
        }
    }

    fn worker(models: Vec<CollaborationModel>, strategy: ConflictStrategy) -> SessionWorker {
        let settings = SessionSettings { models, conflict_strategy: strategy, ..Default::default() };
        SessionWorker::new("s", &settings, 100, Arc::new(GestureTable::default()))
    }

    fn ev(sender: &str, id: &str, payload: Payload) -> EventEnvelope {
        EventEnvelope::new(sender, "s", payload).with_id(id)
    }

    fn add(sender: &str, id: &str, node: &str, parent: &str) -> EventEnvelope {
        let spec = NodeSpec::from_node(&sara_core::Node::new(node));
        ev(sender, id, Payload::AddNode { parent_id: parent.into(), node: spec })
    }

    fn update(sender: &str, id: &str, node: &str, value: Value) -> EventEnvelope {
        ev(sender, id, Payload::IncrementalUpdate { node_id: node.into(), property_path: "transform.position".into(), new_value: value })
    }

    fn state_of(out: &Outbound) -> SessionStatus {
        match &out.event.payload {
            Payload::SetSessionState { format, state_base64 } => decode_session_state(state_base64, *format).unwrap(),
            p => panic!("expected state, got {}", p.type_tag()),
        }
    }

    #[test]
    fn join_sends_root_only_state() {
        let mut w = worker(vec![], ConflictStrategy::default());
        let out = w.join(member("c1", "u1", Convention::RightHanded), "hello", 0, &NoDirectory);
        assert_eq!(out.len(), 1);
        let st = state_of(&out[0]);
        assert_eq!(st.len(), 1);
        assert!(st.contains(ROOT_ID));
    }

    #[test]
    fn update_is_echoed_to_everyone() {
        let mut w = worker(vec![], ConflictStrategy::default());
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.join(member("c2", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        let out = w.dispatch("c1", add("u1", "e1", "n1", ROOT_ID), 5, &NoDirectory);
        assert_eq!(out.len(), 2);
        let out = w.dispatch("c1", update("u1", "e2", "n1", json!([1.0, 0.0, 0.0])), 6, &NoDirectory);
        assert_eq!(out.iter().map(|o| o.client_id.as_str()).collect::<Vec<_>>(), ["c1", "c2"]);
        assert!(out.iter().all(|o| o.event.ts == 6 && o.event.event_id == "e2"));
        assert_eq!(w.session().status.node("n1").unwrap().transform.position, [1.0, 0.0, 0.0]);
        assert_eq!(w.broadcast_order(), ["e1", "e2"]);
        assert_eq!(w.revision(), 2);
        assert_eq!(w.max_in_pipeline(), 1);
    }

    #[test]
    fn off_turn_click_is_rejected_to_sender_only() {
        let turn = CollaborationModel::Turn(TurnState::default());
        let mut w = worker(vec![turn], ConflictStrategy::default());
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.join(member("c2", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        w.dispatch("c1", add("u1", "e1", "n1", ROOT_ID), 1, &NoDirectory);
        let click = ev("u2", "e2", Payload::Click { node_id: "n1".into(), world_point: None, tool: None });
        let out = w.dispatch("c2", click, 2, &NoDirectory);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].client_id, "c2");
        match &out[0].event.payload {
            Payload::EventRejected { rejected_event_id, rule_id, .. } => {
                assert_eq!(rejected_event_id, "e2");
                assert_eq!(rule_id, "turn.holder");
            }
            p => panic!("{p:?}"),
        }
        assert_eq!(w.broadcast_order(), ["e1"]);
    }

    #[test]
    fn conventions_are_converted_both_ways() {
        let mut w = worker(vec![], ConflictStrategy::default());
        w.join(member("lh", "u1", Convention::LeftHanded), "j1", 0, &NoDirectory);
        w.join(member("rh", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        w.dispatch("rh", add("u2", "e1", "n1", ROOT_ID), 1, &NoDirectory);
        let out = w.dispatch("lh", update("u1", "e2", "n1", json!([1.0, 2.0, 3.0])), 2, &NoDirectory);
        assert_eq!(w.session().status.node("n1").unwrap().transform.position, [1.0, 2.0, -3.0]);
        let value = |cid: &str| match &out.iter().find(|o| o.client_id == cid).unwrap().event.payload {
            Payload::IncrementalUpdate { new_value, .. } => new_value.clone(),
            p => panic!("{p:?}"),
        };
        assert_eq!(value("lh"), json!([1.0, 2.0, 3.0]));
        assert_eq!(value("rh"), json!([1.0, 2.0, -3.0]));
    }

    #[test]
    fn layers_hide_nodes_and_grants_resync() {
        let layer = CollaborationModel::Layer(LayerState {
            layers: [("L1".to_string(), BTreeSet::new()), ("L2".to_string(), BTreeSet::new())].into(),
            access: [("u1".to_string(), ["L1".to_string(), "L2".to_string()].into()), ("u2".to_string(), ["L1".to_string()].into())].into(),
        });
        let mut w = worker(vec![layer], ConflictStrategy::default());
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.join(member("c2", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        // nodes added under the root join no layer, so nobody but the root sees them yet
        let out = w.dispatch("c1", add("u1", "e1", "secret", ROOT_ID), 1, &NoDirectory);
        assert!(out.is_empty());
        if let CollaborationModel::Layer(l) = &mut w.session.models.models[0] {
            l.layers.get_mut("L2").unwrap().insert("secret".into());
        }
        let out = w.dispatch("c1", update("u1", "e2", "secret", json!([1.0, 1.0, 1.0])), 2, &NoDirectory);
        assert!(out.iter().all(|o| o.client_id == "c1"), "u2 must not hear about `secret`");
        assert!(!encode_event(&out[0].event).is_empty());
        let grant = ev("u1", "e3", Payload::GrantLayerAccess { layer_id: "L2".into(), user_id: "u2".into() });
        let out = w.dispatch("c1", grant, 3, &NoDirectory);
        let to_c2: Vec<_> = out.iter().filter(|o| o.client_id == "c2").collect();
        assert_eq!(to_c2.len(), 2);
        assert!(state_of(to_c2[1]).contains("secret"));
    }

    #[test]
    fn merge_mean_through_the_pipeline() {
        let mut w = worker(vec![], ConflictStrategy::MergeMean);
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.join(member("c2", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        w.dispatch("c1", add("u1", "e0", "n1", ROOT_ID), 0, &NoDirectory);
        w.dispatch("c1", update("u1", "a", "n1", json!([1.0, 0.0, 0.0])), 10, &NoDirectory);
        let out = w.dispatch("c2", update("u2", "b", "n1", json!([3.0, 0.0, 0.0])), 50, &NoDirectory);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].event.sender_id, SYSTEM_SENDER);
        assert_eq!(w.session().status.node("n1").unwrap().transform.position, [2.0, 0.0, 0.0]);
        // outside the window nothing merges
        w.dispatch("c1", update("u1", "c", "n1", json!([5.0, 0.0, 0.0])), 500, &NoDirectory);
        assert_eq!(w.session().status.node("n1").unwrap().transform.position, [5.0, 0.0, 0.0]);
    }

    #[test]
    fn reject_second_keeps_first() {
        let mut w = worker(vec![], ConflictStrategy::RejectSecond);
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.join(member("c2", "u2", Convention::RightHanded), "j2", 0, &NoDirectory);
        w.dispatch("c1", add("u1", "e0", "n1", ROOT_ID), 0, &NoDirectory);
        w.dispatch("c1", update("u1", "a", "n1", json!([1.0, 0.0, 0.0])), 10, &NoDirectory);
        let out = w.dispatch("c2", update("u2", "b", "n1", json!([3.0, 0.0, 0.0])), 50, &NoDirectory);
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0].event.payload, Payload::EventRejected { .. }));
        assert_eq!(w.session().status.node("n1").unwrap().transform.position, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_updates_are_rejected_with_scene_rules() {
        let mut w = worker(vec![], ConflictStrategy::default());
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        let bad_path = ev("u1", "x", Payload::IncrementalUpdate { node_id: ROOT_ID.into(), property_path: "colour".into(), new_value: json!(1) });
        let rule = |out: Vec<Outbound>| match &out[0].event.payload {
            Payload::EventRejected { rule_id, .. } => rule_id.clone(),
            p => panic!("{p:?}"),
        };
        assert_eq!(rule(w.dispatch("c1", bad_path, 1, &NoDirectory)), "scene.property_path");
        assert_eq!(rule(w.dispatch("c1", add("u1", "y", "n", "nowhere"), 1, &NoDirectory)), "scene.unknown_parent");
        let rm_root = ev("u1", "z", Payload::RemoveNode { node_id: ROOT_ID.into() });
        assert_eq!(rule(w.dispatch("c1", rm_root, 1, &NoDirectory)), "scene.root");
        let spoof = ev("u9", "w", Payload::RemoveNode { node_id: ROOT_ID.into() });
        assert_eq!(rule(w.dispatch("c1", spoof, 1, &NoDirectory)), "protocol.sender");
        assert_eq!(w.revision(), 0);
    }

    #[test]
    fn udp_members_get_a_notice_instead_of_state() {
        let mut w = worker(vec![], ConflictStrategy::default());
        let mut m = member("c1", "u1", Convention::RightHanded);
        m.method = ConnectionMethod::Udp;
        let out = w.join(m, "j1", 0, &NoDirectory);
        match &out[0].event.payload {
            Payload::EventRejected { rule_id, .. } => assert_eq!(rule_id, "protocol.udp_policy"),
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn snapshot_round_trip_keeps_revision_and_hash() {
        let mut w = worker(vec![CollaborationModel::Turn(TurnState::default())], ConflictStrategy::MergeMean);
        w.join(member("c1", "u1", Convention::RightHanded), "j1", 0, &NoDirectory);
        w.dispatch("c1", add("u1", "e1", "n1", ROOT_ID), 1, &NoDirectory);
        w.dispatch("c1", update("u1", "e2", "n1", json!([0.5, 0.0, 0.0])), 2, &NoDirectory);
        let restored = SessionWorker::restore(&w.snapshot(), Arc::new(GestureTable::default())).unwrap();
        assert_eq!(restored.revision(), w.revision());
        assert_eq!(restored.state_hash(), w.state_hash());
        assert_eq!(restored.broadcast_order(), w.broadcast_order());
        assert_eq!(restored.session().models, w.session().models);
        assert_eq!(restored.conflict_settings(), (100, ConflictStrategy::MergeMean));
    }

    #[test]
    fn provider_state_reaches_obj_members_as_geometry() {
        let mut w = worker(vec![], ConflictStrategy::default());
        w.join(member("p", "prov", Convention::RightHanded), "j1", 0, &NoDirectory);
        let mut obj = member("o", "viewer", Convention::RightHanded);
        obj.format = StateFormat::Obj;
        w.join(obj, "j2", 0, &NoDirectory);
        let mut status = SessionStatus::new();
        let cube = sara_core::Node::new("cube").with_mesh(sara_core::scene::Mesh::unit_cube());
        status.attach_node(ROOT_ID, cube).unwrap();
        let payload = Payload::SetSessionState {
            format: StateFormat::CustomJson,
            state_base64: encode_session_state(&status, StateFormat::CustomJson).unwrap(),
        };
        let out = w.dispatch("p", ev("prov", "s1", payload), 1, &NoDirectory);
        let o = out.iter().find(|o| o.client_id == "o").unwrap();
        match &o.event.payload {
            Payload::SetSessionState { format, state_base64 } => {
                assert_eq!(*format, StateFormat::Obj);
                let text = sara_core::protocol::decode_obj_text(state_base64).unwrap();
                assert!(text.contains("o cube"));
            }
            p => panic!("{p:?}"),
        }
    }
}
