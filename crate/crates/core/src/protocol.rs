//! Event envelopes, the JSON wire codec and session-state encodings.
//!
//! Every event travels as one single-line JSON object with the fields
//! `event_id, sender_id, session_id, type, ts, payload`, in that order. The
//! `type` tag is a dotted lowercase string and alone determines the payload
//! shape.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::scene::{Mesh, Node, NodeId, SessionStatus, Transform, Vec3};

/// Largest payload a single UDP datagram may carry.
pub const UDP_MAX_DATAGRAM: usize = 65_507;
pub const MQTT_QOS: u8 = 1;
/// Sender id used for events the server synthesizes (merges, rejections, acks).
pub const SYSTEM_SENDER: &str = "system";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("payload of `{event_type}` does not match its shape: {detail}")]
    PayloadShapeMismatch { event_type: String, detail: String },
    #[error("unsupported state format {0:?}")]
    UnsupportedFormat(StateFormat),
    #[error("malformed session state: {0}")]
    MalformedState(String),
    #[error("UDP payload policy: {0}")]
    UdpPayloadPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConnectionMethod {
    Tcp,
    Udp,
    Websocket,
    Mqtt,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Convention {
    #[default]
    RightHanded,
    LeftHanded,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceProfile {
    #[default]
    HandheldTouch,
    HmdGesture,
    DesktopPointer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StateFormat {
    #[default]
    CustomJson,
    Obj,
    Collada,
}

/// Device-specific gesture before interpretation into a canonical interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub gesture: String,
    pub node_id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
}

/// A node as carried by `information.add_node`: no links, just content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(default)]
    pub id: NodeId,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub transform: Transform,
    #[serde(default)]
    pub mesh: Option<Mesh>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl NodeSpec {
    pub fn from_node(node: &Node) -> Self {
        Self {
            id: node.id.clone(),
            name: node.name.clone(),
            transform: node.transform.clone(),
            mesh: node.mesh.clone(),
            attributes: node.attributes.clone(),
        }
    }

    pub fn into_node(self) -> Node {
        Node {
            id: self.id,
            name: self.name,
            parent_id: None,
            children: Vec::new(),
            transform: self.transform,
            mesh: self.mesh,
            attributes: self.attributes,
        }
    }
}

/// Every event payload, keyed on the wire by its dotted type tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum Payload {
    #[serde(rename = "interaction.click")]
    Click {
        node_id: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world_point: Option<Vec3>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool: Option<String>,
    },
    #[serde(rename = "interaction.drag")]
    Drag { node_id: NodeId, delta: Vec3 },
    #[serde(rename = "interaction.raw")]
    RawInteraction(RawInteraction),

    #[serde(rename = "information.new_user_connection")]
    NewUserConnection {
        user_id: String,
        connection_method: ConnectionMethod,
        convention: Convention,
        device_profile: DeviceProfile,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
        /// Client-chosen id; only honored for MQTT, where it names the inbox topic.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_id: Option<String>,
    },
    #[serde(rename = "information.ack")]
    Ack { client_id: String },
    #[serde(rename = "information.connect_to_session")]
    ConnectToSession { session_id: String, user_id: String, reception_format: StateFormat },
    #[serde(rename = "information.set_session_state")]
    SetSessionState { format: StateFormat, state_base64: String },
    #[serde(rename = "information.incremental_update")]
    IncrementalUpdate { node_id: NodeId, property_path: String, new_value: Value },
    #[serde(rename = "information.add_node")]
    AddNode { parent_id: NodeId, node: NodeSpec },
    #[serde(rename = "information.remove_node")]
    RemoveNode { node_id: NodeId },
    #[serde(rename = "information.event_rejected")]
    EventRejected {
        rejected_event_id: String,
        reason: String,
        #[serde(default)]
        rule_id: String,
    },

    #[serde(rename = "model.request_turn")]
    RequestTurn {},
    #[serde(rename = "model.pass_turn")]
    PassTurn {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to_user: Option<String>,
    },
    #[serde(rename = "model.transfer_ownership")]
    TransferOwnership { node_id: NodeId, to_user: String },
    #[serde(rename = "model.grant_layer_access")]
    GrantLayerAccess { layer_id: String, user_id: String },
    #[serde(rename = "model.revoke_layer_access")]
    RevokeLayerAccess { layer_id: String, user_id: String },
    #[serde(rename = "model.set_subordinate_permissions")]
    SetSubordinatePermissions { user_id: String, node_ids: Vec<NodeId> },
}

pub const EVENT_TYPES: &[&str] = &[
    "interaction.click",
    "interaction.drag",
    "interaction.raw",
    "information.new_user_connection",
    "information.ack",
    "information.connect_to_session",
    "information.set_session_state",
    "information.incremental_update",
    "information.add_node",
    "information.remove_node",
    "information.event_rejected",
    "model.request_turn",
    "model.pass_turn",
    "model.transfer_ownership",
    "model.grant_layer_access",
    "model.revoke_layer_access",
    "model.set_subordinate_permissions",
];

impl Payload {
    pub fn type_tag(&self) -> &'static str {
        match self {
            Self::Click { .. } => "interaction.click",
            Self::Drag { .. } => "interaction.drag",
            Self::RawInteraction(_) => "interaction.raw",
            Self::NewUserConnection { .. } => "information.new_user_connection",
            Self::Ack { .. } => "information.ack",
            Self::ConnectToSession { .. } => "information.connect_to_session",
            Self::SetSessionState { .. } => "information.set_session_state",
            Self::IncrementalUpdate { .. } => "information.incremental_update",
            Self::AddNode { .. } => "information.add_node",
            Self::RemoveNode { .. } => "information.remove_node",
            Self::EventRejected { .. } => "information.event_rejected",
            Self::RequestTurn {} => "model.request_turn",
            Self::PassTurn { .. } => "model.pass_turn",
            Self::TransferOwnership { .. } => "model.transfer_ownership",
            Self::GrantLayerAccess { .. } => "model.grant_layer_access",
            Self::RevokeLayerAccess { .. } => "model.revoke_layer_access",
            Self::SetSubordinatePermissions { .. } => "model.set_subordinate_permissions",
        }
    }

    pub fn is_interaction(&self) -> bool {
        matches!(self, Self::Click { .. } | Self::Drag { .. } | Self::RawInteraction(_))
    }

    pub fn is_model_control(&self) -> bool {
        self.type_tag().starts_with("model.")
    }

    /// Events that mutate the scene tree.
    pub fn is_scene_mutation(&self) -> bool {
        matches!(
            self,
            Self::SetSessionState { .. } | Self::IncrementalUpdate { .. } | Self::AddNode { .. } | Self::RemoveNode { .. }
        )
    }

    /// Node addressed by an interaction or a node-scoped update.
    pub fn target_node(&self) -> Option<&str> {
        match self {
            Self::Click { node_id, .. }
            | Self::Drag { node_id, .. }
            | Self::IncrementalUpdate { node_id, .. }
            | Self::RemoveNode { node_id }
            | Self::TransferOwnership { node_id, .. } => Some(node_id),
            Self::RawInteraction(raw) => Some(&raw.node_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventEnvelope {
    pub event_id: String,
    pub sender_id: String,
    pub session_id: String,
    /// Server receipt time in milliseconds; 0 until the server stamps it.
    pub ts: u64,
    pub payload: Payload,
}

impl EventEnvelope {
    pub fn new(sender_id: impl Into<String>, session_id: impl Into<String>, payload: Payload) -> Self {
        Self {
            event_id: new_event_id(),
            sender_id: sender_id.into(),
            session_id: session_id.into(),
            ts: 0,
            payload,
        }
    }

    pub fn with_id(mut self, event_id: impl Into<String>) -> Self {
        self.event_id = event_id.into();
        self
    }

    pub fn type_tag(&self) -> &'static str {
        self.payload.type_tag()
    }
}

pub fn new_event_id() -> String {
    Uuid::new_v4().to_string()
}

/// Deterministic UUID derived from an existing id, for server-synthesized events and nodes.
pub fn derived_id(base: &str, purpose: &str) -> String {
    Uuid::new_v5(&Uuid::NAMESPACE_OID, format!("{base}/{purpose}").as_bytes()).to_string()
}

#[derive(Serialize)]
struct WireOut<'a> {
    event_id: &'a str,
    sender_id: &'a str,
    session_id: &'a str,
    #[serde(rename = "type")]
    kind: &'a str,
    ts: u64,
    payload: Value,
}

#[derive(Deserialize)]
struct WireIn {
    event_id: String,
    sender_id: String,
    session_id: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    ts: u64,
    #[serde(default)]
    payload: Value,
}

/// Single-line JSON text of an event.
pub fn encode_event(e: &EventEnvelope) -> String {
    let mut tagged = serde_json::to_value(&e.payload).expect("payload serialization is infallible");
    let payload = tagged.get_mut("payload").map(Value::take).unwrap_or(Value::Object(Default::default()));
    let out = WireOut {
        event_id: &e.event_id,
        sender_id: &e.sender_id,
        session_id: &e.session_id,
        kind: e.payload.type_tag(),
        ts: e.ts,
        payload,
    };
    serde_json::to_string(&out).expect("envelope serialization is infallible")
}

pub fn decode_event(text: &str) -> Result<EventEnvelope, ProtocolError> {
    let wire: WireIn = serde_json::from_str(text).map_err(|e| ProtocolError::MalformedJson(e.to_string()))?;
    if !EVENT_TYPES.contains(&wire.kind.as_str()) {
        return Err(ProtocolError::UnknownEventType(wire.kind));
    }
    let payload = if wire.payload.is_null() { Value::Object(Default::default()) } else { wire.payload };
    let tagged = serde_json::json!({ "type": wire.kind, "payload": payload });
    let payload: Payload = serde_json::from_value(tagged).map_err(|e| ProtocolError::PayloadShapeMismatch {
        event_type: wire.kind.clone(),
        detail: e.to_string(),
    })?;
    validate_payload(&payload).map_err(|detail| ProtocolError::PayloadShapeMismatch {
        event_type: wire.kind.clone(),
        detail,
    })?;
    Ok(EventEnvelope {
        event_id: wire.event_id,
        sender_id: wire.sender_id,
        session_id: wire.session_id,
        ts: wire.ts,
        payload,
    })
}

fn validate_payload(p: &Payload) -> Result<(), String> {
    let non_empty = |field: &str, v: &str| {
        if v.is_empty() {
            Err(format!("field `{field}` must not be empty"))
        } else {
            Ok(())
        }
    };
    match p {
        Payload::Click { node_id, .. } | Payload::Drag { node_id, .. } => non_empty("node_id", node_id),
        Payload::RawInteraction(raw) => non_empty("node_id", &raw.node_id),
        Payload::SetSessionState { state_base64, .. } => BASE64
            .decode(state_base64)
            .map(|_| ())
            .map_err(|e| format!("field `state_base64` is not valid base64: {e}")),
        Payload::TransferOwnership { node_id, to_user } => {
            non_empty("node_id", node_id)?;
            non_empty("to_user", to_user)
        }
        Payload::GrantLayerAccess { layer_id, user_id } | Payload::RevokeLayerAccess { layer_id, user_id } => {
            non_empty("layer_id", layer_id)?;
            non_empty("user_id", user_id)
        }
        Payload::SetSubordinatePermissions { user_id, node_ids } => {
            non_empty("user_id", user_id)?;
            node_ids.iter().try_for_each(|n| non_empty("node_ids", n))
        }
        _ => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct TreeNode {
    id: NodeId,
    name: String,
    transform: Transform,
    #[serde(default)]
    mesh: Option<Mesh>,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    #[serde(default)]
    children: Vec<TreeNode>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    revision: u64,
    root: TreeNode,
}

fn tree_node(status: &SessionStatus, id: &str) -> TreeNode {
    let node = status.node(id).expect("child ids resolve in a consistent tree");
    TreeNode {
        id: node.id.clone(),
        name: node.name.clone(),
        transform: node.transform.clone(),
        mesh: node.mesh.clone(),
        attributes: node.attributes.clone(),
        children: node.children.iter().map(|c| tree_node(status, c)).collect(),
    }
}

fn tree_doc(status: &SessionStatus) -> TreeDoc {
    TreeDoc { revision: status.revision, root: tree_node(status, status.root_id()) }
}

/// Canonical JSON value of a status (used inside snapshot documents).
pub fn status_to_json(status: &SessionStatus) -> Value {
    serde_json::to_value(tree_doc(status)).expect("tree serialization is infallible")
}

/// Canonical CUSTOM_JSON text: fixed key order, children in stored order.
pub fn status_to_canonical_json(status: &SessionStatus) -> String {
    serde_json::to_string(&tree_doc(status)).expect("tree serialization is infallible")
}

/// SHA-256 of the canonical CUSTOM_JSON encoding, hex encoded.
pub fn state_hash(status: &SessionStatus) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(status_to_canonical_json(status).as_bytes()))
}

pub fn status_from_json(value: &Value) -> Result<SessionStatus, ProtocolError> {
    let doc = TreeDoc::deserialize(value).map_err(|e| ProtocolError::MalformedState(e.to_string()))?;
    status_from_doc(doc)
}

fn status_from_doc(doc: TreeDoc) -> Result<SessionStatus, ProtocolError> {
    let mut nodes = BTreeMap::new();
    let root_id = doc.root.id.clone();
    let mut stack = vec![(doc.root, None::<NodeId>)];
    while let Some((tn, parent)) = stack.pop() {
        let children: Vec<NodeId> = tn.children.iter().map(|c| c.id.clone()).collect();
        let id = tn.id.clone();
        for child in tn.children.into_iter().rev() {
            stack.push((child, Some(id.clone())));
        }
        let node = Node {
            id: tn.id,
            name: tn.name,
            parent_id: parent,
            children,
            transform: tn.transform,
            mesh: tn.mesh,
            attributes: tn.attributes,
        };
        if nodes.insert(id.clone(), node).is_some() {
            return Err(ProtocolError::MalformedState(format!("duplicate node id `{id}`")));
        }
    }
    SessionStatus::from_parts(root_id, nodes, doc.revision).map_err(ProtocolError::MalformedState)
}

fn fmt_num(x: f64) -> String {
    // adding 0.0 folds -0 into 0
    format!("{}", x + 0.0)
}

/// OBJ text with one `o <node_id>` group per mesh-bearing node, vertices in session space.
pub fn status_to_obj(status: &SessionStatus) -> String {
    let mut out = String::from("# sara session export\n");
    let mut world: BTreeMap<&str, Transform> = BTreeMap::new();
    let mut offset = 1usize;
    for node in status.preorder() {
        let parent_world = node.parent_id.as_deref().and_then(|p| world.get(p)).cloned().unwrap_or_default();
        let w = parent_world.compose(&node.transform);
        if let Some(mesh) = &node.mesh {
            let _ = writeln!(out, "o {}", node.id);
            for v in mesh.vertices.chunks_exact(3) {
                let p = w.apply_point([v[0], v[1], v[2]]);
                let _ = writeln!(out, "v {} {} {}", fmt_num(p[0]), fmt_num(p[1]), fmt_num(p[2]));
            }
            for n in mesh.normals.chunks_exact(3) {
                let r = crate::scene::quat_rotate(w.rotation, [n[0], n[1], n[2]]);
                let _ = writeln!(out, "vn {} {} {}", fmt_num(r[0]), fmt_num(r[1]), fmt_num(r[2]));
            }
            for f in mesh.triangles.chunks_exact(3) {
                let idx = |i: u32| i as usize + offset;
                let _ = writeln!(out, "f {} {} {}", idx(f[0]), idx(f[1]), idx(f[2]));
            }
            offset += mesh.vertex_count();
        }
        world.insert(&node.id, w);
    }
    out
}

pub fn encode_session_state(status: &SessionStatus, format: StateFormat) -> Result<String, ProtocolError> {
    match format {
        StateFormat::CustomJson => Ok(BASE64.encode(status_to_canonical_json(status))),
        StateFormat::Obj => Ok(BASE64.encode(status_to_obj(status))),
        StateFormat::Collada => Err(ProtocolError::UnsupportedFormat(format)),
    }
}

pub fn decode_session_state(b64: &str, format: StateFormat) -> Result<SessionStatus, ProtocolError> {
    if format != StateFormat::CustomJson {
        return Err(ProtocolError::UnsupportedFormat(format));
    }
    let bytes = BASE64.decode(b64).map_err(|e| ProtocolError::MalformedState(format!("base64: {e}")))?;
    let doc: TreeDoc = serde_json::from_slice(&bytes).map_err(|e| ProtocolError::MalformedState(e.to_string()))?;
    status_from_doc(doc)
}

/// Raw (decoded) bytes of an OBJ state payload.
pub fn decode_obj_text(b64: &str) -> Result<String, ProtocolError> {
    let bytes = BASE64.decode(b64).map_err(|e| ProtocolError::MalformedState(format!("base64: {e}")))?;
    String::from_utf8(bytes).map_err(|e| ProtocolError::MalformedState(e.to_string()))
}

/// Newline-delimited TCP frame. serde_json escapes control characters, so the
/// encoded text never contains a raw `\n` or `\r`.
pub fn tcp_frame(e: &EventEnvelope) -> String {
    let mut line = encode_event(e);
    line.push('\n');
    line
}

/// Checks an outbound or inbound datagram against the UDP policy.
pub fn check_udp(e: &EventEnvelope, encoded_len: usize) -> Result<(), ProtocolError> {
    if matches!(e.payload, Payload::SetSessionState { .. }) {
        return Err(ProtocolError::UdpPayloadPolicy("SetSessionState is not allowed over UDP".into()));
    }
    if encoded_len > UDP_MAX_DATAGRAM {
        return Err(ProtocolError::UdpPayloadPolicy(format!(
            "datagram of {encoded_len} bytes exceeds {UDP_MAX_DATAGRAM}"
        )));
    }
    Ok(())
}

pub fn mqtt_session_topic(session_id: &str) -> String {
    format!("sara/v1/session/{session_id}/events")
}

pub fn mqtt_inbox_topic(client_id: &str) -> String {
    format!("sara/v1/client/{client_id}/inbox")
}

/// Session id from a `sara/v1/session/{id}/events` topic.
pub fn parse_mqtt_session_topic(topic: &str) -> Option<&str> {
    topic.strip_prefix("sara/v1/session/")?.strip_suffix("/events").filter(|s| !s.is_empty() && !s.contains('/'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ROOT_ID;
    use serde_json::json;

    fn click() -> EventEnvelope {
        EventEnvelope::new("u1", "s1", Payload::Click { node_id: "n1".into(), world_point: None, tool: None })
    }

    #[test]
    fn click_has_type_tag_and_field_order() {
        let text = encode_event(&click());
        assert!(text.contains(r#""type":"interaction.click""#));
        let order = ["\"event_id\"", "\"sender_id\"", "\"session_id\"", "\"type\"", "\"ts\"", "\"payload\""];
        let positions: Vec<_> = order.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
        assert!(!text.contains('\n'));
    }

    #[test]
    fn incremental_update_embeds_array_verbatim() {
        let e = EventEnvelope::new(
            "u1",
            "s1",
            Payload::IncrementalUpdate {
                node_id: "n1".into(),
                property_path: "transform.position".into(),
                new_value: json!([1.0, 0.0, 0.0]),
            },
        );
        let text = encode_event(&e);
        assert!(text.contains(r#""new_value":[1.0,0.0,0.0]"#), "{text}");
        assert!(text.contains(r#""property_path":"transform.position""#));
        assert_eq!(decode_event(&text).unwrap(), e);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_event(""), Err(ProtocolError::MalformedJson(_))));
        let bogus = r#"{"event_id":"e","sender_id":"u","session_id":"s","type":"bogus","ts":0,"payload":{}}"#;
        assert_eq!(decode_event(bogus), Err(ProtocolError::UnknownEventType("bogus".into())));
        let missing = r#"{"event_id":"e","sender_id":"u","session_id":"s","type":"interaction.drag","ts":0,"payload":{"node_id":"n"}}"#;
        match decode_event(missing) {
            Err(ProtocolError::PayloadShapeMismatch { detail, .. }) => assert!(detail.contains("delta"), "{detail}"),
            other => panic!("{other:?}"),
        }
        let bad_b64 = r#"{"event_id":"e","sender_id":"u","session_id":"s","type":"information.set_session_state","ts":0,"payload":{"format":"CUSTOM_JSON","state_base64":"@@@"}}"#;
        assert!(matches!(decode_event(bad_b64), Err(ProtocolError::PayloadShapeMismatch { .. })));
    }

    #[test]
    fn decode_new_user_connection() {
        let text = r#"{"event_id":"e1","sender_id":"u1","session_id":"s1","type":"information.new_user_connection","ts":0,
            "payload":{"user_id":"u1","connection_method":"WEBSOCKET","convention":"LEFT_HANDED","device_profile":"HMD_GESTURE"}}"#;
        let e = decode_event(&text.replace('\n', "")).unwrap();
        match e.payload {
            Payload::NewUserConnection { connection_method, convention, .. } => {
                assert_eq!(connection_method, ConnectionMethod::Websocket);
                assert_eq!(convention, Convention::LeftHanded);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn request_turn_round_trips_with_empty_payload() {
        let e = EventEnvelope::new("u", "s", Payload::RequestTurn {});
        let text = encode_event(&e);
        assert!(text.contains(r#""payload":{}"#), "{text}");
        assert_eq!(decode_event(&text).unwrap(), e);
    }

    fn triangle_status() -> SessionStatus {
        let mut s = SessionStatus::new();
        let mesh = Mesh {
            vertices: vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            triangles: vec![0, 1, 2],
            normals: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        };
        s.attach_node(ROOT_ID, Node::new("tri").with_mesh(mesh)).unwrap();
        s
    }

    #[test]
    fn empty_session_custom_json() {
        let s = SessionStatus::new();
        let b64 = encode_session_state(&s, StateFormat::CustomJson).unwrap();
        let back = decode_session_state(&b64, StateFormat::CustomJson).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.len(), 1);
    }

    #[test]
    fn obj_export() {
        let s = triangle_status();
        let b64 = encode_session_state(&s, StateFormat::Obj).unwrap();
        let text = decode_obj_text(&b64).unwrap();
        assert!(text.contains("o tri\n"));
        assert!(text.contains("v 0 0 0\n"), "{text}");
        assert!(text.contains("v 1 0 0\n"));
        assert!(text.contains("f 1 2 3\n"));
        assert!(matches!(
            decode_session_state(&b64, StateFormat::Obj),
            Err(ProtocolError::UnsupportedFormat(StateFormat::Obj))
        ));
    }

    #[test]
    fn obj_applies_parent_transforms_and_offsets_indices() {
        let mut s = triangle_status();
        s.attach_node(ROOT_ID, Node::new("g").with_transform(Transform::at([10.0, 0.0, 0.0]))).unwrap();
        let mesh = s.node("tri").unwrap().mesh.clone().unwrap();
        s.attach_node("g", Node::new("tri2").with_mesh(mesh)).unwrap();
        let text = status_to_obj(&s);
        assert!(text.contains("o tri2\nv 10 0 0\nv 11 0 0\n"), "{text}");
        assert!(text.contains("f 4 5 6\n"));
    }

    #[test]
    fn collada_unsupported() {
        assert_eq!(
            encode_session_state(&SessionStatus::new(), StateFormat::Collada),
            Err(ProtocolError::UnsupportedFormat(StateFormat::Collada))
        );
    }

    #[test]
    fn malformed_state() {
        assert!(matches!(decode_session_state("!!", StateFormat::CustomJson), Err(ProtocolError::MalformedState(_))));
        let dup = json!({"revision": 0, "root": {"id": "root", "name": "r", "transform": Transform::default(),
            "children": [{"id": "a", "name": "a", "transform": Transform::default()},
                         {"id": "a", "name": "a", "transform": Transform::default()}]}});
        assert!(matches!(status_from_json(&dup), Err(ProtocolError::MalformedState(_))));
    }

    #[test]
    fn udp_policy() {
        let state = EventEnvelope::new(
            "u",
            "s",
            Payload::SetSessionState { format: StateFormat::CustomJson, state_base64: String::new() },
        );
        assert!(matches!(check_udp(&state, 10), Err(ProtocolError::UdpPayloadPolicy(_))));
        assert!(check_udp(&click(), UDP_MAX_DATAGRAM).is_ok());
        assert!(check_udp(&click(), UDP_MAX_DATAGRAM + 1).is_err());
    }

    #[test]
    fn mqtt_topics() {
        assert_eq!(mqtt_session_topic("s1"), "sara/v1/session/s1/events");
        assert_eq!(mqtt_inbox_topic("c9"), "sara/v1/client/c9/inbox");
        assert_eq!(parse_mqtt_session_topic("sara/v1/session/s1/events"), Some("s1"));
        assert_eq!(parse_mqtt_session_topic("sara/v1/session//events"), None);
        assert_eq!(parse_mqtt_session_topic("sara/v1/client/c/inbox"), None);
    }

    #[test]
    fn derived_ids_are_stable() {
        assert_eq!(derived_id("e1", "merge"), derived_id("e1", "merge"));
        assert_ne!(derived_id("e1", "merge"), derived_id("e1", "reject"));
    }
}
