//! Transformation and interaction interpreters.
//!
//! The server keeps every session in a right-handed frame. Left-handed clients
//! differ by a Z-axis inversion: positions flip `z`, quaternions flip `x` and
//! `y`. The map is its own inverse, so the same functions convert in both
//! directions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use crate::protocol::{Convention, DeviceProfile, RawInteraction};
use crate::protocol::{NodeSpec, Payload};
use crate::scene::{Mesh, PropertyPath, Quat, SessionStatus, Transform, Vec3};

const DEFAULT_GESTURE_TABLE: &str = include_str!("../resources/gesture_table.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("gesture `{gesture}` is not known for profile {profile:?}")]
    UnknownGesture { gesture: String, profile: DeviceProfile },
    #[error("drag gesture `{0}` carries no delta")]
    MissingDelta(String),
    #[error("gesture table: {0}")]
    BadTable(String),
}

pub fn convert_point(p: Vec3, c: Convention) -> Vec3 {
    match c {
        Convention::RightHanded => p,
        Convention::LeftHanded => [p[0], p[1], -p[2]],
    }
}

pub fn convert_rotation(q: Quat, c: Convention) -> Quat {
    match c {
        Convention::RightHanded => q,
        Convention::LeftHanded => [-q[0], -q[1], q[2], q[3]],
    }
}

fn convert_transform(t: &Transform, c: Convention) -> Transform {
    Transform {
        position: convert_point(t.position, c),
        rotation: convert_rotation(t.rotation, c),
        scale: t.scale,
    }
}

/// Client convention → canonical right-handed frame.
pub fn to_canonical_transform(t: &Transform, c: Convention) -> Transform {
    convert_transform(t, c)
}

/// Canonical right-handed frame → client convention.
pub fn from_canonical_transform(t: &Transform, c: Convention) -> Transform {
    convert_transform(t, c)
}

/// Mirrors vertex and normal `z` and swaps triangle winding so faces keep their orientation.
pub fn convert_mesh(mesh: &Mesh, c: Convention) -> Mesh {
    if c == Convention::RightHanded {
        return mesh.clone();
    }
    let flip = |v: &[f64]| -> Vec<f64> {
        v.chunks(3)
            .flat_map(|ch| if ch.len() == 3 { vec![ch[0], ch[1], -ch[2]] } else { ch.to_vec() })
            .collect()
    };
    let triangles = mesh
        .triangles
        .chunks(3)
        .flat_map(|t| if t.len() == 3 { vec![t[0], t[2], t[1]] } else { t.to_vec() })
        .collect();
    Mesh { vertices: flip(&mesh.vertices), triangles, normals: flip(&mesh.normals) }
}

/// Converts every node transform and mesh of a tree.
pub fn convert_status(status: &SessionStatus, c: Convention) -> SessionStatus {
    let mut out = status.clone();
    if c == Convention::RightHanded {
        return out;
    }
    for node in out.nodes_mut() {
        node.transform = convert_transform(&node.transform, c);
        node.mesh = node.mesh.as_ref().map(|m| convert_mesh(m, c));
    }
    out
}

pub fn convert_node_spec(node: &NodeSpec, c: Convention) -> NodeSpec {
    NodeSpec {
        transform: convert_transform(&node.transform, c),
        mesh: node.mesh.as_ref().map(|m| convert_mesh(m, c)),
        ..node.clone()
    }
}

fn value_numbers(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

/// Converts the value of an incremental update. Ill-shaped values pass through untouched;
/// the scene model rejects them later with a precise error.
pub fn convert_property_value(path: &str, value: &Value, c: Convention) -> Value {
    if c == Convention::RightHanded {
        return value.clone();
    }
    match PropertyPath::parse(path) {
        Ok(PropertyPath::Position) => match value_numbers(value).as_deref() {
            Some(&[x, y, z]) => serde_json::json!(convert_point([x, y, z], c)),
            _ => value.clone(),
        },
        Ok(PropertyPath::Rotation) => match value_numbers(value).as_deref() {
            Some(&[x, y, z, w]) => serde_json::json!(convert_rotation([x, y, z, w], c)),
            _ => value.clone(),
        },
        Ok(PropertyPath::Mesh) => match serde_json::from_value::<Mesh>(value.clone()) {
            Ok(mesh) => serde_json::to_value(convert_mesh(&mesh, c)).expect("mesh serializes"),
            Err(_) => value.clone(),
        },
        _ => value.clone(),
    }
}

/// Converts the geometric parts of a payload. `SetSessionState` is handled by the
/// caller, which has to decode the state first.
pub fn convert_payload(payload: &Payload, c: Convention) -> Payload {
    if c == Convention::RightHanded {
        return payload.clone();
    }
    match payload {
        Payload::Click { node_id, world_point, tool } => Payload::Click {
            node_id: node_id.clone(),
            world_point: world_point.map(|p| convert_point(p, c)),
            tool: tool.clone(),
        },
        Payload::Drag { node_id, delta } => Payload::Drag { node_id: node_id.clone(), delta: convert_point(*delta, c) },
        Payload::RawInteraction(raw) => Payload::RawInteraction(RawInteraction {
            point: raw.point.map(|p| convert_point(p, c)),
            delta: raw.delta.map(|d| convert_point(d, c)),
            ..raw.clone()
        }),
        Payload::IncrementalUpdate { node_id, property_path, new_value } => Payload::IncrementalUpdate {
            node_id: node_id.clone(),
            property_path: property_path.clone(),
            new_value: convert_property_value(property_path, new_value, c),
        },
        Payload::AddNode { parent_id, node } => {
            Payload::AddNode { parent_id: parent_id.clone(), node: convert_node_spec(node, c) }
        }
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalKind {
    Click,
    Drag,
}

/// Device profile → gesture → canonical interaction kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GestureTable(BTreeMap<DeviceProfile, BTreeMap<String, CanonicalKind>>);

impl Default for GestureTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_GESTURE_TABLE).expect("embedded gesture table is valid")
    }
}

impl GestureTable {
    pub fn from_json(text: &str) -> Result<Self, InterpError> {
        serde_json::from_str(text).map_err(|e| InterpError::BadTable(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, InterpError> {
        let text = std::fs::read_to_string(path).map_err(|e| InterpError::BadTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn lookup(&self, profile: DeviceProfile, gesture: &str) -> Option<CanonicalKind> {
        self.0.get(&profile)?.get(gesture).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (DeviceProfile, &str, CanonicalKind)> {
        self.0.iter().flat_map(|(p, g)| g.iter().map(move |(name, kind)| (*p, name.as_str(), *kind)))
    }
}

/// Maps a device gesture onto a canonical `Click` or `Drag`, converting its geometry
/// from the client's convention into the canonical frame.
pub fn normalize_interaction(
    raw: &RawInteraction,
    profile: DeviceProfile,
    convention: Convention,
    table: &GestureTable,
) -> Result<Payload, InterpError> {
    let kind = table.lookup(profile, &raw.gesture).ok_or_else(|| InterpError::UnknownGesture {
        gesture: raw.gesture.clone(),
        profile,
    })?;
    Ok(match kind {
        CanonicalKind::Click => Payload::Click {
            node_id: raw.node_id.clone(),
            world_point: raw.point.map(|p| convert_point(p, convention)),
            tool: raw.tool.clone(),
        },
        CanonicalKind::Drag => Payload::Drag {
            node_id: raw.node_id.clone(),
            delta: convert_point(raw.delta.ok_or_else(|| InterpError::MissingDelta(raw.gesture.clone()))?, convention),
        },
    })
}
