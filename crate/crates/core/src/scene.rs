//! Scene graph of a collaboration session.
//!
//! A [`SessionStatus`] owns every [`Node`] of one session keyed by id. Parent
//! and child links are stored on the nodes themselves, so the map doubles as
//! the node index; [`SessionStatus::check_consistency`] verifies that the
//! links form a single rooted tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::models::CompositeModel;

pub type NodeId = String;
pub type Vec3 = [f64; 3];
/// Quaternion stored as `[x, y, z, w]`.
pub type Quat = [f64; 4];

/// Id of the root node of every session tree.
pub const ROOT_ID: &str = "root";

const QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown parent node `{0}`")]
    UnknownParent(NodeId),
    #[error("node id `{0}` already present")]
    DuplicateNodeId(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("the root node cannot be detached")]
    CannotDetachRoot,
    #[error("unknown property path `{0}`")]
    UnknownPropertyPath(String),
    #[error("value does not match `{path}`: {detail}")]
    ValueShapeMismatch { path: String, detail: String },
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("invalid mesh: {}", join_violations(.0))]
    InvalidMesh(Vec<MeshViolation>),
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
}

fn join_violations(v: &[MeshViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub position: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
}

impl Default for Transform {
    fn default() -> Self {
        Self { position: [0.0; 3], rotation: [0.0, 0.0, 0.0, 1.0], scale: [1.0; 3] }
    }
}

impl Transform {
    pub fn at(position: Vec3) -> Self {
        Self { position, ..Self::default() }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self
            .position
            .iter()
            .chain(self.rotation.iter())
            .chain(self.scale.iter())
            .all(|v| v.is_finite());
        finite
            && (quat_norm(self.rotation) - 1.0).abs() <= QUAT_TOLERANCE
            && self.scale.iter().all(|s| *s > 0.0)
    }

    /// Maps a point from this transform's local frame into its parent frame.
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let scaled = [p[0] * self.scale[0], p[1] * self.scale[1], p[2] * self.scale[2]];
        let r = quat_rotate(self.rotation, scaled);
        [r[0] + self.position[0], r[1] + self.position[1], r[2] + self.position[2]]
    }

    /// `self ∘ child`: the child transform expressed in this transform's parent frame.
    /// Exact for uniform scale, which is all the world-origin code needs.
    pub fn compose(&self, child: &Transform) -> Transform {
        Transform {
            position: self.apply_point(child.position),
            rotation: quat_normalize(quat_mul(self.rotation, child.rotation)),
            scale: [
                self.scale[0] * child.scale[0],
                self.scale[1] * child.scale[1],
                self.scale[2] * child.scale[2],
            ],
        }
    }

    /// Inverse under the uniform-scale assumption of [`Transform::compose`].
    pub fn inverse(&self) -> Transform {
        let inv_rot = quat_conj(self.rotation);
        let inv_scale = [1.0 / self.scale[0], 1.0 / self.scale[1], 1.0 / self.scale[2]];
        let neg = [-self.position[0], -self.position[1], -self.position[2]];
        let r = quat_rotate(inv_rot, neg);
        Transform {
            position: [r[0] * inv_scale[0], r[1] * inv_scale[1], r[2] * inv_scale[2]],
            rotation: inv_rot,
            scale: inv_scale,
        }
    }
}

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn quat_conj(q: Quat) -> Quat {
    [-q[0], -q[1], -q[2], q[3]]
}

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    let [ax, ay, az, aw] = a;
    let [bx, by, bz, bw] = b;
    [
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ]
}

pub fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    let p = quat_mul(quat_mul(q, [v[0], v[1], v[2], 0.0]), quat_conj(q));
    [p[0], p[1], p[2]]
}

/// Triangle mesh with flat arrays: three numbers per vertex, three indices per face,
/// one normal component per vertex component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<f64>,
    pub triangles: Vec<u32>,
    pub normals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshViolation {
    VerticesNotTriples { len: usize },
    TrianglesNotTriples { len: usize },
    NormalsLength { normals: usize, vertices: usize },
    IndexOutOfRange { at: usize, index: u32, vertex_count: usize },
    NonFinite { at: usize },
}

impl fmt::Display for MeshViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::VerticesNotTriples { len } => write!(f, "vertex array length {len} is not a multiple of 3"),
            Self::TrianglesNotTriples { len } => write!(f, "triangle array length {len} is not a multiple of 3"),
            Self::NormalsLength { normals, vertices } => {
                write!(f, "normals length {normals} differs from vertices length {vertices}")
            }
            Self::IndexOutOfRange { at, index, vertex_count } => {
                write!(f, "triangle index {index} at position {at} out of range for {vertex_count} vertices")
            }
            Self::NonFinite { at } => write!(f, "non-finite coordinate at position {at}"),
        }
    }
}

impl Mesh {
    /// Axis-aligned cube of edge 1 centered on the origin, 12 outward-facing triangles.
    pub fn unit_cube() -> Self {
        let mut vertices = Vec::with_capacity(24);
        for i in 0..8u32 {
            for bit in [1, 2, 4] {
                vertices.push(if i & bit != 0 { 0.5 } else { -0.5 });
            }
        }
        // vertex i has x, y, z set by bits 1, 2, 4; quads wind counter-clockwise from outside
        let quads: [[u32; 4]; 6] = [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]];
        let triangles = quads.iter().flat_map(|[a, b, c, d]| [*a, *b, *c, *a, *c, *d]).collect();
        // shared corners, so each vertex normal points along its corner direction
        let normals = vertices.iter().map(|v| v / 3f64.sqrt() * 2.0).collect();
        Self { vertices, triangles, normals }
    }

    /// Reports every violated invariant, not just the first one.
    pub fn validate(&self) -> Result<(), Vec<MeshViolation>> {
        let mut out = Vec::new();
        if !self.vertices.len().is_multiple_of(3) {
            out.push(MeshViolation::VerticesNotTriples { len: self.vertices.len() });
        }
        if !self.triangles.len().is_multiple_of(3) {
            out.push(MeshViolation::TrianglesNotTriples { len: self.triangles.len() });
        }
        if self.normals.len() != self.vertices.len() {
            out.push(MeshViolation::NormalsLength {
                normals: self.normals.len(),
                vertices: self.vertices.len(),
            });
        }
        let vertex_count = self.vertices.len() / 3;
        for (at, &index) in self.triangles.iter().enumerate() {
            if index as usize >= vertex_count {
                out.push(MeshViolation::IndexOutOfRange { at, index, vertex_count });
            }
        }
        if let Some(at) = self.vertices.iter().chain(&self.normals).position(|v| !v.is_finite()) {
            out.push(MeshViolation::NonFinite { at });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub parent_id: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub transform: Transform,
    pub mesh: Option<Mesh>,
    /// Free-form extension data, e.g. `block_type` for voxel cubes.
    pub attributes: BTreeMap<String, String>,
}

impl Node {
    pub fn new(id: impl Into<NodeId>) -> Self {
        let id = id.into();
        Self {
            name: id.clone(),
            id,
            parent_id: None,
            children: Vec::new(),
            transform: Transform::default(),
            mesh: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_mesh(mut self, mesh: Mesh) -> Self {
        self.mesh = Some(mesh);
        self
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }
}

/// The closed set of addressable node properties.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PropertyPath {
    Position,
    Rotation,
    Scale,
    Name,
    Attribute(String),
    Mesh,
}

impl PropertyPath {
    pub fn parse(path: &str) -> Result<Self, SceneError> {
        match path {
            "transform.position" => Ok(Self::Position),
            "transform.rotation" => Ok(Self::Rotation),
            "transform.scale" => Ok(Self::Scale),
            "name" => Ok(Self::Name),
            "mesh" => Ok(Self::Mesh),
            _ => match path.strip_prefix("attributes.") {
                Some(key) if !key.is_empty() => Ok(Self::Attribute(key.to_string())),
                _ => Err(SceneError::UnknownPropertyPath(path.to_string())),
            },
        }
    }

    /// True for properties whose value is a fixed-arity numeric vector.
    pub fn is_numeric_vector(&self) -> bool {
        matches!(self, Self::Position | Self::Rotation | Self::Scale)
    }
}

impl fmt::Display for PropertyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Position => f.write_str("transform.position"),
            Self::Rotation => f.write_str("transform.rotation"),
            Self::Scale => f.write_str("transform.scale"),
            Self::Name => f.write_str("name"),
            Self::Attribute(k) => write!(f, "attributes.{k}"),
            Self::Mesh => f.write_str("mesh"),
        }
    }
}

fn numbers<const N: usize>(path: &str, value: &Value) -> Result<[f64; N], SceneError> {
    let mismatch = |detail: String| SceneError::ValueShapeMismatch { path: path.to_string(), detail };
    let arr = value.as_array().ok_or_else(|| mismatch(format!("expected an array of {N} numbers")))?;
    if arr.len() != N {
        return Err(mismatch(format!("expected {N} numbers, got {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (slot, v) in out.iter_mut().zip(arr) {
        *slot = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| mismatch(format!("`{v}` is not a finite number")))?;
    }
    Ok(out)
}

fn apply_property(node: &mut Node, path: &str, value: &Value) -> Result<(), SceneError> {
    let parsed = PropertyPath::parse(path)?;
    let mismatch = |detail: &str| SceneError::ValueShapeMismatch { path: path.to_string(), detail: detail.into() };
    match parsed {
        PropertyPath::Position => node.transform.position = numbers::<3>(path, value)?,
        PropertyPath::Rotation => {
            let q = numbers::<4>(path, value)?;
            if quat_norm(q) < 1e-12 {
                return Err(mismatch("rotation quaternion has zero norm"));
            }
            node.transform.rotation = quat_normalize(q);
        }
        PropertyPath::Scale => {
            let s = numbers::<3>(path, value)?;
            if s.iter().any(|c| *c <= 0.0) {
                return Err(mismatch("scale components must be positive"));
            }
            node.transform.scale = s;
        }
        PropertyPath::Name => {
            node.name = value.as_str().ok_or_else(|| mismatch("expected a string"))?.to_string();
        }
        PropertyPath::Attribute(key) => match value {
            Value::Null => {
                node.attributes.remove(&key);
            }
            Value::String(s) => {
                node.attributes.insert(key, s.clone());
            }
            _ => return Err(mismatch("expected a string or null")),
        },
        PropertyPath::Mesh => {
            if value.is_null() {
                node.mesh = None;
            } else {
                let mesh: Mesh =
                    serde_json::from_value(value.clone()).map_err(|e| mismatch(&format!("expected a mesh object: {e}")))?;
                mesh.validate().map_err(SceneError::InvalidMesh)?;
                node.mesh = Some(mesh);
            }
        }
    }
    Ok(())
}

/// Authoritative node tree of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStatus {
    root_id: NodeId,
    nodes: BTreeMap<NodeId, Node>,
    pub revision: u64,
}

impl Default for SessionStatus {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionStatus {
    pub fn new() -> Self {
        let root = Node::new(ROOT_ID);
        let mut nodes = BTreeMap::new();
        nodes.insert(root.id.clone(), root);
        Self { root_id: ROOT_ID.to_string(), nodes, revision: 0 }
    }

    /// Builds a status from already-linked nodes and checks the tree invariants.
    pub fn from_parts(root_id: NodeId, nodes: BTreeMap<NodeId, Node>, revision: u64) -> Result<Self, String> {
        let status = Self { root_id, nodes, revision };
        status.check_consistency()?;
        Ok(status)
    }

    pub fn root_id(&self) -> &str {
        &self.root_id
    }

    pub fn root(&self) -> &Node {
        &self.nodes[&self.root_id]
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    /// Mutable access for whole-tree rewrites (convention conversion). Links must not be touched.
    pub(crate) fn nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.nodes.values_mut()
    }

    /// Ids of `id` and all its descendants in pre-order (children in stored order).
    pub fn subtree_ids(&self, id: &str) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(next) = stack.pop() {
            if let Some(node) = self.nodes.get(&next) {
                stack.extend(node.children.iter().rev().cloned());
                out.push(next);
            }
        }
        out
    }

    /// Ids of the strict ancestors of `id`, nearest first.
    pub fn ancestors(&self, id: &str) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(id).and_then(|n| n.parent_id.clone());
        while let Some(p) = cur {
            if out.len() > self.nodes.len() {
                break;
            }
            cur = self.nodes.get(&p).and_then(|n| n.parent_id.clone());
            out.push(p);
        }
        out
    }

    /// Nodes in pre-order starting at the root.
    pub fn preorder(&self) -> Vec<&Node> {
        self.subtree_ids(&self.root_id).iter().map(|id| &self.nodes[id]).collect()
    }

    pub fn attach_node(&mut self, parent_id: &str, mut node: Node) -> Result<NodeId, SceneError> {
        if !self.nodes.contains_key(parent_id) {
            return Err(SceneError::UnknownParent(parent_id.to_string()));
        }
        if node.id.is_empty() {
            return Err(SceneError::InvalidNode("node id is empty".into()));
        }
        if self.nodes.contains_key(&node.id) {
            return Err(SceneError::DuplicateNodeId(node.id));
        }
        if !node.children.is_empty() {
            return Err(SceneError::InvalidNode("attached nodes must not list children".into()));
        }
        if !node.transform.is_valid() {
            return Err(SceneError::InvalidNode("transform is not valid".into()));
        }
        if let Some(mesh) = &node.mesh {
            mesh.validate().map_err(SceneError::InvalidMesh)?;
        }
        node.parent_id = Some(parent_id.to_string());
        let id = node.id.clone();
        self.nodes.get_mut(parent_id).expect("checked").children.push(id.clone());
        self.nodes.insert(id.clone(), node);
        self.revision += 1;
        Ok(id)
    }

    /// Removes `id` and its descendants; returns them in pre-order.
    pub fn detach_node(&mut self, id: &str) -> Result<Vec<Node>, SceneError> {
        if id == self.root_id {
            return Err(SceneError::CannotDetachRoot);
        }
        let parent = match self.nodes.get(id) {
            Some(node) => node.parent_id.clone(),
            None => return Err(SceneError::UnknownNode(id.to_string())),
        };
        if let Some(parent) = parent.and_then(|p| self.nodes.get_mut(&p)) {
            parent.children.retain(|c| c != id);
        }
        let removed = self
            .subtree_ids(id)
            .into_iter()
            .filter_map(|n| self.nodes.remove(&n))
            .collect();
        self.revision += 1;
        Ok(removed)
    }

    pub fn apply_property_update(&mut self, id: &str, path: &str, value: &Value) -> Result<(), SceneError> {
        let node = self.nodes.get_mut(id).ok_or_else(|| SceneError::UnknownNode(id.to_string()))?;
        apply_property(node, path, value)?;
        self.revision += 1;
        Ok(())
    }

    /// Dry run of [`SessionStatus::apply_property_update`]; leaves the status untouched.
    pub fn check_property_update(&self, id: &str, path: &str, value: &Value) -> Result<(), SceneError> {
        let mut node = self.nodes.get(id).ok_or_else(|| SceneError::UnknownNode(id.to_string()))?.clone();
        apply_property(&mut node, path, value)
    }

    /// Replaces the whole tree with `other`'s tree; counts as one mutation.
    pub fn replace_tree(&mut self, other: SessionStatus) {
        self.root_id = other.root_id;
        self.nodes = other.nodes;
        self.revision += 1;
    }

    /// Structural equality ignoring the revision counter.
    pub fn same_tree(&self, other: &SessionStatus) -> bool {
        self.root_id == other.root_id && self.nodes == other.nodes
    }

    /// Copy restricted to `visible` (the root is always kept). Children lists are filtered
    /// in place, so the caller must pass an ancestor-closed set to keep nodes reachable.
    pub fn filtered(&self, visible: &BTreeSet<NodeId>) -> SessionStatus {
        let nodes = self
            .nodes
            .iter()
            .filter(|(id, _)| **id == self.root_id || visible.contains(*id))
            .map(|(id, node)| {
                let mut node = node.clone();
                node.children.retain(|c| visible.contains(c));
                (id.clone(), node)
            })
            .collect();
        SessionStatus { root_id: self.root_id.clone(), nodes, revision: self.revision }
    }

    /// Full traversal check: unique ids, mutual parent/child links, single root, no cycles,
    /// every stored node reachable, valid transforms and meshes.
    pub fn check_consistency(&self) -> Result<(), String> {
        let root = self.nodes.get(&self.root_id).ok_or("root node missing")?;
        if root.parent_id.is_some() {
            return Err("root node has a parent".into());
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root_id.clone()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                return Err(format!("node `{id}` reached twice (cycle or shared child)"));
            }
            let node = self.nodes.get(&id).ok_or_else(|| format!("child `{id}` missing from index"))?;
            if node.id != id {
                return Err(format!("node stored under `{id}` has id `{}`", node.id));
            }
            if !node.transform.is_valid() {
                return Err(format!("node `{id}` has an invalid transform"));
            }
            if let Some(mesh) = &node.mesh {
                mesh.validate().map_err(|v| format!("node `{id}`: {}", join_violations(&v)))?;
            }
            for child in &node.children {
                let c = self.nodes.get(child).ok_or_else(|| format!("child `{child}` missing from index"))?;
                if c.parent_id.as_deref() != Some(id.as_str()) {
                    return Err(format!("child `{child}` does not point back to `{id}`"));
                }
                stack.push(child.clone());
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(format!("{} nodes unreachable from the root", self.nodes.len() - seen.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum AlignmentInfo {
    MarkerBased { marker_id: String, physical_width_m: f64 },
    #[default]
    NotAligned,
    /// Reserved; carried verbatim and never interpreted.
    SlamBased { blob: String },
}


impl AlignmentInfo {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::MarkerBased { physical_width_m, .. } if physical_width_m.is_nan() || *physical_width_m <= 0.0 => {
                Err(format!("marker width must be positive, got {physical_width_m}"))
            }
            _ => Ok(()),
        }
    }
}

/// A collaboration session: scene tree, alignment and the collaboration-model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub status: SessionStatus,
    pub alignment: AlignmentInfo,
    pub models: CompositeModel,
}

#[derive(Serialize, Deserialize)]
struct SnapshotDoc {
    session_id: String,
    alignment: AlignmentInfo,
    models: CompositeModel,
    state: Value,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            status: SessionStatus::new(),
            alignment: AlignmentInfo::NotAligned,
            models: CompositeModel::default(),
        }
    }

    pub fn snapshot(&self) -> String {
        let doc = SnapshotDoc {
            session_id: self.session_id.clone(),
            alignment: self.alignment.clone(),
            models: self.models.clone(),
            state: crate::protocol::status_to_json(&self.status),
        };
        serde_json::to_string(&doc).expect("snapshot serialization is infallible")
    }

    pub fn restore(document: &str) -> Result<Self, SceneError> {
        let doc: SnapshotDoc =
            serde_json::from_str(document).map_err(|e| SceneError::MalformedSnapshot(e.to_string()))?;
        doc.alignment.validate().map_err(SceneError::MalformedSnapshot)?;
        let status = crate::protocol::status_from_json(&doc.state)
            .map_err(|e| SceneError::MalformedSnapshot(e.to_string()))?;
        Ok(Self { session_id: doc.session_id, status, alignment: doc.alignment, models: doc.models })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn cube(id: &str, pos: Vec3) -> Node {
        Node::new(id).with_transform(Transform::at(pos))
    }

    #[test]
    fn attach_under_root() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, cube("c1", [0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.revision, 1);
        assert_eq!(s.root().children, vec!["c1".to_string()]);
        s.check_consistency().unwrap();
    }

    #[test]
    fn attach_duplicate_and_unknown_parent() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, cube("c1", [0.0; 3])).unwrap();
        assert_eq!(s.attach_node(ROOT_ID, cube("c1", [1.0; 3])), Err(SceneError::DuplicateNodeId("c1".into())));
        assert_eq!(s.attach_node("nope", cube("c2", [1.0; 3])), Err(SceneError::UnknownParent("nope".into())));
        assert_eq!(s.revision, 1);
    }

    /// Naive oracle: a flat list of (id, parent) pairs appended in order.
    #[test]
    fn voxel_floor_matches_sequential_oracle() {
        let mut s = SessionStatus::new();
        let mut oracle: Vec<(String, String, Vec3)> = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                let id = format!("cube_{x}_{y}_0");
                let pos = [x as f64, y as f64, 0.0];
                s.attach_node(ROOT_ID, cube(&id, pos)).unwrap();
                oracle.push((id, ROOT_ID.to_string(), pos));
            }
        }
        assert_eq!(s.len(), 17);
        assert_eq!(s.revision, 16);
        let root_children: Vec<_> = oracle.iter().map(|(id, _, _)| id.clone()).collect();
        assert_eq!(s.root().children, root_children);
        for (id, parent, pos) in &oracle {
            let n = s.node(id).unwrap();
            assert_eq!(n.parent_id.as_deref(), Some(parent.as_str()));
            assert_eq!(n.transform.position, *pos);
            assert!(n.children.is_empty());
        }
        s.check_consistency().unwrap();
    }

    #[test]
    fn detach_leaf_root_and_subtree() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("g")).unwrap();
        s.attach_node("g", Node::new("a")).unwrap();
        s.attach_node("g", Node::new("b")).unwrap();
        s.attach_node("a", Node::new("a1")).unwrap();
        s.attach_node(ROOT_ID, Node::new("leaf")).unwrap();
        assert_eq!(s.detach_node(ROOT_ID), Err(SceneError::CannotDetachRoot));
        assert_eq!(s.detach_node("zz"), Err(SceneError::UnknownNode("zz".into())));

        let before = s.len();
        s.detach_node("leaf").unwrap();
        assert_eq!(s.len(), before - 1);

        // traversal oracle: count reachable nodes independently of the index
        fn reachable(s: &SessionStatus) -> usize {
            let mut count = 0;
            let mut stack = vec![s.root_id().to_string()];
            while let Some(id) = stack.pop() {
                count += 1;
                stack.extend(s.node(&id).unwrap().children.iter().cloned());
            }
            count
        }
        let before = reachable(&s);
        let removed = s.detach_node("g").unwrap();
        assert_eq!(removed.len(), 4);
        assert_eq!(removed[0].id, "g");
        assert_eq!(reachable(&s), before - 4);
        assert_eq!(s.len(), before - 4);
        s.check_consistency().unwrap();
    }

    #[test]
    fn property_updates() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("n1")).unwrap();
        s.apply_property_update("n1", "transform.position", &json!([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.node("n1").unwrap().transform.position, [1.0, 0.0, 0.0]);

        let before = s.clone();
        s.apply_property_update("n1", "transform.scale", &json!([1, 1, 1])).unwrap();
        assert_eq!(s.revision, before.revision + 1);
        assert!(s.same_tree(&before));

        let err = s.apply_property_update("n1", "transform.position", &json!([1, 2])).unwrap_err();
        assert!(matches!(err, SceneError::ValueShapeMismatch { .. }));
        assert!(matches!(
            s.apply_property_update("n1", "transform.colour", &json!(1)),
            Err(SceneError::UnknownPropertyPath(_))
        ));
        assert!(matches!(
            s.apply_property_update("n9", "name", &json!("x")),
            Err(SceneError::UnknownNode(_))
        ));
        assert!(matches!(
            s.apply_property_update("n1", "transform.scale", &json!([1, 0, 1])),
            Err(SceneError::ValueShapeMismatch { .. })
        ));
    }

    #[test]
    fn rotation_is_normalized() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("n1")).unwrap();
        s.apply_property_update("n1", "transform.rotation", &json!([0.0, 0.0, 2.0, 2.0])).unwrap();
        let q = s.node("n1").unwrap().transform.rotation;
        assert!((quat_norm(q) - 1.0).abs() < 1e-12);
        assert!(s.apply_property_update("n1", "transform.rotation", &json!([0, 0, 0, 0])).is_err());
    }

    #[test]
    fn attribute_and_mesh_updates() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("n1")).unwrap();
        s.apply_property_update("n1", "attributes.block_type", &json!("stone")).unwrap();
        assert_eq!(s.node("n1").unwrap().attributes["block_type"], "stone");
        s.apply_property_update("n1", "attributes.block_type", &Value::Null).unwrap();
        assert!(s.node("n1").unwrap().attributes.is_empty());
        let bad = json!({"vertices": [0, 0, 0], "triangles": [0, 1, 2], "normals": [0, 0, 1]});
        assert!(matches!(s.apply_property_update("n1", "mesh", &bad), Err(SceneError::InvalidMesh(_))));
        assert!(s.node("n1").unwrap().mesh.is_none());
    }

    #[test]
    fn mesh_validation() {
        let ok = Mesh {
            vertices: vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            triangles: vec![0, 1, 2],
            normals: vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(ok.validate(), Ok(()));

        let bad_index = Mesh { triangles: vec![0, 1, 5], ..ok.clone() };
        assert_eq!(
            bad_index.validate(),
            Err(vec![MeshViolation::IndexOutOfRange { at: 2, index: 5, vertex_count: 3 }])
        );

        let short_normals = Mesh { normals: vec![0.0, 0.0, 1.0], ..ok.clone() };
        assert_eq!(
            short_normals.validate(),
            Err(vec![MeshViolation::NormalsLength { normals: 3, vertices: 9 }])
        );

        let everything = Mesh { vertices: vec![0.0; 4], triangles: vec![0, 9], normals: vec![] };
        assert_eq!(everything.validate().unwrap_err().len(), 4);
    }

    #[test]
    fn attach_rejects_invalid_mesh() {
        let mut s = SessionStatus::new();
        let mesh = Mesh { vertices: vec![0.0; 3], triangles: vec![0, 0, 1], normals: vec![0.0; 3] };
        assert!(matches!(
            s.attach_node(ROOT_ID, Node::new("m").with_mesh(mesh)),
            Err(SceneError::InvalidMesh(_))
        ));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn filtered_keeps_root_and_prunes_children() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("a")).unwrap();
        s.attach_node(ROOT_ID, Node::new("b")).unwrap();
        let f = s.filtered(&["a".to_string()].into());
        assert_eq!(f.len(), 2);
        assert_eq!(f.root().children, vec!["a".to_string()]);
        f.check_consistency().unwrap();
    }

    #[test]
    fn transform_inverse_round_trip() {
        let t = Transform {
            position: [1.0, -2.0, 0.5],
            rotation: quat_normalize([0.1, 0.7, -0.2, 0.6]),
            scale: [2.0, 2.0, 2.0],
        };
        let id = t.compose(&t.inverse());
        for (a, b) in id.position.iter().zip([0.0; 3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = [0.3, 0.2, -1.0];
        let back = t.inverse().apply_point(t.apply_point(p));
        for (a, b) in back.iter().zip(p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_width_must_be_positive() {
        assert!(AlignmentInfo::MarkerBased { marker_id: "m".into(), physical_width_m: 0.0 }.validate().is_err());
        assert!(AlignmentInfo::MarkerBased { marker_id: "m".into(), physical_width_m: 0.2 }.validate().is_ok());
    }

    #[test]
    fn snapshot_round_trip_and_truncation() {
        let mut session = Session::new("s1");
        session.alignment = AlignmentInfo::MarkerBased { marker_id: "hiro".into(), physical_width_m: 0.15 };
        let restored = Session::restore(&session.snapshot()).unwrap();
        assert_eq!(restored, session);

        session.status.attach_node(ROOT_ID, cube("c", [1.0, 2.0, 3.0])).unwrap();
        let doc = session.snapshot();
        assert_eq!(Session::restore(&doc).unwrap(), session);
        assert!(matches!(
            Session::restore(&doc[..doc.len() / 2]),
            Err(SceneError::MalformedSnapshot(_))
        ));
    }
}
