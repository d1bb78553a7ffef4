//! The voxel game: one node per cube under a `terrain` group, positions on the
//! integer lattice, z up. The provider turns tool clicks into scene events.

use std::fmt;
use std::str::FromStr;

use sara_core::interp::{convert_mesh, convert_point};
use sara_core::protocol::{Convention, NodeSpec, Payload};
use sara_core::scene::{Mesh, Vec3};
use sara_core::{Node, SessionStatus, Transform, ROOT_ID};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::scenario::World;

pub const TERRAIN_ID: &str = "terrain";
pub const BLOCK_ATTR: &str = "block_type";

pub fn cube_id(p: [i64; 3]) -> String {
    format!("cube_{}_{}_{}", p[0], p[1], p[2])
}

pub fn lattice(p: Vec3) -> [i64; 3] {
    [p[0].round() as i64, p[1].round() as i64, p[2].round() as i64]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::PosX, Face::NegX, Face::PosY, Face::NegY, Face::PosZ, Face::NegZ];

    pub fn axis(self) -> usize {
        match self {
            Self::PosX | Self::NegX => 0,
            Self::PosY | Self::NegY => 1,
            Self::PosZ | Self::NegZ => 2,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Self::PosX | Self::PosY | Self::PosZ => 1.0,
            _ => -1.0,
        }
    }

    pub fn normal(self) -> Vec3 {
        let mut n = [0.0; 3];
        n[self.axis()] = self.sign();
        n
    }

    fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Self::PosX,
            (0, false) => Self::NegX,
            (1, true) => Self::PosY,
            (1, false) => Self::NegY,
            (_, true) => Self::PosZ,
            (_, false) => Self::NegZ,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PosX => "+x",
            Self::NegX => "-x",
            Self::PosY => "+y",
            Self::NegY => "-y",
            Self::PosZ => "+z",
            Self::NegZ => "-z",
        }
    }
}

impl FromStr for Face {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Face::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| format!("unknown face `{s}`"))
    }
}

impl Serialize for Face {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Face {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Face whose outward axis dominates the offset from the cube center.
pub fn face_from_point(center: Vec3, point: Vec3) -> Face {
    let d = [point[0] - center[0], point[1] - center[1], point[2] - center[2]];
    let mut axis = 0;
    for a in 1..3 {
        if d[a].abs() > d[axis].abs() {
            axis = a;
        }
    }
    Face::from_axis(axis, d[axis] >= 0.0)
}

/// A point on `face` of the unit cube at `center`, shifted within the face by `jitter`.
pub fn point_on_face(center: Vec3, face: Face, jitter: [f64; 2]) -> Vec3 {
    let mut p = center;
    p[face.axis()] += 0.5 * face.sign();
    let others: Vec<usize> = (0..3).filter(|a| *a != face.axis()).collect();
    p[others[0]] += jitter[0];
    p[others[1]] += jitter[1];
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tool {
    Shovel,
    Brush(String),
    Adder(String),
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shovel => f.write_str("shovel"),
            Self::Brush(b) => write!(f, "brush:{b}"),
            Self::Adder(b) => write!(f, "adder:{b}"),
        }
    }
}

impl FromStr for Tool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "shovel" => Ok(Self::Shovel),
            Some(("brush", b)) if !b.is_empty() => Ok(Self::Brush(b.into())),
            Some(("adder", b)) if !b.is_empty() => Ok(Self::Adder(b.into())),
            _ => Err(format!("unknown tool `{s}` (shovel, brush:<type>, adder:<type>)")),
        }
    }
}

impl Serialize for Tool {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Tool {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A cube node in `convention` coordinates, so that it lands canonical after conversion.
pub fn cube_node(id: &str, session_pos: Vec3, block: &str, convention: Convention) -> Node {
    Node::new(id)
        .with_transform(Transform::at(convert_point(session_pos, convention)))
        .with_mesh(convert_mesh(&Mesh::unit_cube(), convention))
        .with_attribute(BLOCK_ATTR, block)
}

/// `(parent, node)` pairs that build the initial world, terrain group first.
pub fn world_nodes(world: &World, convention: Convention) -> Vec<(String, Node)> {
    let mut out = vec![(ROOT_ID.to_string(), Node::new(TERRAIN_ID))];
    for x in 0..world.size[0] as i64 {
        for y in 0..world.size[1] as i64 {
            for z in 0..world.height as i64 {
                let p = [x as f64, y as f64, z as f64];
                out.push((TERRAIN_ID.to_string(), cube_node(&cube_id([x, y, z]), p, &world.block, convention)));
            }
        }
    }
    out
}

/// Provider reaction to a click it received, computed on its own mirror.
/// Returns nothing for clicks without a tool, on non-cube nodes, or onto an occupied cell.
pub fn voxel_apply(mirror: &SessionStatus, convention: Convention, click: &Payload) -> Option<Payload> {
    let Payload::Click { node_id, world_point, tool } = click else { return None };
    let tool: Tool = tool.as_deref()?.parse().ok()?;
    let node = mirror.node(node_id)?;
    node.attributes.get(BLOCK_ATTR)?;
    match tool {
        Tool::Shovel => Some(Payload::RemoveNode { node_id: node_id.clone() }),
        Tool::Brush(block) => Some(Payload::IncrementalUpdate {
            node_id: node_id.clone(),
            property_path: format!("attributes.{BLOCK_ATTR}"),
            new_value: Value::String(block),
        }),
        Tool::Adder(block) => {
            let center = convert_point(node.transform.position, convention);
            let point = convert_point((*world_point)?, convention);
            let n = face_from_point(center, point).normal();
            let target = [center[0] + n[0], center[1] + n[1], center[2] + n[2]];
            let id = cube_id(lattice(target));
            if mirror.contains(&id) {
                return None;
            }
            Some(Payload::AddNode {
                parent_id: node.parent_id.clone().unwrap_or_else(|| ROOT_ID.to_string()),
                node: NodeSpec::from_node(&cube_node(&id, target, &block, convention)),
            })
        }
    }
}
