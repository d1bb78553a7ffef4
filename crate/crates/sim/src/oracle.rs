//! Single-threaded, transport-free replay of a scenario: the ground truth that the
//! full stack is compared against. Users are named by client name throughout, and
//! the rules are reimplemented here from the model configuration JSON.

use std::collections::{BTreeMap, BTreeSet};

use sara_core::scene::{Mesh, Vec3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scenario::{Op, RoleSpec, Scenario};
use crate::voxel::{cube_id, lattice, Tool, BLOCK_ATTR, TERRAIN_ID};

pub const ROOT: &str = "root";
pub const SYSTEM: &str = "system";
const DEFAULT_WINDOW_MS: u64 = 100;

/// Fate of one event at the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Accepted,
    /// Folded into a merged update; the event itself is not applied.
    Merged,
    Rejected(String),
}

impl Outcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted)
    }

    pub fn rule(&self) -> Option<&str> {
        match self {
            Self::Rejected(r) => Some(r),
            _ => None,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Accepted => f.write_str("accepted"),
            Self::Merged => f.write_str("merged"),
            Self::Rejected(r) => write!(f, "rejected:{r}"),
        }
    }
}

impl std::str::FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accepted" => Ok(Self::Accepted),
            "merged" => Ok(Self::Merged),
            _ => s.strip_prefix("rejected:").map(|r| Self::Rejected(r.into())).ok_or_else(|| format!("unknown outcome `{s}`")),
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What a client can see of one node, in session coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub parent: Option<String>,
    pub position: Vec3,
    pub block: Option<String>,
    pub mesh: Option<Mesh>,
}

pub type View = BTreeMap<String, NodeView>;

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    parent: Option<String>,
    children: Vec<String>,
    position: Vec3,
    attributes: BTreeMap<String, String>,
    mesh: Option<Mesh>,
}

/// The plain node tree the oracle mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    cells: BTreeMap<String, Cell>,
}

impl Default for Grid {
    fn default() -> Self {
        let root = Cell { parent: None, children: vec![], position: [0.0; 3], attributes: BTreeMap::new(), mesh: None };
        Self { cells: BTreeMap::from([(ROOT.to_string(), root)]) }
    }
}

impl Grid {
    pub fn contains(&self, id: &str) -> bool {
        self.cells.contains_key(id)
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.cells.keys().cloned().collect()
    }

    pub fn position(&self, id: &str) -> Option<Vec3> {
        self.cells.get(id).map(|c| c.position)
    }

    pub fn parent(&self, id: &str) -> Option<&str> {
        self.cells.get(id)?.parent.as_deref()
    }

    pub fn block(&self, id: &str) -> Option<&str> {
        self.cells.get(id)?.attributes.get(BLOCK_ATTR).map(String::as_str)
    }

    /// Node ids in parent-before-child order.
    pub fn preorder(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![ROOT.to_string()];
        while let Some(id) = stack.pop() {
            if let Some(c) = self.cells.get(&id) {
                stack.extend(c.children.iter().rev().cloned());
            }
            out.push(id);
        }
        out
    }

    fn subtree(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(n) = stack.pop() {
            if let Some(c) = self.cells.get(&n) {
                stack.extend(c.children.iter().cloned());
            }
            out.push(n);
        }
        out
    }

    /// Voxel cells by lattice point, for grid-level comparisons.
    pub fn voxels(&self) -> BTreeMap<[i64; 3], String> {
        self.cells.values().filter_map(|c| c.attributes.get(BLOCK_ATTR).map(|b| (lattice(c.position), b.clone())))
            .collect()
    }

    pub fn view(&self, visible: &BTreeSet<String>) -> View {
        self.cells
            .iter()
            .filter(|(id, _)| visible.contains(*id))
            .map(|(id, c)| {
                let v = NodeView { parent: c.parent.clone(), position: c.position, block: c.attributes.get(BLOCK_ATTR).cloned(), mesh: c.mesh.clone() };
                (id.clone(), v)
            })
            .collect()
    }

    pub fn full_view(&self) -> View {
        self.view(&self.ids())
    }

    fn add(&mut self, parent: &str, id: &str, cell: NewNode) -> Result<(), &'static str> {
        if !self.contains(parent) {
            return Err("scene.unknown_parent");
        }
        if id.is_empty() {
            return Err("scene.invalid");
        }
        if self.contains(id) {
            return Err("scene.duplicate_node");
        }
        self.cells.get_mut(parent).expect("checked").children.push(id.to_string());
        let cell = Cell { parent: Some(parent.into()), children: vec![], position: cell.position, attributes: cell.attributes, mesh: cell.mesh };
        self.cells.insert(id.to_string(), cell);
        Ok(())
    }

    fn remove(&mut self, id: &str) -> Result<Vec<String>, &'static str> {
        if id == ROOT {
            return Err("scene.root");
        }
        let Some(parent) = self.cells.get(id).map(|c| c.parent.clone()) else { return Err("scene.unknown_node") };
        if let Some(p) = parent.and_then(|p| self.cells.get_mut(&p)) {
            p.children.retain(|c| c != id);
        }
        let gone = self.subtree(id);
        for n in &gone {
            self.cells.remove(n);
        }
        Ok(gone)
    }

    fn check_update(&self, id: &str, path: &str, value: &Value) -> Result<(), &'static str> {
        if !self.contains(id) {
            return Err("scene.unknown_node");
        }
        match path {
            "transform.position" => {
                let ok = value.as_array().is_some_and(|a| a.len() == 3 && a.iter().all(|x| x.as_f64().is_some_and(f64::is_finite)));
                if ok {
                    Ok(())
                } else {
                    Err("scene.value_shape")
                }
            }
            p if p.strip_prefix("attributes.").is_some_and(|k| !k.is_empty()) => {
                if value.is_string() || value.is_null() {
                    Ok(())
                } else {
                    Err("scene.value_shape")
                }
            }
            _ => Err("scene.property_path"),
        }
    }

    fn update(&mut self, id: &str, path: &str, value: &Value) {
        let cell = self.cells.get_mut(id).expect("checked");
        if path == "transform.position" {
            let a = value.as_array().expect("checked");
            cell.position = [a[0].as_f64().unwrap(), a[1].as_f64().unwrap(), a[2].as_f64().unwrap()];
        } else if let Some(key) = path.strip_prefix("attributes.") {
            match value.as_str() {
                Some(s) => cell.attributes.insert(key.into(), s.into()),
                None => cell.attributes.remove(key),
            };
        }
    }
}

/// Content of a node being added.
#[derive(Debug, Clone, PartialEq)]
pub struct NewNode {
    pub position: Vec3,
    pub attributes: BTreeMap<String, String>,
    pub mesh: Option<Mesh>,
}

impl NewNode {
    pub fn group(position: Vec3) -> Self {
        Self { position, attributes: BTreeMap::new(), mesh: None }
    }

    pub fn cube(position: Vec3, block: &str) -> Self {
        Self { position, attributes: BTreeMap::from([(BLOCK_ATTR.to_string(), block.to_string())]), mesh: Some(Mesh::unit_cube()) }
    }
}

/// One event as the oracle sees it, in session coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Act {
    Click { node: String },
    Drag { node: String },
    Update { node: String, path: String, value: Value },
    Add { parent: String, id: String, node: NewNode },
    Remove { node: String },
    /// Whole-tree replacement; the new tree is given as `(parent, id, node)` in pre-order.
    SetState(Vec<(String, String, NewNode)>),
    RequestTurn,
    PassTurn { to: Option<String> },
    Transfer { node: String, to: String },
    Grant { layer: String, user: String },
    Revoke { layer: String, user: String },
    Permit { user: String, nodes: Vec<String> },
}

impl Act {
    fn is_interaction(&self) -> bool {
        matches!(self, Self::Click { .. } | Self::Drag { .. })
    }

    fn is_model(&self) -> bool {
        matches!(
            self,
            Self::RequestTurn | Self::PassTurn { .. } | Self::Transfer { .. } | Self::Grant { .. } | Self::Revoke { .. } | Self::Permit { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Click { .. } => "click",
            Self::Drag { .. } => "drag",
            Self::Update { .. } => "update",
            Self::Add { .. } => "add",
            Self::Remove { .. } => "remove",
            Self::SetState(_) => "set_state",
            Self::RequestTurn => "request_turn",
            Self::PassTurn { .. } => "pass_turn",
            Self::Transfer { .. } => "transfer",
            Self::Grant { .. } => "grant",
            Self::Revoke { .. } => "revoke",
            Self::Permit { .. } => "permit",
        }
    }
}

/// Which nodes an event needs rights on.
enum Reach<'a> {
    Node(&'a str),
    Parent(&'a str),
    Everything,
}

fn reach(act: &Act) -> Option<Reach<'_>> {
    match act {
        Act::Click { node } | Act::Drag { node } | Act::Update { node, .. } | Act::Remove { node } => Some(Reach::Node(node)),
        Act::Add { parent, .. } => Some(Reach::Parent(parent)),
        Act::SetState(_) => Some(Reach::Everything),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Open,
    Turn { order: Vec<String>, holder: Option<String>, pending: Vec<String> },
    Owners { owner: BTreeMap<String, String>, owner_only: bool },
    Layers { layers: BTreeMap<String, BTreeSet<String>>, access: BTreeMap<String, BTreeSet<String>> },
    Ranks { root: Option<String>, parent: BTreeMap<String, String>, permitted: BTreeMap<String, BTreeSet<String>> },
}

fn strings(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array).map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect()).unwrap_or_default()
}

fn string_map(v: Option<&Value>) -> BTreeMap<String, String> {
    v.and_then(Value::as_object)
        .map(|o| o.iter().filter_map(|(k, x)| x.as_str().map(|s| (k.clone(), s.to_string()))).collect())
        .unwrap_or_default()
}

fn set_map(v: Option<&Value>) -> BTreeMap<String, BTreeSet<String>> {
    v.and_then(Value::as_object)
        .map(|o| o.iter().map(|(k, x)| (k.clone(), strings(Some(x)).into_iter().collect())).collect())
        .unwrap_or_default()
}

impl Rule {
    fn from_json(v: &Value) -> Result<Self, String> {
        let kind = v.get("kind").and_then(Value::as_str).ok_or("model without `kind`")?;
        Ok(match kind {
            "unconstrained" => Self::Open,
            "turn" => Self::Turn {
                order: strings(v.get("order")),
                holder: v.get("holder").and_then(Value::as_str).map(String::from),
                pending: strings(v.get("pending_requests")),
            },
            "ownership" => Self::Owners {
                owner: string_map(v.get("owner_of")),
                owner_only: v.get("visibility_mode").and_then(Value::as_str) == Some("OWNER_ONLY"),
            },
            "layer" => Self::Layers { layers: set_map(v.get("layers")), access: set_map(v.get("access")) },
            "hierarchy" => {
                let tree = v.get("tree");
                Self::Ranks {
                    root: tree.and_then(|t| t.get("root")).and_then(Value::as_str).map(String::from),
                    parent: string_map(tree.and_then(|t| t.get("parent"))),
                    permitted: set_map(v.get("permitted_nodes")),
                }
            }
            other => return Err(format!("unknown model kind `{other}`")),
        })
    }

    fn above(parent: &BTreeMap<String, String>, a: &str, b: &str) -> bool {
        let mut seen = BTreeSet::new();
        let mut cur = b;
        while let Some(p) = parent.get(cur) {
            if p == a {
                return true;
            }
            if !seen.insert(p.clone()) {
                return false;
            }
            cur = p;
        }
        false
    }

    fn in_tree(root: &Option<String>, parent: &BTreeMap<String, String>, u: &str) -> bool {
        root.as_deref() == Some(u) || parent.contains_key(u)
    }

    /// `Err(rule_id)` when this rule refuses `act` from `sender`.
    fn check(&self, sender: &str, act: &Act, grid: &Grid) -> Result<(), String> {
        let deny = |r: &str| Err(r.to_string());
        let gate = |rule: &str, may: &dyn Fn(&str) -> bool| -> Result<(), String> {
            match reach(act) {
                Some(Reach::Node(n)) if !may(n) => deny(rule),
                Some(Reach::Parent(p)) if p != ROOT && !may(p) => deny(rule),
                Some(Reach::Everything) if grid.ids().iter().any(|n| n != ROOT && !may(n)) => deny(rule),
                _ => Ok(()),
            }
        };
        match self {
            Self::Open => Ok(()),
            Self::Turn { order, holder, .. } => {
                let holds = holder.as_deref() == Some(sender);
                match act {
                    a if a.is_interaction() && !holds => deny("turn.holder"),
                    Act::RequestTurn if !order.iter().any(|u| u == sender) => deny("turn.member"),
                    Act::PassTurn { .. } if !holds => deny("turn.holder"),
                    Act::PassTurn { to: Some(to) } if !order.contains(to) => deny("turn.unknown_user"),
                    _ => Ok(()),
                }
            }
            Self::Owners { owner, .. } => match act {
                Act::Transfer { node, .. } if owner.get(node).map(String::as_str) != Some(sender) => deny("ownership.transfer"),
                Act::Transfer { .. } => Ok(()),
                _ => gate("ownership.owner", &|n| owner.get(n).map(String::as_str) == Some(sender)),
            },
            Self::Layers { layers, access } => {
                let has = |l: &str| access.get(sender).is_some_and(|s| s.contains(l));
                match act {
                    Act::Grant { layer, .. } | Act::Revoke { layer, .. } => {
                        if !layers.contains_key(layer) {
                            deny("layer.unknown")
                        } else if !has(layer) {
                            deny("layer.grant")
                        } else {
                            Ok(())
                        }
                    }
                    _ => gate("layer.access", &|n| layers.iter().any(|(l, nodes)| nodes.contains(n) && has(l))),
                }
            }
            Self::Ranks { root, parent, permitted } => match act {
                Act::Permit { user, .. } if !Self::above(parent, sender, user) => deny("hierarchy.ancestor"),
                Act::Permit { .. } => Ok(()),
                _ => gate("hierarchy.permitted", &|n| {
                    root.as_deref() == Some(sender) || permitted.get(sender).is_some_and(|s| s.contains(n))
                }),
            },
        }
    }

    fn apply(&mut self, sender: &str, act: &Act) {
        match (self, act) {
            (Self::Turn { holder, pending, .. }, Act::RequestTurn) => {
                if holder.as_deref() != Some(sender) && !pending.iter().any(|u| u == sender) {
                    pending.push(sender.into());
                }
            }
            (Self::Turn { order, holder, pending }, Act::PassTurn { to }) => {
                let next = match to {
                    Some(t) => Some(t.clone()),
                    None if !pending.is_empty() => Some(pending[0].clone()),
                    None => holder
                        .as_ref()
                        .and_then(|h| order.iter().position(|u| u == h))
                        .map(|i| order[(i + 1) % order.len()].clone()),
                };
                if let Some(next) = next {
                    pending.retain(|u| *u != next);
                    *holder = Some(next);
                }
            }
            (Self::Owners { owner, .. }, Act::Transfer { node, to }) => {
                owner.insert(node.clone(), to.clone());
            }
            (Self::Layers { access, .. }, Act::Grant { layer, user }) => {
                access.entry(user.clone()).or_default().insert(layer.clone());
            }
            (Self::Layers { access, .. }, Act::Revoke { layer, user }) => {
                if let Some(s) = access.get_mut(user) {
                    s.remove(layer);
                    if s.is_empty() {
                        access.remove(user);
                    }
                }
            }
            (Self::Ranks { permitted, .. }, Act::Permit { user, nodes }) => {
                permitted.insert(user.clone(), nodes.iter().cloned().collect());
            }
            _ => {}
        }
    }

    fn joined(&mut self, user: &str) {
        if let Self::Turn { order, holder, .. } = self {
            if !order.iter().any(|u| u == user) {
                order.push(user.into());
            }
            if holder.is_none() {
                *holder = Some(user.into());
            }
        }
    }

    fn node_added(&mut self, creator: &str, node: &str, parent_id: &str) {
        match self {
            Self::Owners { owner, .. } if creator != SYSTEM => {
                owner.entry(node.into()).or_insert_with(|| creator.into());
            }
            Self::Layers { layers, .. } => {
                for nodes in layers.values_mut() {
                    if nodes.contains(parent_id) {
                        nodes.insert(node.into());
                    }
                }
            }
            Self::Ranks { root, parent, permitted }
                if Self::in_tree(root, parent, creator) && root.as_deref() != Some(creator) => {
                    permitted.entry(creator.into()).or_default().insert(node.into());
                }
            _ => {}
        }
    }

    fn nodes_removed(&mut self, gone: &BTreeSet<String>) {
        match self {
            Self::Owners { owner, .. } => owner.retain(|n, _| !gone.contains(n)),
            Self::Layers { layers, .. } => layers.values_mut().for_each(|s| s.retain(|n| !gone.contains(n))),
            Self::Ranks { permitted, .. } => {
                permitted.values_mut().for_each(|s| s.retain(|n| !gone.contains(n)));
                permitted.retain(|_, s| !s.is_empty());
            }
            _ => {}
        }
    }

    /// `None` when this rule hides nothing from `user`.
    fn sees(&self, user: &str) -> Option<BTreeSet<String>> {
        match self {
            Self::Open | Self::Turn { .. } => None,
            Self::Owners { owner_only: false, .. } => None,
            Self::Owners { owner, owner_only: true } => Some(owner.iter().filter(|(_, o)| *o == user).map(|(n, _)| n.clone()).collect()),
            Self::Layers { layers, access } => Some(
                access.get(user).into_iter().flatten().filter_map(|l| layers.get(l)).flatten().cloned().collect(),
            ),
            Self::Ranks { root, permitted, .. } => {
                if root.as_deref() == Some(user) {
                    None
                } else {
                    Some(permitted.get(user).cloned().unwrap_or_default())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Strategy {
    LastWriter,
    Mean,
    RejectSecond,
}

#[derive(Debug, Clone, PartialEq)]
struct Written {
    ts: u64,
    sender: String,
    node: String,
    path: String,
    value: Value,
}

/// The rule engine plus scene: submit events one at a time in acceptance order.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    pub grid: Grid,
    rules: Vec<Rule>,
    window_ms: u64,
    strategy: Strategy,
    log: Vec<Written>,
    /// Scene mutations applied so far.
    pub mutations: u64,
}

impl Engine {
    /// Builds from the JSON form of a session's settings (`models`, `conflict_window_ms`, `conflict_strategy`).
    pub fn from_settings(settings: &Value) -> Result<Self, String> {
        let rules = settings
            .get("models")
            .and_then(Value::as_array)
            .map(|ms| ms.iter().map(Rule::from_json).collect::<Result<Vec<_>, _>>())
            .transpose()?
            .unwrap_or_default();
        let strategy = match settings.get("conflict_strategy").and_then(Value::as_str).unwrap_or("LAST_WRITER_WINS") {
            "LAST_WRITER_WINS" => Strategy::LastWriter,
            "MERGE_MEAN" => Strategy::Mean,
            "REJECT_SECOND" => Strategy::RejectSecond,
            other => return Err(format!("unknown strategy `{other}`")),
        };
        let window_ms = settings.get("conflict_window_ms").and_then(Value::as_u64).unwrap_or(DEFAULT_WINDOW_MS);
        Ok(Self { grid: Grid::default(), rules, window_ms, strategy, log: Vec::new(), mutations: 0 })
    }

    pub fn joined(&mut self, user: &str) {
        self.rules.iter_mut().for_each(|r| r.joined(user));
    }

    /// Current turn holder, if a turn rule is configured.
    pub fn holder(&self) -> Option<&str> {
        self.rules.iter().find_map(|r| match r {
            Rule::Turn { holder, .. } => holder.as_deref(),
            _ => None,
        })
    }

    pub fn visible(&self, user: &str) -> BTreeSet<String> {
        let mut base: Option<BTreeSet<String>> = None;
        for r in &self.rules {
            if let Some(s) = r.sees(user) {
                base = Some(match base {
                    None => s,
                    Some(b) => b.intersection(&s).cloned().collect(),
                });
            }
        }
        let Some(base) = base else { return self.grid.ids() };
        let mut out = BTreeSet::from([ROOT.to_string()]);
        for n in base.into_iter().filter(|n| self.grid.contains(n)) {
            let mut cur = Some(n);
            while let Some(id) = cur {
                cur = self.grid.parent(&id).map(String::from);
                out.insert(id);
            }
        }
        out
    }

    pub fn view(&self, user: &str) -> View {
        self.grid.view(&self.visible(user))
    }

    /// Hierarchy verdict between two conflicting senders, if the hierarchy rule ranks them.
    pub fn prevails(&self, a: &str, b: &str) -> Option<String> {
        let parent = self.rules.iter().find_map(|r| match r {
            Rule::Ranks { parent, .. } => Some(parent),
            _ => None,
        })?;
        if Rule::above(parent, a, b) {
            Some(a.to_string())
        } else if Rule::above(parent, b, a) {
            Some(b.to_string())
        } else {
            None
        }
    }

    /// Rule-only verdict: `Err(rule_id)` from the first refusing rule.
    pub fn check(&self, sender: &str, act: &Act) -> Result<(), String> {
        self.rules.iter().try_for_each(|r| r.check(sender, act, &self.grid))
    }

    pub fn submit(&mut self, sender: &str, act: &Act, ts: u64) -> Outcome {
        if let Err(rule) = self.check(sender, act) {
            return Outcome::Rejected(rule);
        }
        match act {
            Act::Click { node } | Act::Drag { node } if !self.grid.contains(node) => return Outcome::Rejected("scene.unknown_node".into()),
            Act::Update { node, path, value } => {
                if let Err(rule) = self.grid.check_update(node, path, value) {
                    return Outcome::Rejected(rule.into());
                }
            }
            _ => {}
        }
        let mut outcome = Outcome::Accepted;
        let mut applied_sender = sender.to_string();
        let mut applied_value = None;
        if let Act::Update { node, path, value } = act {
            let horizon = ts.saturating_sub(self.window_ms * 2);
            self.log.retain(|w| w.ts >= horizon);
            let rival = self
                .log
                .iter()
                .rev()
                .find(|w| w.node == *node && w.path == *path && w.sender != sender && w.ts.abs_diff(ts) <= self.window_ms)
                .cloned();
            if let Some(first) = rival {
                match self.prevails(&first.sender, sender) {
                    Some(w) if w == first.sender => return Outcome::Rejected("conflict.hierarchy".into()),
                    Some(_) => {}
                    None => match self.strategy {
                        Strategy::RejectSecond => return Outcome::Rejected("conflict.reject_second".into()),
                        Strategy::LastWriter if ts < first.ts => return Outcome::Rejected("conflict.last_writer_wins".into()),
                        Strategy::LastWriter => {}
                        Strategy::Mean => match mean(&first.value, value) {
                            Some(m) => {
                                applied_value = Some(m);
                                applied_sender = SYSTEM.into();
                                outcome = Outcome::Merged;
                            }
                            // values that cannot be averaged fall back to last writer wins
                            None if ts < first.ts => return Outcome::Rejected("conflict.last_writer_wins".into()),
                            None => {}
                        },
                    },
                }
            }
        }
        match act {
            Act::Click { .. } | Act::Drag { .. } => {}
            Act::Update { node, path, value } => {
                let value = applied_value.unwrap_or_else(|| value.clone());
                self.grid.update(node, path, &value);
                self.log.push(Written { ts, sender: applied_sender, node: node.clone(), path: path.clone(), value });
                self.mutations += 1;
            }
            Act::Add { parent, id, node } => {
                if let Err(rule) = self.grid.add(parent, id, node.clone()) {
                    return Outcome::Rejected(rule.into());
                }
                self.rules.iter_mut().for_each(|r| r.node_added(sender, id, parent));
                self.mutations += 1;
            }
            Act::Remove { node } => {
                let gone = match self.grid.remove(node) {
                    Ok(g) => g.into_iter().collect(),
                    Err(rule) => return Outcome::Rejected(rule.into()),
                };
                self.rules.iter_mut().for_each(|r| r.nodes_removed(&gone));
                self.mutations += 1;
            }
            Act::SetState(tree) => {
                let old = self.grid.ids();
                let mut grid = Grid::default();
                for (parent, id, node) in tree {
                    if let Err(rule) = grid.add(parent, id, node.clone()) {
                        return Outcome::Rejected(rule.into());
                    }
                }
                let gone: BTreeSet<String> = old.iter().filter(|n| !grid.contains(n)).cloned().collect();
                self.grid = grid;
                self.rules.iter_mut().for_each(|r| r.nodes_removed(&gone));
                for (parent, id, _) in tree {
                    if !old.contains(id) {
                        self.rules.iter_mut().for_each(|r| r.node_added(sender, id, parent));
                    }
                }
                self.mutations += 1;
            }
            a if a.is_model() => self.rules.iter_mut().for_each(|r| r.apply(sender, a)),
            _ => unreachable!("every act is handled"),
        }
        outcome
    }
}

fn mean(a: &Value, b: &Value) -> Option<Value> {
    let (a, b) = (a.as_array()?, b.as_array()?);
    if a.len() != b.len() {
        return None;
    }
    let xs: Option<Vec<f64>> = a.iter().zip(b).map(|(x, y)| Some((x.as_f64()? + y.as_f64()?) / 2.0)).collect();
    Some(Value::from(xs?))
}

/// The provider's response to a click it can see, computed on its own view.
pub fn reaction(view: &View, provider: &str, node: &str, face_normal: Vec3, tool: &Tool) -> Option<(String, Act)> {
    let cell = view.get(node)?;
    cell.block.as_ref()?;
    let act = match tool {
        Tool::Shovel => Act::Remove { node: node.into() },
        Tool::Brush(b) => Act::Update { node: node.into(), path: format!("attributes.{BLOCK_ATTR}"), value: Value::String(b.clone()) },
        Tool::Adder(b) => {
            let c = cell.position;
            let pos = [c[0] + face_normal[0], c[1] + face_normal[1], c[2] + face_normal[2]];
            let id = cube_id(lattice(pos));
            if view.contains_key(&id) {
                return None;
            }
            Act::Add { parent: cell.parent.clone().unwrap_or_else(|| ROOT.into()), id, node: NewNode::cube(pos, b) }
        }
    };
    Some((provider.to_string(), act))
}

/// Oracle result for one timeline step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepVerdict {
    /// `None` for join and restart.
    pub outcome: Option<Outcome>,
    /// Provider reaction kind and its fate, when the step triggered one.
    pub reaction: Option<(String, Outcome)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub setup: Vec<Outcome>,
    pub steps: Vec<StepVerdict>,
    /// View of each late joiner right after its join step.
    pub joins: BTreeMap<usize, View>,
    pub engine: Engine,
    /// Final view per client name.
    pub views: BTreeMap<String, View>,
}

/// Session coordinates of an op's scene payload, in the oracle's terms.
pub fn act_of(op: &Op) -> Option<Act> {
    Some(match op {
        Op::Click { node, .. } => Act::Click { node: node.clone() },
        Op::Drag { node, .. } => Act::Drag { node: node.clone() },
        Op::Paint { node, block } => Act::Update { node: node.clone(), path: format!("attributes.{BLOCK_ATTR}"), value: Value::String(block.clone()) },
        Op::Nudge { node, position } => Act::Update { node: node.clone(), path: "transform.position".into(), value: Value::from(position.to_vec()) },
        Op::Add { parent, node, position, block } => Act::Add {
            parent: parent.clone(),
            id: node.clone(),
            node: match block {
                Some(b) => NewNode::cube(*position, b),
                None => NewNode::group(*position),
            },
        },
        Op::Remove { node } => Act::Remove { node: node.clone() },
        Op::RequestTurn => Act::RequestTurn,
        Op::PassTurn { to } => Act::PassTurn { to: to.clone() },
        Op::Transfer { node, to } => Act::Transfer { node: node.clone(), to: to.clone() },
        Op::Grant { layer, user } => Act::Grant { layer: layer.clone(), user: user.clone() },
        Op::Revoke { layer, user } => Act::Revoke { layer: layer.clone(), user: user.clone() },
        Op::Permit { user, nodes } => Act::Permit { user: user.clone(), nodes: nodes.clone() },
        Op::Join | Op::Restart => return None,
    })
}

/// Events the provider sends to build the initial world, in order.
pub fn world_acts(sc: &Scenario) -> Vec<Act> {
    let mut out = vec![Act::Add { parent: ROOT.into(), id: TERRAIN_ID.into(), node: NewNode::group([0.0; 3]) }];
    for x in 0..sc.world.size[0] as i64 {
        for y in 0..sc.world.size[1] as i64 {
            for z in 0..sc.world.height as i64 {
                let p = [x as f64, y as f64, z as f64];
                out.push(Act::Add { parent: TERRAIN_ID.into(), id: cube_id([x, y, z]), node: NewNode::cube(p, &sc.world.block) });
            }
        }
    }
    out
}

/// Replays a scenario step by step. Timestamps are the steps' `at_ms`.
pub fn replay(sc: &Scenario) -> Result<Replay, String> {
    let settings = serde_json::to_value(&sc.session).map_err(|e| e.to_string())?;
    let mut engine = Engine::from_settings(&settings)?;
    let provider = sc.clients.iter().find(|c| c.role == RoleSpec::Provider).ok_or("no provider")?.name.clone();
    let mut online: Vec<String> = Vec::new();
    for c in sc.clients.iter().filter(|c| !c.late) {
        engine.joined(&c.name);
        online.push(c.name.clone());
    }
    let setup = world_acts(sc).iter().map(|a| engine.submit(&provider, a, 0)).collect();
    let mut steps = Vec::new();
    let mut joins = BTreeMap::new();
    for (i, step) in sc.timeline.iter().enumerate() {
        match &step.op {
            Op::Join => {
                engine.joined(&step.client);
                online.push(step.client.clone());
                joins.insert(i, engine.view(&step.client));
                steps.push(StepVerdict { outcome: None, reaction: None });
            }
            Op::Restart => steps.push(StepVerdict { outcome: None, reaction: None }),
            op => {
                let act = act_of(op).expect("event op");
                // the provider sees the click only if the node is in its view at broadcast time
                let outcome = engine.submit(&step.client, &act, step.at_ms);
                let mut reacted = None;
                if let (Outcome::Accepted, Op::Click { node, face, tool: Some(tool) }) = (&outcome, op) {
                    if let Some((sender, r)) = reaction(&engine.view(&provider), &provider, node, face.normal(), tool) {
                        let o = engine.submit(&sender, &r, step.at_ms);
                        reacted = Some((r.kind().to_string(), o));
                    }
                }
                steps.push(StepVerdict { outcome: Some(outcome), reaction: reacted });
            }
        }
    }
    let views = online.iter().map(|u| (u.clone(), engine.view(u))).collect();
    Ok(Replay { setup, steps, joins, engine, views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn engine(models: Value) -> Engine {
        Engine::from_settings(&json!({ "models": models })).unwrap()
    }

    fn seeded(e: &mut Engine, by: &str) {
        let add = |parent: &str, id: &str| Act::Add { parent: parent.into(), id: id.into(), node: NewNode::cube([0.0; 3], "grass") };
        assert_eq!(e.submit(by, &add(ROOT, "a"), 0), Outcome::Accepted);
        assert_eq!(e.submit(by, &add("a", "b"), 0), Outcome::Accepted);
    }

    #[test]
    fn outcome_text_round_trips() {
        for o in [Outcome::Accepted, Outcome::Merged, Outcome::Rejected("turn.holder".into())] {
            assert_eq!(o.to_string().parse::<Outcome>().unwrap(), o);
        }
    }

    #[test]
    fn turn_rejects_off_turn_clicks_only() {
        let mut e = engine(json!([{"kind":"turn","order":["a","b"],"holder":"a"}]));
        seeded(&mut e, "p");
        let click = Act::Click { node: "a".into() };
        assert_eq!(e.submit("b", &click, 1), Outcome::Rejected("turn.holder".into()));
        assert_eq!(e.submit("a", &click, 1), Outcome::Accepted);
        assert_eq!(e.submit("b", &Act::RequestTurn, 2), Outcome::Accepted);
        assert_eq!(e.submit("a", &Act::PassTurn { to: None }, 3), Outcome::Accepted);
        assert_eq!(e.holder(), Some("b"));
        assert_eq!(e.submit("b", &Act::PassTurn { to: Some("z".into()) }, 4), Outcome::Rejected("turn.unknown_user".into()));
        assert_eq!(e.submit("b", &Act::PassTurn { to: None }, 5), Outcome::Accepted);
        assert_eq!(e.holder(), Some("a"));
    }

    #[test]
    fn ownership_hides_and_guards() {
        let mut e = engine(json!([{"kind":"ownership","visibility_mode":"OWNER_ONLY"}]));
        seeded(&mut e, "p");
        assert_eq!(e.visible("q"), BTreeSet::from([ROOT.to_string()]));
        assert_eq!(e.submit("q", &Act::Remove { node: "b".into() }, 1), Outcome::Rejected("ownership.owner".into()));
        assert_eq!(e.submit("p", &Act::Transfer { node: "b".into(), to: "q".into() }, 1), Outcome::Accepted);
        assert_eq!(e.visible("q"), BTreeSet::from([ROOT.into(), "a".into(), "b".into()]));
        assert_eq!(e.submit("q", &Act::Remove { node: "b".into() }, 2), Outcome::Accepted);
        assert_eq!(e.visible("q"), BTreeSet::from([ROOT.to_string()]));
    }

    #[test]
    fn merge_mean_and_hierarchy() {
        let mut e = Engine::from_settings(&json!({"conflict_strategy":"MERGE_MEAN"})).unwrap();
        seeded(&mut e, "p");
        let nudge = |x: f64| Act::Update { node: "a".into(), path: "transform.position".into(), value: json!([x, 0.0, 0.0]) };
        assert_eq!(e.submit("u", &nudge(1.0), 10), Outcome::Accepted);
        assert_eq!(e.submit("v", &nudge(3.0), 40), Outcome::Merged);
        assert_eq!(e.grid.position("a"), Some([2.0, 0.0, 0.0]));
        assert_eq!(e.submit("v", &nudge(5.0), 400), Outcome::Accepted);

        let mut h = Engine::from_settings(&json!({
            "models":[{"kind":"hierarchy","tree":{"root":"boss","parent":{"w":"boss"}}}],
            "conflict_strategy":"MERGE_MEAN"
        }))
        .unwrap();
        seeded(&mut h, "boss");
        h.submit("boss", &Act::Permit { user: "w".into(), nodes: vec!["a".into()] }, 0);
        assert_eq!(h.submit("boss", &nudge(1.0), 10), Outcome::Accepted);
        assert_eq!(h.submit("w", &nudge(3.0), 20), Outcome::Rejected("conflict.hierarchy".into()));
        assert_eq!(h.grid.position("a"), Some([1.0, 0.0, 0.0]));
    }

    #[test]
    fn empty_timeline_gives_the_initial_grid_twice() {
        let sc = Scenario::from_json(r#"{"name":"e","clients":[{"name":"p","role":"provider"}],"world":{"size":[2,3],"height":1,"block":"grass"}}"#).unwrap();
        let a = replay(&sc).unwrap();
        let b = replay(&sc).unwrap();
        assert_eq!(a, b);
        assert!(a.setup.iter().all(Outcome::is_accepted));
        assert_eq!(a.engine.grid.voxels().len(), 6);
        assert_eq!(a.engine.mutations, 7);
    }

    #[test]
    fn adder_reaction_lands_on_the_face_neighbor() {
        let sc = Scenario::from_json(r#"{"name":"e","clients":[{"name":"p","role":"provider"},{"name":"c"}],
            "timeline":[{"at_ms":5,"client":"c","op":{"kind":"click","node":"cube_1_1_0","face":"+z","tool":"adder:stone"}},
                        {"at_ms":6,"client":"c","op":{"kind":"click","node":"cube_1_1_0","face":"+x","tool":"adder:stone"}}]}"#)
        .unwrap();
        let r = replay(&sc).unwrap();
        assert_eq!(r.steps[0].reaction, Some(("add".into(), Outcome::Accepted)));
        assert_eq!(r.steps[1].reaction, None, "cube_2_1_0 is already there");
        assert_eq!(r.engine.grid.block("cube_1_1_1"), Some("stone"));
        assert_eq!(r.engine.grid.parent("cube_1_1_1"), Some(TERRAIN_ID));
    }
}
