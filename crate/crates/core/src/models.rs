//! Collaboration models: rule sets that validate events and filter what each user sees.
//!
//! A [`CompositeModel`] holds zero or more member models. An event is accepted
//! only if every member accepts it; the visible set of a user is the
//! intersection of the members' visible sets, closed under ancestors so the
//! filtered tree stays connected. Each member only judges the event kinds it
//! has an opinion about and passes everything else through.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{EventEnvelope, Payload, SYSTEM_SENDER};
use crate::scene::{NodeId, SessionStatus};
use crate::users::{UserDirectory, UserTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    /// Empty iff accepted.
    pub reason: String,
    /// Id of the deciding rule.
    pub rule_id: String,
}

impl Verdict {
    pub fn accept() -> Self {
        Self { accepted: true, reason: String::new(), rule_id: "accept".into() }
    }

    pub fn reject(rule_id: &str, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self { accepted: false, reason, rule_id: rule_id.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnState {
    #[serde(default)]
    pub order: Vec<String>,
    #[serde(default)]
    pub holder: Option<String>,
    #[serde(default)]
    pub pending_requests: Vec<String>,
}

impl TurnState {
    fn next_holder(&self, to_user: Option<&str>) -> Option<String> {
        if let Some(to) = to_user {
            return Some(to.to_string());
        }
        if let Some(first) = self.pending_requests.first() {
            return Some(first.clone());
        }
        let holder = self.holder.as_ref()?;
        let at = self.order.iter().position(|u| u == holder)?;
        Some(self.order[(at + 1) % self.order.len()].clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VisibilityMode {
    #[default]
    AllVisible,
    OwnerOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OwnershipState {
    #[serde(default)]
    pub owner_of: BTreeMap<NodeId, String>,
    #[serde(default)]
    pub visibility_mode: VisibilityMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    #[serde(default)]
    pub layers: BTreeMap<String, BTreeSet<NodeId>>,
    #[serde(default)]
    pub access: BTreeMap<String, BTreeSet<String>>,
}

impl LayerState {
    fn user_has_layer(&self, user: &str, layer: &str) -> bool {
        self.access.get(user).is_some_and(|ls| ls.contains(layer))
    }

    fn can_reach(&self, user: &str, node: &str) -> bool {
        self.layers.iter().any(|(layer, nodes)| nodes.contains(node) && self.user_has_layer(user, layer))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchyState {
    /// Empty tree means "use the users-service hierarchy".
    #[serde(default)]
    pub tree: UserTree,
    #[serde(default)]
    pub permitted_nodes: BTreeMap<String, BTreeSet<NodeId>>,
}

impl HierarchyState {
    fn effective_tree(&self, users: &dyn UserDirectory) -> UserTree {
        if self.tree.is_empty() {
            users.hierarchy().unwrap_or_default()
        } else {
            self.tree.clone()
        }
    }

    fn permits(&self, tree: &UserTree, user: &str, node: &str) -> bool {
        tree.root.as_deref() == Some(user) || self.permitted_nodes.get(user).is_some_and(|s| s.contains(node))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollaborationModel {
    /// FIFO with no rules; the same as leaving the model out.
    Unconstrained,
    Turn(TurnState),
    Ownership(OwnershipState),
    Layer(LayerState),
    Hierarchy(HierarchyState),
}

impl CollaborationModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Unconstrained => "unconstrained",
            Self::Turn(_) => "turn",
            Self::Ownership(_) => "ownership",
            Self::Layer(_) => "layer",
            Self::Hierarchy(_) => "hierarchy",
        }
    }
}

/// What a rule check can see besides the event itself.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub status: &'a SessionStatus,
    pub users: &'a dyn UserDirectory,
}

/// Ordered list of member models; empty means unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositeModel {
    #[serde(default)]
    pub models: Vec<CollaborationModel>,
}

enum Access<'a> {
    Node(&'a str),
    /// Adding below a parent; the root is an open canvas for node-scoped models.
    Parent(&'a str),
    WholeTree,
}

fn node_access(payload: &Payload) -> Option<Access<'_>> {
    match payload {
        Payload::Click { node_id, .. }
        | Payload::Drag { node_id, .. }
        | Payload::IncrementalUpdate { node_id, .. }
        | Payload::RemoveNode { node_id } => Some(Access::Node(node_id)),
        Payload::RawInteraction(raw) => Some(Access::Node(&raw.node_id)),
        Payload::AddNode { parent_id, .. } => Some(Access::Parent(parent_id)),
        Payload::SetSessionState { .. } => Some(Access::WholeTree),
        _ => None,
    }
}

fn check_access(
    access: Access<'_>,
    ctx: Context<'_>,
    rule_id: &str,
    allowed: impl Fn(&str) -> bool,
    describe: &str,
) -> Verdict {
    let denied = |node: &str| Verdict::reject(rule_id, format!("{describe} node `{node}`"));
    match access {
        Access::Node(node) if !allowed(node) => denied(node),
        Access::Parent(parent) if parent != ctx.status.root_id() && !allowed(parent) => denied(parent),
        Access::WholeTree => match ctx.status.nodes().map(|n| n.id.as_str()).find(|id| *id != ctx.status.root_id() && !allowed(id)) {
            Some(node) => denied(node),
            None => Verdict::accept(),
        },
        _ => Verdict::accept(),
    }
}

impl CollaborationModel {
    fn check(&self, e: &EventEnvelope, ctx: Context<'_>) -> Verdict {
        let sender = e.sender_id.as_str();
        match self {
            Self::Unconstrained => Verdict::accept(),
            Self::Turn(turn) => match &e.payload {
                p if p.is_interaction() => {
                    if turn.holder.as_deref() == Some(sender) {
                        Verdict::accept()
                    } else {
                        Verdict::reject("turn.holder", format!("`{sender}` is not the token holder"))
                    }
                }
                Payload::RequestTurn {} if !turn.order.iter().any(|u| u == sender) => {
                    Verdict::reject("turn.member", format!("`{sender}` is not in the turn order"))
                }
                Payload::PassTurn { to_user } => {
                    if turn.holder.as_deref() != Some(sender) {
                        Verdict::reject("turn.holder", format!("`{sender}` cannot pass a turn it does not hold"))
                    } else if let Some(to) = to_user.as_deref().filter(|to| !turn.order.iter().any(|u| u == to)) {
                        Verdict::reject("turn.unknown_user", format!("`{to}` is not in the turn order"))
                    } else {
                        Verdict::accept()
                    }
                }
                _ => Verdict::accept(),
            },
            Self::Ownership(own) => match &e.payload {
                Payload::TransferOwnership { node_id, .. } => {
                    if own.owner_of.get(node_id).map(String::as_str) == Some(sender) {
                        Verdict::accept()
                    } else {
                        Verdict::reject("ownership.transfer", format!("`{sender}` does not own `{node_id}`"))
                    }
                }
                p => match node_access(p) {
                    Some(access) => check_access(
                        access,
                        ctx,
                        "ownership.owner",
                        |n| own.owner_of.get(n).map(String::as_str) == Some(sender),
                        &format!("`{sender}` does not own"),
                    ),
                    None => Verdict::accept(),
                },
            },
            Self::Layer(layer) => match &e.payload {
                Payload::GrantLayerAccess { layer_id, .. } | Payload::RevokeLayerAccess { layer_id, .. } => {
                    if !layer.layers.contains_key(layer_id) {
                        Verdict::reject("layer.unknown", format!("unknown layer `{layer_id}`"))
                    } else if !layer.user_has_layer(sender, layer_id) {
                        Verdict::reject("layer.grant", format!("`{sender}` has no access to layer `{layer_id}`"))
                    } else {
                        Verdict::accept()
                    }
                }
                p => match node_access(p) {
                    Some(access) => check_access(
                        access,
                        ctx,
                        "layer.access",
                        |n| layer.can_reach(sender, n),
                        &format!("`{sender}` has no layer granting"),
                    ),
                    None => Verdict::accept(),
                },
            },
            Self::Hierarchy(h) => {
                let tree = h.effective_tree(ctx.users);
                match &e.payload {
                    Payload::SetSubordinatePermissions { user_id, .. } => {
                        if tree.is_ancestor(sender, user_id) {
                            Verdict::accept()
                        } else {
                            Verdict::reject("hierarchy.ancestor", format!("`{sender}` is not above `{user_id}`"))
                        }
                    }
                    p => match node_access(p) {
                        Some(access) => check_access(
                            access,
                            ctx,
                            "hierarchy.permitted",
                            |n| h.permits(&tree, sender, n),
                            &format!("`{sender}` is not permitted on"),
                        ),
                        None => Verdict::accept(),
                    },
                }
            }
        }
    }

    fn apply(&mut self, payload: &Payload, sender: &str) {
        match (self, payload) {
            (Self::Turn(turn), Payload::RequestTurn {}) => {
                if turn.holder.as_deref() != Some(sender) && !turn.pending_requests.iter().any(|u| u == sender) {
                    turn.pending_requests.push(sender.to_string());
                }
            }
            (Self::Turn(turn), Payload::PassTurn { to_user }) => {
                if let Some(next) = turn.next_holder(to_user.as_deref()) {
                    turn.pending_requests.retain(|u| *u != next);
                    turn.holder = Some(next);
                }
            }
            (Self::Ownership(own), Payload::TransferOwnership { node_id, to_user }) => {
                own.owner_of.insert(node_id.clone(), to_user.clone());
            }
            (Self::Layer(layer), Payload::GrantLayerAccess { layer_id, user_id }) => {
                layer.access.entry(user_id.clone()).or_default().insert(layer_id.clone());
            }
            (Self::Layer(layer), Payload::RevokeLayerAccess { layer_id, user_id }) => {
                if let Some(set) = layer.access.get_mut(user_id) {
                    set.remove(layer_id);
                    if set.is_empty() {
                        layer.access.remove(user_id);
                    }
                }
            }
            (Self::Hierarchy(h), Payload::SetSubordinatePermissions { user_id, node_ids }) => {
                h.permitted_nodes.insert(user_id.clone(), node_ids.iter().cloned().collect());
            }
            _ => {}
        }
    }

    fn visible(&self, user: &str, status: &SessionStatus, users: &dyn UserDirectory) -> Option<BTreeSet<NodeId>> {
        match self {
            Self::Unconstrained | Self::Turn(_) => None,
            Self::Ownership(own) => match own.visibility_mode {
                VisibilityMode::AllVisible => None,
                VisibilityMode::OwnerOnly => Some(
                    own.owner_of.iter().filter(|(_, o)| o.as_str() == user).map(|(n, _)| n.clone()).collect(),
                ),
            },
            Self::Layer(layer) => Some(
                layer
                    .access
                    .get(user)
                    .into_iter()
                    .flatten()
                    .filter_map(|l| layer.layers.get(l))
                    .flatten()
                    .cloned()
                    .collect(),
            ),
            Self::Hierarchy(h) => {
                let tree = h.effective_tree(users);
                if tree.root.as_deref() == Some(user) {
                    None
                } else {
                    Some(h.permitted_nodes.get(user).cloned().unwrap_or_default())
                }
            }
        }
        .map(|set| set.into_iter().filter(|n| status.contains(n)).collect())
    }
}

impl CompositeModel {
    pub fn unconstrained() -> Self {
        Self::default()
    }

    pub fn new(models: Vec<CollaborationModel>) -> Result<Self, ModelError> {
        let composite = Self { models };
        composite.check_config()?;
        Ok(composite)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let composite: Self = serde_json::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        composite.check_config()?;
        Ok(composite)
    }

    pub fn check_config(&self) -> Result<(), ModelError> {
        let turns = self.models.iter().filter(|m| matches!(m, CollaborationModel::Turn(_))).count();
        if turns > 1 {
            return Err(ModelError::InvalidConfig("at most one turn model per composite".into()));
        }
        for m in &self.models {
            match m {
                CollaborationModel::Turn(t) => {
                    if let Some(h) = &t.holder {
                        if !t.order.contains(h) {
                            return Err(ModelError::InvalidConfig(format!("turn holder `{h}` not in order")));
                        }
                    }
                }
                CollaborationModel::Hierarchy(h) => h.tree.validate().map_err(ModelError::InvalidConfig)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_unconstrained(&self) -> bool {
        self.models.iter().all(|m| matches!(m, CollaborationModel::Unconstrained))
    }

    pub fn turn(&self) -> Option<&TurnState> {
        self.models.iter().find_map(|m| match m {
            CollaborationModel::Turn(t) => Some(t),
            _ => None,
        })
    }

    /// Accepted iff every member accepts; names the first rejecting rule otherwise.
    pub fn validate(&self, e: &EventEnvelope, ctx: Context<'_>) -> Verdict {
        if matches!(
            e.payload,
            Payload::NewUserConnection { .. } | Payload::ConnectToSession { .. } | Payload::Ack { .. } | Payload::EventRejected { .. }
        ) {
            return Verdict::accept();
        }
        self.models.iter().map(|m| m.check(e, ctx)).find(|v| !v.accepted).unwrap_or_else(Verdict::accept)
    }

    /// Validates and applies a model-control event atomically.
    pub fn apply_model_event(&mut self, payload: &Payload, sender: &str, ctx: Context<'_>) -> Result<(), Verdict> {
        if !payload.is_model_control() {
            return Err(Verdict::reject("model.not_control", format!("`{}` is not a model event", payload.type_tag())));
        }
        let probe = EventEnvelope { event_id: String::new(), sender_id: sender.into(), session_id: String::new(), ts: 0, payload: payload.clone() };
        let verdict = self.validate(&probe, ctx);
        if !verdict.accepted {
            return Err(verdict);
        }
        for m in &mut self.models {
            m.apply(payload, sender);
        }
        Ok(())
    }

    /// Intersection of member visible sets, closed under ancestors, always with the root.
    pub fn visible_nodes(&self, user: &str, status: &SessionStatus, users: &dyn UserDirectory) -> BTreeSet<NodeId> {
        let mut base: Option<BTreeSet<NodeId>> = None;
        for m in &self.models {
            if let Some(set) = m.visible(user, status, users) {
                base = Some(match base {
                    None => set,
                    Some(prev) => prev.intersection(&set).cloned().collect(),
                });
            }
        }
        let Some(base) = base else { return status.node_ids() };
        let mut out = BTreeSet::new();
        out.insert(status.root_id().to_string());
        for id in base {
            if out.insert(id.clone()) {
                for a in status.ancestors(&id) {
                    if !out.insert(a) {
                        break;
                    }
                }
            }
        }
        out
    }

    /// Winner of a conflict by hierarchy: a strict ancestor prevails; otherwise a tie (`None`).
    pub fn higher_priority(&self, a: &str, b: &str, users: &dyn UserDirectory) -> Option<String> {
        let h = self.models.iter().find_map(|m| match m {
            CollaborationModel::Hierarchy(h) => Some(h),
            _ => None,
        })?;
        let tree = h.effective_tree(users);
        if tree.is_ancestor(a, b) {
            Some(a.to_string())
        } else if tree.is_ancestor(b, a) {
            Some(b.to_string())
        } else {
            None
        }
    }

    /// A user joined the session: turn order follows connection order.
    pub fn on_user_joined(&mut self, user: &str) {
        for m in &mut self.models {
            if let CollaborationModel::Turn(t) = m {
                if !t.order.iter().any(|u| u == user) {
                    t.order.push(user.to_string());
                }
                if t.holder.is_none() {
                    t.holder = Some(user.to_string());
                }
            }
        }
    }

    /// Bookkeeping after a node was attached: the creator owns it, it joins its parent's
    /// layers, and a non-root creator gains permission on it.
    pub fn on_node_added(&mut self, creator: &str, node: &str, parent: &str, users: &dyn UserDirectory) {
        for m in &mut self.models {
            match m {
                CollaborationModel::Ownership(own) if creator != SYSTEM_SENDER => {
                    own.owner_of.entry(node.to_string()).or_insert_with(|| creator.to_string());
                }
                CollaborationModel::Layer(layer) => {
                    for nodes in layer.layers.values_mut() {
                        if nodes.contains(parent) {
                            nodes.insert(node.to_string());
                        }
                    }
                }
                CollaborationModel::Hierarchy(h) => {
                    let tree = h.effective_tree(users);
                    if tree.contains(creator) && tree.root.as_deref() != Some(creator) {
                        h.permitted_nodes.entry(creator.to_string()).or_default().insert(node.to_string());
                    }
                }
                _ => {}
            }
        }
    }

    pub fn on_nodes_removed(&mut self, removed: &[NodeId]) {
        let gone: BTreeSet<&str> = removed.iter().map(String::as_str).collect();
        for m in &mut self.models {
            match m {
                CollaborationModel::Ownership(own) => own.owner_of.retain(|n, _| !gone.contains(n.as_str())),
                CollaborationModel::Layer(layer) => {
                    for nodes in layer.layers.values_mut() {
                        nodes.retain(|n| !gone.contains(n.as_str()));
                    }
                }
                CollaborationModel::Hierarchy(h) => {
                    for nodes in h.permitted_nodes.values_mut() {
                        nodes.retain(|n| !gone.contains(n.as_str()));
                    }
                    h.permitted_nodes.retain(|_, s| !s.is_empty());
                }
                CollaborationModel::Unconstrained | CollaborationModel::Turn(_) => {}
            }
        }
    }

    /// Bookkeeping after a full state replacement by `sender`.
    pub fn on_state_replaced(&mut self, sender: &str, old: &BTreeSet<NodeId>, new_status: &SessionStatus, users: &dyn UserDirectory) {
        let removed: Vec<NodeId> = old.iter().filter(|n| !new_status.contains(n)).cloned().collect();
        self.on_nodes_removed(&removed);
        for node in new_status.preorder() {
            if let Some(parent) = &node.parent_id {
                if !old.contains(&node.id) {
                    self.on_node_added(sender, &node.id, parent, users);
                }
            }
        }
    }

    /// Rewrites every user reference, e.g. to turn scenario names into registered ids.
    pub fn map_users(&mut self, f: impl Fn(&str) -> String) {
        for m in &mut self.models {
            match m {
                CollaborationModel::Turn(t) => {
                    t.order.iter_mut().for_each(|u| *u = f(u));
                    t.pending_requests.iter_mut().for_each(|u| *u = f(u));
                    if let Some(h) = &mut t.holder {
                        *h = f(h);
                    }
                }
                CollaborationModel::Ownership(own) => own.owner_of.values_mut().for_each(|u| *u = f(u)),
                CollaborationModel::Layer(layer) => {
                    layer.access = std::mem::take(&mut layer.access).into_iter().map(|(u, s)| (f(&u), s)).collect();
                }
                CollaborationModel::Hierarchy(h) => {
                    h.tree.root = h.tree.root.as_deref().map(&f);
                    h.tree.parent = std::mem::take(&mut h.tree.parent).into_iter().map(|(c, p)| (f(&c), f(&p))).collect();
                    h.permitted_nodes = std::mem::take(&mut h.permitted_nodes).into_iter().map(|(u, s)| (f(&u), s)).collect();
                }
                CollaborationModel::Unconstrained => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Node, ROOT_ID};
    use crate::users::NoDirectory;

    fn status_with(nodes: &[&str]) -> SessionStatus {
        let mut s = SessionStatus::new();
        for n in nodes {
            s.attach_node(ROOT_ID, Node::new(*n)).unwrap();
        }
        s
    }

    fn click(sender: &str, node: &str) -> EventEnvelope {
        EventEnvelope::new(sender, "s", Payload::Click { node_id: node.into(), world_point: None, tool: None })
    }

    fn ctx(status: &SessionStatus) -> Context<'_> {
        Context { status, users: &NoDirectory }
    }

    fn turn(holder: &str, order: &[&str]) -> CollaborationModel {
        CollaborationModel::Turn(TurnState {
            order: order.iter().map(|s| s.to_string()).collect(),
            holder: Some(holder.into()),
            pending_requests: vec![],
        })
    }

    fn ownership(pairs: &[(&str, &str)], mode: VisibilityMode) -> CollaborationModel {
        CollaborationModel::Ownership(OwnershipState {
            owner_of: pairs.iter().map(|(n, u)| (n.to_string(), u.to_string())).collect(),
            visibility_mode: mode,
        })
    }

    #[test]
    fn off_turn_click_rejected() {
        let s = status_with(&["n1"]);
        let c = CompositeModel::new(vec![turn("u1", &["u1", "u2"])]).unwrap();
        let v = c.validate(&click("u2", "n1"), ctx(&s));
        assert!(!v.accepted);
        assert_eq!(v.rule_id, "turn.holder");
        assert!(v.reason.contains("not the token holder"));
        assert!(c.validate(&click("u1", "n1"), ctx(&s)).accepted);
    }

    #[test]
    fn unconstrained_accepts_everything() {
        let s = status_with(&["n1"]);
        let c = CompositeModel::unconstrained();
        assert!(c.validate(&click("anyone", "n1"), ctx(&s)).accepted);
        let pass = EventEnvelope::new("x", "s", Payload::PassTurn { to_user: None });
        assert!(c.validate(&pass, ctx(&s)).accepted);
    }

    #[test]
    fn connection_events_always_accepted() {
        let s = status_with(&[]);
        let c = CompositeModel::new(vec![turn("u1", &["u1"]), ownership(&[], VisibilityMode::OwnerOnly)]).unwrap();
        let e = EventEnvelope::new(
            "u2",
            "s",
            Payload::ConnectToSession { session_id: "s".into(), user_id: "u2".into(), reception_format: Default::default() },
        );
        assert!(c.validate(&e, ctx(&s)).accepted);
    }

    /// Enumerates every (owner map, holder, sender, node) over 2 users × 2 nodes and
    /// compares against each rule applied on its own.
    #[test]
    fn ownership_and_turn_enumeration() {
        let users = ["u1", "u2"];
        let nodes = ["n1", "n2"];
        let s = status_with(&nodes);
        let owner_choices = [None, Some("u1"), Some("u2")];
        for o1 in owner_choices {
            for o2 in owner_choices {
                for holder in users {
                    let mut pairs = vec![];
                    if let Some(o) = o1 {
                        pairs.push(("n1", o));
                    }
                    if let Some(o) = o2 {
                        pairs.push(("n2", o));
                    }
                    let c = CompositeModel::new(vec![
                        ownership(&pairs, VisibilityMode::AllVisible),
                        turn(holder, &users),
                    ])
                    .unwrap();
                    for sender in users {
                        for node in nodes {
                            let owner = if node == "n1" { o1 } else { o2 };
                            let expected = owner == Some(sender) && holder == sender;
                            let got = c.validate(&click(sender, node), ctx(&s)).accepted;
                            assert_eq!(got, expected, "owner={owner:?} holder={holder} sender={sender} node={node}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pass_turn_wraps_and_requires_holder() {
        let s = status_with(&[]);
        let mut c = CompositeModel::new(vec![turn("u1", &["u1", "u2"])]).unwrap();
        let pass = Payload::PassTurn { to_user: None };
        assert!(c.apply_model_event(&pass, "u2", ctx(&s)).is_err());
        c.apply_model_event(&pass, "u1", ctx(&s)).unwrap();
        assert_eq!(c.turn().unwrap().holder.as_deref(), Some("u2"));
        c.apply_model_event(&pass, "u2", ctx(&s)).unwrap();
        assert_eq!(c.turn().unwrap().holder.as_deref(), Some("u1"));
    }

    #[test]
    fn pending_requests_take_priority_over_order() {
        let s = status_with(&[]);
        let mut c = CompositeModel::new(vec![turn("u1", &["u1", "u2", "u3"])]).unwrap();
        c.apply_model_event(&Payload::RequestTurn {}, "u3", ctx(&s)).unwrap();
        assert!(c.apply_model_event(&Payload::RequestTurn {}, "stranger", ctx(&s)).is_err());
        c.apply_model_event(&Payload::PassTurn { to_user: None }, "u1", ctx(&s)).unwrap();
        let t = c.turn().unwrap();
        assert_eq!(t.holder.as_deref(), Some("u3"));
        assert!(t.pending_requests.is_empty());
        assert!(c.apply_model_event(&Payload::PassTurn { to_user: Some("ghost".into()) }, "u3", ctx(&s)).is_err());
    }

    #[test]
    fn transfer_then_click_oracle_replay() {
        let s = status_with(&["n1"]);
        let mut c = CompositeModel::new(vec![ownership(&[("n1", "u1")], VisibilityMode::AllVisible)]).unwrap();
        assert!(!c.validate(&click("u2", "n1"), ctx(&s)).accepted);
        let transfer = Payload::TransferOwnership { node_id: "n1".into(), to_user: "u2".into() };
        assert!(c.apply_model_event(&transfer, "u2", ctx(&s)).is_err());
        c.apply_model_event(&transfer, "u1", ctx(&s)).unwrap();
        assert!(c.validate(&click("u2", "n1"), ctx(&s)).accepted);
        assert!(!c.validate(&click("u1", "n1"), ctx(&s)).accepted);
    }

    #[test]
    fn layer_visibility_and_grants() {
        let s = status_with(&["n1", "n2"]);
        let mut c = CompositeModel::new(vec![CollaborationModel::Layer(LayerState {
            layers: [("L1".to_string(), ["n1".to_string()].into()), ("L2".to_string(), ["n2".to_string()].into())].into(),
            access: [("u1".to_string(), ["L1".to_string()].into())].into(),
        })])
        .unwrap();
        let vis = c.visible_nodes("u1", &s, &NoDirectory);
        assert_eq!(vis, ["n1".to_string(), ROOT_ID.to_string()].into());
        let grant = Payload::GrantLayerAccess { layer_id: "L2".into(), user_id: "u1".into() };
        assert_eq!(c.apply_model_event(&grant, "u1", ctx(&s)).unwrap_err().rule_id, "layer.grant");
        let share = Payload::GrantLayerAccess { layer_id: "L1".into(), user_id: "u2".into() };
        c.apply_model_event(&share, "u1", ctx(&s)).unwrap();
        assert!(c.validate(&click("u2", "n1"), ctx(&s)).accepted);
        assert!(!c.validate(&click("u2", "n2"), ctx(&s)).accepted);
        let unknown = Payload::GrantLayerAccess { layer_id: "L9".into(), user_id: "u2".into() };
        assert_eq!(c.apply_model_event(&unknown, "u1", ctx(&s)).unwrap_err().rule_id, "layer.unknown");
    }

    #[test]
    fn ownership_owner_only_visibility() {
        let s = status_with(&["n1", "n2"]);
        let c = CompositeModel::new(vec![ownership(&[("n1", "u1"), ("n2", "u2")], VisibilityMode::OwnerOnly)]).unwrap();
        assert_eq!(c.visible_nodes("u1", &s, &NoDirectory), ["n1".to_string(), ROOT_ID.to_string()].into());
        let all = CompositeModel::new(vec![ownership(&[("n1", "u1")], VisibilityMode::AllVisible)]).unwrap();
        assert_eq!(all.visible_nodes("u1", &s, &NoDirectory).len(), 3);
    }

    fn hierarchy() -> CollaborationModel {
        let mut tree = UserTree::with_root("boss");
        tree.set_parent("a", "boss").unwrap();
        tree.set_parent("b", "boss").unwrap();
        CollaborationModel::Hierarchy(HierarchyState { tree, permitted_nodes: [("a".to_string(), ["n1".to_string()].into())].into() })
    }

    #[test]
    fn hierarchy_root_sees_all_and_priority() {
        let s = status_with(&["n1", "n2"]);
        let c = CompositeModel::new(vec![hierarchy()]).unwrap();
        assert_eq!(c.visible_nodes("boss", &s, &NoDirectory), s.node_ids());
        assert_eq!(c.visible_nodes("a", &s, &NoDirectory).len(), 2);
        assert_eq!(c.higher_priority("boss", "a", &NoDirectory).as_deref(), Some("boss"));
        assert_eq!(c.higher_priority("a", "boss", &NoDirectory).as_deref(), Some("boss"));
        assert_eq!(c.higher_priority("a", "b", &NoDirectory), None);
        assert_eq!(CompositeModel::unconstrained().higher_priority("boss", "a", &NoDirectory), None);
    }

    #[test]
    fn subordinate_permissions_need_ancestry() {
        let s = status_with(&["n1", "n2"]);
        let mut c = CompositeModel::new(vec![hierarchy()]).unwrap();
        let set = Payload::SetSubordinatePermissions { user_id: "b".into(), node_ids: vec!["n2".into()] };
        assert_eq!(c.apply_model_event(&set, "a", ctx(&s)).unwrap_err().rule_id, "hierarchy.ancestor");
        c.apply_model_event(&set, "boss", ctx(&s)).unwrap();
        assert!(c.validate(&click("b", "n2"), ctx(&s)).accepted);
        assert!(!c.validate(&click("b", "n1"), ctx(&s)).accepted);
    }

    #[test]
    fn hierarchy_falls_back_to_directory() {
        let s = status_with(&["n1"]);
        let c = CompositeModel::new(vec![CollaborationModel::Hierarchy(HierarchyState::default())]).unwrap();
        let dir = UserTree::with_root("chief");
        let cx = Context { status: &s, users: &dir };
        assert!(c.validate(&click("chief", "n1"), cx).accepted);
        assert!(!c.validate(&click("other", "n1"), cx).accepted);
    }

    #[test]
    fn at_most_one_turn_model() {
        assert!(CompositeModel::new(vec![turn("u", &["u"]), turn("u", &["u"])]).is_err());
        assert!(CompositeModel::new(vec![turn("x", &["u"])]).is_err());
    }

    #[test]
    fn config_json_shape() {
        let c = CompositeModel::from_json(
            r#"{"models":[{"kind":"turn"},{"kind":"layer","layers":{"L1":["n1"]},"access":{"u1":["L1"]}}]}"#,
        )
        .unwrap();
        assert_eq!(c.models.len(), 2);
        assert_eq!(c.models[0].kind(), "turn");
        let plain = CompositeModel::from_json(r#"{"models":[{"kind":"unconstrained"}]}"#).unwrap();
        assert!(plain.is_unconstrained());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(CompositeModel::from_json(&text).unwrap(), c);
    }

    #[test]
    fn join_and_node_hooks() {
        let mut s = status_with(&["g"]);
        let mut c = CompositeModel::new(vec![
            CollaborationModel::Turn(TurnState::default()),
            ownership(&[], VisibilityMode::AllVisible),
            CollaborationModel::Layer(LayerState { layers: [("L".to_string(), ["g".to_string()].into())].into(), access: BTreeMap::new() }),
        ])
        .unwrap();
        c.on_user_joined("u1");
        c.on_user_joined("u2");
        c.on_user_joined("u1");
        assert_eq!(c.turn().unwrap().order, vec!["u1".to_string(), "u2".to_string()]);
        assert_eq!(c.turn().unwrap().holder.as_deref(), Some("u1"));

        s.attach_node("g", Node::new("c")).unwrap();
        c.on_node_added("u2", "c", "g", &NoDirectory);
        match &c.models[1] {
            CollaborationModel::Ownership(o) => assert_eq!(o.owner_of["c"], "u2"),
            _ => unreachable!(),
        }
        match &c.models[2] {
            CollaborationModel::Layer(l) => assert!(l.layers["L"].contains("c")),
            _ => unreachable!(),
        }
        c.on_nodes_removed(&["c".to_string()]);
        match &c.models[1] {
            CollaborationModel::Ownership(o) => assert!(o.owner_of.is_empty()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn visible_set_is_ancestor_closed() {
        let mut s = SessionStatus::new();
        s.attach_node(ROOT_ID, Node::new("g")).unwrap();
        s.attach_node("g", Node::new("leaf")).unwrap();
        let c = CompositeModel::new(vec![ownership(&[("leaf", "u")], VisibilityMode::OwnerOnly)]).unwrap();
        let vis = c.visible_nodes("u", &s, &NoDirectory);
        assert_eq!(vis, ["g".to_string(), "leaf".to_string(), ROOT_ID.to_string()].into());
        s.filtered(&vis).check_consistency().unwrap();
    }
}
