//! Scenario files: who connects, what the world looks like, and what happens when.

use std::collections::BTreeSet;
use std::path::Path;

use sara_core::protocol::{Convention, DeviceProfile, StateFormat};
use sara_server::SessionSettings;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{Face, Tool};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_session_id")]
    pub session_id: String,
    /// Models, conflict window and strategy; users are named by client name.
    #[serde(default)]
    pub session: SessionSettings,
    #[serde(default)]
    pub world: World,
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub timeline: Vec<Step>,
    #[serde(default)]
    pub expect: Expectations,
}

fn default_session_id() -> String {
    "voxel".into()
}

/// Initial terrain: a `size[0] x size[1]` floor, `height` cubes deep, z up.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub size: [u32; 2],
    pub height: u32,
    pub block: String,
}

impl Default for World {
    fn default() -> Self {
        Self { size: [4, 4], height: 1, block: "grass".into() }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RoleSpec {
    Provider,
    #[default]
    Consumer,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Tcp,
    Ws,
    Udp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Self::Tcp),
            "ws" | "websocket" => Ok(Self::Ws),
            "udp" => Ok(Self::Udp),
            other => Err(format!("unknown transport `{other}` (tcp, ws or udp)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    #[serde(default)]
    pub role: RoleSpec,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_convention")]
    pub convention: Convention,
    #[serde(default = "default_profile")]
    pub profile: DeviceProfile,
    #[serde(default = "default_format")]
    pub format: StateFormat,
    /// Connects only at its `join` step instead of before the timeline.
    #[serde(default)]
    pub late: bool,
}

fn default_convention() -> Convention {
    Convention::RightHanded
}

fn default_profile() -> DeviceProfile {
    DeviceProfile::DesktopPointer
}

fn default_format() -> StateFormat {
    StateFormat::CustomJson
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub at_ms: u64,
    /// Acting client; empty for `restart`.
    #[serde(default)]
    pub client: String,
    pub op: Op,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    /// Tap on a face of a cube with the selected tool.
    Click {
        node: String,
        face: Face,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool: Option<Tool>,
    },
    Drag { node: String, delta: [f64; 3] },
    /// Direct `attributes.block_type` update.
    Paint { node: String, block: String },
    /// Direct `transform.position` update, in session coordinates.
    Nudge { node: String, position: [f64; 3] },
    Add {
        parent: String,
        node: String,
        position: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        block: Option<String>,
    },
    Remove { node: String },
    RequestTurn,
    PassTurn {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<String>,
    },
    Transfer { node: String, to: String },
    Grant { layer: String, user: String },
    Revoke { layer: String, user: String },
    Permit { user: String, nodes: Vec<String> },
    Join,
    /// Kill the server and start it again from its snapshots.
    Restart,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Click { .. } => "click",
            Self::Drag { .. } => "drag",
            Self::Paint { .. } => "paint",
            Self::Nudge { .. } => "nudge",
            Self::Add { .. } => "add",
            Self::Remove { .. } => "remove",
            Self::RequestTurn => "request_turn",
            Self::PassTurn { .. } => "pass_turn",
            Self::Transfer { .. } => "transfer",
            Self::Grant { .. } => "grant",
            Self::Revoke { .. } => "revoke",
            Self::Permit { .. } => "permit",
            Self::Join => "join",
            Self::Restart => "restart",
        }
    }

    /// True for ops that put one event on the wire.
    pub fn sends_event(&self) -> bool {
        !matches!(self, Self::Join | Self::Restart)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// SHA-256 of the server's final canonical state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_hash: Option<String>,
    /// Timeline indices whose own event must be rejected, and no others.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_steps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_count: Option<usize>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn client(&self, name: &str) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| c.name == name)
    }

    pub fn provider(&self) -> &ClientSpec {
        self.clients.iter().find(|c| c.role == RoleSpec::Provider).expect("validated")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let mut names = BTreeSet::new();
        for c in &self.clients {
            if c.name.is_empty() || !names.insert(c.name.as_str()) {
                return bad(format!("client name `{}` is empty or repeated", c.name));
            }
        }
        let providers: Vec<_> = self.clients.iter().filter(|c| c.role == RoleSpec::Provider).collect();
        if providers.len() != 1 {
            return bad(format!("exactly one provider needed, found {}", providers.len()));
        }
        if providers[0].late {
            return bad("the provider must connect before the timeline".into());
        }
        if self.world.size.contains(&0) || self.world.height == 0 {
            return bad("world size and height must be positive".into());
        }
        sara_core::CompositeModel { models: self.session.models.clone() }
            .check_config()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;

        let mut joined: BTreeSet<&str> = self.clients.iter().filter(|c| !c.late).map(|c| c.name.as_str()).collect();
        let mut last = 0;
        for (i, step) in self.timeline.iter().enumerate() {
            if step.at_ms < last {
                return bad(format!("step {i}: timeline must be sorted by at_ms"));
            }
            last = step.at_ms;
            match &step.op {
                Op::Restart => continue,
                Op::Join => {
                    let Some(c) = self.client(&step.client) else { return bad(format!("step {i}: unknown client `{}`", step.client)) };
                    if !c.late || !joined.insert(c.name.as_str()) {
                        return bad(format!("step {i}: `{}` is not a late client or joined twice", c.name));
                    }
                }
                _ => {
                    if self.client(&step.client).is_none() {
                        return bad(format!("step {i}: unknown client `{}`", step.client));
                    }
                    if !joined.contains(step.client.as_str()) {
                        return bad(format!("step {i}: `{}` acts before joining", step.client));
                    }
                }
            }
        }
        Ok(())
    }
}
