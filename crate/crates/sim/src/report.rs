//! Run report, written as JSON by `sara-sim run --report`.

use serde::{Deserialize, Serialize};

use crate::oracle::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    /// Transport forced on every client, if any.
    pub transport: Option<String>,
    pub virtual_time: bool,
    pub setup: SetupRecord,
    pub steps: Vec<StepRecord>,
    pub late_joins: Vec<JoinRecord>,
    pub restarts: Vec<RestartRecord>,
    pub clients: Vec<ClientRecord>,
    pub accepted_count: usize,
    pub rejected_steps: Vec<usize>,
    pub final_revision: u64,
    pub final_hash: String,
    pub oracle: OracleRecord,
    pub expectation_failures: Vec<String>,
    /// Every checked mirror and the server state equal the oracle.
    pub converged: bool,
    pub passed: bool,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupRecord {
    pub events: usize,
    pub accepted: usize,
    pub matches_oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub at_ms: u64,
    pub client: String,
    pub op: String,
    /// Fate of the step's own event; absent for join and restart.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<Outcome>,
    /// Event the provider sent in response to a tool click.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reaction: Option<ReactionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub kind: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRecord {
    pub step: usize,
    pub client: String,
    pub nodes: usize,
    pub matches_oracle: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub step: usize,
    pub revision_before: u64,
    pub revision_after: u64,
    pub hash_before: String,
    pub hash_after: String,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub name: String,
    pub transport: String,
    pub convention: String,
    pub format: String,
    /// False when the mirror cannot be complete by design (a UDP client that missed full state).
    pub checked: bool,
    pub matches_oracle: bool,
    pub nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub verdicts_match: bool,
    pub server_state_match: bool,
    pub revision_match: bool,
    pub mismatches: Vec<String>,
}

impl Report {
    /// Copy with run-dependent timing zeroed, for byte comparisons.
    pub fn normalized(&self) -> Self {
        Self { wall_time_ms: 0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per failed check, for terminal output.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self.oracle.mismatches.clone();
        out.extend(self.expectation_failures.iter().cloned());
        for c in self.clients.iter().filter(|c| c.checked && !c.matches_oracle) {
            out.push(format!("client {}: {}", c.name, c.detail.clone().unwrap_or_default()));
        }
        for j in self.late_joins.iter().filter(|j| !j.matches_oracle) {
            out.push(format!("late join {} at step {}: {}", j.client, j.step, j.detail.clone().unwrap_or_default()));
        }
        for r in self.restarts.iter().filter(|r| !r.identical) {
            out.push(format!("restart at step {}: revision {} -> {}, hash changed", r.step, r.revision_before, r.revision_after));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{} seed={} steps={} accepted={} rejected={} revision={} hash={} converged={} passed={} ({} ms)",
            self.scenario,
            self.seed,
            self.steps.len(),
            self.accepted_count,
            self.rejected_steps.len(),
            self.final_revision,
            &self.final_hash[..self.final_hash.len().min(12)],
            self.converged,
            self.passed,
            self.wall_time_ms
        )
    }
}
