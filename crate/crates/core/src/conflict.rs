//! Detection and resolution of concurrent incremental updates.
//!
//! Two updates conflict when they address the same `(node, property)` pair,
//! come from different senders and carry server timestamps at most
//! `window_ms` apart. Timestamps are always server-receipt times.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::models::{CompositeModel, Verdict};
use crate::protocol::{derived_id, EventEnvelope, Payload, SYSTEM_SENDER};
use crate::users::UserDirectory;

pub const DEFAULT_WINDOW_MS: u64 = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConflictStrategy {
    #[default]
    LastWriterWins,
    MergeMean,
    RejectSecond,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConflictError {
    #[error("cannot merge `{path}`: {detail}")]
    MergeShapeMismatch { path: String, detail: String },
}

/// An accepted incremental update as remembered by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub event_id: String,
    pub sender_id: String,
    pub session_id: String,
    pub ts: u64,
    pub node_id: String,
    pub property_path: String,
    pub new_value: Value,
}

impl LogEntry {
    pub fn from_event(e: &EventEnvelope) -> Option<Self> {
        match &e.payload {
            Payload::IncrementalUpdate { node_id, property_path, new_value } => Some(Self {
                event_id: e.event_id.clone(),
                sender_id: e.sender_id.clone(),
                session_id: e.session_id.clone(),
                ts: e.ts,
                node_id: node_id.clone(),
                property_path: property_path.clone(),
                new_value: new_value.clone(),
            }),
            _ => None,
        }
    }

    pub fn to_event(&self) -> EventEnvelope {
        EventEnvelope {
            event_id: self.event_id.clone(),
            sender_id: self.sender_id.clone(),
            session_id: self.session_id.clone(),
            ts: self.ts,
            payload: Payload::IncrementalUpdate {
                node_id: self.node_id.clone(),
                property_path: self.property_path.clone(),
                new_value: self.new_value.clone(),
            },
        }
    }
}

/// Recent accepted updates, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConflictLog {
    entries: VecDeque<LogEntry>,
}

impl ConflictLog {
    pub fn record(&mut self, e: &EventEnvelope) {
        if let Some(entry) = LogEntry::from_event(e) {
            self.entries.push_back(entry);
        }
    }

    /// Drops entries older than twice the window relative to `now_ms`.
    pub fn prune(&mut self, now_ms: u64, window_ms: u64) {
        let horizon = now_ms.saturating_sub(window_ms.saturating_mul(2));
        while self.entries.front().is_some_and(|e| e.ts < horizon) {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub first: EventEnvelope,
    pub second: EventEnvelope,
    pub node_id: String,
    pub property_path: String,
    pub window_ms: u64,
}

/// Most recent logged update competing with `e`, if any.
pub fn detect(e: &EventEnvelope, log: &ConflictLog, window_ms: u64) -> Option<Conflict> {
    let Payload::IncrementalUpdate { node_id, property_path, .. } = &e.payload else { return None };
    let hit = log.entries.iter().rev().find(|entry| {
        entry.node_id == *node_id
            && entry.property_path == *property_path
            && entry.sender_id != e.sender_id
            && entry.ts.abs_diff(e.ts) <= window_ms
    })?;
    Some(Conflict {
        first: hit.to_event(),
        second: e.clone(),
        node_id: node_id.clone(),
        property_path: property_path.clone(),
        window_ms,
    })
}

/// Outcome of a resolved conflict. `first` has already been applied when the
/// conflict is detected, so only the fate of what comes next is decided here.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    /// Event to apply and broadcast, if any.
    pub apply: Option<EventEnvelope>,
    /// Event discarded, with the verdict its sender receives.
    pub rejected: Option<(EventEnvelope, Verdict)>,
    /// Which rule decided.
    pub rule: &'static str,
}

fn numeric_array(path: &str, v: &Value) -> Result<Vec<f64>, ConflictError> {
    let mismatch = |detail: &str| ConflictError::MergeShapeMismatch { path: path.to_string(), detail: detail.into() };
    v.as_array()
        .ok_or_else(|| mismatch("value is not an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| mismatch("value holds a non-numeric entry")))
        .collect()
}

/// Componentwise mean of two numeric arrays of equal arity.
pub fn merge_mean(path: &str, a: &Value, b: &Value) -> Result<Value, ConflictError> {
    let (a, b) = (numeric_array(path, a)?, numeric_array(path, b)?);
    if a.len() != b.len() {
        return Err(ConflictError::MergeShapeMismatch {
            path: path.to_string(),
            detail: format!("arity {} vs {}", a.len(), b.len()),
        });
    }
    Ok(Value::from(a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect::<Vec<_>>()))
}

pub fn resolve(
    c: &Conflict,
    strategy: ConflictStrategy,
    composite: &CompositeModel,
    users: &dyn UserDirectory,
) -> Result<Resolution, ConflictError> {
    if let Some(winner) = composite.higher_priority(&c.first.sender_id, &c.second.sender_id, users) {
        return Ok(if winner == c.second.sender_id {
            Resolution { apply: Some(c.second.clone()), rejected: None, rule: "hierarchy.prevails" }
        } else {
            let verdict = Verdict::reject(
                "conflict.hierarchy",
                format!("update from higher-ranked `{winner}` on `{}` prevails", c.node_id),
            );
            Resolution { apply: None, rejected: Some((c.second.clone(), verdict)), rule: "hierarchy.prevails" }
        });
    }
    match strategy {
        ConflictStrategy::LastWriterWins => {
            // ties go to the later arrival, which is `second`
            Ok(if c.second.ts >= c.first.ts {
                Resolution { apply: Some(c.second.clone()), rejected: None, rule: "conflict.last_writer_wins" }
            } else {
                let verdict = Verdict::reject("conflict.last_writer_wins", "a later update to the same property stands");
                Resolution { apply: None, rejected: Some((c.second.clone(), verdict)), rule: "conflict.last_writer_wins" }
            })
        }
        ConflictStrategy::MergeMean => {
            let (Payload::IncrementalUpdate { new_value: a, .. }, Payload::IncrementalUpdate { new_value: b, .. }) =
                (&c.first.payload, &c.second.payload)
            else {
                unreachable!("conflicts only pair incremental updates")
            };
            let merged = merge_mean(&c.property_path, a, b)?;
            let event = EventEnvelope {
                event_id: derived_id(&format!("{}+{}", c.first.event_id, c.second.event_id), "merge"),
                sender_id: SYSTEM_SENDER.into(),
                session_id: c.second.session_id.clone(),
                ts: c.second.ts,
                payload: Payload::IncrementalUpdate {
                    node_id: c.node_id.clone(),
                    property_path: c.property_path.clone(),
                    new_value: merged,
                },
            };
            Ok(Resolution { apply: Some(event), rejected: None, rule: "conflict.merge_mean" })
        }
        ConflictStrategy::RejectSecond => {
            let verdict = Verdict::reject(
                "conflict.reject_second",
                format!("concurrent update to `{}` `{}` already applied", c.node_id, c.property_path),
            );
            Ok(Resolution { apply: None, rejected: Some((c.second.clone(), verdict)), rule: "conflict.reject_second" })
        }
    }
}
