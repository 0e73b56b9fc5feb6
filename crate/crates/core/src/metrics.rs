//! Run measures, computed as a single fold over an event log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::simrt::{EventBody, EventLog, Time};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Time each component spent with its barrier not open.
    pub downtime: BTreeMap<String, Time>,
    pub held_invocations: usize,
    pub total_held_wait: Time,
    pub max_held_wait: Time,
    pub mean_held_wait: f64,
    pub aborted_transactions: usize,
    pub committed_transactions: usize,
    pub invalidated_sessions: usize,
    pub messages_lost: usize,
    pub denied_invocations: usize,
    pub swaps: usize,
    pub total_time: Time,
}

impl RunMetrics {
    pub fn from_log(log: &EventLog) -> Self {
        let mut m = RunMetrics::default();
        let mut barrier_since: BTreeMap<&str, Time> = BTreeMap::new();
        let mut held_at: BTreeMap<u64, Time> = BTreeMap::new();
        let mut waits: Vec<Time> = Vec::new();
        let mut pending_msgs: BTreeSet<(&str, u64)> = BTreeSet::new();
        let mut invalidated: BTreeSet<&str> = BTreeSet::new();
        let mut end = 0;
        for e in log.iter() {
            end = e.t;
            match &e.body {
                EventBody::BarrierActivated { component } => {
                    barrier_since.entry(component).or_insert(e.t);
                }
                EventBody::BarrierReleased { component, .. } => {
                    if let Some(t) = barrier_since.remove(component.as_str()) {
                        *m.downtime.entry(component.clone()).or_default() += e.t - t;
                    }
                }
                EventBody::InvocationHeld { invocation, .. } => {
                    held_at.entry(*invocation).or_insert(e.t);
                }
                EventBody::InvocationStart { invocation, .. } | EventBody::InvocationDenied { invocation, .. } => {
                    if let Some(t) = held_at.remove(invocation) {
                        waits.push(e.t - t);
                    }
                    if matches!(e.body, EventBody::InvocationDenied { .. }) {
                        m.denied_invocations += 1;
                    }
                }
                EventBody::TxCommit { .. } => m.committed_transactions += 1,
                EventBody::TxAbort { .. } => m.aborted_transactions += 1,
                EventBody::SwapApplied { .. } => m.swaps += 1,
                EventBody::SessionInvalidated { session, .. } => {
                    invalidated.insert(session);
                }
                EventBody::MessageEnqueued { queue, message, .. } => {
                    pending_msgs.insert((queue, *message));
                }
                EventBody::MessageDelivered { queue, message, .. } => {
                    pending_msgs.remove(&(queue.as_str(), *message));
                }
                EventBody::MessageDropped { queue, message } => {
                    pending_msgs.remove(&(queue.as_str(), *message));
                    m.messages_lost += 1;
                }
                _ => {}
            }
        }
        // still barricaded or still waiting at the end of the log
        for (c, t) in barrier_since {
            *m.downtime.entry(c.to_string()).or_default() += end - t;
        }
        waits.extend(held_at.values().map(|t| end - t));
        m.messages_lost += pending_msgs.len();
        m.invalidated_sessions = invalidated.len();
        m.held_invocations = waits.len();
        m.total_held_wait = waits.iter().sum();
        m.max_held_wait = waits.iter().copied().max().unwrap_or(0);
        m.mean_held_wait = if waits.is_empty() {
            0.0
        } else {
            m.total_held_wait as f64 / waits.len() as f64
        };
        m.total_time = end;
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
