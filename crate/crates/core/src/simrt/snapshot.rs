use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::events::Time;
use crate::model::ApplicationConfiguration;
use crate::sefa::{AutomatonCursor, CallLabel};

/// Operation currently executing on an instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InProgress {
    pub operation: String,
    /// Automaton state name.
    pub state: String,
    /// Nested call issued and not yet returned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outstanding: Option<CallLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx: Option<u64>,
}

impl InProgress {
    /// The operation's cursor, or `None` when the operation has no automaton.
    pub fn cursor(
        &self,
        config: &ApplicationConfiguration,
        component: &str,
    ) -> Result<Option<AutomatonCursor>, String> {
        let d = config
            .component(component)
            .ok_or_else(|| format!("unknown component `{component}`"))?;
        let op = d
            .operation(&self.operation)
            .ok_or_else(|| format!("unknown operation `{component}.{}`", self.operation))?;
        match &op.effect_automaton {
            None => Ok(None),
            Some(a) => Arc::clone(a)
                .cursor_at(&self.state)
                .map(Some)
                .map_err(|e| format!("{component}.{}: {e}", self.operation)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSnapshot {
    pub component: String,
    pub index: u32,
    pub idle: bool,
    #[serde(default)]
    pub in_progress: Vec<InProgress>,
}

/// Immutable picture of the running system at one instant.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSnapshot {
    pub time: Time,
    pub instances: Vec<InstanceSnapshot>,
    #[serde(default)]
    pub active_transactions: BTreeMap<String, Vec<u64>>,
    #[serde(default)]
    pub remote_refs: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub queue_depths: BTreeMap<String, usize>,
}
