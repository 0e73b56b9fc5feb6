//! Workload scenario documents.

use serde::{Deserialize, Serialize};

use super::events::{HandleOp, Time};
use crate::model::{Access, ApplicationConfiguration, ComponentKind};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallTarget {
    pub component: String,
    pub interface: String,
    pub operation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandleAction {
    pub op: HandleOp,
    pub component: String,
}

/// One timed step of a client script: either a call or a home-interface
/// handle action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    pub at: Time,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<CallTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<HandleAction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    pub access: Access,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageSpec {
    pub queue: String,
    pub payload: String,
    pub at: Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Every transaction active in the component is marked rollback-only.
    RollbackOnly,
    /// The next decision taken inside the component calls off-automaton.
    ProtocolViolation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at: Time,
    pub component: String,
    pub kind: FaultKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadScenario {
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub messages: Vec<MessageSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadScenario {
    /// Checks every reference against the deployed configuration.
    pub fn validate(&self, config: &ApplicationConfiguration) -> Result<(), String> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.clients {
            if !ids.insert(c.id.as_str()) {
                return Err(format!("client `{}` declared twice", c.id));
            }
            if c.id.starts_with("queue:") {
                return Err(format!("client id `{}` uses the reserved `queue:` prefix", c.id));
            }
            for step in &c.script {
                match (&step.call, &step.handle) {
                    (Some(call), None) => {
                        let d = config.component(&call.component).ok_or_else(|| {
                            format!("client `{}` calls unknown component `{}`", c.id, call.component)
                        })?;
                        if d.kind == ComponentKind::MessageDriven {
                            return Err(format!(
                                "client `{}` calls message-driven `{}` directly",
                                c.id, call.component
                            ));
                        }
                        let iface = d.provided_interface(&call.interface).ok_or_else(|| {
                            format!(
                                "client `{}` calls unknown interface `{}.{}`",
                                c.id, call.component, call.interface
                            )
                        })?;
                        if !iface.has_operation(&call.operation) {
                            return Err(format!(
                                "client `{}` calls unknown operation `{}.{}.{}`",
                                c.id, call.component, call.interface, call.operation
                            ));
                        }
                    }
                    (None, Some(h)) => {
                        if config.component(&h.component).is_none() {
                            return Err(format!(
                                "client `{}` handles unknown component `{}`",
                                c.id, h.component
                            ));
                        }
                    }
                    _ => {
                        return Err(format!(
                            "client `{}`: each script step needs exactly one of `call` or `handle`",
                            c.id
                        ))
                    }
                }
            }
        }
        for m in &self.messages {
            if !config.queues.contains(&m.queue) {
                return Err(format!("message for unknown queue `{}`", m.queue));
            }
        }
        for f in &self.faults {
            if config.component(&f.component).is_none() {
                return Err(format!("fault on unknown component `{}`", f.component));
            }
        }
        Ok(())
    }
}
