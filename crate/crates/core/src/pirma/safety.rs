use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{ChangeKind, ComponentDescriptor, ComponentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Safe,
    SafeWithPause,
    SafeWithMigration,
    Unsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReasonCode {
    HasConversationalState,
    UnchangedRemoteClientRefs,
    SchemaChangeNeedsMigration,
    NoClientVisibleIdentity,
    LocalOnly,
    StatelessInterchangeable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub component: String,
    pub verdict: Verdict,
    pub reasons: Vec<ReasonCode>,
}

impl SafetyVerdict {
    pub fn is_unsafe(&self) -> bool {
        self.verdict == Verdict::Unsafe
    }
}

/// Decides whether a component may take the given change.
///
/// `refs` holds reference holders that are not themselves replaced by the
/// request. `new` is the replacement, if any; it is only consulted for the
/// conversational state shape.
pub fn classify_structural_safety(
    component: &ComponentDescriptor,
    new: Option<&ComponentDescriptor>,
    change: ChangeKind,
    refs: &BTreeSet<String>,
    migration_available: bool,
) -> SafetyVerdict {
    use ReasonCode::*;
    let (verdict, reasons) = match (component.kind, change) {
        (ComponentKind::MessageDriven, _) => (Verdict::SafeWithPause, vec![NoClientVisibleIdentity]),
        (ComponentKind::StatefulSession, ChangeKind::Structural) => (Verdict::Unsafe, vec![HasConversationalState]),
        (ComponentKind::StatefulSession, _) => {
            if new.is_some_and(|n| n.state_fields != component.state_fields) {
                (Verdict::Unsafe, vec![HasConversationalState])
            } else {
                (Verdict::Safe, vec![])
            }
        }
        (ComponentKind::StatelessSession, ChangeKind::Structural) => {
            if refs.is_empty() {
                (Verdict::Safe, vec![LocalOnly])
            } else {
                (Verdict::Unsafe, vec![UnchangedRemoteClientRefs])
            }
        }
        (ComponentKind::Entity, ChangeKind::Structural) => {
            let mut reasons = Vec::new();
            if !refs.is_empty() {
                reasons.push(UnchangedRemoteClientRefs);
            }
            if !migration_available {
                reasons.push(SchemaChangeNeedsMigration);
            }
            if reasons.is_empty() {
                (Verdict::SafeWithMigration, vec![SchemaChangeNeedsMigration])
            } else {
                (Verdict::Unsafe, reasons)
            }
        }
        (ComponentKind::StatelessSession, _) => (Verdict::Safe, vec![StatelessInterchangeable]),
        (ComponentKind::Entity, _) => (Verdict::Safe, vec![]),
    };
    SafetyVerdict {
        component: component.name.clone(),
        verdict,
        reasons,
    }
}
