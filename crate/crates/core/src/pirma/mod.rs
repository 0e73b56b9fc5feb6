//! Reconfiguration manager: request analysis, safety classification,
//! planning against the runtime dependency graph, and plan execution.

mod execute;
mod plan;
mod safety;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use execute::{execute, post_check, Outcome, ReconfigurationReport};
pub use plan::{plan, rewire, Blocking, CostModel, PlanOptions, PlanStep, ReconfigurationPlan, Rejection};
pub use safety::{classify_structural_safety, ReasonCode, SafetyVerdict, Verdict};

use crate::depgraph::DepGraphError;
use crate::model::{diff_versions, ApplicationConfiguration, ChangeKind, ComponentDescriptor, DiffError};
use crate::simrt::{SimError, StoreMigration, Time};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetChange {
    pub component: String,
    /// New version; `None` removes the component.
    #[serde(default)]
    pub descriptor: Option<ComponentDescriptor>,
    /// Path of a descriptor file, resolved by the loader before planning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosChange {
    pub component: String,
    pub pool_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMigration {
    pub component: String,
    pub shadow_store: String,
    /// Old column to new column.
    #[serde(default)]
    pub column_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigurationRequest {
    pub id: String,
    #[serde(default)]
    pub targets: Vec<TargetChange>,
    #[serde(default)]
    pub qos_changes: Vec<QosChange>,
    #[serde(default)]
    pub entity_migration: Vec<EntityMigration>,
    pub requested_at: Time,
}

impl ReconfigurationRequest {
    pub fn migration_for(&self, component: &str) -> Option<&EntityMigration> {
        self.entity_migration.iter().find(|m| m.component == component)
    }

    /// Names of components replaced or removed by this request.
    pub fn changed(&self) -> BTreeSet<String> {
        self.targets.iter().map(|t| t.component.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    SingleComponent,
    Subsystem,
    EntireSystem,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analysis {
    pub changes: BTreeMap<String, ChangeKind>,
    pub overall: ChangeKind,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PirmaError {
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    DepGraph(#[from] DepGraphError),
    #[error("engine fault: {0}")]
    Engine(#[from] SimError),
    #[error("request rejected: {0}")]
    Rejected(Box<Rejection>),
}

/// Classifies each target's change and the request's granularity.
pub fn analyse(
    request: &ReconfigurationRequest,
    config: &ApplicationConfiguration,
) -> Result<Analysis, PirmaError> {
    if request.targets.is_empty() && request.qos_changes.is_empty() {
        return Err(PirmaError::InvalidRequest("request has no targets and no qos changes".into()));
    }
    let mut changes = BTreeMap::new();
    for t in &request.targets {
        let old = config
            .component(&t.component)
            .ok_or_else(|| PirmaError::UnknownComponent(t.component.clone()))?;
        if t.descriptor_file.is_some() && t.descriptor.is_none() {
            return Err(PirmaError::InvalidRequest(format!(
                "descriptor file for `{}` was not resolved",
                t.component
            )));
        }
        let kind = match &t.descriptor {
            Some(new) => diff_versions(old, new)?,
            None => ChangeKind::Structural,
        };
        if changes.insert(t.component.clone(), kind).is_some() {
            return Err(PirmaError::InvalidRequest(format!("`{}` targeted twice", t.component)));
        }
    }
    for q in &request.qos_changes {
        if config.component(&q.component).is_none() {
            return Err(PirmaError::UnknownComponent(q.component.clone()));
        }
        if q.pool_size == 0 {
            return Err(PirmaError::InvalidRequest("pool_size must be positive".into()));
        }
        changes.entry(q.component.clone()).or_insert(ChangeKind::NonFunctional);
    }
    let overall = changes.values().copied().max().expect("non-empty");
    let granularity = if changes.len() == 1 {
        Granularity::SingleComponent
    } else {
        let paths: Vec<Vec<String>> = changes
            .keys()
            .map(|c| config.root.path_to(c).expect("deployed component has a path"))
            .collect();
        let common = paths
            .iter()
            .skip(1)
            .fold(paths[0].len(), |n, p| p.iter().zip(&paths[0]).take(n).take_while(|(a, b)| a == b).count());
        // every path starts with the root composite
        if common > 1 {
            Granularity::Subsystem
        } else {
            Granularity::EntireSystem
        }
    };
    Ok(Analysis {
        changes,
        overall,
        granularity,
    })
}

/// Engine-level migration for an entity target, when its schema changes.
pub fn store_migration(
    request: &ReconfigurationRequest,
    old: &ComponentDescriptor,
    new: &ComponentDescriptor,
) -> Option<StoreMigration> {
    if old.entity_schema == new.entity_schema {
        return None;
    }
    request.migration_for(&old.name).map(|m| StoreMigration {
        shadow_store: m.shadow_store.clone(),
        schema: new.entity_schema.clone(),
        column_map: m.column_map.clone(),
    })
}
