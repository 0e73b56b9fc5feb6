use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    analyse, classify_structural_safety, store_migration, Analysis, PirmaError, ReconfigurationRequest,
    SafetyVerdict,
};
use crate::depgraph::{affected_set, build_runtime_graph, ReconfigurationWindow, StaticDependencyGraph};
use crate::model::{
    check_composition, ApplicationConfiguration, ChangeKind, ComponentKind, Finding, Wire,
};
use crate::simrt::{RuntimeSnapshot, Time};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", content = "target")]
pub enum PlanStep {
    ActivateBarrier(String),
    AwaitQuiescence(String),
    PauseQueue(String),
    SyncShadowStore(String),
    Swap(String),
    SetPoolSize(String, u32),
    ResumeQueue(String),
    ReleaseBarrier(String),
    PostCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub swap: Time,
    pub sync: Time,
    pub other: Time,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            swap: 10,
            sync: 5,
            other: 1,
        }
    }
}

impl CostModel {
    pub fn step(&self, s: &PlanStep) -> Time {
        match s {
            PlanStep::Swap(_) => self.swap,
            PlanStep::SyncShadowStore(_) => self.sync,
            _ => self.other,
        }
    }

    pub fn total(&self, steps: &[PlanStep]) -> Time {
        steps.iter().map(|s| self.step(s)).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Blocking {
    /// Barricade only the affected set.
    #[default]
    Minimal,
    /// Barricade every component and wait for all of them.
    WholeApp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanOptions {
    pub blocking: Blocking,
    /// Reject any structural change outright.
    pub strict: bool,
    pub cost: CostModel,
    /// Overrides the cost-model window when set.
    pub window: Option<Time>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigurationPlan {
    pub request: String,
    pub window: ReconfigurationWindow,
    pub affected: BTreeSet<String>,
    pub steps: Vec<PlanStep>,
    pub verdicts: Vec<SafetyVerdict>,
    pub analysis: Analysis,
    pub cost: CostModel,
}

impl ReconfigurationPlan {
    pub fn swapped(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                PlanStep::Swap(c) => Some(c.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Checks the step-order rules; returns the first broken one.
    pub fn check_order(&self) -> Result<(), String> {
        let pos = |want: &PlanStep| self.steps.iter().position(|s| s == want);
        for c in self.swapped() {
            let c = c.to_string();
            let a = pos(&PlanStep::ActivateBarrier(c.clone()));
            let q = pos(&PlanStep::AwaitQuiescence(c.clone()));
            let s = pos(&PlanStep::Swap(c.clone()));
            let r = pos(&PlanStep::ReleaseBarrier(c.clone()));
            let s = match (a, q, s, r) {
                (Some(a), Some(q), Some(s), Some(r)) if a < q && q < s && s < r => s,
                _ => return Err(format!("barrier steps for `{c}` out of order")),
            };
            if let Some(y) = pos(&PlanStep::SyncShadowStore(c.clone())) {
                if y > s {
                    return Err(format!("shadow sync for `{c}` after its swap"));
                }
            }
        }
        for (i, st) in self.steps.iter().enumerate() {
            if let PlanStep::PauseQueue(q) = st {
                let resume = pos(&PlanStep::ResumeQueue(q.clone()));
                let swaps: Vec<usize> = self
                    .steps
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| matches!(s, PlanStep::Swap(_)))
                    .map(|(j, _)| j)
                    .collect();
                if swaps.iter().any(|&j| j < i) || resume.is_none_or(|r| swaps.iter().any(|&j| j > r)) {
                    return Err(format!("queue `{q}` not paused around the swaps"));
                }
            }
        }
        if self.steps.last() != Some(&PlanStep::PostCheck) {
            return Err("PostCheck is not the last step".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub request: String,
    pub reason: String,
    pub verdicts: Vec<SafetyVerdict>,
    pub findings: Vec<Finding>,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.reason)?;
        for v in &self.verdicts {
            write!(f, "; {}: {:?} {:?}", v.component, v.verdict, v.reasons)?;
        }
        for x in &self.findings {
            write!(f, "; {x}")?;
        }
        Ok(())
    }
}

/// Recomputes wiring after requirements change: existing wires are kept
/// while still required, new requirements bind to the single component
/// providing the interface, or become external.
pub fn rewire(config: &ApplicationConfiguration) -> Vec<Wire> {
    let mut out = Vec::new();
    for d in config.components() {
        for r in &d.required {
            if let Some(w) = config.wiring.iter().find(|w| w.requirer == d.name && &w.interface == r) {
                out.push(w.clone());
                continue;
            }
            let providers: Vec<&str> = config
                .components()
                .into_iter()
                .filter(|p| p.provided_interface(r).is_some())
                .map(|p| p.name.as_str())
                .collect();
            out.push(Wire {
                requirer: d.name.clone(),
                interface: r.clone(),
                provider: (providers.len() == 1).then(|| providers[0].to_string()),
            });
        }
    }
    out
}

/// Configuration the request would produce.
pub(crate) fn prospective(
    request: &ReconfigurationRequest,
    config: &ApplicationConfiguration,
) -> ApplicationConfiguration {
    let mut next = config.clone();
    for t in &request.targets {
        match &t.descriptor {
            Some(d) => {
                next.replace_component(d.clone());
            }
            None => {
                next.remove_component(&t.component);
            }
        }
    }
    for q in &request.qos_changes {
        if let Some(c) = next.container_mut(&q.component) {
            c.pool_size = q.pool_size;
        }
    }
    for t in &request.targets {
        let Some(d) = &t.descriptor else { continue };
        if let Some(m) = store_migration(request, config.component(&t.component).expect("analysed"), d) {
            if next.data_store(&m.shadow_store).is_none() {
                next.data_stores.push(crate::model::DataStoreSpec {
                    name: m.shadow_store,
                    schema: m.schema,
                });
            }
        }
    }
    let wiring = rewire(&next);
    next.set_wiring(wiring);
    next
}

fn reject(request: &ReconfigurationRequest, reason: &str, verdicts: Vec<SafetyVerdict>, findings: Vec<Finding>) -> PirmaError {
    PirmaError::Rejected(Box::new(Rejection {
        request: request.id.clone(),
        reason: reason.to_string(),
        verdicts,
        findings,
    }))
}

/// Builds the step list for a given barrier set.
fn steps_for(
    request: &ReconfigurationRequest,
    config: &ApplicationConfiguration,
    stat: &StaticDependencyGraph,
    affected: &BTreeSet<String>,
    await_all: bool,
) -> Vec<PlanStep> {
    let mut steps = Vec::new();
    let order = stat.clients_first(affected);
    for c in &order {
        steps.push(PlanStep::ActivateBarrier(c.clone()));
    }
    let mut queues = Vec::new();
    for t in &request.targets {
        let old = config.component(&t.component).expect("analysed");
        if old.kind == ComponentKind::MessageDriven {
            if let Some(q) = &old.queue {
                queues.push(q.clone());
                steps.push(PlanStep::PauseQueue(q.clone()));
            }
        }
    }
    let waited: Vec<String> = if await_all {
        order.clone()
    } else {
        request.targets.iter().map(|t| t.component.clone()).collect()
    };
    for c in &waited {
        steps.push(PlanStep::AwaitQuiescence(c.clone()));
    }
    for t in &request.targets {
        let old = config.component(&t.component).expect("analysed");
        if let Some(d) = &t.descriptor {
            if store_migration(request, old, d).is_some() {
                steps.push(PlanStep::SyncShadowStore(t.component.clone()));
            }
        }
    }
    for t in &request.targets {
        steps.push(PlanStep::Swap(t.component.clone()));
    }
    for q in &request.qos_changes {
        steps.push(PlanStep::SetPoolSize(q.component.clone(), q.pool_size));
    }
    for q in queues {
        steps.push(PlanStep::ResumeQueue(q));
    }
    for c in &order {
        steps.push(PlanStep::ReleaseBarrier(c.clone()));
    }
    steps.push(PlanStep::PostCheck);
    steps
}

/// Produces a plan, or a rejection carrying every unsafe verdict.
pub fn plan(
    request: &ReconfigurationRequest,
    config: &ApplicationConfiguration,
    snapshot: &RuntimeSnapshot,
    opts: &PlanOptions,
) -> Result<ReconfigurationPlan, PirmaError> {
    let analysis = analyse(request, config)?;
    for m in &request.entity_migration {
        if !request.targets.iter().any(|t| t.component == m.component) {
            return Err(PirmaError::InvalidRequest(format!(
                "entity migration for `{}`, which is not a target",
                m.component
            )));
        }
    }
    if opts.strict {
        let structural: Vec<&String> = analysis
            .changes
            .iter()
            .filter(|(_, k)| **k == ChangeKind::Structural)
            .map(|(c, _)| c)
            .collect();
        if !structural.is_empty() {
            return Err(reject(
                request,
                &format!("strict mode forbids structural changes ({})", structural.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
                vec![],
                vec![],
            ));
        }
    }
    let changed = request.changed();
    let mut verdicts = Vec::new();
    for t in &request.targets {
        let old = config.component(&t.component).expect("analysed");
        let refs: BTreeSet<String> = snapshot
            .remote_refs
            .get(&t.component)
            .map(|r| r.iter().filter(|h| !changed.contains(*h)).cloned().collect())
            .unwrap_or_default();
        let migration_available = match &t.descriptor {
            Some(d) => old.entity_schema == d.entity_schema || request.migration_for(&t.component).is_some(),
            None => true,
        };
        verdicts.push(classify_structural_safety(
            old,
            t.descriptor.as_ref(),
            analysis.changes[&t.component],
            &refs,
            migration_available,
        ));
    }
    let unsafe_: Vec<SafetyVerdict> = verdicts.iter().filter(|v| v.is_unsafe()).cloned().collect();
    if !unsafe_.is_empty() {
        return Err(reject(request, "unsafe change", unsafe_, vec![]));
    }
    let next = prospective(request, config);
    let report = check_composition(&next);
    if !report.is_empty() {
        return Err(reject(request, "resulting configuration is inconsistent", verdicts, report.findings));
    }

    let stat = StaticDependencyGraph::build(config)?;
    let targets: BTreeSet<String> = changed.clone();
    let whole = opts.blocking == Blocking::WholeApp && !targets.is_empty();
    let mut affected = if whole { config.component_names() } else { targets.clone() };
    let (steps, window) = loop {
        let steps = steps_for(request, config, &stat, &affected, whole);
        let duration = opts.window.unwrap_or_else(|| opts.cost.total(&steps));
        let window = ReconfigurationWindow::new(request.requested_at, duration);
        if whole || targets.is_empty() {
            // the graph is still built to check the snapshot matches
            build_runtime_graph(config, snapshot, window)?;
            break (steps, window);
        }
        let g = build_runtime_graph(config, snapshot, window)?;
        let next = affected_set(config, &g, &targets)?;
        if next == affected {
            break (steps, window);
        }
        affected = next;
    };
    let plan = ReconfigurationPlan {
        request: request.id.clone(),
        window,
        affected,
        steps,
        verdicts,
        analysis,
        cost: opts.cost,
    };
    debug_assert_eq!(plan.check_order(), Ok(()));
    Ok(plan)
}

pub(crate) fn migrations(
    request: &ReconfigurationRequest,
    config: &ApplicationConfiguration,
) -> BTreeMap<String, crate::simrt::StoreMigration> {
    request
        .targets
        .iter()
        .filter_map(|t| {
            let old = config.component(&t.component)?;
            let new = t.descriptor.as_ref()?;
            store_migration(request, old, new).map(|m| (t.component.clone(), m))
        })
        .collect()
}
