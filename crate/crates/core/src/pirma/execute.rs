use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::plan::{migrations, rewire, PlanStep, ReconfigurationPlan};
use super::{PirmaError, ReconfigurationRequest, SafetyVerdict};
use crate::depgraph::ReconfigurationWindow;
use crate::model::{check_composition, ApplicationConfiguration, ChangeKind, ConsistencyReport, Finding};
use crate::simrt::{CallTarget, Engine, EventBody, SimError, SwapOptions, Time, CLASS_BARRIER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    Rejected,
    DrainTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigurationReport {
    pub request: String,
    pub outcome: Outcome,
    pub window: ReconfigurationWindow,
    pub affected: BTreeSet<String>,
    pub started_at: Time,
    pub quiescent_at: Option<Time>,
    pub released_at: Time,
    pub downtime: BTreeMap<String, Time>,
    pub held_invocations: usize,
    pub max_held_wait: Time,
    pub total_held_wait: Time,
    pub swapped: Vec<String>,
    pub verdicts: Vec<SafetyVerdict>,
    pub findings: Vec<Finding>,
}

impl ReconfigurationReport {
    /// Report for a request that needed no swap.
    pub fn empty(request: &str, at: Time) -> Self {
        Self {
            request: request.to_string(),
            outcome: Outcome::Completed,
            window: crate::depgraph::ReconfigurationWindow::new(at, 0),
            affected: BTreeSet::new(),
            started_at: at,
            quiescent_at: Some(at),
            released_at: at,
            downtime: BTreeMap::new(),
            held_invocations: 0,
            max_held_wait: 0,
            total_held_wait: 0,
            swapped: vec![],
            verdicts: vec![],
            findings: vec![],
        }
    }
}

/// Consistency check of the reconfigured system, plus a check that every
/// replayed call still finds its operation.
pub fn post_check(config: &ApplicationConfiguration, replayed: &[(u64, CallTarget)]) -> ConsistencyReport {
    let mut report = check_composition(config);
    for (id, t) in replayed {
        let present = config
            .component(&t.component)
            .and_then(|d| d.provided_interface(&t.interface))
            .is_some_and(|i| i.has_operation(&t.operation));
        if !present {
            report.findings.push(Finding::OrphanedHeldCall {
                invocation: *id,
                component: t.component.clone(),
                interface: t.interface.clone(),
                operation: t.operation.clone(),
            });
        }
    }
    report
}

struct Run<'a> {
    engine: &'a mut Engine,
    t0: Time,
    log_start: usize,
    activated: Vec<String>,
    paused: Vec<String>,
}

impl Run<'_> {
    /// Reopens everything touched so far without swapping.
    fn unwind(&mut self) -> Result<(), PirmaError> {
        for q in std::mem::take(&mut self.paused) {
            self.engine.resume_queue(&q)?;
        }
        let act = self.activated.clone();
        self.engine.release_barriers(&act)?;
        Ok(())
    }

    fn held_stats(&self) -> (usize, Time, Time) {
        let mut held: Vec<(String, Time)> = Vec::new();
        let mut released: BTreeMap<&str, Time> = BTreeMap::new();
        for e in &self.engine.log().events[self.log_start..] {
            match &e.body {
                EventBody::InvocationHeld { component, .. } => held.push((component.clone(), e.t)),
                EventBody::BarrierReleased { component, .. } => {
                    released.entry(component.as_str()).or_insert(e.t);
                }
                _ => {}
            }
        }
        let now = self.engine.now();
        let waits: Vec<Time> = held
            .iter()
            .map(|(c, t)| released.get(c.as_str()).copied().unwrap_or(now).saturating_sub(*t))
            .collect();
        (waits.len(), waits.iter().copied().max().unwrap_or(0), waits.iter().sum())
    }
}

/// Runs a plan against a live engine at its current instant.
pub fn execute(
    plan: &ReconfigurationPlan,
    request: &ReconfigurationRequest,
    engine: &mut Engine,
) -> Result<ReconfigurationReport, PirmaError> {
    let t0 = engine.now();
    let deadline = t0.saturating_add(engine.drain_timeout);
    let replay_start = engine.replayed_count();
    let migs = migrations(request, engine.config());
    let changed = request.changed();
    let descriptors: BTreeMap<&str, _> = request
        .targets
        .iter()
        .map(|t| (t.component.as_str(), t.descriptor.clone()))
        .collect();
    let mut run = Run {
        log_start: engine.log().len(),
        engine,
        t0,
        activated: Vec::new(),
        paused: Vec::new(),
    };
    let mut outcome = Outcome::Completed;
    let mut findings = Vec::new();
    let mut quiescent_at = None;
    let mut work: Time = 0;
    let mut swapped = Vec::new();
    let mut released = false;
    let steps = &plan.steps;
    let mut i = 0;
    while i < steps.len() {
        match &steps[i] {
            PlanStep::ActivateBarrier(c) => {
                run.engine.activate_barrier(c)?;
                run.activated.push(c.clone());
            }
            PlanStep::PauseQueue(q) => {
                run.engine.pause_queue(q)?;
                run.paused.push(q.clone());
            }
            PlanStep::AwaitQuiescence(_) => {
                let mut group = Vec::new();
                while let Some(PlanStep::AwaitQuiescence(c)) = steps.get(i) {
                    group.push(c.clone());
                    i += 1;
                }
                match run.engine.await_quiescence(&group, deadline) {
                    Ok(t) => quiescent_at = Some(t),
                    Err(SimError::DrainTimeout { .. }) => {
                        outcome = Outcome::DrainTimeout;
                        run.unwind()?;
                        released = true;
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
                for (name, new) in &descriptors {
                    for (id, t) in run.engine.held_calls(name) {
                        let kept = new
                            .as_ref()
                            .and_then(|d| d.provided_interface(&t.interface))
                            .is_some_and(|p| p.has_operation(&t.operation));
                        if !kept {
                            findings.push(Finding::OrphanedHeldCall {
                                invocation: id,
                                component: t.component,
                                interface: t.interface,
                                operation: t.operation,
                            });
                        }
                    }
                }
                if !findings.is_empty() {
                    outcome = Outcome::Rejected;
                    run.unwind()?;
                    released = true;
                    break;
                }
                continue;
            }
            PlanStep::SyncShadowStore(c) => {
                let m = migs.get(c).ok_or_else(|| PirmaError::InvalidRequest(format!("no migration for `{c}`")))?;
                run.engine.sync_shadow_store(c, m)?;
                work += plan.cost.sync;
            }
            PlanStep::Swap(c) => {
                let opts = SwapOptions {
                    keep_refs: changed.clone(),
                    structural: plan.analysis.changes.get(c) == Some(&ChangeKind::Structural),
                };
                let new = descriptors.get(c.as_str()).cloned().flatten();
                run.engine.apply_swap(c, new, &opts)?;
                swapped.push(c.clone());
                work += plan.cost.swap;
                if !matches!(steps.get(i + 1), Some(PlanStep::Swap(_))) {
                    let wiring = rewire(run.engine.config());
                    run.engine.set_wiring(wiring);
                }
            }
            PlanStep::SetPoolSize(c, n) => run.engine.set_pool_size(c, *n)?,
            PlanStep::ResumeQueue(_) | PlanStep::ReleaseBarrier(_) => {
                if work > 0 {
                    let t = run.engine.now() + work;
                    run.engine.advance_to(t, CLASS_BARRIER)?;
                    work = 0;
                }
                if let PlanStep::ResumeQueue(q) = &steps[i] {
                    run.engine.resume_queue(q)?;
                    run.paused.retain(|p| p != q);
                } else {
                    let mut group = Vec::new();
                    while let Some(PlanStep::ReleaseBarrier(c)) = steps.get(i) {
                        group.push(c.clone());
                        i += 1;
                    }
                    run.engine.release_barriers(&group)?;
                    released = true;
                    continue;
                }
            }
            PlanStep::PostCheck => {
                if work > 0 {
                    let t = run.engine.now() + work;
                    run.engine.advance_to(t, CLASS_BARRIER)?;
                    work = 0;
                }
                let replayed = run.engine.replayed();
                let report = post_check(run.engine.config(), &replayed[replay_start..]);
                if !report.is_empty() {
                    outcome = Outcome::Rejected;
                    findings.extend(report.findings);
                }
            }
        }
        i += 1;
    }
    if !released && !run.activated.is_empty() {
        run.unwind()?;
    }
    let released_at = run.engine.now();
    let downtime = run
        .activated
        .iter()
        .map(|c| (c.clone(), released_at - run.t0))
        .collect();
    let (held_invocations, max_held_wait, total_held_wait) = run.held_stats();
    Ok(ReconfigurationReport {
        request: plan.request.clone(),
        outcome,
        window: plan.window,
        affected: plan.affected.clone(),
        started_at: t0,
        quiescent_at,
        released_at,
        downtime,
        held_invocations,
        max_held_wait,
        total_held_wait,
        swapped,
        verdicts: plan.verdicts.clone(),
        findings,
    })
}
