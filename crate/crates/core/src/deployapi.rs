//! Module lifecycle over the simulated runtime: distribute, start, stop,
//! undeploy and redeploy, with progress notifications.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ApplicationConfiguration, ComponentDescriptor, ContainerSpec};
use crate::pirma::{
    self, EntityMigration, Outcome, PirmaError, PlanOptions, ReconfigurationReport, ReconfigurationRequest, Rejection,
    TargetChange,
};
use crate::simrt::{Engine, SimError, Time};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleArchive {
    pub module: String,
    pub version: u64,
    pub components: Vec<ComponentDescriptor>,
}

impl ModuleArchive {
    pub fn validate(&self) -> Result<(), DeployError> {
        let mut names = BTreeSet::new();
        for c in &self.components {
            if !names.insert(c.name.as_str()) {
                return Err(DeployError::InvalidArchive(format!(
                    "component `{}` appears twice in module `{}`",
                    c.name, self.module
                )));
            }
            c.validate().map_err(|e| DeployError::InvalidArchive(e.to_string()))?;
        }
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleState {
    Distributed,
    Started,
    Stopped,
    Undeployed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeployOp {
    Distribute,
    Start,
    Stop,
    Undeploy,
    Redeploy,
}

/// Transition taken by a lifecycle operation from a given state, if legal.
/// `None` as the source stands for a module that does not exist yet.
pub fn transition(from: Option<LifecycleState>, op: DeployOp) -> Option<LifecycleState> {
    use LifecycleState::*;
    match (from, op) {
        (None | Some(Undeployed), DeployOp::Distribute) => Some(Distributed),
        (Some(Distributed | Stopped), DeployOp::Start) => Some(Started),
        (Some(Started), DeployOp::Stop) => Some(Stopped),
        (Some(Distributed | Stopped), DeployOp::Undeploy) => Some(Undeployed),
        (Some(Started), DeployOp::Redeploy) => Some(Started),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgressStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub operation: DeployOp,
    pub module: String,
    pub status: ProgressStatus,
    pub detail: String,
    pub t: Time,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RedeployMode {
    /// The runtime configuration must stay the same: structural diffs are refused.
    Strict,
    /// Structural diffs are accepted when classified safe.
    #[default]
    Weakened,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeployError {
    #[error("illegal transition: {op:?} on module `{module}` in state {from:?}")]
    IllegalTransition {
        module: String,
        from: Option<LifecycleState>,
        op: DeployOp,
    },
    #[error("invalid archive: {0}")]
    InvalidArchive(String),
    #[error("component `{component}` already belongs to module `{module}`")]
    ComponentClash { component: String, module: String },
    #[error("drain timed out at t={deadline} with {pending:?} still busy")]
    DrainTimeout { deadline: Time, pending: Vec<String> },
    #[error("redeploy rejected: {0}")]
    Rejected(Box<Rejection>),
    #[error("redeploy ended with {0:?}")]
    NotCompleted(Box<ReconfigurationReport>),
    #[error(transparent)]
    Engine(#[from] SimError),
    #[error(transparent)]
    Pirma(Box<PirmaError>),
}

impl From<PirmaError> for DeployError {
    fn from(e: PirmaError) -> Self {
        match e {
            PirmaError::Rejected(r) => DeployError::Rejected(r),
            PirmaError::Engine(SimError::DrainTimeout { deadline, pending }) => {
                DeployError::DrainTimeout { deadline, pending }
            }
            PirmaError::Engine(e) => DeployError::Engine(e),
            e => DeployError::Pirma(Box::new(e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub archive: ModuleArchive,
    pub state: LifecycleState,
}

type Observer = Box<dyn FnMut(&ProgressEvent) + Send>;

pub struct DeploymentManager {
    engine: Engine,
    modules: BTreeMap<String, ModuleRecord>,
    observers: Vec<Observer>,
    progress: Vec<ProgressEvent>,
    pub mode: RedeployMode,
    pub plan_options: PlanOptions,
}

impl DeploymentManager {
    pub fn new(seed: u64) -> Self {
        Self::with_engine(Engine::new(ApplicationConfiguration::empty(), seed))
    }

    pub fn with_engine(engine: Engine) -> Self {
        Self {
            engine,
            modules: BTreeMap::new(),
            observers: Vec::new(),
            progress: Vec::new(),
            mode: RedeployMode::default(),
            plan_options: PlanOptions::default(),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn into_engine(self) -> Engine {
        self.engine
    }

    pub fn state(&self, module: &str) -> Option<LifecycleState> {
        self.modules.get(module).map(|m| m.state)
    }

    pub fn modules(&self) -> &BTreeMap<String, ModuleRecord> {
        &self.modules
    }

    pub fn progress(&self) -> &[ProgressEvent] {
        &self.progress
    }

    /// Registers an observer; it sees every later event in emission order.
    pub fn subscribe(&mut self, observer: impl FnMut(&ProgressEvent) + Send + 'static) {
        self.observers.push(Box::new(observer));
    }

    fn emit(&mut self, operation: DeployOp, module: &str, status: ProgressStatus, detail: String) {
        let ev = ProgressEvent {
            operation,
            module: module.to_string(),
            status,
            detail,
            t: self.engine.now(),
        };
        for o in &mut self.observers {
            o(&ev);
        }
        self.progress.push(ev);
    }

    /// Wraps one operation with its Running and terminal progress events.
    fn run<T>(
        &mut self,
        op: DeployOp,
        module: &str,
        body: impl FnOnce(&mut Self) -> Result<(T, String), DeployError>,
    ) -> Result<T, DeployError> {
        self.emit(op, module, ProgressStatus::Running, String::new());
        let from = self.state(module);
        let result = match transition(from, op) {
            None => Err(DeployError::IllegalTransition {
                module: module.to_string(),
                from,
                op,
            }),
            Some(_) => body(self),
        };
        match result {
            Ok((v, detail)) => {
                self.emit(op, module, ProgressStatus::Completed, detail);
                Ok(v)
            }
            Err(e) => {
                self.emit(op, module, ProgressStatus::Failed, e.to_string());
                Err(e)
            }
        }
    }

    fn set_state(&mut self, module: &str, state: LifecycleState) {
        self.modules.get_mut(module).expect("module exists").state = state;
    }

    pub fn distribute(&mut self, archive: ModuleArchive) -> Result<LifecycleState, DeployError> {
        let module = archive.module.clone();
        self.run(DeployOp::Distribute, &module, |m| {
            archive.validate()?;
            for c in &archive.components {
                if let Some((owner, _)) = m
                    .modules
                    .iter()
                    .find(|(id, r)| **id != archive.module && r.state != LifecycleState::Undeployed && r.archive.names().contains(&c.name))
                {
                    return Err(DeployError::ComponentClash {
                        component: c.name.clone(),
                        module: owner.clone(),
                    });
                }
            }
            for c in &archive.components {
                m.engine.deploy_component(c.clone(), ContainerSpec::with_defaults(&c.name))?;
            }
            let wiring = pirma::rewire(m.engine.config());
            m.engine.set_wiring(wiring);
            let n = archive.components.len();
            m.modules.insert(
                archive.module.clone(),
                ModuleRecord {
                    archive,
                    state: LifecycleState::Distributed,
                },
            );
            Ok((LifecycleState::Distributed, format!("{n} containers created")))
        })
    }

    pub fn start(&mut self, module: &str) -> Result<LifecycleState, DeployError> {
        self.run(DeployOp::Start, module, |m| {
            for c in m.modules[module].archive.names() {
                m.engine.start_container(&c)?;
            }
            m.set_state(module, LifecycleState::Started);
            Ok((LifecycleState::Started, String::new()))
        })
    }

    /// Drains every container of the module, denying new calls meanwhile,
    /// then stops them. On a drain timeout the module stays started.
    pub fn stop(&mut self, module: &str) -> Result<LifecycleState, DeployError> {
        self.run(DeployOp::Stop, module, |m| {
            let names = m.modules[module].archive.names();
            for c in &names {
                m.engine.begin_clean_shutdown(c)?;
            }
            let deadline = m.engine.now().saturating_add(m.engine.drain_timeout);
            match m.engine.await_drained(&names, deadline) {
                Ok(t) => {
                    for c in &names {
                        m.engine.stop_container(c)?;
                    }
                    m.set_state(module, LifecycleState::Stopped);
                    Ok((LifecycleState::Stopped, format!("drained at t={t}")))
                }
                Err(SimError::DrainTimeout { deadline, pending }) => {
                    for c in &names {
                        m.engine.start_container(c)?;
                    }
                    Err(DeployError::DrainTimeout { deadline, pending })
                }
                Err(e) => Err(e.into()),
            }
        })
    }

    pub fn undeploy(&mut self, module: &str) -> Result<LifecycleState, DeployError> {
        self.run(DeployOp::Undeploy, module, |m| {
            for c in m.modules[module].archive.names() {
                m.engine.undeploy_component(&c)?;
            }
            let wiring = pirma::rewire(m.engine.config());
            m.engine.set_wiring(wiring);
            m.set_state(module, LifecycleState::Undeployed);
            Ok((LifecycleState::Undeployed, String::new()))
        })
    }

    /// Diffs the new archive component-wise and hands the changed
    /// components to the reconfiguration manager. Components only present
    /// in the new archive are deployed and started first.
    pub fn redeploy(
        &mut self,
        module: &str,
        archive: ModuleArchive,
        migrations: Vec<EntityMigration>,
    ) -> Result<ReconfigurationReport, DeployError> {
        self.run(DeployOp::Redeploy, module, |m| {
            archive.validate()?;
            let old = m.modules[module].archive.clone();
            if archive.module != old.module || archive.version <= old.version {
                return Err(DeployError::InvalidArchive(format!(
                    "expected module `{}` above version {}, got `{}` version {}",
                    old.module, old.version, archive.module, archive.version
                )));
            }
            let mut targets = Vec::new();
            for c in &old.components {
                match archive.components.iter().find(|n| n.name == c.name) {
                    Some(n) if n == c => {}
                    Some(n) => targets.push(TargetChange {
                        component: c.name.clone(),
                        descriptor: Some(n.clone()),
                        descriptor_file: None,
                    }),
                    None => targets.push(TargetChange {
                        component: c.name.clone(),
                        descriptor: None,
                        descriptor_file: None,
                    }),
                }
            }
            let added: Vec<&ComponentDescriptor> = archive
                .components
                .iter()
                .filter(|n| !old.components.iter().any(|c| c.name == n.name))
                .collect();
            let request = ReconfigurationRequest {
                id: format!("{}@{}", archive.module, archive.version),
                targets,
                qos_changes: vec![],
                entity_migration: migrations,
                requested_at: m.engine.now(),
            };
            if request.targets.is_empty() && added.is_empty() {
                return Err(DeployError::InvalidArchive("archive changes nothing".into()));
            }
            for d in &added {
                m.engine.deploy_component((*d).clone(), ContainerSpec::with_defaults(&d.name))?;
                m.engine.start_container(&d.name)?;
            }
            let report = if request.targets.is_empty() {
                let wiring = pirma::rewire(m.engine.config());
                m.engine.set_wiring(wiring);
                None
            } else {
                let opts = PlanOptions {
                    strict: m.mode == RedeployMode::Strict,
                    ..m.plan_options
                };
                let snapshot = m.engine.snapshot();
                let plan = pirma::plan(&request, m.engine.config(), &snapshot, &opts);
                let plan = match plan {
                    Ok(p) => p,
                    Err(e) => {
                        for d in &added {
                            m.engine.undeploy_component(&d.name)?;
                        }
                        return Err(e.into());
                    }
                };
                Some(pirma::execute(&plan, &request, &mut m.engine)?)
            };
            let report = report.unwrap_or_else(|| ReconfigurationReport::empty(&request.id, m.engine.now()));
            if report.outcome != Outcome::Completed {
                return Err(DeployError::NotCompleted(Box::new(report)));
            }
            m.modules.get_mut(module).expect("exists").archive = archive;
            let detail = format!("swapped {:?}", report.swapped);
            Ok((report, detail))
        })
    }
}
