use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::{DenyReason, EventBody, EventLog, HandleOp, Row, StoreWrite, Time};
use super::scenario::{CallTarget, ClientSpec, FaultKind, FaultSpec, MessageSpec, WorkloadScenario};
use super::snapshot::{InProgress, InstanceSnapshot, RuntimeSnapshot};
use crate::model::{
    Access, ApplicationConfiguration, ComponentDescriptor, ComponentKind, ContainerSpec,
    DataStoreSpec, InterceptorKind, TxAttribute, Wire,
};
use crate::sefa::{AutomatonCursor, CallLabel, ProtocolViolation, ServiceEffectAutomaton};

/// Event classes; lower runs first at equal time.
pub const CLASS_COMPLETION: u8 = 0;
pub const CLASS_BARRIER: u8 = 1;
pub const CLASS_DISPATCH: u8 = 2;

/// Automaton steps after which an invocation steers to a final state.
pub const STEP_CAP: u32 = 16;
pub const DEFAULT_DRAIN_TIMEOUT: Time = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BarrierMode {
    Open,
    Draining,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("{component}.{operation}: {violation}")]
    ProtocolViolation {
        component: String,
        operation: String,
        violation: ProtocolViolation,
    },
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("container `{component}` has no {interceptor:?} interceptor")]
    MissingInterceptor {
        component: String,
        interceptor: InterceptorKind,
    },
    #[error("barrier on `{0}` is already active")]
    BarrierActive(String),
    #[error("barrier on `{0}` is not closed")]
    BarrierNotClosed(String),
    #[error("`{0}` is not quiescent")]
    NotQuiescent(String),
    #[error("drain timed out at t={deadline}; still busy: {pending:?}")]
    DrainTimeout { deadline: Time, pending: Vec<String> },
    #[error("`{component}` changes conversational state shape {old:?} -> {new:?}")]
    StateShapeMismatch {
        component: String,
        old: Vec<String>,
        new: Vec<String>,
    },
    #[error("entity `{0}` changes its schema and needs a synced shadow store")]
    MigrationRequired(String),
    #[error("migration of `{component}`: {reason}")]
    InvalidMigration { component: String, reason: String },
    #[error("component `{0}` is already deployed")]
    AlreadyDeployed(String),
}

/// How an entity's rows move to a shadow store with the new schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMigration {
    pub shadow_store: String,
    pub schema: Vec<String>,
    /// Old column to new column. Unmapped new columns start at 0.
    #[serde(default)]
    pub column_map: BTreeMap<String, String>,
}

impl StoreMigration {
    /// Identity mapping over the columns both schemas share.
    pub fn derive(shadow_store: &str, old_schema: &[String], new_schema: &[String]) -> Self {
        Self {
            shadow_store: shadow_store.to_string(),
            schema: new_schema.to_vec(),
            column_map: new_schema
                .iter()
                .filter(|c| old_schema.contains(c))
                .map(|c| (c.clone(), c.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SwapOptions {
    /// Reference holders that are themselves being replaced and keep
    /// their handles.
    pub keep_refs: BTreeSet<String>,
    /// Whether the provided interfaces change.
    pub structural: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Store {
    pub schema: Vec<String>,
    pub rows: BTreeMap<String, Row>,
}

/// Observable end state of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeState {
    pub time: Time,
    pub stores: BTreeMap<String, Store>,
    pub conversations: BTreeMap<String, BTreeMap<String, Row>>,
    pub remote_refs: BTreeMap<String, BTreeSet<String>>,
    pub store_bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pending,
    Held,
    PoolWait,
    Running,
    Done,
    Denied,
}

#[derive(Debug, Clone)]
struct Invocation {
    parent: Option<u64>,
    root: u64,
    session: String,
    key: String,
    target: CallTarget,
    caller_tx: Option<u64>,
    /// Component that holds the reference when reached through a remote
    /// interface; the session for remote clients.
    ref_holder: Option<String>,
    message: Option<(String, u64)>,
    submitted_at: Time,
    start_seq: Option<usize>,
    status: Status,
    tx: Option<u64>,
    begins_tx: bool,
    instance: Option<u32>,
    descriptor: Option<Arc<ComponentDescriptor>>,
    cursor: Option<AutomatonCursor>,
    steps: u32,
    spent: u64,
    children: u32,
    outstanding: Option<CallLabel>,
    /// Gap to wait once the outstanding call returns.
    gap: u64,
}

#[derive(Debug, Clone)]
struct TxRecord {
    writes: Vec<StoreWrite>,
    touched: BTreeSet<String>,
    rollback_only: bool,
}

#[derive(Debug, Clone)]
struct Container {
    spec: ContainerSpec,
    descriptor: Arc<ComponentDescriptor>,
    started: bool,
    removed: bool,
    clean_shutdown: bool,
    mode: BarrierMode,
    activated_seq: usize,
    held: VecDeque<u64>,
    slots: Vec<Option<u64>>,
    pool_wait: VecDeque<u64>,
    executing: BTreeSet<u64>,
    conversations: BTreeMap<String, Row>,
    remote_refs: BTreeSet<String>,
    store_binding: Option<String>,
    synced_to: Option<String>,
    protocol_fault: bool,
    rollback_fault: bool,
}

impl Container {
    fn new(spec: ContainerSpec, descriptor: ComponentDescriptor) -> Self {
        Self {
            store_binding: descriptor.data_store.clone(),
            spec,
            descriptor: Arc::new(descriptor),
            started: true,
            removed: false,
            clean_shutdown: false,
            mode: BarrierMode::Open,
            activated_seq: 0,
            held: VecDeque::new(),
            slots: Vec::new(),
            pool_wait: VecDeque::new(),
            executing: BTreeSet::new(),
            conversations: BTreeMap::new(),
            remote_refs: BTreeSet::new(),
            synced_to: None,
            protocol_fault: false,
            rollback_fault: false,
        }
    }

    fn free_slot(&mut self) -> Option<u32> {
        let cap = self.spec.pool_size as usize;
        if let Some(i) = self.slots.iter().take(cap).position(Option::is_none) {
            return Some(i as u32);
        }
        if self.slots.len() < cap {
            self.slots.push(None);
            return Some(self.slots.len() as u32 - 1);
        }
        None
    }
}

#[derive(Debug, Clone, Default)]
struct QueueState {
    pending: VecDeque<u64>,
    paused: bool,
    in_flight: Option<u64>,
}

#[derive(Debug, Clone)]
enum Action {
    ClientStep { client: usize, step: usize },
    Message { index: usize },
    Fault { index: usize },
    Resume { inv: u64 },
    Finish { inv: u64 },
}

#[derive(Debug, Clone)]
struct Scheduled {
    key: (Time, u8, u64),
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap pops the smallest key
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.cmp(&self.key)
    }
}

/// Deterministic discrete-event container runtime.
#[derive(Debug, Clone)]
pub struct Engine {
    config: ApplicationConfiguration,
    containers: BTreeMap<String, Container>,
    invocations: Vec<Invocation>,
    txs: BTreeMap<u64, TxRecord>,
    next_tx: u64,
    stores: BTreeMap<String, Store>,
    queues: BTreeMap<String, QueueState>,
    clients: Vec<ClientSpec>,
    messages: Vec<MessageSpec>,
    faults: Vec<FaultSpec>,
    agenda: BinaryHeap<Scheduled>,
    seq: u64,
    now: Time,
    seed: u64,
    log: EventLog,
    replayed: Vec<u64>,
    pub drain_timeout: Time,
}

fn rng_for(seed: u64, key: &str, salt: u64) -> ChaCha8Rng {
    // FNV-1a keeps the stream stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl Engine {
    pub fn new(config: ApplicationConfiguration, seed: u64) -> Self {
        let mut containers = BTreeMap::new();
        for d in config.components() {
            let spec = config
                .container(&d.name)
                .cloned()
                .unwrap_or_else(|| ContainerSpec::with_defaults(&d.name));
            containers.insert(d.name.clone(), Container::new(spec, d.clone()));
        }
        let stores = config
            .data_stores
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    Store {
                        schema: s.schema.clone(),
                        rows: BTreeMap::new(),
                    },
                )
            })
            .collect();
        let queues = config
            .queues
            .iter()
            .map(|q| (q.clone(), QueueState::default()))
            .collect();
        Self {
            config,
            containers,
            invocations: Vec::new(),
            txs: BTreeMap::new(),
            next_tx: 1,
            stores,
            queues,
            clients: Vec::new(),
            messages: Vec::new(),
            faults: Vec::new(),
            agenda: BinaryHeap::new(),
            seq: 0,
            now: 0,
            seed,
            log: EventLog::default(),
            replayed: Vec::new(),
            drain_timeout: DEFAULT_DRAIN_TIMEOUT,
        }
    }

    /// Validates and schedules a workload. May be called more than once.
    pub fn load(&mut self, scenario: &WorkloadScenario) -> Result<(), SimError> {
        scenario.validate(&self.config).map_err(SimError::Scenario)?;
        for c in &scenario.clients {
            if self.clients.iter().any(|k| k.id == c.id) {
                return Err(SimError::Scenario(format!("client `{}` already loaded", c.id)));
            }
            let idx = self.clients.len();
            self.clients.push(c.clone());
            for (s, step) in c.script.iter().enumerate() {
                self.schedule(step.at, CLASS_DISPATCH, Action::ClientStep { client: idx, step: s });
            }
        }
        for m in &scenario.messages {
            let index = self.messages.len();
            self.messages.push(m.clone());
            self.schedule(m.at, CLASS_DISPATCH, Action::Message { index });
        }
        for f in &scenario.faults {
            let index = self.faults.len();
            self.faults.push(f.clone());
            self.schedule(f.at, CLASS_DISPATCH, Action::Fault { index });
        }
        Ok(())
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    pub fn config(&self) -> &ApplicationConfiguration {
        &self.config
    }

    pub fn barrier_mode(&self, component: &str) -> Option<BarrierMode> {
        self.containers.get(component).map(|c| c.mode)
    }

    pub fn held_count(&self, component: &str) -> usize {
        self.containers.get(component).map_or(0, |c| c.held.len())
    }

    /// Invocations waiting at the component's barrier, in replay order.
    pub fn held_calls(&self, component: &str) -> Vec<(u64, CallTarget)> {
        self.containers.get(component).map_or_else(Vec::new, |c| {
            c.held
                .iter()
                .map(|&i| (i, self.invocations[i as usize].target.clone()))
                .collect()
        })
    }

    pub fn replayed_count(&self) -> usize {
        self.replayed.len()
    }

    pub fn is_started(&self, component: &str) -> bool {
        self.containers.get(component).is_some_and(|c| c.started && !c.removed)
    }

    /// Invocations re-dispatched after a barrier release, with their target.
    pub fn replayed(&self) -> Vec<(u64, CallTarget)> {
        self.replayed
            .iter()
            .map(|&i| (i, self.invocations[i as usize].target.clone()))
            .collect()
    }

    pub fn next_event_time(&self) -> Option<Time> {
        self.agenda.peek().map(|s| s.key.0)
    }

    fn schedule(&mut self, at: Time, class: u8, action: Action) {
        self.seq += 1;
        self.agenda.push(Scheduled {
            key: (at, class, self.seq),
            action,
        });
    }

    fn emit(&mut self, body: EventBody) {
        self.log.push(self.now, body);
    }

    /// Runs every pending event.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Runs events strictly before `(t, class)` and moves the clock to `t`.
    pub fn advance_to(&mut self, t: Time, class: u8) -> Result<(), SimError> {
        while self.agenda.peek().is_some_and(|s| (s.key.0, s.key.1) < (t, class)) {
            self.step()?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    /// Runs everything and appends the terminal `RunEnd` event.
    pub fn finish(&mut self) -> Result<(), SimError> {
        self.run_to_end()?;
        self.emit(EventBody::RunEnd {});
        Ok(())
    }

    fn step(&mut self) -> Result<bool, SimError> {
        let Some(s) = self.agenda.pop() else {
            return Ok(false);
        };
        self.now = self.now.max(s.key.0);
        match s.action {
            Action::ClientStep { client, step } => self.client_step(client, step)?,
            Action::Message { index } => {
                let m = self.messages[index].clone();
                let id = index as u64;
                self.queues.get_mut(&m.queue).expect("validated").pending.push_back(id);
                self.emit(EventBody::MessageEnqueued {
                    queue: m.queue.clone(),
                    message: id,
                    payload: m.payload,
                });
                self.try_deliver(&m.queue)?;
            }
            Action::Fault { index } => self.fault(index),
            Action::Resume { inv } => self.decide(inv)?,
            Action::Finish { inv } => self.finish_invocation(inv)?,
        }
        Ok(true)
    }

    fn client_step(&mut self, client: usize, step: usize) -> Result<(), SimError> {
        let c = &self.clients[client];
        let session = c.id.clone();
        let remote = c.access == Access::Remote;
        let s = c.script[step].clone();
        if let Some(h) = s.handle {
            if let Some(ct) = self.containers.get_mut(&h.component) {
                if remote {
                    match h.op {
                        HandleOp::Create | HandleOp::Find => {
                            ct.remote_refs.insert(session.clone());
                        }
                        HandleOp::Remove => {
                            ct.remote_refs.remove(&session);
                        }
                    }
                }
                match h.op {
                    HandleOp::Create => {
                        let fields = &ct.descriptor.state_fields;
                        if !fields.is_empty() {
                            let row = fields.iter().map(|f| (f.clone(), 0)).collect();
                            ct.conversations.entry(session.clone()).or_insert(row);
                        }
                    }
                    HandleOp::Remove => {
                        ct.conversations.remove(&session);
                    }
                    HandleOp::Find => {}
                }
            }
            self.emit(EventBody::Handle {
                session,
                component: h.component,
                op: h.op,
            });
            return Ok(());
        }
        let target = s.call.expect("validated step");
        let id = self.new_invocation(Invocation {
            parent: None,
            root: 0,
            session: session.clone(),
            key: format!("{session}#{step}"),
            target,
            caller_tx: None,
            ref_holder: remote.then_some(session),
            message: None,
            submitted_at: self.now,
            start_seq: None,
            status: Status::Pending,
            tx: None,
            begins_tx: false,
            instance: None,
            descriptor: None,
            cursor: None,
            steps: 0,
            spent: 0,
            children: 0,
            outstanding: None,
            gap: 0,
        });
        self.dispatch(id)
    }

    fn new_invocation(&mut self, mut inv: Invocation) -> u64 {
        let id = self.invocations.len() as u64;
        if inv.parent.is_none() {
            inv.root = id;
        }
        self.invocations.push(inv);
        id
    }

    fn fault(&mut self, index: usize) {
        let f = self.faults[index].clone();
        let Some(c) = self.containers.get_mut(&f.component) else {
            return;
        };
        match f.kind {
            FaultKind::ProtocolViolation => c.protocol_fault = true,
            FaultKind::RollbackOnly => {
                let mut hit = false;
                for tx in self.txs.values_mut() {
                    if tx.touched.contains(&f.component) {
                        tx.rollback_only = true;
                        hit = true;
                    }
                }
                if !hit {
                    c.rollback_fault = true;
                }
            }
        }
    }

    fn deny(&mut self, id: u64, reason: DenyReason) -> Result<(), SimError> {
        let inv = &mut self.invocations[id as usize];
        inv.status = Status::Denied;
        let (session, component, parent, message) = (
            inv.session.clone(),
            inv.target.component.clone(),
            inv.parent,
            inv.message.clone(),
        );
        self.emit(EventBody::InvocationDenied {
            invocation: id,
            session,
            component,
            reason,
        });
        if let Some(p) = parent {
            self.resume_after_call(p);
        }
        if let Some((queue, message)) = message {
            self.emit(EventBody::MessageDropped {
                queue: queue.clone(),
                message,
            });
            self.queues.get_mut(&queue).expect("known queue").in_flight = None;
            self.try_deliver(&queue)?;
        }
        Ok(())
    }

    fn passes_draining(&self, id: u64, component: &str) -> bool {
        let inv = &self.invocations[id as usize];
        let c = &self.containers[component];
        let joins = c
            .descriptor
            .operation(&inv.target.operation)
            .is_some_and(|o| o.tx_attribute == TxAttribute::Joins);
        if joins
            && inv
                .caller_tx
                .and_then(|t| self.txs.get(&t))
                .is_some_and(|t| t.touched.contains(component))
        {
            return true;
        }
        inv.parent.is_some()
            && self.invocations[inv.root as usize]
                .start_seq
                .is_some_and(|s| s < c.activated_seq)
    }

    /// Routes an invocation through its container's interceptor chain.
    fn dispatch(&mut self, id: u64) -> Result<(), SimError> {
        let target = self.invocations[id as usize].target.clone();
        let Some(c) = self.containers.get(&target.component).filter(|c| !c.removed) else {
            return self.deny(id, DenyReason::NoSuchComponent);
        };
        if !c.started {
            return self.deny(id, DenyReason::NotStarted);
        }
        let routable = c
            .descriptor
            .provided_interface(&target.interface)
            .is_some_and(|i| i.has_operation(&target.operation))
            && c.descriptor.operation(&target.operation).is_some();
        if !routable {
            return self.deny(id, DenyReason::NoSuchOperation);
        }
        let chain = c.spec.interceptor_chain.clone();
        for k in chain {
            match k {
                InterceptorKind::CleanShutdown => {
                    let c = &self.containers[&target.component];
                    if c.clean_shutdown && self.invocations[id as usize].parent.is_none() {
                        return self.deny(id, DenyReason::CleanShutdown);
                    }
                }
                InterceptorKind::RedeployBarrier => {
                    let hold = match self.containers[&target.component].mode {
                        BarrierMode::Open => false,
                        BarrierMode::Draining => !self.passes_draining(id, &target.component),
                        BarrierMode::Closed => true,
                    };
                    if hold {
                        self.hold(id);
                        return Ok(());
                    }
                }
                InterceptorKind::HomeTracking => {
                    if let Some(h) = self.invocations[id as usize].ref_holder.clone() {
                        self.containers
                            .get_mut(&target.component)
                            .expect("present")
                            .remote_refs
                            .insert(h);
                    }
                }
                InterceptorKind::Logging => {
                    self.emit(EventBody::Logged {
                        invocation: id,
                        component: target.component.clone(),
                        call: CallLabel::new(&target.interface, &target.operation),
                    });
                }
                InterceptorKind::Pooling => {
                    let c = self.containers.get_mut(&target.component).expect("present");
                    match c.free_slot() {
                        Some(slot) => self.start(id, slot)?,
                        None => {
                            c.pool_wait.push_back(id);
                            self.invocations[id as usize].status = Status::PoolWait;
                        }
                    }
                    return Ok(());
                }
                // transaction demarcation is resolved when the instance starts
                _ => {}
            }
        }
        unreachable!("validated chains contain Pooling")
    }

    fn hold(&mut self, id: u64) {
        let inv = &mut self.invocations[id as usize];
        inv.status = Status::Held;
        let (session, component, submitted_at) =
            (inv.session.clone(), inv.target.component.clone(), inv.submitted_at);
        let invs = &self.invocations;
        let c = self.containers.get_mut(&component).expect("present");
        let pos = c
            .held
            .iter()
            .position(|&h| (invs[h as usize].submitted_at, h) > (submitted_at, id))
            .unwrap_or(c.held.len());
        c.held.insert(pos, id);
        self.emit(EventBody::InvocationHeld {
            invocation: id,
            session,
            component,
            submitted_at,
        });
    }

    fn start(&mut self, id: u64, slot: u32) -> Result<(), SimError> {
        let component = self.invocations[id as usize].target.component.clone();
        let c = self.containers.get_mut(&component).expect("present");
        c.slots[slot as usize] = Some(id);
        c.executing.insert(id);
        let descriptor = Arc::clone(&c.descriptor);
        let rollback_fault = std::mem::take(&mut c.rollback_fault);
        let inv = &self.invocations[id as usize];
        let op = descriptor.operation(&inv.target.operation).expect("routed");
        let (tx, begins) = match op.tx_attribute {
            TxAttribute::StartsNew => (None, true),
            TxAttribute::Joins => (inv.caller_tx, inv.caller_tx.is_none()),
            TxAttribute::None => (None, false),
        };
        let tx = if begins {
            let t = self.next_tx;
            self.next_tx += 1;
            self.txs.insert(
                t,
                TxRecord {
                    writes: Vec::new(),
                    touched: BTreeSet::new(),
                    rollback_only: false,
                },
            );
            self.emit(EventBody::TxBegin {
                tx: t,
                root_invocation: id,
                component: component.clone(),
            });
            Some(t)
        } else {
            tx
        };
        if let Some(t) = tx {
            let rec = self.txs.get_mut(&t).expect("active tx");
            rec.touched.insert(component.clone());
            rec.rollback_only |= rollback_fault;
        } else if rollback_fault {
            self.containers.get_mut(&component).expect("present").rollback_fault = true;
        }
        let cursor = op.effect_automaton.as_ref().map(|a| a.start());
        let start_seq = self.log.len();
        let inv = &mut self.invocations[id as usize];
        inv.status = Status::Running;
        inv.tx = tx;
        inv.begins_tx = begins;
        inv.instance = Some(slot);
        inv.cursor = cursor;
        inv.start_seq = Some(start_seq);
        inv.descriptor = Some(descriptor);
        let body = EventBody::InvocationStart {
            invocation: id,
            parent: inv.parent,
            session: inv.session.clone(),
            component,
            interface: inv.target.interface.clone(),
            operation: inv.target.operation.clone(),
            instance: slot,
            tx,
            submitted_at: inv.submitted_at,
        };
        self.emit(body);
        self.decide(id)
    }

    /// Picks the next automaton move for a running invocation.
    fn decide(&mut self, id: u64) -> Result<(), SimError> {
        let inv = &self.invocations[id as usize];
        let component = inv.target.component.clone();
        let c = self.containers.get_mut(&component).expect("present");
        if std::mem::take(&mut c.protocol_fault) {
            let cursor = inv
                .cursor
                .clone()
                .unwrap_or_else(|| Arc::new(ServiceEffectAutomaton::trivial()).start());
            let label = CallLabel::new("<undeclared>", &inv.target.operation);
            if let Err(violation) = cursor.advance(&label) {
                return Err(SimError::ProtocolViolation {
                    component,
                    operation: inv.target.operation.clone(),
                    violation,
                });
            }
        }
        let duration = inv
            .descriptor
            .as_ref()
            .and_then(|d| d.operation(&inv.target.operation))
            .map_or(0, |o| o.duration);
        let next = match &inv.cursor {
            None => None,
            Some(cur) => {
                let a = cur.automaton();
                let outs: Vec<_> = a.outgoing(cur.current()).cloned().collect();
                let fin = cur.is_final();
                if outs.is_empty() {
                    None
                } else if inv.steps >= STEP_CAP {
                    if fin {
                        None
                    } else {
                        let hops = a.hops_to_final();
                        outs.into_iter().min_by_key(|t| hops[t.to])
                    }
                } else {
                    let n = outs.len() + usize::from(fin);
                    let r = rng_for(self.seed, &inv.key, u64::from(inv.steps)).gen_range(0..n);
                    outs.into_iter().nth(r)
                }
            }
        };
        match next {
            Some(t) => self.issue(id, t.label, t.min_delay)?,
            None => {
                let rest = duration.saturating_sub(inv.spent);
                self.schedule(self.now + rest, CLASS_COMPLETION, Action::Finish { inv: id });
            }
        }
        Ok(())
    }

    /// Makes the call at once; the transition's delay runs after it returns.
    fn issue(&mut self, id: u64, label: CallLabel, delay: u64) -> Result<(), SimError> {
        let inv = &mut self.invocations[id as usize];
        let cursor = inv.cursor.as_ref().expect("issued from a cursor");
        let next = cursor.advance(&label).map_err(|violation| SimError::ProtocolViolation {
            component: inv.target.component.clone(),
            operation: inv.target.operation.clone(),
            violation,
        })?;
        inv.cursor = Some(next);
        inv.spent += delay;
        inv.gap = delay;
        inv.steps += 1;
        inv.children += 1;
        let caller = inv.target.component.clone();
        let provider = self
            .config
            .provider_of(&caller, &label.interface)
            .flatten()
            .map(str::to_string);
        let Some(provider) = provider else {
            // external or unwired: returns at once
            self.resume_after_call(id);
            return Ok(());
        };
        let remote = self
            .config
            .component(&provider)
            .and_then(|d| d.provided_interface(&label.interface))
            .is_some_and(|i| i.access == Access::Remote);
        let inv = &self.invocations[id as usize];
        let child = Invocation {
            parent: Some(id),
            root: inv.root,
            session: inv.session.clone(),
            key: format!("{}/{}", inv.key, inv.children),
            target: CallTarget {
                component: provider,
                interface: label.interface.clone(),
                operation: label.operation.clone(),
            },
            caller_tx: inv.tx,
            ref_holder: remote.then(|| caller.clone()),
            message: None,
            submitted_at: self.now,
            start_seq: None,
            status: Status::Pending,
            tx: None,
            begins_tx: false,
            instance: None,
            descriptor: None,
            cursor: None,
            steps: 0,
            spent: 0,
            children: 0,
            outstanding: None,
            gap: 0,
        };
        self.invocations[id as usize].outstanding = Some(label);
        let cid = self.new_invocation(child);
        self.dispatch(cid)
    }

    fn resume_after_call(&mut self, id: u64) {
        let inv = &mut self.invocations[id as usize];
        inv.outstanding = None;
        let at = self.now + inv.gap;
        self.schedule(at, CLASS_COMPLETION, Action::Resume { inv: id });
    }

    fn finish_invocation(&mut self, id: u64) -> Result<(), SimError> {
        let inv = &self.invocations[id as usize];
        let component = inv.target.component.clone();
        let descriptor = Arc::clone(inv.descriptor.as_ref().expect("started"));
        let (session, tx, key) = (inv.session.clone(), inv.tx, inv.key.clone());
        let c = self.containers.get_mut(&component).expect("present");
        if descriptor.kind == ComponentKind::Entity {
            if let (Some(t), Some(store)) = (tx, c.store_binding.clone()) {
                let mut rng = rng_for(self.seed, &key, 0xe7);
                let row: Row = descriptor
                    .entity_schema
                    .iter()
                    .map(|col| (col.clone(), rng.gen_range(0..1000)))
                    .collect();
                let k = format!("k{}", rng.gen_range(0..8));
                self.txs.get_mut(&t).expect("active tx").writes.push(StoreWrite { store, key: k, row });
            }
        }
        if descriptor.kind == ComponentKind::StatefulSession && !descriptor.state_fields.is_empty() {
            let fields = &descriptor.state_fields;
            let conv = c
                .conversations
                .entry(session.clone())
                .or_insert_with(|| fields.iter().map(|f| (f.clone(), 0)).collect());
            let total: i64 = conv.values().sum();
            let f = &fields[total.rem_euclid(fields.len() as i64) as usize];
            *conv.entry(f.clone()).or_insert(0) += 1;
        }
        let inv = &mut self.invocations[id as usize];
        inv.status = Status::Done;
        let slot = inv.instance.expect("started");
        let (parent, submitted_at, begins, message) =
            (inv.parent, inv.submitted_at, inv.begins_tx, inv.message.clone());
        c.executing.remove(&id);
        c.slots[slot as usize] = None;
        self.emit(EventBody::InvocationEnd {
            invocation: id,
            parent,
            session,
            component: component.clone(),
            submitted_at,
        });
        if begins {
            let t = tx.expect("began a tx");
            let rec = self.txs.remove(&t).expect("active tx");
            if rec.rollback_only {
                self.emit(EventBody::TxAbort {
                    tx: t,
                    reason: "rollback-only".into(),
                });
            } else {
                for w in &rec.writes {
                    self.stores
                        .get_mut(&w.store)
                        .expect("bound store exists")
                        .rows
                        .insert(w.key.clone(), w.row.clone());
                }
                self.emit(EventBody::TxCommit { tx: t, writes: rec.writes });
            }
        }
        if let Some(p) = parent {
            self.resume_after_call(p);
        }
        self.fill_pool(&component)?;
        if let Some((queue, _)) = message {
            self.queues.get_mut(&queue).expect("known queue").in_flight = None;
            self.try_deliver(&queue)?;
        }
        Ok(())
    }

    fn fill_pool(&mut self, component: &str) -> Result<(), SimError> {
        loop {
            let Some(c) = self.containers.get_mut(component) else {
                return Ok(());
            };
            if c.pool_wait.is_empty() {
                return Ok(());
            }
            let Some(slot) = c.free_slot() else {
                return Ok(());
            };
            let id = c.pool_wait.pop_front().expect("non-empty");
            self.start(id, slot)?;
        }
    }

    fn consumer_of(&self, queue: &str) -> Option<&Container> {
        self.containers.values().find(|c| {
            !c.removed && c.descriptor.kind == ComponentKind::MessageDriven && c.descriptor.queue.as_deref() == Some(queue)
        })
    }

    fn try_deliver(&mut self, queue: &str) -> Result<(), SimError> {
        let q = &self.queues[queue];
        if q.paused || q.in_flight.is_some() || q.pending.is_empty() {
            return Ok(());
        }
        let Some(c) = self.consumer_of(queue).filter(|c| c.started && !c.clean_shutdown) else {
            return Ok(());
        };
        let Some(iface) = c.descriptor.provided.first() else {
            return Ok(());
        };
        let Some(op) = iface.operations.first() else {
            return Ok(());
        };
        let target = CallTarget {
            component: c.descriptor.name.clone(),
            interface: iface.name.clone(),
            operation: op.name.clone(),
        };
        let q = self.queues.get_mut(queue).expect("known queue");
        let msg = q.pending.pop_front().expect("non-empty");
        q.in_flight = Some(msg);
        let session = format!("queue:{queue}");
        let id = self.new_invocation(Invocation {
            parent: None,
            root: 0,
            key: format!("{session}#{msg}"),
            session,
            target,
            caller_tx: None,
            ref_holder: None,
            message: Some((queue.to_string(), msg)),
            submitted_at: self.now,
            start_seq: None,
            status: Status::Pending,
            tx: None,
            begins_tx: false,
            instance: None,
            descriptor: None,
            cursor: None,
            steps: 0,
            spent: 0,
            children: 0,
            outstanding: None,
            gap: 0,
        });
        self.emit(EventBody::MessageDelivered {
            queue: queue.to_string(),
            message: msg,
            invocation: id,
        });
        self.dispatch(id)
    }

    fn container_mut(&mut self, component: &str) -> Result<&mut Container, SimError> {
        self.containers
            .get_mut(component)
            .filter(|c| !c.removed)
            .ok_or_else(|| SimError::UnknownComponent(component.to_string()))
    }

    fn container(&self, component: &str) -> Result<&Container, SimError> {
        self.containers
            .get(component)
            .filter(|c| !c.removed)
            .ok_or_else(|| SimError::UnknownComponent(component.to_string()))
    }

    // ---- redeployment primitives ----

    pub fn activate_barrier(&mut self, component: &str) -> Result<(), SimError> {
        let seq = self.log.len();
        let c = self.container_mut(component)?;
        if !c.spec.has(InterceptorKind::RedeployBarrier) {
            return Err(SimError::MissingInterceptor {
                component: component.to_string(),
                interceptor: InterceptorKind::RedeployBarrier,
            });
        }
        if c.mode != BarrierMode::Open {
            return Err(SimError::BarrierActive(component.to_string()));
        }
        c.mode = BarrierMode::Draining;
        c.activated_seq = seq;
        self.emit(EventBody::BarrierActivated {
            component: component.to_string(),
        });
        Ok(())
    }

    /// No invocation running or pool-queued in the container and no active
    /// transaction that has touched it.
    pub fn is_quiescent(&self, component: &str) -> bool {
        self.containers.get(component).is_none_or(|c| {
            c.executing.is_empty()
                && c.pool_wait.is_empty()
                && !self.txs.values().any(|t| t.touched.contains(component))
        })
    }

    fn drain_class0(&mut self) -> Result<(), SimError> {
        while self
            .agenda
            .peek()
            .is_some_and(|s| s.key.0 == self.now && s.key.1 == CLASS_COMPLETION)
        {
            self.step()?;
        }
        Ok(())
    }

    /// Runs the simulation until `done` holds after the completions of an
    /// instant, or until `deadline`.
    fn run_until_condition(
        &mut self,
        deadline: Time,
        done: impl Fn(&Self) -> bool,
        pending: impl Fn(&Self) -> Vec<String>,
    ) -> Result<Time, SimError> {
        loop {
            self.drain_class0()?;
            if done(self) {
                return Ok(self.now);
            }
            match self.next_event_time() {
                Some(t) if t <= deadline => {
                    self.step()?;
                }
                _ => {
                    self.advance_to(deadline, CLASS_BARRIER)?;
                    return Err(SimError::DrainTimeout {
                        deadline,
                        pending: pending(self),
                    });
                }
            }
        }
    }

    /// Waits for joint quiescence of `components`; each one's barrier then
    /// closes and `QuiescenceReached` is logged.
    pub fn await_quiescence(&mut self, components: &[String], deadline: Time) -> Result<Time, SimError> {
        for c in components {
            if self.container(c)?.mode == BarrierMode::Open {
                return Err(SimError::NotQuiescent(c.clone()));
            }
        }
        let t = self.run_until_condition(
            deadline,
            |e| components.iter().all(|c| e.is_quiescent(c)),
            |e| components.iter().filter(|c| !e.is_quiescent(c)).cloned().collect(),
        )?;
        for c in components {
            let ct = self.container_mut(c)?;
            if ct.mode != BarrierMode::Closed {
                ct.mode = BarrierMode::Closed;
                self.emit(EventBody::QuiescenceReached { component: c.clone() });
            }
        }
        Ok(t)
    }

    /// Opens every listed barrier, then replays each held queue in order.
    pub fn release_barriers(&mut self, components: &[String]) -> Result<(), SimError> {
        let mut replay = Vec::new();
        for name in components {
            let c = self
                .containers
                .get_mut(name)
                .ok_or_else(|| SimError::UnknownComponent(name.clone()))?;
            c.mode = BarrierMode::Open;
            let held: Vec<u64> = c.held.drain(..).collect();
            self.emit(EventBody::BarrierReleased {
                component: name.clone(),
                replayed: held.len(),
            });
            replay.extend(held);
        }
        for id in replay {
            self.replayed.push(id);
            self.invocations[id as usize].status = Status::Pending;
            self.dispatch(id)?;
        }
        Ok(())
    }

    pub fn release_barrier(&mut self, component: &str) -> Result<(), SimError> {
        self.release_barriers(&[component.to_string()])
    }

    /// Copies the bound store into `migration.shadow_store` under the new
    /// schema. The container must be closed.
    pub fn sync_shadow_store(&mut self, component: &str, migration: &StoreMigration) -> Result<usize, SimError> {
        let c = self.container(component)?;
        if c.mode != BarrierMode::Closed {
            return Err(SimError::BarrierNotClosed(component.to_string()));
        }
        let bad = |reason: String| SimError::InvalidMigration {
            component: component.to_string(),
            reason,
        };
        let source = c
            .store_binding
            .clone()
            .ok_or_else(|| bad("component has no bound data store".into()))?;
        if source == migration.shadow_store {
            return Err(bad("shadow store must differ from the live store".into()));
        }
        let src = &self.stores[&source];
        let mut sources: BTreeMap<&str, &str> = BTreeMap::new();
        for (old, new) in &migration.column_map {
            if !migration.schema.contains(new) || !src.schema.contains(old) {
                return Err(bad(format!("column map entry {old} -> {new} names an unknown column")));
            }
            if sources.insert(new, old).is_some() {
                return Err(bad(format!("column `{new}` is mapped twice")));
            }
        }
        let rows: BTreeMap<String, Row> = src
            .rows
            .iter()
            .map(|(k, row)| {
                let mapped = migration
                    .schema
                    .iter()
                    .map(|col| {
                        let v = sources.get(col.as_str()).and_then(|o| row.get(*o)).copied().unwrap_or(0);
                        (col.clone(), v)
                    })
                    .collect();
                (k.clone(), mapped)
            })
            .collect();
        let n = rows.len();
        if n != src.rows.len() {
            return Err(bad("row count changed during sync".into()));
        }
        self.stores.insert(
            migration.shadow_store.clone(),
            Store {
                schema: migration.schema.clone(),
                rows,
            },
        );
        if self.config.data_store(&migration.shadow_store).is_none() {
            self.config.data_stores.push(DataStoreSpec {
                name: migration.shadow_store.clone(),
                schema: migration.schema.clone(),
            });
        }
        self.container_mut(component)?.synced_to = Some(migration.shadow_store.clone());
        self.emit(EventBody::ShadowSynced {
            component: component.to_string(),
            from_store: source,
            to_store: migration.shadow_store.clone(),
            rows: n,
        });
        Ok(n)
    }

    /// Replaces the hosted implementation of a closed container, or removes
    /// it when `new` is `None`.
    pub fn apply_swap(
        &mut self,
        component: &str,
        new: Option<ComponentDescriptor>,
        opts: &SwapOptions,
    ) -> Result<(), SimError> {
        let c = self.container(component)?;
        if c.mode != BarrierMode::Closed {
            return Err(SimError::BarrierNotClosed(component.to_string()));
        }
        if !self.is_quiescent(component) {
            return Err(SimError::NotQuiescent(component.to_string()));
        }
        let old = Arc::clone(&c.descriptor);
        let Some(new) = new else {
            let c = self.container_mut(component)?;
            c.removed = true;
            c.slots.clear();
            c.conversations.clear();
            self.config.remove_component(component);
            self.config.version += 1;
            self.emit(EventBody::SwapApplied {
                component: component.to_string(),
                old_version: old.version,
                new_version: None,
            });
            return Ok(());
        };
        if old.kind == ComponentKind::StatefulSession
            && new.kind == ComponentKind::StatefulSession
            && old.state_fields != new.state_fields
        {
            return Err(SimError::StateShapeMismatch {
                component: component.to_string(),
                old: old.state_fields.clone(),
                new: new.state_fields.clone(),
            });
        }
        let mut binding = c.store_binding.clone();
        if new.kind == ComponentKind::Entity {
            let schema_changes = old.kind != ComponentKind::Entity || old.entity_schema != new.entity_schema;
            if schema_changes && binding.is_some() {
                let shadow = c
                    .synced_to
                    .clone()
                    .filter(|s| self.stores.get(s).is_some_and(|st| st.schema == new.entity_schema))
                    .ok_or_else(|| SimError::MigrationRequired(component.to_string()))?;
                binding = Some(shadow);
            } else if binding.is_none() {
                binding = new.data_store.clone();
            }
        }
        let mut invalidated = Vec::new();
        let c = self.container_mut(component)?;
        if new.kind != ComponentKind::StatefulSession {
            c.conversations.clear();
        }
        // passivated conversations carry over unchanged; pooled instances
        // are recreated against the new implementation
        c.slots.clear();
        c.store_binding = binding;
        c.synced_to = None;
        if opts.structural {
            let holders: Vec<String> = c
                .remote_refs
                .iter()
                .filter(|h| !opts.keep_refs.contains(*h))
                .cloned()
                .collect();
            for h in holders {
                c.remote_refs.remove(&h);
                invalidated.push(h);
            }
        }
        c.descriptor = Arc::new(new.clone());
        let new_version = new.version;
        self.config.replace_component(new);
        self.config.version += 1;
        self.emit(EventBody::SwapApplied {
            component: component.to_string(),
            old_version: old.version,
            new_version: Some(new_version),
        });
        for session in invalidated {
            self.emit(EventBody::SessionInvalidated {
                session,
                component: component.to_string(),
            });
        }
        Ok(())
    }

    /// Swap followed by release, for a single already-closed container.
    pub fn swap_component(
        &mut self,
        component: &str,
        new: ComponentDescriptor,
        opts: &SwapOptions,
    ) -> Result<(), SimError> {
        self.apply_swap(component, Some(new), opts)?;
        self.release_barrier(component)
    }

    pub fn set_wiring(&mut self, wiring: Vec<Wire>) {
        self.config.set_wiring(wiring);
    }

    /// Deploys and starts a new component.
    /// Adds a container that denies calls until started.
    pub fn deploy_component(&mut self, d: ComponentDescriptor, spec: ContainerSpec) -> Result<(), SimError> {
        if self.containers.get(&d.name).is_some_and(|c| !c.removed) {
            return Err(SimError::AlreadyDeployed(d.name.clone()));
        }
        if let Some(s) = &d.data_store {
            self.stores.entry(s.clone()).or_insert_with(|| Store {
                schema: d.entity_schema.clone(),
                rows: BTreeMap::new(),
            });
            if self.config.data_store(s).is_none() {
                self.config.data_stores.push(DataStoreSpec {
                    name: s.clone(),
                    schema: d.entity_schema.clone(),
                });
            }
        }
        if let Some(q) = &d.queue {
            self.queues.entry(q.clone()).or_default();
            if !self.config.queues.contains(q) {
                self.config.queues.push(q.clone());
            }
        }
        let name = d.name.clone();
        self.config.add_component(d.clone(), spec.clone());
        self.config.version += 1;
        let mut c = Container::new(spec, d);
        c.started = false;
        self.containers.insert(name, c);
        Ok(())
    }

    pub fn pause_queue(&mut self, queue: &str) -> Result<(), SimError> {
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| SimError::UnknownQueue(queue.to_string()))?;
        if !q.paused {
            q.paused = true;
            self.emit(EventBody::QueuePaused { queue: queue.to_string() });
        }
        Ok(())
    }

    pub fn resume_queue(&mut self, queue: &str) -> Result<(), SimError> {
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| SimError::UnknownQueue(queue.to_string()))?;
        if q.paused {
            q.paused = false;
            self.emit(EventBody::QueueResumed { queue: queue.to_string() });
            self.try_deliver(queue)?;
        }
        Ok(())
    }

    pub fn set_pool_size(&mut self, component: &str, size: u32) -> Result<(), SimError> {
        if size == 0 {
            return Err(SimError::Scenario("pool size must be positive".into()));
        }
        self.container_mut(component)?.spec.pool_size = size;
        if let Some(spec) = self.config.container_mut(component) {
            spec.pool_size = size;
        }
        self.emit(EventBody::PoolResized {
            component: component.to_string(),
            pool_size: size,
        });
        self.fill_pool(component)
    }

    // ---- lifecycle ----

    pub fn begin_clean_shutdown(&mut self, component: &str) -> Result<(), SimError> {
        let c = self.container_mut(component)?;
        if !c.spec.has(InterceptorKind::CleanShutdown) {
            return Err(SimError::MissingInterceptor {
                component: component.to_string(),
                interceptor: InterceptorKind::CleanShutdown,
            });
        }
        c.clean_shutdown = true;
        self.emit(EventBody::CleanShutdownBegun {
            component: component.to_string(),
        });
        Ok(())
    }

    pub fn is_drained(&self, component: &str) -> bool {
        self.containers
            .get(component)
            .is_none_or(|c| c.executing.is_empty() && c.pool_wait.is_empty())
    }

    pub fn await_drained(&mut self, components: &[String], deadline: Time) -> Result<Time, SimError> {
        self.run_until_condition(
            deadline,
            |e| components.iter().all(|c| e.is_drained(c)),
            |e| components.iter().filter(|c| !e.is_drained(c)).cloned().collect(),
        )
    }

    pub fn stop_container(&mut self, component: &str) -> Result<(), SimError> {
        let c = self.container_mut(component)?;
        c.started = false;
        c.clean_shutdown = false;
        self.emit(EventBody::ContainerStopped {
            component: component.to_string(),
        });
        Ok(())
    }

    pub fn start_container(&mut self, component: &str) -> Result<(), SimError> {
        let c = self.container_mut(component)?;
        c.started = true;
        c.clean_shutdown = false;
        let queue = c.descriptor.queue.clone();
        self.emit(EventBody::ContainerStarted {
            component: component.to_string(),
        });
        if let Some(q) = queue {
            self.try_deliver(&q)?;
        }
        Ok(())
    }

    pub fn undeploy_component(&mut self, component: &str) -> Result<(), SimError> {
        self.container(component)?;
        self.containers.remove(component);
        self.config.remove_component(component);
        self.config.version += 1;
        Ok(())
    }

    // ---- observation ----

    pub fn snapshot(&self) -> RuntimeSnapshot {
        let mut instances = Vec::new();
        for (name, c) in self.containers.iter().filter(|(_, c)| !c.removed) {
            for (i, slot) in c.slots.iter().enumerate() {
                let in_progress = slot
                    .map(|id| {
                        let inv = &self.invocations[id as usize];
                        vec![InProgress {
                            operation: inv.target.operation.clone(),
                            state: inv.cursor.as_ref().map_or_else(String::new, |c| c.state_name().to_string()),
                            outstanding: inv.outstanding.clone(),
                            tx: inv.tx,
                        }]
                    })
                    .unwrap_or_default();
                instances.push(InstanceSnapshot {
                    component: name.clone(),
                    index: i as u32,
                    idle: slot.is_none(),
                    in_progress,
                });
            }
        }
        let mut active_transactions: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (id, tx) in &self.txs {
            for c in &tx.touched {
                active_transactions.entry(c.clone()).or_default().push(*id);
            }
        }
        RuntimeSnapshot {
            time: self.now,
            instances,
            active_transactions,
            remote_refs: self.remote_refs(),
            queue_depths: self.queues.iter().map(|(k, q)| (k.clone(), q.pending.len())).collect(),
        }
    }

    fn remote_refs(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.containers
            .iter()
            .filter(|(_, c)| !c.removed && !c.remote_refs.is_empty())
            .map(|(k, c)| (k.clone(), c.remote_refs.clone()))
            .collect()
    }

    pub fn state(&self) -> RuntimeState {
        RuntimeState {
            time: self.now,
            stores: self.stores.clone(),
            conversations: self
                .containers
                .iter()
                .filter(|(_, c)| !c.removed && !c.conversations.is_empty())
                .map(|(k, c)| (k.clone(), c.conversations.clone()))
                .collect(),
            remote_refs: self.remote_refs(),
            store_bindings: self
                .containers
                .iter()
                .filter(|(_, c)| !c.removed)
                .filter_map(|(k, c)| c.store_binding.clone().map(|s| (k.clone(), s)))
                .collect(),
        }
    }

    /// Invocations not yet finished, denied, or held.
    pub fn in_flight(&self) -> usize {
        self.invocations
            .iter()
            .filter(|i| matches!(i.status, Status::Pending | Status::PoolWait | Status::Running))
            .count()
    }

    pub fn held_total(&self) -> usize {
        self.invocations.iter().filter(|i| i.status == Status::Held).count()
    }
}
