//! Seeded random scenarios, each paired with one reconfiguration request
//! that the manager accepts and completes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{run_control, run_redeploy, ControlRun, RedeployRun};
use crate::model::{
    Access, ApplicationConfiguration, ComponentDescriptor, ComponentKind, ContainerSpec, DataStoreSpec,
    OperationSignature, OperationSpec, ProvidedInterface, TxAttribute, Wire,
};
use crate::pirma::{
    Blocking, EntityMigration, Outcome, PirmaError, PlanOptions, QosChange, ReconfigurationRequest, TargetChange,
};
use crate::sefa::{AutomatonSpec, ServiceEffectAutomaton, TransitionSpec};
use crate::simrt::{
    CallTarget, ClientSpec, HandleAction, HandleOp, MessageSpec, ScriptStep, Time, WorkloadScenario,
};

pub const MAX_COMPONENTS: usize = 6;
pub const MAX_CLIENTS: usize = 20;
pub const HORIZON: Time = 500;
pub const SUITE_POOL_SIZE: u32 = 64;
const CANDIDATES: usize = 24;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub seed: u64,
    pub config: ApplicationConfiguration,
    pub scenario: WorkloadScenario,
    pub request: ReconfigurationRequest,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub case: SuiteCase,
    pub minimal: RedeployRun,
    pub whole_app: RedeployRun,
    pub control: ControlRun,
    /// Candidate requests rejected before one was accepted.
    pub rejected_candidates: usize,
}

fn automaton(labels: &[(String, u64)]) -> Option<Arc<ServiceEffectAutomaton>> {
    if labels.is_empty() {
        return None;
    }
    let states: Vec<String> = (0..=labels.len()).map(|i| format!("q{i}")).collect();
    let spec = AutomatonSpec {
        initial: states[0].clone(),
        finals: vec![states[labels.len()].clone()],
        transitions: labels
            .iter()
            .enumerate()
            .map(|(i, (iface, d))| TransitionSpec {
                from: states[i].clone(),
                to: states[i + 1].clone(),
                calls_interface: iface.clone(),
                calls_operation: "run".into(),
                min_delay: *d,
            })
            .collect(),
        states,
    };
    Some(Arc::new(spec.try_into().expect("linear automaton is valid")))
}

fn signature(name: &str) -> OperationSignature {
    OperationSignature {
        name: name.into(),
        params: vec![],
        returns: "void".into(),
    }
}

/// Random acyclic application of 2 to 6 components.
pub fn generate_app(rng: &mut ChaCha8Rng) -> ApplicationConfiguration {
    let names = ["A", "B", "C", "D", "E", "F"];
    let n = rng.gen_range(2..=MAX_COMPONENTS);
    let kinds: Vec<ComponentKind> = (0..n)
        .map(|_| match rng.gen_range(0..9) {
            0..=3 => ComponentKind::StatelessSession,
            4 | 5 => ComponentKind::StatefulSession,
            6 | 7 => ComponentKind::Entity,
            _ => ComponentKind::MessageDriven,
        })
        .collect();
    let mut cfg = ApplicationConfiguration::empty();
    let mut wiring = Vec::new();
    for i in 0..n {
        let name = names[i];
        let required: Vec<String> = (i + 1..n)
            .filter(|&j| kinds[j] != ComponentKind::MessageDriven && rng.gen_bool(0.4))
            .map(|j| format!("I{}", names[j]))
            .collect();
        let labels: Vec<(String, u64)> = required.iter().map(|r| (r.clone(), rng.gen_range(0..12))).collect();
        let kind = kinds[i];
        let tx = if kind == ComponentKind::MessageDriven {
            TxAttribute::StartsNew
        } else {
            match rng.gen_range(0..10) {
                0..=4 => TxAttribute::StartsNew,
                5..=7 => TxAttribute::Joins,
                _ => TxAttribute::None,
            }
        };
        let mut d = ComponentDescriptor {
            name: name.into(),
            version: 1,
            kind,
            provided: vec![ProvidedInterface {
                name: format!("I{name}"),
                operations: vec![signature("run")],
                access: if rng.gen_bool(0.3) { Access::Remote } else { Access::Local },
            }],
            required: required.clone(),
            operations: vec![OperationSpec {
                name: "run".into(),
                tx_attribute: tx,
                duration: rng.gen_range(3..25),
                effect_automaton: automaton(&labels),
            }],
            state_fields: vec![],
            entity_schema: vec![],
            data_store: None,
            queue: None,
        };
        match kind {
            ComponentKind::StatefulSession => d.state_fields = vec!["n0".into(), "n1".into()],
            ComponentKind::Entity => {
                let store = format!("db_{name}");
                d.entity_schema = vec!["id".into(), "qty".into()];
                if rng.gen_bool(0.5) {
                    d.entity_schema.push("price".into());
                }
                cfg.data_stores.push(DataStoreSpec {
                    name: store.clone(),
                    schema: d.entity_schema.clone(),
                });
                d.data_store = Some(store);
            }
            ComponentKind::MessageDriven => {
                let q = format!("q_{name}");
                cfg.queues.push(q.clone());
                d.queue = Some(q);
            }
            ComponentKind::StatelessSession => {}
        }
        for r in &required {
            wiring.push(Wire {
                requirer: name.into(),
                interface: r.clone(),
                provider: Some(r[1..].to_string()),
            });
        }
        let mut spec = ContainerSpec::with_defaults(name);
        spec.pool_size = SUITE_POOL_SIZE;
        cfg.add_component(d, spec);
    }
    cfg.set_wiring(wiring);
    cfg
}

/// Random workload of at most 20 clients over the horizon.
pub fn generate_workload(rng: &mut ChaCha8Rng, cfg: &ApplicationConfiguration, seed: u64) -> WorkloadScenario {
    let callable: Vec<&ComponentDescriptor> = cfg
        .components()
        .into_iter()
        .filter(|d| d.kind != ComponentKind::MessageDriven)
        .collect();
    let mut clients = Vec::new();
    if !callable.is_empty() {
        for k in 0..rng.gen_range(1..=MAX_CLIENTS) {
            let remote = rng.gen_bool(0.2);
            let mut times: Vec<Time> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..400)).collect();
            times.sort_unstable();
            let mut script = Vec::new();
            for t in times {
                let d = callable.choose(rng).expect("non-empty");
                if remote && rng.gen_bool(0.3) {
                    script.push(ScriptStep {
                        at: t,
                        call: None,
                        handle: Some(HandleAction {
                            op: HandleOp::Find,
                            component: d.name.clone(),
                        }),
                    });
                }
                script.push(ScriptStep {
                    at: t,
                    call: Some(CallTarget {
                        component: d.name.clone(),
                        interface: d.provided[0].name.clone(),
                        operation: "run".into(),
                    }),
                    handle: None,
                });
            }
            clients.push(ClientSpec {
                id: format!("c{k}"),
                access: if remote { Access::Remote } else { Access::Local },
                script,
            });
        }
    }
    let mut messages = Vec::new();
    for q in &cfg.queues {
        for _ in 0..rng.gen_range(0..6) {
            messages.push(MessageSpec {
                queue: q.clone(),
                payload: format!("m{}", messages.len()),
                at: rng.gen_range(0..450),
            });
        }
    }
    messages.sort_by_key(|m| m.at);
    WorkloadScenario {
        clients,
        messages,
        faults: vec![],
        seed,
    }
}

fn functional(old: &ComponentDescriptor, rng: &mut ChaCha8Rng) -> ComponentDescriptor {
    let mut d = old.clone();
    d.version += 1;
    let op = &mut d.operations[0];
    op.duration = (op.duration + rng.gen_range(1..6)).max(2);
    d
}

fn structural(old: &ComponentDescriptor, rng: &mut ChaCha8Rng) -> (ComponentDescriptor, Option<EntityMigration>) {
    let mut d = old.clone();
    d.version += 1;
    match old.kind {
        ComponentKind::Entity => {
            d.entity_schema.push("rev".into());
            let column_map = old.entity_schema.iter().map(|c| (c.clone(), c.clone())).collect();
            let m = EntityMigration {
                component: old.name.clone(),
                shadow_store: format!("{}_v2", old.data_store.as_deref().unwrap_or("db")),
                column_map,
            };
            (d, Some(m))
        }
        ComponentKind::StatefulSession => {
            d.state_fields.push("n2".into());
            (d, None)
        }
        _ => {
            d.provided[0].operations.push(signature("peek"));
            d.operations.push(OperationSpec {
                name: "peek".into(),
                tx_attribute: TxAttribute::Joins,
                duration: rng.gen_range(1..5),
                effect_automaton: None,
            });
            (d, None)
        }
    }
}

/// One candidate request against `cfg`.
pub fn generate_request(
    rng: &mut ChaCha8Rng,
    cfg: &ApplicationConfiguration,
    id: &str,
    at: Time,
    conservative: bool,
) -> ReconfigurationRequest {
    let comps = cfg.components();
    let count = if comps.len() > 1 && rng.gen_bool(0.25) { 2 } else { 1 };
    let chosen: Vec<&&ComponentDescriptor> = comps.choose_multiple(rng, count).collect();
    let mut targets = Vec::new();
    let mut migrations = Vec::new();
    let mut qos = Vec::new();
    for old in chosen {
        let roll = if conservative { 0 } else { rng.gen_range(0..10) };
        let new = match (old.kind, roll) {
            (ComponentKind::MessageDriven, _) | (_, 0..=4) => functional(old, rng),
            (_, 5..=7) => {
                let (d, m) = structural(old, rng);
                migrations.extend(m);
                d
            }
            _ => {
                qos.push(QosChange {
                    component: old.name.clone(),
                    pool_size: SUITE_POOL_SIZE + rng.gen_range(1..8),
                });
                let mut d = (**old).clone();
                d.version += 1;
                d
            }
        };
        targets.push(TargetChange {
            component: old.name.clone(),
            descriptor: Some(new),
            descriptor_file: None,
        });
    }
    ReconfigurationRequest {
        id: id.into(),
        targets,
        qos_changes: qos,
        entity_migration: migrations,
        requested_at: at,
    }
}

/// Builds the case for `seed`: the first candidate request that is planned
/// and completes is kept, falling back to plain functional swaps.
pub fn run_case(seed: u64) -> Result<SuiteOutcome, PirmaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = generate_app(&mut rng);
    let scenario = generate_workload(&mut rng, &config, seed);
    let at = rng.gen_range(20..=350);
    let minimal_opts = PlanOptions::default();
    let mut rejected = 0;
    for k in 0..CANDIDATES {
        let conservative = k + 4 >= CANDIDATES;
        let request = generate_request(&mut rng, &config, &format!("r{seed}-{k}"), at, conservative);
        let minimal = run_redeploy(&config, &scenario, &request, &minimal_opts)?;
        if minimal.report.as_ref().map(|r| r.outcome) != Some(Outcome::Completed) {
            rejected += 1;
            continue;
        }
        let whole_opts = PlanOptions {
            blocking: Blocking::WholeApp,
            ..minimal_opts
        };
        let whole_app = run_redeploy(&config, &scenario, &request, &whole_opts)?;
        let control = run_control(&config, &scenario)?;
        return Ok(SuiteOutcome {
            case: SuiteCase {
                seed,
                config,
                scenario,
                request,
            },
            minimal,
            whole_app,
            control,
            rejected_candidates: rejected,
        });
    }
    Err(PirmaError::InvalidRequest(format!("seed {seed}: no accepted request among {CANDIDATES} candidates")))
}

pub fn run_suite_sequential(seeds: &[u64]) -> Vec<Result<SuiteOutcome, PirmaError>> {
    seeds.iter().map(|&s| run_case(s)).collect()
}

#[cfg(feature = "parallel")]
pub fn run_suite_parallel(seeds: &[u64]) -> Vec<Result<SuiteOutcome, PirmaError>> {
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| run_case(s)).collect()
}

/// Runs every seed, in parallel when the `parallel` feature is on. Results
/// keep seed order either way.
pub fn run_suite(seeds: &[u64]) -> Vec<Result<SuiteOutcome, PirmaError>> {
    #[cfg(feature = "parallel")]
    {
        run_suite_parallel(seeds)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_suite_sequential(seeds)
    }
}

/// Kinds present in a generated case, for coverage reporting.
pub fn kind_histogram(outcomes: &[SuiteOutcome]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for o in outcomes {
        for t in &o.case.request.targets {
            let old = o.case.config.component(&t.component).expect("target exists");
            let change = o
                .minimal
                .plan
                .as_ref()
                .and_then(|p| p.analysis.changes.get(&t.component).copied());
            let change = change.map_or("-".to_string(), |c| format!("{c:?}"));
            *h.entry(format!("{:?}/{change}", old.kind)).or_insert(0) += 1;
        }
    }
    h
}
