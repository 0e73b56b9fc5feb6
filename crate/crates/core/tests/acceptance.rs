//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Oracles here work from raw documents and
//! event logs and share no code with the implementation under test.

// Tolerances are pinned at zero, which makes some bounds trivially tight.
#![allow(clippy::absurd_extreme_comparisons)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use reconf_core::depgraph::{affected_set, build_runtime_graph, ReconfigurationWindow};
use reconf_core::harness::{run_control, run_redeploy, RedeployRun};
use reconf_core::model::{load_application, ApplicationConfiguration, ChangeKind, ComponentDescriptor, ComponentKind};
use reconf_core::pirma::{
    classify_structural_safety, Blocking, Outcome, PlanOptions, PlanStep, ReasonCode, ReconfigurationRequest, Verdict,
};
use reconf_core::simrt::{
    CallTarget, ClientSpec, Engine, EventBody, EventLog, RuntimeSnapshot, RuntimeState, ScriptStep, Time,
    WorkloadScenario, CLASS_BARRIER,
};
use reconf_core::suite::{kind_histogram, run_case, run_suite, SuiteOutcome, HORIZON, MAX_CLIENTS, MAX_COMPONENTS};
use serde_json::Value;

const SEEDS: std::ops::RangeInclusive<u64> = 1..=100;
const MAX_ABORTS: usize = 0;
const MAX_LOST_MESSAGES: usize = 0;
const MAX_UNAFFECTED_INVALIDATIONS: usize = 0;
const MAX_LATENCY_MISMATCHES: usize = 0;
const MAX_EXCLUSIVITY_VIOLATIONS: usize = 0;
const MAX_DOMINANCE_VIOLATIONS: usize = 0;
const MAX_MIGRATION_ROW_DIFFS: usize = 0;
const DEPGRAPH_FIXTURES: [&str; 4] = ["chain", "diamond", "past_cursor", "late_future"];
const WINDOWS: [Time; 13] = [0, 1, 2, 5, 10, 12, 20, 30, 50, 60, 100, 1000, Time::MAX];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn json(rel: &str) -> Value {
    serde_json::from_str(&read(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn app(rel: &str) -> ApplicationConfiguration {
    load_application(&read(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn scenario(rel: &str) -> WorkloadScenario {
    serde_json::from_str(&read(rel)).unwrap()
}

fn request(rel: &str) -> ReconfigurationRequest {
    serde_json::from_str(&read(rel)).unwrap()
}

struct Verdicts {
    lines: Vec<(bool, String, String)>,
}

impl Verdicts {
    fn record(&mut self, ok: bool, name: &str, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((ok, name.to_string(), detail));
    }
}

// ---------------------------------------------------------------- log oracles

/// Messages enqueued and never delivered, plus explicit drops.
fn lost_messages(log: &EventLog) -> usize {
    let mut enq = BTreeSet::new();
    let mut delivered = BTreeSet::new();
    let mut dropped = 0;
    for e in log.iter() {
        match &e.body {
            EventBody::MessageEnqueued { queue, message, .. } => {
                enq.insert((queue.clone(), *message));
            }
            EventBody::MessageDelivered { queue, message, .. } => {
                delivered.insert((queue.clone(), *message));
            }
            EventBody::MessageDropped { .. } => dropped += 1,
            _ => {}
        }
    }
    enq.difference(&delivered).count().max(dropped)
}

/// Held wait per held invocation: hold time to start, denial or log end.
fn held_waits(log: &EventLog) -> Vec<Time> {
    let mut open: BTreeMap<u64, Time> = BTreeMap::new();
    let mut waits = Vec::new();
    for e in log.iter() {
        match &e.body {
            EventBody::InvocationHeld { invocation, .. } => {
                open.entry(*invocation).or_insert(e.t);
            }
            EventBody::InvocationStart { invocation, .. } | EventBody::InvocationDenied { invocation, .. } => {
                if let Some(t) = open.remove(invocation) {
                    waits.push(e.t - t);
                }
            }
            _ => {}
        }
    }
    let end = log.events.last().map_or(0, |e| e.t);
    waits.extend(open.values().map(|t| end - t));
    waits
}

fn total_held_wait(log: &EventLog) -> Time {
    held_waits(log).iter().sum()
}

/// Returns (violations under the touched-before-swap reading, transactions
/// whose interval spans a swap of a component they touch at any time).
fn exclusivity_scan(log: &EventLog) -> (usize, usize) {
    let mut touched_by_tx: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for e in log.iter() {
        if let EventBody::InvocationStart {
            tx: Some(tx), component, ..
        } = &e.body
        {
            touched_by_tx.entry(*tx).or_default().insert(component.clone());
        }
    }
    let mut open: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    let mut violations = 0;
    let mut strict = 0;
    for e in log.iter() {
        match &e.body {
            EventBody::TxBegin { tx, .. } => {
                open.insert(*tx, BTreeSet::new());
            }
            EventBody::InvocationStart {
                tx: Some(tx), component, ..
            } => {
                if let Some(s) = open.get_mut(tx) {
                    s.insert(component.clone());
                }
            }
            EventBody::TxCommit { tx, .. } | EventBody::TxAbort { tx, .. } => {
                open.remove(tx);
            }
            EventBody::SwapApplied { component, .. } => {
                for (tx, so_far) in &open {
                    if so_far.contains(component) {
                        violations += 1;
                    }
                    if touched_by_tx.get(tx).is_some_and(|all| all.contains(component)) {
                        strict += 1;
                    }
                }
            }
            _ => {}
        }
    }
    (violations, strict)
}

/// Components each session's invocations ran in.
fn session_components(log: &EventLog) -> BTreeMap<String, BTreeSet<String>> {
    let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in log.iter() {
        match &e.body {
            EventBody::InvocationStart { session, component, .. }
            | EventBody::InvocationHeld { session, component, .. }
            | EventBody::InvocationDenied { session, component, .. } => {
                m.entry(session.clone()).or_default().insert(component.clone());
            }
            _ => {}
        }
    }
    m
}

/// Top-level calls of a session as (submitted, completed), in submission order.
fn session_latencies(log: &EventLog, session: &str) -> Vec<(Time, Option<Time>)> {
    let mut out: Vec<(Time, Option<Time>)> = Vec::new();
    let mut idx: BTreeMap<u64, usize> = BTreeMap::new();
    for e in log.iter() {
        match &e.body {
            EventBody::InvocationStart {
                invocation,
                parent: None,
                session: s,
                submitted_at,
                ..
            } if s == session => {
                idx.insert(*invocation, out.len());
                out.push((*submitted_at, None));
            }
            EventBody::InvocationEnd {
                invocation, parent: None, ..
            } => {
                if let Some(&i) = idx.get(invocation) {
                    out[i].1 = Some(e.t);
                }
            }
            _ => {}
        }
    }
    out.sort();
    out
}

/// Replays commits in log order and applies shadow syncs through the column
/// map. Returns the number of rows that differ from the engine's final
/// stores, plus row-count mismatches at sync time.
fn migration_diffs(log: &EventLog, state: &RuntimeState, req: &ReconfigurationRequest) -> (usize, usize) {
    let mut stores: BTreeMap<String, BTreeMap<String, BTreeMap<String, i64>>> = BTreeMap::new();
    let mut diffs = 0;
    let mut syncs = 0;
    for e in log.iter() {
        match &e.body {
            EventBody::TxCommit { writes, .. } => {
                for w in writes {
                    stores.entry(w.store.clone()).or_default().insert(w.key.clone(), w.row.clone());
                }
            }
            EventBody::ShadowSynced {
                component,
                from_store,
                to_store,
                rows,
            } => {
                syncs += 1;
                let m = req.migration_for(component).expect("sync without migration");
                let schema = &req
                    .targets
                    .iter()
                    .find(|t| &t.component == component)
                    .and_then(|t| t.descriptor.as_ref())
                    .expect("migrated target has descriptor")
                    .entity_schema;
                let src = stores.get(from_store).cloned().unwrap_or_default();
                if src.len() != *rows {
                    diffs += 1;
                }
                let mapped = src
                    .into_iter()
                    .map(|(k, row)| {
                        let r = schema
                            .iter()
                            .map(|col| {
                                let v = m
                                    .column_map
                                    .iter()
                                    .find(|(_, new)| *new == col)
                                    .and_then(|(old, _)| row.get(old))
                                    .copied()
                                    .unwrap_or(0);
                                (col.clone(), v)
                            })
                            .collect();
                        (k, r)
                    })
                    .collect();
                stores.insert(to_store.clone(), mapped);
            }
            _ => {}
        }
    }
    for (name, rows) in &stores {
        let actual = state.stores.get(name).map(|s| &s.rows);
        match actual {
            None => diffs += rows.len(),
            Some(a) => {
                if a.len() != rows.len() {
                    diffs += 1;
                }
                diffs += rows.iter().filter(|(k, r)| a.get(*k) != Some(r)).count();
            }
        }
    }
    (diffs, syncs)
}

// ------------------------------------------------------------ depgraph oracle

/// (from, to, interface, delay)
type RawTransition = (String, String, String, u64);

struct RawApp {
    /// (component, operation) -> transitions (from, to, interface, delay)
    automata: BTreeMap<(String, String), Vec<RawTransition>>,
    /// (requirer, interface) -> provider
    wires: BTreeMap<(String, String), String>,
    components: BTreeSet<String>,
}

fn raw_app(v: &Value) -> RawApp {
    let mut automata = BTreeMap::new();
    let mut components = BTreeSet::new();
    for c in v["components"].as_array().unwrap() {
        let name = c["name"].as_str().unwrap().to_string();
        components.insert(name.clone());
        for op in c["operations"].as_array().unwrap() {
            let Some(a) = op.get("effect_automaton") else { continue };
            let ts = a["transitions"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    (
                        t["from"].as_str().unwrap().to_string(),
                        t["to"].as_str().unwrap().to_string(),
                        t["calls_interface"].as_str().unwrap().to_string(),
                        t["min_delay"].as_u64().unwrap(),
                    )
                })
                .collect();
            automata.insert((name.clone(), op["name"].as_str().unwrap().to_string()), ts);
        }
    }
    let mut wires = BTreeMap::new();
    for w in v["wiring"].as_array().unwrap() {
        if let Some(p) = w["provider"].as_str() {
            wires.insert(
                (w["requirer"].as_str().unwrap().to_string(), w["interface"].as_str().unwrap().to_string()),
                p.to_string(),
            );
        }
    }
    RawApp {
        automata,
        wires,
        components,
    }
}

/// Walks every automaton path from each busy instance's state, accumulating
/// delays of the transitions already walked, and keeps the calls reachable
/// within `window`. Then closes the targets over the resulting edges.
fn oracle_affected(app: &RawApp, snap: &Value, targets: &BTreeSet<String>, window: Time) -> BTreeSet<String> {
    let mut edges: BTreeSet<(String, String)> = BTreeSet::new();
    for inst in snap["instances"].as_array().unwrap() {
        if inst["idle"].as_bool().unwrap() {
            continue;
        }
        let comp = inst["component"].as_str().unwrap().to_string();
        for p in inst["in_progress"].as_array().unwrap() {
            if let Some(out) = p.get("outstanding") {
                if let Some(to) = app.wires.get(&(comp.clone(), out["interface"].as_str().unwrap().to_string())) {
                    edges.insert((comp.clone(), to.clone()));
                }
            }
            let op = p["operation"].as_str().unwrap().to_string();
            let Some(ts) = app.automata.get(&(comp.clone(), op)) else {
                for ((r, _), to) in &app.wires {
                    if *r == comp {
                        edges.insert((comp.clone(), to.clone()));
                    }
                }
                continue;
            };
            if window == 0 {
                continue;
            }
            // exhaustive walk with per-state best elapsed time so cycles end
            let mut best: BTreeMap<String, Time> = BTreeMap::new();
            let mut queue = VecDeque::from([(p["state"].as_str().unwrap().to_string(), 0u64)]);
            while let Some((s, elapsed)) = queue.pop_front() {
                if best.get(&s).is_some_and(|&b| b <= elapsed) {
                    continue;
                }
                best.insert(s.clone(), elapsed);
                for (from, to, iface, d) in ts {
                    if *from != s {
                        continue;
                    }
                    if let Some(prov) = app.wires.get(&(comp.clone(), iface.clone())) {
                        edges.insert((comp.clone(), prov.clone()));
                    }
                    let next = elapsed.saturating_add(*d);
                    if next <= window {
                        queue.push_back((to.clone(), next));
                    }
                }
            }
        }
    }
    let mut out = targets.clone();
    loop {
        let n = out.len();
        for (a, b) in &edges {
            if out.contains(b) {
                out.insert(a.clone());
            }
        }
        if out.len() == n {
            return out;
        }
    }
}

fn static_ancestors(app: &RawApp, targets: &BTreeSet<String>) -> BTreeSet<String> {
    let mut out = targets.clone();
    loop {
        let n = out.len();
        for ((r, _), p) in &app.wires {
            if out.contains(p) {
                out.insert(r.clone());
            }
        }
        if out.len() == n {
            return out;
        }
    }
}

// ---------------------------------------------------------------- criteria

fn zero_abort(v: &mut Verdicts, suite: &[SuiteOutcome], errors: &[String]) {
    let aborts: usize = suite.iter().map(|o| o.minimal.log.count("TxAbort")).sum();
    let lost: usize = suite.iter().map(|o| lost_messages(&o.minimal.log)).sum();
    let whole_aborts: usize = suite.iter().map(|o| o.whole_app.log.count("TxAbort")).sum();
    let bounded = suite.iter().all(|o| {
        o.case.config.components().len() <= MAX_COMPONENTS
            && o.case.scenario.clients.len() <= MAX_CLIENTS
            && o.case.scenario.clients.iter().flat_map(|c| &c.script).all(|s| s.at <= HORIZON)
            && o.case.scenario.messages.iter().all(|m| m.at <= HORIZON)
    });
    let last = suite.iter().map(|o| o.minimal.log.end_time()).max().unwrap_or(0);
    let retries: usize = suite.iter().map(|o| o.rejected_candidates).sum();
    v.record(
        errors.is_empty() && aborts <= MAX_ABORTS && lost <= MAX_LOST_MESSAGES && bounded,
        "zero-abort redeployment",
        format!(
            "{} runs with an accepted redeploy, {} failed to build; aborts={aborts} lost={lost} (whole-app aborts={whole_aborts}); workloads within bounds={bounded}, last event at {last}, {retries} candidate requests turned down",
            suite.len(),
            errors.len()
        ),
    );
    println!("  change mix: {:?}", kind_histogram(suite));
    for e in errors {
        println!("  error: {e}");
    }
}

fn transparency(v: &mut Verdicts, suite: &[SuiteOutcome]) {
    let mut sessions = 0;
    let mut invalidated = 0;
    let mut mismatched = 0;
    for o in suite {
        let affected = &o.minimal.plan.as_ref().expect("accepted").affected;
        let a = session_components(&o.minimal.log);
        let c = session_components(&o.control.log);
        let outside: BTreeSet<&String> = a
            .keys()
            .chain(c.keys())
            .filter(|s| {
                let hit = |m: &BTreeMap<String, BTreeSet<String>>| m.get(*s).is_some_and(|cs| !cs.is_disjoint(affected));
                !hit(&a) && !hit(&c)
            })
            .collect();
        for e in o.minimal.log.iter() {
            if let EventBody::SessionInvalidated { session, .. } = &e.body {
                if outside.contains(session) {
                    invalidated += 1;
                }
            }
        }
        for s in outside {
            sessions += 1;
            if session_latencies(&o.minimal.log, s) != session_latencies(&o.control.log, s) {
                mismatched += 1;
                println!("  seed {}: session {s} latency differs from control", o.case.seed);
            }
        }
    }
    v.record(
        invalidated <= MAX_UNAFFECTED_INVALIDATIONS && mismatched <= MAX_LATENCY_MISMATCHES,
        "transparency",
        format!("{sessions} sessions outside the affected set; invalidated={invalidated} latency mismatches={mismatched}"),
    );
}

fn exclusivity(v: &mut Verdicts, logs: &[(&str, &EventLog)]) {
    let mut violations = 0;
    let mut strict = 0;
    let mut swaps = 0;
    for (name, log) in logs {
        let (x, s) = exclusivity_scan(log);
        if x > 0 {
            println!("  {name}: {x} violations");
        }
        violations += x;
        strict += s;
        swaps += log.count("SwapApplied");
    }
    v.record(
        violations <= MAX_EXCLUSIVITY_VIOLATIONS,
        "transaction exclusivity",
        format!(
            "{} logs, {swaps} swaps; violations={violations} (open transactions reaching a swapped component only after its swap: {strict})",
            logs.len()
        ),
    );
}

fn minimal_graph(v: &mut Verdicts) {
    let mut ok = true;
    let mut details = Vec::new();
    for f in DEPGRAPH_FIXTURES {
        let cfg = app(&format!("depgraph/{f}/app.json"));
        let raw_v = json(&format!("depgraph/{f}/app.json"));
        let raw = raw_app(&raw_v);
        let snap_v = json(&format!("depgraph/{f}/snapshot.json"));
        let snap: RuntimeSnapshot = serde_json::from_value(snap_v.clone()).unwrap();
        let case = json(&format!("depgraph/{f}/case.json"));
        let targets: BTreeSet<String> = case["targets"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_str().unwrap().to_string())
            .collect();
        let closure = static_ancestors(&raw, &targets);
        let mut prev: Option<BTreeSet<String>> = None;
        let mut at_case = BTreeSet::new();
        for w in WINDOWS.iter().copied().chain([case["window"].as_u64().unwrap()]) {
            let g = build_runtime_graph(&cfg, &snap, ReconfigurationWindow::new(snap.time, w)).unwrap();
            let got = affected_set(&cfg, &g, &targets).unwrap();
            let want = oracle_affected(&raw, &snap_v, &targets, w);
            if got != want {
                ok = false;
                println!("  {f} window {w}: got {got:?}, oracle {want:?}");
            }
            if !got.is_subset(&closure) {
                ok = false;
                println!("  {f} window {w}: {got:?} leaves the static closure {closure:?}");
            }
            if w == case["window"].as_u64().unwrap() {
                at_case = got.clone();
            } else {
                if let Some(p) = &prev {
                    if !p.is_subset(&got) {
                        ok = false;
                        println!("  {f}: not monotone at window {w}");
                    }
                }
                prev = Some(got);
            }
        }
        assert!(raw.components.is_superset(&at_case));
        details.push(format!("{f}={}", at_case.iter().cloned().collect::<Vec<_>>().join(",")));
    }
    v.record(
        ok,
        "minimal-graph correctness",
        format!("{} fixtures x {} windows match the path-walk oracle; {}", DEPGRAPH_FIXTURES.len(), WINDOWS.len(), details.join(" ")),
    );
}

fn fixture_run(name: &str, blocking: Blocking) -> RedeployRun {
    let cfg = app(&format!("depgraph/{name}/app.json"));
    let sc = scenario(&format!("redeploy/{name}/scenario.json"));
    let req = request(&format!("redeploy/{name}/request.json"));
    let opts = PlanOptions {
        blocking,
        ..Default::default()
    };
    run_redeploy(&cfg, &sc, &req, &opts).unwrap()
}

fn dominance(v: &mut Verdicts, suite: &[SuiteOutcome]) {
    let mut bad = 0;
    let mut strictly = 0;
    for o in suite {
        let (m, w) = (total_held_wait(&o.minimal.log), total_held_wait(&o.whole_app.log));
        if m > w {
            bad += 1;
            println!("  seed {}: minimal held wait {m} > whole-app {w}", o.case.seed);
        }
        if m < w {
            strictly += 1;
        }
    }
    let mut fixture_ok = true;
    let mut fx = Vec::new();
    for f in DEPGRAPH_FIXTURES {
        let min = fixture_run(f, Blocking::Minimal);
        let whole = fixture_run(f, Blocking::WholeApp);
        let plan = min.plan.as_ref().expect("fixture request is accepted");
        let proper = plan.affected.len() < app(&format!("depgraph/{f}/app.json")).component_names().len();
        let (m, w) = (total_held_wait(&min.log), total_held_wait(&whole.log));
        let pass = m <= w && (!proper || m < w);
        fixture_ok &= pass;
        fx.push(format!("{f}: {m} vs {w}{}", if proper { " (proper subset)" } else { "" }));
    }
    v.record(
        bad <= MAX_DOMINANCE_VIOLATIONS && fixture_ok,
        "blocking dominance",
        format!(
            "minimal <= whole-app held wait in {}/{} suite runs ({strictly} strictly); fixtures {}",
            suite.len() - bad,
            suite.len(),
            fx.join("; ")
        ),
    );
}

fn safety_table(v: &mut Verdicts) {
    use ComponentKind::*;
    use ReasonCode::*;
    let kinds = [StatelessSession, StatefulSession, Entity, MessageDriven];
    let changes = [ChangeKind::Structural, ChangeKind::Functional, ChangeKind::NonFunctional];
    // expected verdicts transcribed from the decision rule, one row per case
    let expect = |k: ComponentKind, c: ChangeKind, refs: bool| -> (Verdict, Vec<ReasonCode>) {
        match (k, c, refs) {
            (MessageDriven, _, _) => (Verdict::SafeWithPause, vec![NoClientVisibleIdentity]),
            (StatefulSession, ChangeKind::Structural, _) => (Verdict::Unsafe, vec![HasConversationalState]),
            (StatelessSession, ChangeKind::Structural, false) => (Verdict::Safe, vec![LocalOnly]),
            (StatelessSession, ChangeKind::Structural, true) => (Verdict::Unsafe, vec![UnchangedRemoteClientRefs]),
            (Entity, ChangeKind::Structural, false) => (Verdict::SafeWithMigration, vec![SchemaChangeNeedsMigration]),
            (Entity, ChangeKind::Structural, true) => (Verdict::Unsafe, vec![UnchangedRemoteClientRefs]),
            (StatelessSession, _, _) => (Verdict::Safe, vec![StatelessInterchangeable]),
            (_, _, _) => (Verdict::Safe, vec![]),
        }
    };
    let mut cases = 0;
    let mut wrong = 0;
    for k in kinds {
        for c in changes {
            for refs in [false, true] {
                cases += 1;
                let d = descriptor(k);
                let mut next = d.clone();
                next.version += 1;
                let holders: BTreeSet<String> = if refs { ["remote-client".to_string()].into() } else { BTreeSet::new() };
                let got = classify_structural_safety(&d, Some(&next), c, &holders, true);
                if (got.verdict, got.reasons.clone()) != expect(k, c, refs) {
                    wrong += 1;
                    println!("  {k:?} {c:?} refs={refs}: got {:?} {:?}", got.verdict, got.reasons);
                }
            }
        }
    }
    v.record(
        wrong == 0,
        "safety-rule table",
        format!("{}/{cases} cases (4 kinds x 3 change kinds x 2 reference sets) match", cases - wrong),
    );
}

fn descriptor(kind: ComponentKind) -> ComponentDescriptor {
    let text = match kind {
        ComponentKind::StatefulSession => r#"{"name":"K","version":1,"kind":"StatefulSession",
            "provided":[{"name":"IK","operations":[{"name":"run"}]}],
            "operations":[{"name":"run","tx_attribute":"StartsNew","duration":2}],"state_fields":["f"]}"#,
        ComponentKind::Entity => r#"{"name":"K","version":1,"kind":"Entity",
            "provided":[{"name":"IK","operations":[{"name":"run"}]}],
            "operations":[{"name":"run","tx_attribute":"Joins","duration":2}],
            "entity_schema":["id","v"],"data_store":"db"}"#,
        ComponentKind::MessageDriven => r#"{"name":"K","version":1,"kind":"MessageDriven",
            "provided":[{"name":"IK","operations":[{"name":"run"}]}],
            "operations":[{"name":"run","tx_attribute":"StartsNew","duration":2}],"queue":"q"}"#,
        ComponentKind::StatelessSession => r#"{"name":"K","version":1,"kind":"StatelessSession",
            "provided":[{"name":"IK","operations":[{"name":"run"}]}],
            "operations":[{"name":"run","tx_attribute":"StartsNew","duration":2}]}"#,
    };
    serde_json::from_str(text).unwrap()
}

fn migration_fidelity(v: &mut Verdicts, suite: &[SuiteOutcome]) {
    let cfg = app("entity/app.json");
    let sc = scenario("entity/scenario.json");
    let req = request("entity/request.json");
    let run = run_redeploy(&cfg, &sc, &req, &PlanOptions::default()).unwrap();
    let completed = run.report.as_ref().map(|r| r.outcome) == Some(Outcome::Completed);
    let with_migration = run
        .report
        .as_ref()
        .is_some_and(|r| r.verdicts.iter().any(|x| x.verdict == Verdict::SafeWithMigration));
    let (mut diffs, mut syncs) = migration_diffs(&run.log, &run.state, &req);
    let shadow_rows = run.state.stores.get("inventory_db_v2").map_or(0, |s| s.rows.len());
    let mut suite_syncs = 0;
    for o in suite {
        if o.minimal.plan.as_ref().is_some_and(|p| p.steps.iter().any(|s| matches!(s, PlanStep::SyncShadowStore(_)))) {
            let (d, s) = migration_diffs(&o.minimal.log, &o.minimal.state, &o.case.request);
            diffs += d;
            syncs += s;
            suite_syncs += s;
        }
    }
    v.record(
        completed && with_migration && syncs > 0 && diffs <= MAX_MIGRATION_ROW_DIFFS,
        "entity migration fidelity",
        format!(
            "fixture shadow store holds {shadow_rows} rows; {syncs} shadow syncs checked ({suite_syncs} from the suite); row diffs={diffs}"
        ),
    );
}

fn determinism(v: &mut Verdicts) {
    let mut same = 0;
    let mut total = 0;
    let mut check = |a: String, b: String| {
        total += 1;
        if a == b {
            same += 1;
        }
    };
    let demo = app("demo_app.json");
    for sc in ["demo_scenario.json", "empty_scenario.json"] {
        let s = scenario(sc);
        let (x, y) = (run_control(&demo, &s).unwrap(), run_control(&demo, &s).unwrap());
        check(x.log.to_json_lines(), y.log.to_json_lines());
        check(x.metrics.to_json(), y.metrics.to_json());
    }
    for f in DEPGRAPH_FIXTURES {
        let (x, y) = (fixture_run(f, Blocking::Minimal), fixture_run(f, Blocking::Minimal));
        check(x.log.to_json_lines(), y.log.to_json_lines());
        check(serde_json::to_string(&x).unwrap(), serde_json::to_string(&y).unwrap());
    }
    for seed in [1, 17, 42] {
        let (x, y) = (run_case(seed).unwrap(), run_case(seed).unwrap());
        check(x.minimal.log.to_json_lines(), y.minimal.log.to_json_lines());
        check(x.whole_app.metrics.to_json(), y.whole_app.metrics.to_json());
    }
    v.record(same == total, "determinism", format!("{same}/{total} output pairs byte-identical"));
}

fn drain_semantics(v: &mut Verdicts) {
    fn one(id: &str, at: Time, component: &str) -> ClientSpec {
        ClientSpec {
            id: id.into(),
            access: reconf_core::model::Access::Local,
            script: vec![ScriptStep {
                at,
                call: Some(CallTarget {
                    component: component.into(),
                    interface: format!("I{component}"),
                    operation: "run".into(),
                }),
                handle: None,
            }],
        }
    }
    let leaf = |name: &str, tx: &str, dur: u64, calls: &[(&str, u64)]| -> String {
        let trans: Vec<String> = calls
            .iter()
            .enumerate()
            .map(|(i, (iface, d))| {
                format!(r#"{{"from":"q{i}","to":"q{}","calls_interface":"{iface}","calls_operation":"run","min_delay":{d}}}"#, i + 1)
            })
            .collect();
        let states: Vec<String> = (0..=calls.len()).map(|i| format!("\"q{i}\"")).collect();
        let automaton = if calls.is_empty() {
            String::new()
        } else {
            format!(
                r#","effect_automaton":{{"states":[{}],"initial":"q0","finals":["q{}"],"transitions":[{}]}}"#,
                states.join(","),
                calls.len(),
                trans.join(",")
            )
        };
        let req: Vec<String> = calls.iter().map(|(i, _)| format!("\"{i}\"")).collect::<BTreeSet<_>>().into_iter().collect();
        format!(
            r#"{{"name":"{name}","version":1,"kind":"StatelessSession","provided":[{{"name":"I{name}","operations":[{{"name":"run"}}]}}],
            "required":[{}],"operations":[{{"name":"run","tx_attribute":"{tx}","duration":{dur}{automaton}}}]}}"#,
            req.join(",")
        )
    };
    let doc = |comps: &[String], wires: &[(&str, &str, &str)]| -> ApplicationConfiguration {
        let names: Vec<String> = comps
            .iter()
            .map(|c| serde_json::from_str::<Value>(c).unwrap()["name"].as_str().unwrap().to_string())
            .collect();
        let containers: Vec<String> = names
            .iter()
            .map(|n| format!(r#"{{"hosted_component":"{n}","interceptor_chain":["RedeployBarrier","TxDemarcation","Pooling"],"pool_size":4}}"#))
            .collect();
        let wiring: Vec<String> = wires
            .iter()
            .map(|(r, i, p)| format!(r#"{{"requirer":"{r}","interface":"{i}","provider":"{p}"}}"#))
            .collect();
        let text = format!(
            r#"{{"components":[{}],"containers":[{}],"wiring":[{}],"version":1}}"#,
            comps.join(","),
            containers.join(","),
            wiring.join(",")
        );
        load_application(&text).unwrap()
    };
    let quiesce = |cfg: ApplicationConfiguration, clients: Vec<ClientSpec>, at: Time, target: &str| -> (Time, usize) {
        let mut e = Engine::new(cfg, 0);
        e.load(&WorkloadScenario {
            clients,
            ..Default::default()
        })
        .unwrap();
        e.advance_to(at, CLASS_BARRIER).unwrap();
        e.activate_barrier(target).unwrap();
        let t = e.await_quiescence(&[target.to_string()], at + 1000).unwrap();
        (t, e.held_count(target))
    };

    // idle: nothing running when the barrier goes up at 7
    let idle = quiesce(doc(&[leaf("X", "StartsNew", 5, &[])], &[]), vec![], 7, "X");
    // one transaction running 0..15, barrier at 10, a new call at 12 waits
    let tx = quiesce(
        doc(&[leaf("X", "StartsNew", 15, &[])], &[]),
        vec![one("c", 0, "X"), one("d", 12, "X")],
        10,
        "X",
    );
    // A (StartsNew, 12) calls B then C, each Joins for 3, with gaps of 2:
    // B runs 0..3, C runs 5..8, A's last gap ends at 10 and its remaining
    // 12 - 4 = 8 units end the transaction at 18
    let nested = quiesce(
        doc(
            &[
                leaf("A", "StartsNew", 12, &[("IB", 2), ("IC", 2)]),
                leaf("B", "Joins", 3, &[]),
                leaf("C", "Joins", 3, &[]),
            ],
            &[("A", "IB", "B"), ("A", "IC", "C")],
        ),
        vec![one("c", 0, "A")],
        1,
        "B",
    );
    let expected = [(7, 0), (15, 1), (18, 0)];
    let got = [idle, tx, nested];
    v.record(
        got == expected,
        "drain semantics",
        format!("quiescence (time, held) idle={:?} tx={:?} nested={:?}, expected {expected:?}", got[0], got[1], got[2]),
    );
}

fn main() {
    let started = std::time::Instant::now();
    let seeds: Vec<u64> = SEEDS.collect();
    let results = run_suite(&seeds);
    let mut suite = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(o) => suite.push(o),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let mut v = Verdicts { lines: Vec::new() };
    zero_abort(&mut v, &suite, &errors);
    transparency(&mut v, &suite);
    let fixture_logs: Vec<(String, EventLog)> = DEPGRAPH_FIXTURES
        .iter()
        .flat_map(|f| {
            [Blocking::Minimal, Blocking::WholeApp]
                .into_iter()
                .map(move |b| (format!("{f}/{b:?}"), fixture_run(f, b).log))
        })
        .collect();
    let mut logs: Vec<(&str, &EventLog)> = Vec::new();
    for o in &suite {
        logs.push(("suite/minimal", &o.minimal.log));
        logs.push(("suite/whole-app", &o.whole_app.log));
    }
    for (n, l) in &fixture_logs {
        logs.push((n, l));
    }
    exclusivity(&mut v, &logs);
    minimal_graph(&mut v);
    dominance(&mut v, &suite);
    safety_table(&mut v);
    migration_fidelity(&mut v, &suite);
    determinism(&mut v);
    drain_semantics(&mut v);
    let failed: Vec<&String> = v.lines.iter().filter(|(ok, ..)| !ok).map(|(_, n, _)| n).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.2?}",
        v.lines.len() - failed.len(),
        failed.len(),
        started.elapsed()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
