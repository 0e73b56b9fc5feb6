//! Static and runtime dependency graphs.
//!
//! The runtime graph only contains edges that can be exercised before a
//! reconfiguration window closes, so the affected set it yields is usually
//! much smaller than the static client closure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_composition, ApplicationConfiguration, ConsistencyReport};
use crate::simrt::{RuntimeSnapshot, Time};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepGraphError {
    #[error("configuration is inconsistent: {}", .0.findings.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    InconsistentConfiguration(ConsistencyReport),
    #[error("snapshot taken at t={snapshot} does not match window start t={window_start}")]
    SnapshotStale { snapshot: Time, window_start: Time },
    #[error("unknown target `{0}`")]
    UnknownTarget(String),
    #[error("snapshot does not fit the configuration: {0}")]
    BadSnapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigurationWindow {
    pub start: Time,
    pub estimated_duration: Time,
}

impl ReconfigurationWindow {
    pub fn new(start: Time, estimated_duration: Time) -> Self {
        Self {
            start,
            estimated_duration,
        }
    }

    /// Window that never closes; every reachable call counts.
    pub fn unbounded(start: Time) -> Self {
        Self::new(start, Time::MAX)
    }

    pub fn end(&self) -> Time {
        self.start.saturating_add(self.estimated_duration)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StaticEdge {
    pub requirer: String,
    pub interface: String,
    pub provider: String,
}

/// Component-level graph built from the wiring alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticDependencyGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<StaticEdge>,
}

impl StaticDependencyGraph {
    pub fn build(config: &ApplicationConfiguration) -> Result<Self, DepGraphError> {
        let report = check_composition(config);
        if !report.is_empty() {
            return Err(DepGraphError::InconsistentConfiguration(report));
        }
        Ok(Self::build_unchecked(config))
    }

    pub(crate) fn build_unchecked(config: &ApplicationConfiguration) -> Self {
        let nodes = config.component_names();
        let edges = config
            .wiring
            .iter()
            .filter_map(|w| {
                w.provider.as_ref().filter(|p| nodes.contains(*p)).map(|p| StaticEdge {
                    requirer: w.requirer.clone(),
                    interface: w.interface.clone(),
                    provider: p.clone(),
                })
            })
            .collect();
        Self { nodes, edges }
    }

    pub fn providers_of(&self, requirer: &str) -> impl Iterator<Item = &StaticEdge> {
        let requirer = requirer.to_string();
        self.edges.iter().filter(move |e| e.requirer == requirer)
    }

    /// Targets plus every component that can reach one of them.
    pub fn client_closure(&self, targets: &BTreeSet<String>) -> BTreeSet<String> {
        let mut out = targets.clone();
        loop {
            let before = out.len();
            for e in &self.edges {
                if out.contains(&e.provider) {
                    out.insert(e.requirer.clone());
                }
            }
            if out.len() == before {
                return out;
            }
        }
    }

    /// Orders `subset` with clients before their providers. Members of a
    /// cycle keep name order.
    pub fn clients_first(&self, subset: &BTreeSet<String>) -> Vec<String> {
        let mut indegree: BTreeMap<&str, usize> = subset.iter().map(|s| (s.as_str(), 0)).collect();
        for e in &self.edges {
            if subset.contains(&e.requirer) && subset.contains(&e.provider) && e.requirer != e.provider {
                *indegree.get_mut(e.provider.as_str()).expect("in subset") += 1;
            }
        }
        let mut done = BTreeSet::new();
        let mut order = Vec::new();
        while order.len() < subset.len() {
            let next = indegree
                .iter()
                .find(|(n, d)| **d == 0 && !done.contains(**n))
                .map(|(n, _)| *n)
                .or_else(|| subset.iter().map(String::as_str).find(|n| !done.contains(n)))
                .expect("something left");
            done.insert(next);
            order.push(next.to_string());
            for e in self.edges.iter().filter(|e| e.requirer == next) {
                if let Some(d) = indegree.get_mut(e.provider.as_str()) {
                    if e.provider != next {
                        *d = d.saturating_sub(1);
                    }
                }
            }
        }
        order
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph static {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  \"{n}\";");
        }
        for e in &self.edges {
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.requirer, e.provider, e.interface);
        }
        s.push_str("}\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId {
    pub component: String,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    /// A nested call already issued and not returned.
    InFlight,
    /// A call the operation's automaton can still make.
    Future,
    /// The operation has no automaton; every static edge counts.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RuntimeEdge {
    pub from: InstanceId,
    pub to: String,
    pub interface: String,
    /// Delay from the snapshot until the call can first happen.
    pub earliest: Time,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeDependencyGraph {
    pub time: Time,
    pub window: ReconfigurationWindow,
    pub nodes: Vec<InstanceId>,
    pub edges: Vec<RuntimeEdge>,
}

impl RuntimeDependencyGraph {
    /// Distinct caller-component to callee-component pairs.
    pub fn component_edges(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|e| (e.from.component.clone(), e.to.clone()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph runtime {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  \"{}#{}\";", n.component, n.index);
        }
        let targets: BTreeSet<&str> = self.edges.iter().map(|e| e.to.as_str()).collect();
        for t in targets {
            let _ = writeln!(s, "  \"{t}\" [shape=box];");
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  \"{}#{}\" -> \"{}\" [label=\"{} e={}\"];",
                e.from.component, e.from.index, e.to, e.interface, e.earliest
            );
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the instance-level graph from cursor positions.
///
/// Idle instances contribute no edges. A future call is kept when
/// `snapshot.time + earliest <= window end`; a zero-length window keeps
/// in-flight and fallback edges only.
pub fn build_runtime_graph(
    config: &ApplicationConfiguration,
    snapshot: &RuntimeSnapshot,
    window: ReconfigurationWindow,
) -> Result<RuntimeDependencyGraph, DepGraphError> {
    if snapshot.time != window.start {
        return Err(DepGraphError::SnapshotStale {
            snapshot: snapshot.time,
            window_start: window.start,
        });
    }
    let stat = StaticDependencyGraph::build_unchecked(config);
    let horizon = window.estimated_duration;
    let mut best: BTreeMap<(InstanceId, String, String), (Time, EdgeKind)> = BTreeMap::new();
    let mut keep = |from: &InstanceId, to: &str, iface: &str, e: Time, kind: EdgeKind| {
        let slot = best
            .entry((from.clone(), to.to_string(), iface.to_string()))
            .or_insert((e, kind));
        if (e, kind) < *slot {
            *slot = (e, kind);
        }
    };
    let mut nodes = Vec::new();
    for inst in &snapshot.instances {
        if config.component(&inst.component).is_none() {
            return Err(DepGraphError::BadSnapshot(format!("unknown component `{}`", inst.component)));
        }
        let id = InstanceId {
            component: inst.component.clone(),
            index: inst.index,
        };
        nodes.push(id.clone());
        if inst.idle {
            continue;
        }
        for p in &inst.in_progress {
            if let Some(out) = &p.outstanding {
                if let Some(Some(to)) = config.provider_of(&inst.component, &out.interface) {
                    keep(&id, to, &out.interface, 0, EdgeKind::InFlight);
                }
            }
            match p.cursor(config, &inst.component).map_err(DepGraphError::BadSnapshot)? {
                None => {
                    for e in stat.providers_of(&inst.component) {
                        keep(&id, &e.provider, &e.interface, 0, EdgeKind::Fallback);
                    }
                }
                Some(cursor) if horizon > 0 => {
                    for (label, e) in cursor.earliest_calls() {
                        if e > horizon {
                            continue;
                        }
                        if let Some(Some(to)) = config.provider_of(&inst.component, &label.interface) {
                            keep(&id, to, &label.interface, e, EdgeKind::Future);
                        }
                    }
                }
                Some(_) => {}
            }
        }
    }
    let edges = best
        .into_iter()
        .map(|((from, to, interface), (earliest, kind))| RuntimeEdge {
            from,
            to,
            interface,
            earliest,
            kind,
        })
        .collect();
    Ok(RuntimeDependencyGraph {
        time: snapshot.time,
        window,
        nodes,
        edges,
    })
}

/// Targets plus every component with an instance that can reach an
/// affected component through runtime edges.
pub fn affected_set(
    config: &ApplicationConfiguration,
    graph: &RuntimeDependencyGraph,
    targets: &BTreeSet<String>,
) -> Result<BTreeSet<String>, DepGraphError> {
    let names = config.component_names();
    if let Some(t) = targets.iter().find(|t| !names.contains(*t)) {
        return Err(DepGraphError::UnknownTarget(t.clone()));
    }
    let pairs = graph.component_edges();
    let mut out = targets.clone();
    loop {
        let before = out.len();
        for (from, to) in &pairs {
            if out.contains(to) {
                out.insert(from.clone());
            }
        }
        if out.len() == before {
            return Ok(out);
        }
    }
}
