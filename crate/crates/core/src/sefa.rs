//! Service effect automata.
//!
//! Each provided operation of a component carries a deterministic finite
//! automaton over the calls it makes to required services. Transitions carry
//! a minimum delay, so a cursor into a running operation can answer both
//! "which calls may still happen" and "how soon at the earliest".

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A required-service call: `(interface, operation)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallLabel {
    pub interface: String,
    pub operation: String,
}

impl CallLabel {
    pub fn new(interface: impl Into<String>, operation: impl Into<String>) -> Self {
        Self {
            interface: interface.into(),
            operation: operation.into(),
        }
    }
}

impl fmt::Display for CallLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.interface, self.operation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutomatonError {
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("automaton has no final state")]
    NoFinalState,
    #[error("state `{0}` is not on any path from the initial state to a final state")]
    DeadState(String),
    #[error("nondeterministic: two transitions from `{state}` on `{label}`")]
    Nondeterministic { state: String, label: CallLabel },
}

/// Raised when a component performs a call its automaton does not allow.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation: call {label} not allowed in state `{state}`")]
pub struct ProtocolViolation {
    pub state: String,
    pub label: CallLabel,
}

/// Wire form of one transition, as embedded in the application document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub from: String,
    pub to: String,
    pub calls_interface: String,
    pub calls_operation: String,
    pub min_delay: u64,
}

/// Wire form of an automaton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutomatonSpec {
    pub states: Vec<String>,
    pub initial: String,
    pub finals: Vec<String>,
    pub transitions: Vec<TransitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub from: usize,
    pub label: CallLabel,
    pub min_delay: u64,
    pub to: usize,
}

/// A validated, deterministic service effect automaton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AutomatonSpec", into = "AutomatonSpec")]
pub struct ServiceEffectAutomaton {
    states: Vec<String>,
    index: BTreeMap<String, usize>,
    initial: usize,
    finals: Vec<bool>,
    transitions: Vec<Transition>,
    outgoing: Vec<Vec<usize>>,
}

impl TryFrom<AutomatonSpec> for ServiceEffectAutomaton {
    type Error = AutomatonError;

    fn try_from(spec: AutomatonSpec) -> Result<Self, Self::Error> {
        let mut index = BTreeMap::new();
        for (i, s) in spec.states.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(AutomatonError::DuplicateState(s.clone()));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| AutomatonError::UnknownState(name.to_string()))
        };
        let initial = lookup(&spec.initial)?;
        let mut finals = vec![false; spec.states.len()];
        for f in &spec.finals {
            finals[lookup(f)?] = true;
        }
        if !finals.iter().any(|f| *f) {
            return Err(AutomatonError::NoFinalState);
        }

        let mut transitions = Vec::with_capacity(spec.transitions.len());
        let mut outgoing = vec![Vec::new(); spec.states.len()];
        let mut seen = BTreeSet::new();
        for t in &spec.transitions {
            let from = lookup(&t.from)?;
            let to = lookup(&t.to)?;
            let label = CallLabel::new(&t.calls_interface, &t.calls_operation);
            if !seen.insert((from, label.clone())) {
                return Err(AutomatonError::Nondeterministic {
                    state: t.from.clone(),
                    label,
                });
            }
            outgoing[from].push(transitions.len());
            transitions.push(Transition {
                from,
                label,
                min_delay: t.min_delay,
                to,
            });
        }

        let automaton = Self {
            states: spec.states,
            index,
            initial,
            finals,
            transitions,
            outgoing,
        };
        automaton.check_no_dead_states()?;
        Ok(automaton)
    }
}

impl From<ServiceEffectAutomaton> for AutomatonSpec {
    fn from(a: ServiceEffectAutomaton) -> Self {
        AutomatonSpec {
            initial: a.states[a.initial].clone(),
            finals: a
                .states
                .iter()
                .zip(&a.finals)
                .filter(|(_, f)| **f)
                .map(|(s, _)| s.clone())
                .collect(),
            transitions: a
                .transitions
                .iter()
                .map(|t| TransitionSpec {
                    from: a.states[t.from].clone(),
                    to: a.states[t.to].clone(),
                    calls_interface: t.label.interface.clone(),
                    calls_operation: t.label.operation.clone(),
                    min_delay: t.min_delay,
                })
                .collect(),
            states: a.states,
        }
    }
}

impl ServiceEffectAutomaton {
    /// Automaton for an operation that makes no calls.
    pub fn trivial() -> Self {
        AutomatonSpec {
            states: vec!["q0".into()],
            initial: "q0".into(),
            finals: vec!["q0".into()],
            transitions: vec![],
        }
        .try_into()
        .expect("single final state is valid")
    }

    fn check_no_dead_states(&self) -> Result<(), AutomatonError> {
        let n = self.states.len();
        let mut forward = vec![false; n];
        let mut queue = VecDeque::from([self.initial]);
        forward[self.initial] = true;
        while let Some(s) = queue.pop_front() {
            for &t in &self.outgoing[s] {
                let to = self.transitions[t].to;
                if !forward[to] {
                    forward[to] = true;
                    queue.push_back(to);
                }
            }
        }
        let backward = self.can_reach_final();
        match (0..n).find(|&s| !(forward[s] && backward[s])) {
            Some(s) => Err(AutomatonError::DeadState(self.states[s].clone())),
            None => Ok(()),
        }
    }

    fn can_reach_final(&self) -> Vec<bool> {
        let n = self.states.len();
        let mut incoming = vec![Vec::new(); n];
        for t in &self.transitions {
            incoming[t.to].push(t.from);
        }
        let mut reach = self.finals.clone();
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| reach[s]).collect();
        while let Some(s) = queue.pop_front() {
            for &p in &incoming[s] {
                if !reach[p] {
                    reach[p] = true;
                    queue.push_back(p);
                }
            }
        }
        reach
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state_name(&self, state: usize) -> &str {
        &self.states[state]
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.finals[state]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Outgoing transitions of `state`, in declaration order.
    pub fn outgoing(&self, state: usize) -> impl Iterator<Item = &Transition> {
        self.outgoing[state].iter().map(|&t| &self.transitions[t])
    }

    /// The call alphabet.
    pub fn labels(&self) -> BTreeSet<CallLabel> {
        self.transitions.iter().map(|t| t.label.clone()).collect()
    }

    /// Number of transitions on a shortest path from each state to a final
    /// state. Used to steer long-running executions towards termination.
    pub fn hops_to_final(&self) -> Vec<usize> {
        let n = self.states.len();
        let mut incoming = vec![Vec::new(); n];
        for t in &self.transitions {
            incoming[t.to].push(t.from);
        }
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for (s, d) in dist.iter_mut().enumerate() {
            if self.finals[s] {
                *d = 0;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            for &p in &incoming[s] {
                if dist[p] == usize::MAX {
                    dist[p] = dist[s] + 1;
                    queue.push_back(p);
                }
            }
        }
        dist
    }

    /// Cursor at the initial state.
    pub fn start(self: &Arc<Self>) -> AutomatonCursor {
        AutomatonCursor {
            automaton: Arc::clone(self),
            current: self.initial,
        }
    }

    /// Cursor at a named state.
    pub fn cursor_at(self: &Arc<Self>, state: &str) -> Result<AutomatonCursor, AutomatonError> {
        let current = self
            .state_index(state)
            .ok_or_else(|| AutomatonError::UnknownState(state.to_string()))?;
        Ok(AutomatonCursor {
            automaton: Arc::clone(self),
            current,
        })
    }

    /// Shortest accumulated delay from `from` to every state (Dijkstra).
    fn delays_from(&self, from: usize) -> Vec<Option<u64>> {
        let mut dist: Vec<Option<u64>> = vec![None; self.states.len()];
        let mut heap = BinaryHeap::new();
        dist[from] = Some(0);
        heap.push(Reverse((0u64, from)));
        while let Some(Reverse((d, s))) = heap.pop() {
            if dist[s].is_some_and(|best| d > best) {
                continue;
            }
            for t in self.outgoing(s) {
                let nd = d.saturating_add(t.min_delay);
                if dist[t.to].is_none_or(|cur| nd < cur) {
                    dist[t.to] = Some(nd);
                    heap.push(Reverse((nd, t.to)));
                }
            }
        }
        dist
    }
}

/// Position of a running operation inside its automaton.
#[derive(Debug, Clone)]
pub struct AutomatonCursor {
    automaton: Arc<ServiceEffectAutomaton>,
    current: usize,
}

impl PartialEq for AutomatonCursor {
    fn eq(&self, other: &Self) -> bool {
        self.current == other.current
            && (Arc::ptr_eq(&self.automaton, &other.automaton) || self.automaton == other.automaton)
    }
}

impl Eq for AutomatonCursor {}

impl AutomatonCursor {
    pub fn automaton(&self) -> &Arc<ServiceEffectAutomaton> {
        &self.automaton
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn state_name(&self) -> &str {
        self.automaton.state_name(self.current)
    }

    pub fn is_final(&self) -> bool {
        self.automaton.is_final(self.current)
    }

    /// Follow the transition labelled `call` out of the current state.
    pub fn advance(&self, call: &CallLabel) -> Result<AutomatonCursor, ProtocolViolation> {
        self.automaton
            .outgoing(self.current)
            .find(|t| &t.label == call)
            .map(|t| AutomatonCursor {
                automaton: Arc::clone(&self.automaton),
                current: t.to,
            })
            .ok_or_else(|| ProtocolViolation {
                state: self.state_name().to_string(),
                label: call.clone(),
            })
    }

    /// Labels of every transition reachable from the current state.
    pub fn reachable_calls(&self) -> BTreeSet<CallLabel> {
        let a = &self.automaton;
        let mut visited = vec![false; a.state_count()];
        let mut stack = vec![self.current];
        let mut labels = BTreeSet::new();
        visited[self.current] = true;
        while let Some(s) = stack.pop() {
            for t in a.outgoing(s) {
                labels.insert(t.label.clone());
                if !visited[t.to] {
                    visited[t.to] = true;
                    stack.push(t.to);
                }
            }
        }
        labels
    }

    /// Minimum total delay before a transition labelled `call` can fire, or
    /// `None` when no such transition is reachable.
    pub fn earliest_occurrence(&self, call: &CallLabel) -> Option<u64> {
        self.earliest_calls().get(call).copied()
    }

    /// `earliest_occurrence` for every reachable label at once.
    pub fn earliest_calls(&self) -> BTreeMap<CallLabel, u64> {
        let dist = self.automaton.delays_from(self.current);
        let mut out: BTreeMap<CallLabel, u64> = BTreeMap::new();
        for t in self.automaton.transitions() {
            if let Some(d) = dist[t.from] {
                out.entry(t.label.clone())
                    .and_modify(|e| *e = (*e).min(d))
                    .or_insert(d);
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn spec(
        states: &[&str],
        finals: &[&str],
        transitions: &[(&str, &str, &str, u64, &str)],
    ) -> AutomatonSpec {
        AutomatonSpec {
            states: states.iter().map(|s| s.to_string()).collect(),
            initial: states[0].to_string(),
            finals: finals.iter().map(|s| s.to_string()).collect(),
            transitions: transitions
                .iter()
                .map(|(from, iface, op, delay, to)| TransitionSpec {
                    from: from.to_string(),
                    to: to.to_string(),
                    calls_interface: iface.to_string(),
                    calls_operation: op.to_string(),
                    min_delay: *delay,
                })
                .collect(),
        }
    }

    fn build(
        states: &[&str],
        finals: &[&str],
        transitions: &[(&str, &str, &str, u64, &str)],
    ) -> Arc<ServiceEffectAutomaton> {
        Arc::new(spec(states, finals, transitions).try_into().unwrap())
    }

    #[test]
    fn advance_follows_single_transition() {
        let a = build(&["q0", "q1"], &["q1"], &[("q0", "B", "callB", 0, "q1")]);
        let c = a.start().advance(&CallLabel::new("B", "callB")).unwrap();
        assert_eq!(c.state_name(), "q1");
    }

    #[test]
    fn advance_rejects_absent_transition() {
        let a = build(&["q0", "q1"], &["q1"], &[("q0", "B", "callB", 0, "q1")]);
        let err = a.start().advance(&CallLabel::new("C", "callC")).unwrap_err();
        assert_eq!(err.state, "q0");
    }

    #[test]
    fn two_loop_returns_to_start() {
        let a = build(
            &["q0", "q1"],
            &["q0"],
            &[("q0", "B", "x", 1, "q1"), ("q1", "C", "y", 1, "q0")],
        );
        let c = a
            .start()
            .advance(&CallLabel::new("B", "x"))
            .unwrap()
            .advance(&CallLabel::new("C", "y"))
            .unwrap();
        assert_eq!(c.state_name(), "q0");
    }

    #[test]
    fn sink_has_no_reachable_calls() {
        let a = build(&["q0", "q1"], &["q1"], &[("q0", "B", "b", 0, "q1")]);
        let c = a.cursor_at("q1").unwrap();
        assert!(c.reachable_calls().is_empty());
    }

    #[test]
    fn past_calls_are_not_reachable() {
        let a = build(
            &["q0", "q1", "q2"],
            &["q2"],
            &[("q0", "B", "b", 0, "q1"), ("q1", "C", "c", 0, "q2")],
        );
        let c = a.start().advance(&CallLabel::new("B", "b")).unwrap();
        assert_eq!(
            c.reachable_calls(),
            BTreeSet::from([CallLabel::new("C", "c")])
        );
        assert_eq!(c.earliest_occurrence(&CallLabel::new("B", "b")), None);
    }

    #[test]
    fn branching_demo_automaton() {
        // q0 -B.b-> q1 -D.d-> q3 ; q0 -C.c-> q2 -D.d-> q3
        let a = build(
            &["q0", "q1", "q2", "q3"],
            &["q3"],
            &[
                ("q0", "B", "b", 2, "q1"),
                ("q0", "C", "c", 1, "q2"),
                ("q1", "D", "d", 3, "q3"),
                ("q2", "D", "d", 9, "q3"),
            ],
        );
        let c = a.start();
        assert_eq!(
            c.reachable_calls(),
            BTreeSet::from([
                CallLabel::new("B", "b"),
                CallLabel::new("C", "c"),
                CallLabel::new("D", "d"),
            ])
        );
        // via q2: prefix delay 1 (C.c); via q1: prefix delay 2 (B.b)
        assert_eq!(c.earliest_occurrence(&CallLabel::new("D", "d")), Some(1));
    }

    #[test]
    fn immediate_call_has_zero_delay() {
        let a = build(&["q0", "q1"], &["q1"], &[("q0", "B", "b", 4, "q1")]);
        assert_eq!(a.start().earliest_occurrence(&CallLabel::new("B", "b")), Some(0));
    }

    #[test]
    fn call_after_delayed_transition() {
        let a = build(
            &["q0", "q1", "q2"],
            &["q2"],
            &[("q0", "X", "x", 7, "q1"), ("q1", "B", "b", 2, "q2")],
        );
        assert_eq!(a.start().earliest_occurrence(&CallLabel::new("B", "b")), Some(7));
    }

    #[test]
    fn rejects_invalid_automata() {
        let dead: Result<ServiceEffectAutomaton, _> =
            spec(&["q0", "q1", "q2"], &["q1"], &[("q0", "B", "b", 0, "q1")]).try_into();
        assert_eq!(dead.unwrap_err(), AutomatonError::DeadState("q2".into()));

        let nondet: Result<ServiceEffectAutomaton, _> = spec(
            &["q0", "q1", "q2"],
            &["q1", "q2"],
            &[("q0", "B", "b", 0, "q1"), ("q0", "B", "b", 1, "q2")],
        )
        .try_into();
        assert!(matches!(
            nondet.unwrap_err(),
            AutomatonError::Nondeterministic { .. }
        ));

        let no_final: Result<ServiceEffectAutomaton, _> = spec(&["q0"], &[], &[]).try_into();
        assert_eq!(no_final.unwrap_err(), AutomatonError::NoFinalState);
    }

    #[test]
    fn json_round_trip_is_stable() {
        let a = build(
            &["q0", "q1"],
            &["q1"],
            &[("q0", "B", "b", 3, "q1")],
        );
        let text = serde_json::to_string(&*a).unwrap();
        let back: ServiceEffectAutomaton = serde_json::from_str(&text).unwrap();
        assert_eq!(*a, back);
    }

    /// Random valid automata: a spanning chain keeps every state live, extra
    /// edges add branches and loops.
    pub(crate) fn arb_automaton(
        max_states: usize,
        max_extra: usize,
    ) -> impl Strategy<Value = Arc<ServiceEffectAutomaton>> {
        (1..=max_states)
            .prop_flat_map(move |n| {
                (
                    Just(n),
                    prop::collection::vec((0..3usize, 0..3usize, 0u64..6), n.saturating_sub(1)),
                    prop::collection::vec(
                        (0..n, 0..n, 0..3usize, 0..3usize, 0u64..6),
                        0..=max_extra,
                    ),
                )
            })
            .prop_map(|(n, chain, extra)| {
                let names: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
                let mut seen = BTreeSet::new();
                let mut transitions = Vec::new();
                let mut push = |from: usize, to: usize, i: usize, o: usize, d: u64| {
                    if seen.insert((from, i, o)) {
                        transitions.push(TransitionSpec {
                            from: names[from].clone(),
                            to: names[to].clone(),
                            calls_interface: format!("I{i}"),
                            calls_operation: format!("op{o}"),
                            min_delay: d,
                        });
                    }
                };
                for (k, (i, o, d)) in chain.into_iter().enumerate() {
                    push(k, k + 1, i, o, d);
                }
                for (from, to, i, o, d) in extra {
                    push(from, to, i, o, d);
                }
                let spec = AutomatonSpec {
                    states: names.clone(),
                    initial: names[0].clone(),
                    finals: vec![names[n - 1].clone()],
                    transitions,
                };
                // Extra edges can only add paths; the last state stays final
                // and every state stays on the chain.
                Arc::new(ServiceEffectAutomaton::try_from(spec).unwrap())
            })
    }

    /// Exhaustive path enumeration: minimum delay prefix before each label,
    /// exploring simple paths only (a cycle can never shorten a prefix since
    /// delays are non-negative).
    fn enumerate_earliest(a: &ServiceEffectAutomaton, from: usize) -> BTreeMap<CallLabel, u64> {
        fn walk(
            a: &ServiceEffectAutomaton,
            s: usize,
            acc: u64,
            on_path: &mut Vec<bool>,
            out: &mut BTreeMap<CallLabel, u64>,
        ) {
            for t in a.outgoing(s) {
                let e = out.entry(t.label.clone()).or_insert(u64::MAX);
                *e = (*e).min(acc);
                if !on_path[t.to] {
                    on_path[t.to] = true;
                    walk(a, t.to, acc + t.min_delay, on_path, out);
                    on_path[t.to] = false;
                }
            }
        }
        let mut on_path = vec![false; a.state_count()];
        on_path[from] = true;
        let mut out = BTreeMap::new();
        walk(a, from, 0, &mut on_path, &mut out);
        out
    }

    proptest! {
        #[test]
        fn reachable_matches_earliest(a in arb_automaton(8, 10), pick in 0usize..8) {
            let state = pick % a.state_count();
            let c = a.cursor_at(a.state_name(state)).unwrap();
            let reach = c.reachable_calls();
            let earliest: BTreeSet<_> = a
                .labels()
                .into_iter()
                .filter(|l| c.earliest_occurrence(l).is_some())
                .collect();
            prop_assert_eq!(reach, earliest);
        }

        #[test]
        fn earliest_agrees_with_path_enumeration(a in arb_automaton(6, 5), pick in 0usize..6) {
            prop_assume!(a.transitions().len() <= 10);
            let state = pick % a.state_count();
            let c = a.cursor_at(a.state_name(state)).unwrap();
            prop_assert_eq!(c.earliest_calls(), enumerate_earliest(&a, state));
        }

        #[test]
        fn advance_keeps_cursor_valid(a in arb_automaton(8, 10), choices in prop::collection::vec(0usize..4, 0..12)) {
            let mut c = a.start();
            for ch in choices {
                let out: Vec<_> = a.outgoing(c.current()).cloned().collect();
                if out.is_empty() { break; }
                c = c.advance(&out[ch % out.len()].label).unwrap();
                prop_assert!(c.current() < a.state_count());
            }
        }
    }
}
