use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sefa::CallLabel;

pub type Time = u64;

/// One row of a simulated data store: column name to value.
pub type Row = BTreeMap<String, i64>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreWrite {
    pub store: String,
    pub key: String,
    pub row: Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HandleOp {
    Create,
    Find,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenyReason {
    CleanShutdown,
    NotStarted,
    NoSuchComponent,
    NoSuchOperation,
}

/// Event payloads. Serialized adjacently tagged so each line reads
/// `{"t":..,"kind":..,"payload":{..}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    InvocationHeld {
        invocation: u64,
        session: String,
        component: String,
        submitted_at: Time,
    },
    InvocationDenied {
        invocation: u64,
        session: String,
        component: String,
        reason: DenyReason,
    },
    InvocationStart {
        invocation: u64,
        parent: Option<u64>,
        session: String,
        component: String,
        interface: String,
        operation: String,
        instance: u32,
        tx: Option<u64>,
        submitted_at: Time,
    },
    InvocationEnd {
        invocation: u64,
        parent: Option<u64>,
        session: String,
        component: String,
        submitted_at: Time,
    },
    TxBegin {
        tx: u64,
        root_invocation: u64,
        component: String,
    },
    TxCommit {
        tx: u64,
        writes: Vec<StoreWrite>,
    },
    TxAbort {
        tx: u64,
        reason: String,
    },
    BarrierActivated {
        component: String,
    },
    QuiescenceReached {
        component: String,
    },
    SwapApplied {
        component: String,
        old_version: u64,
        new_version: Option<u64>,
    },
    BarrierReleased {
        component: String,
        replayed: usize,
    },
    ShadowSynced {
        component: String,
        from_store: String,
        to_store: String,
        rows: usize,
    },
    PoolResized {
        component: String,
        pool_size: u32,
    },
    MessageEnqueued {
        queue: String,
        message: u64,
        payload: String,
    },
    MessageDelivered {
        queue: String,
        message: u64,
        invocation: u64,
    },
    MessageDropped {
        queue: String,
        message: u64,
    },
    QueuePaused {
        queue: String,
    },
    QueueResumed {
        queue: String,
    },
    SessionInvalidated {
        session: String,
        component: String,
    },
    Handle {
        session: String,
        component: String,
        op: HandleOp,
    },
    Logged {
        invocation: u64,
        component: String,
        call: CallLabel,
    },
    CleanShutdownBegun {
        component: String,
    },
    ContainerStopped {
        component: String,
    },
    ContainerStarted {
        component: String,
    },
    RunEnd {},
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::InvocationHeld { .. } => "InvocationHeld",
            EventBody::InvocationDenied { .. } => "InvocationDenied",
            EventBody::InvocationStart { .. } => "InvocationStart",
            EventBody::InvocationEnd { .. } => "InvocationEnd",
            EventBody::TxBegin { .. } => "TxBegin",
            EventBody::TxCommit { .. } => "TxCommit",
            EventBody::TxAbort { .. } => "TxAbort",
            EventBody::BarrierActivated { .. } => "BarrierActivated",
            EventBody::QuiescenceReached { .. } => "QuiescenceReached",
            EventBody::SwapApplied { .. } => "SwapApplied",
            EventBody::BarrierReleased { .. } => "BarrierReleased",
            EventBody::ShadowSynced { .. } => "ShadowSynced",
            EventBody::PoolResized { .. } => "PoolResized",
            EventBody::MessageEnqueued { .. } => "MessageEnqueued",
            EventBody::MessageDelivered { .. } => "MessageDelivered",
            EventBody::MessageDropped { .. } => "MessageDropped",
            EventBody::QueuePaused { .. } => "QueuePaused",
            EventBody::QueueResumed { .. } => "QueueResumed",
            EventBody::SessionInvalidated { .. } => "SessionInvalidated",
            EventBody::Handle { .. } => "Handle",
            EventBody::Logged { .. } => "Logged",
            EventBody::CleanShutdownBegun { .. } => "CleanShutdownBegun",
            EventBody::ContainerStopped { .. } => "ContainerStopped",
            EventBody::ContainerStarted { .. } => "ContainerStarted",
            EventBody::RunEnd {} => "RunEnd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t: Time,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Totally ordered simulation log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, t: Time, body: EventBody) {
        debug_assert!(self.events.last().is_none_or(|e| e.t <= t));
        self.events.push(Event { t, body });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.body.kind() == kind).count()
    }

    /// One JSON object per line, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<Event>, _>>()?;
        Ok(Self { events })
    }

    pub fn end_time(&self) -> Time {
        self.events.last().map_or(0, |e| e.t)
    }
}

impl<'a> IntoIterator for &'a EventLog {
    type Item = &'a Event;
    type IntoIter = std::slice::Iter<'a, Event>;

    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}
