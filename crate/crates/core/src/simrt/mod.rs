//! Deterministic simulated container runtime.

mod engine;
pub mod events;
pub mod scenario;
pub mod snapshot;

pub use engine::{
    BarrierMode, Engine, RuntimeState, SimError, Store, StoreMigration, SwapOptions, CLASS_BARRIER,
    CLASS_COMPLETION, CLASS_DISPATCH, DEFAULT_DRAIN_TIMEOUT, STEP_CAP,
};
pub use events::{DenyReason, Event, EventBody, EventLog, HandleOp, Row, StoreWrite, Time};
pub use scenario::{
    CallTarget, ClientSpec, FaultKind, FaultSpec, HandleAction, MessageSpec, ScriptStep, WorkloadScenario,
};
pub use snapshot::{InProgress, InstanceSnapshot, RuntimeSnapshot};

use crate::model::ApplicationConfiguration;

/// Runs a scenario to completion without any reconfiguration.
pub fn simulate(
    config: &ApplicationConfiguration,
    scenario: &WorkloadScenario,
) -> Result<(EventLog, RuntimeState), SimError> {
    let mut engine = Engine::new(config.clone(), scenario.seed);
    engine.load(scenario)?;
    engine.finish()?;
    let state = engine.state();
    Ok((engine.into_log(), state))
}
