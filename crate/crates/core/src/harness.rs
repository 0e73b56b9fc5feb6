//! Drives one scenario with a reconfiguration request injected at its
//! requested time.

use serde::Serialize;

use crate::metrics::RunMetrics;
use crate::model::ApplicationConfiguration;
use crate::pirma::{self, PirmaError, PlanOptions, ReconfigurationPlan, ReconfigurationReport, ReconfigurationRequest, Rejection};
use crate::simrt::{Engine, EventLog, RuntimeState, SimError, WorkloadScenario, CLASS_BARRIER};

#[derive(Debug, Clone, Serialize)]
pub struct RedeployRun {
    #[serde(skip)]
    pub log: EventLog,
    #[serde(skip)]
    pub state: RuntimeState,
    pub plan: Option<ReconfigurationPlan>,
    pub report: Option<ReconfigurationReport>,
    pub rejection: Option<Rejection>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone)]
pub struct ControlRun {
    pub log: EventLog,
    pub state: RuntimeState,
    pub metrics: RunMetrics,
}

/// Plain run, no reconfiguration.
pub fn run_control(config: &ApplicationConfiguration, scenario: &WorkloadScenario) -> Result<ControlRun, SimError> {
    let (log, state) = crate::simrt::simulate(config, scenario)?;
    let metrics = RunMetrics::from_log(&log);
    Ok(ControlRun { log, state, metrics })
}

/// Runs `scenario`, plans and executes `request` at its requested time, then
/// runs to completion. A rejected request leaves the run otherwise untouched.
pub fn run_redeploy(
    config: &ApplicationConfiguration,
    scenario: &WorkloadScenario,
    request: &ReconfigurationRequest,
    opts: &PlanOptions,
) -> Result<RedeployRun, PirmaError> {
    let mut engine = Engine::new(config.clone(), scenario.seed);
    engine.load(scenario)?;
    engine.advance_to(request.requested_at, CLASS_BARRIER)?;
    let snapshot = engine.snapshot();
    let (plan, report, rejection) = match pirma::plan(request, engine.config(), &snapshot, opts) {
        Ok(p) => {
            let r = pirma::execute(&p, request, &mut engine)?;
            (Some(p), Some(r), None)
        }
        Err(PirmaError::Rejected(r)) => (None, None, Some(*r)),
        Err(e) => return Err(e),
    };
    engine.finish()?;
    let state = engine.state();
    let log = engine.into_log();
    let metrics = RunMetrics::from_log(&log);
    Ok(RedeployRun {
        log,
        state,
        plan,
        report,
        rejection,
        metrics,
    })
}
