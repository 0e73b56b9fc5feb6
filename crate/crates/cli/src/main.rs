use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use reconf_core::depgraph::{self, ReconfigurationWindow, StaticDependencyGraph};
use reconf_core::harness;
use reconf_core::model::{self, ApplicationConfiguration, ChangeKind, ComponentDescriptor};
use reconf_core::pirma::{self, Blocking, CostModel, PirmaError, PlanOptions, ReconfigurationRequest};
use reconf_core::simrt::{Engine, RuntimeSnapshot, SimError, Time, WorkloadScenario, CLASS_BARRIER};

mod lifecycle;

#[derive(Parser)]
#[command(name = "reconf", version, about = "Controlled runtime redeployment simulator")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strict,
    Weakened,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockingArg {
    Minimal,
    WholeApp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChangeArg {
    Functional,
    NonFunctional,
    Structural,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a workload without reconfiguration.
    Simulate {
        app: PathBuf,
        scenario: PathBuf,
        /// Stop the run at this time instead of running to the end.
        #[arg(long)]
        until: Option<Time>,
        /// Also write the runtime snapshot taken at this time.
        #[arg(long)]
        snapshot_at: Option<Time>,
    },
    /// Runs a workload with one reconfiguration request injected, or
    /// redeploys a module held in a lifecycle state file.
    Redeploy {
        app: Option<PathBuf>,
        scenario: Option<PathBuf>,
        request: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "weakened")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "minimal")]
        blocking: BlockingArg,
        /// Fixed window length instead of the cost model.
        #[arg(long)]
        window: Option<Time>,
        #[arg(long, default_value_t = CostModel::default().swap)]
        swap_cost: Time,
        #[arg(long, default_value_t = CostModel::default().sync)]
        sync_cost: Time,
        #[arg(long, default_value_t = CostModel::default().other)]
        step_cost: Time,
        #[arg(long, conflicts_with_all = ["app", "scenario", "request"], requires = "archive")]
        state: Option<PathBuf>,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Entity migrations for a module redeploy (JSON array).
        #[arg(long)]
        migrations: Option<PathBuf>,
    },
    /// Builds the runtime dependency graph and the affected set.
    AnalyzeDeps {
        app: PathBuf,
        snapshot: PathBuf,
        /// Comma-separated target components.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        /// A duration, `auto` or `inf`.
        #[arg(long, default_value = "auto")]
        window: String,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Creates the containers of a module archive, stopped.
    Distribute {
        #[arg(long)]
        state: PathBuf,
        archive: PathBuf,
    },
    Start {
        #[arg(long)]
        state: PathBuf,
        module: String,
    },
    /// Drains and stops every container of a module.
    Stop {
        #[arg(long)]
        state: PathBuf,
        module: String,
    },
    Undeploy {
        #[arg(long)]
        state: PathBuf,
        module: String,
    },
    /// Prints the safety verdict for a descriptor and change.
    Classify {
        descriptor: PathBuf,
        #[arg(long, value_enum)]
        change: ChangeArg,
        /// Replacement descriptor, for the conversational state check.
        #[arg(long)]
        new: Option<PathBuf>,
        /// Comma-separated holders of remote references.
        #[arg(long, value_delimiter = ',')]
        refs: Vec<String>,
        #[arg(long)]
        migration: bool,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Protocol(anyhow::Error),
    Rejected(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn sim_failure(e: SimError, what: &str) -> Failure {
    match e {
        e @ SimError::ProtocolViolation { .. } => Failure::Protocol(anyhow!(e).context(what.to_string())),
        e => Failure::Usage(anyhow!(e).context(what.to_string())),
    }
}

fn pirma_failure(e: PirmaError, what: &str) -> Failure {
    match e {
        PirmaError::Engine(e) => sim_failure(e, what),
        PirmaError::Rejected(r) => Failure::Rejected(rejection_text(&r)),
        e => Failure::Usage(anyhow!(e).context(what.to_string())),
    }
}

fn rejection_text(r: &pirma::Rejection) -> String {
    let mut s = format!("rejected: {r}\n");
    for v in &r.verdicts {
        s.push_str(&serde_json::to_string(v).expect("verdict serializes"));
        s.push('\n');
    }
    for f in &r.findings {
        s.push_str(&format!("finding: {f:?}\n"));
    }
    s
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_app(path: &Path) -> anyhow::Result<ApplicationConfiguration> {
    model::load_application(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> anyhow::Result<WorkloadScenario> {
    let mut s: WorkloadScenario = parse(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

/// Loads a request and inlines descriptor files, resolved against the
/// request's directory.
fn load_request(path: &Path) -> anyhow::Result<ReconfigurationRequest> {
    let mut r: ReconfigurationRequest = parse(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for t in &mut r.targets {
        if let (None, Some(f)) = (&t.descriptor, &t.descriptor_file) {
            let d: ComponentDescriptor = parse(&base.join(f))?;
            t.descriptor = Some(d);
            t.descriptor_file = None;
        }
    }
    Ok(r)
}

fn write(out: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let p = out.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

fn simulate(
    cli: &Cli,
    app: &Path,
    scenario: &Path,
    until: Option<Time>,
    snapshot_at: Option<Time>,
) -> Result<(), Failure> {
    let config = load_app(app)?;
    let scenario = load_scenario(scenario, cli.seed)?;
    let mut engine = Engine::new(config, scenario.seed);
    engine.load(&scenario).map_err(|e| sim_failure(e, "loading scenario"))?;
    if let Some(t) = snapshot_at {
        engine.advance_to(t, CLASS_BARRIER).map_err(|e| sim_failure(e, "simulating"))?;
        write(&cli.out, "snapshot.json", &pretty(&engine.snapshot()))?;
    }
    match until {
        Some(t) => engine.advance_to(t.saturating_add(1), 0),
        None => engine.finish(),
    }
    .map_err(|e| sim_failure(e, "simulating"))?;
    let log = engine.into_log();
    write(&cli.out, "events.jsonl", &log.to_json_lines())?;
    write(&cli.out, "metrics.json", &pretty(&reconf_core::metrics::RunMetrics::from_log(&log)))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn redeploy(
    cli: &Cli,
    app: &Path,
    scenario: &Path,
    request: &Path,
    mode: Mode,
    blocking: BlockingArg,
    window: Option<Time>,
    cost: CostModel,
) -> Result<(), Failure> {
    let config = load_app(app)?;
    let scenario = load_scenario(scenario, cli.seed)?;
    let request = load_request(request)?;
    let opts = PlanOptions {
        blocking: match blocking {
            BlockingArg::Minimal => Blocking::Minimal,
            BlockingArg::WholeApp => Blocking::WholeApp,
        },
        strict: matches!(mode, Mode::Strict),
        cost,
        window,
    };
    let run = harness::run_redeploy(&config, &scenario, &request, &opts).map_err(|e| pirma_failure(e, "redeploying"))?;
    write(&cli.out, "events.jsonl", &run.log.to_json_lines())?;
    write(&cli.out, "metrics.json", &pretty(&run.metrics))?;
    write(&cli.out, "report.json", &pretty(&run))?;
    if let Some(r) = &run.rejection {
        return Err(Failure::Rejected(rejection_text(r)));
    }
    Ok(())
}

/// Window length from the cost model for a functional-only request,
/// grown until the affected set stops changing.
fn auto_window(
    config: &ApplicationConfiguration,
    snapshot: &RuntimeSnapshot,
    targets: &BTreeSet<String>,
    cost: CostModel,
) -> Result<(ReconfigurationWindow, BTreeSet<String>), Failure> {
    let mut affected = targets.clone();
    loop {
        let a = affected.len() as Time;
        let t = targets.len() as Time;
        let w = ReconfigurationWindow::new(snapshot.time, cost.other * (2 * a + t + 1) + cost.swap * t);
        let g = depgraph::build_runtime_graph(config, snapshot, w).map_err(|e| anyhow!(e))?;
        let next = depgraph::affected_set(config, &g, targets).map_err(|e| anyhow!(e))?;
        if next == affected {
            return Ok((w, affected));
        }
        affected = next;
    }
}

fn analyze_deps(
    cli: &Cli,
    app: &Path,
    snapshot: &Path,
    targets: &[String],
    window: &str,
    format: Format,
) -> Result<(), Failure> {
    let config = load_app(app)?;
    let snapshot: RuntimeSnapshot = parse(snapshot)?;
    let targets: BTreeSet<String> = targets.iter().cloned().collect();
    let window = match window {
        "auto" => auto_window(&config, &snapshot, &targets, CostModel::default())?.0,
        "inf" => ReconfigurationWindow::unbounded(snapshot.time),
        n => ReconfigurationWindow::new(
            snapshot.time,
            n.parse().map_err(|_| anyhow!("--window expects a duration, `auto` or `inf`, got `{n}`"))?,
        ),
    };
    let stat = StaticDependencyGraph::build(&config).map_err(|e| anyhow!(e))?;
    let g = depgraph::build_runtime_graph(&config, &snapshot, window).map_err(|e| anyhow!(e))?;
    let affected = depgraph::affected_set(&config, &g, &targets).map_err(|e| anyhow!(e))?;
    let doc = json!({
        "window": window,
        "static": stat,
        "nodes": g.nodes,
        "edges": g.edges,
        "affected": affected,
    });
    write(&cli.out, "deps.json", &pretty(&doc))?;
    if matches!(format, Format::Dot) {
        write(&cli.out, "deps.dot", &g.to_dot())?;
    }
    println!("{}", affected.iter().cloned().collect::<Vec<_>>().join(","));
    Ok(())
}

fn classify(
    descriptor: &Path,
    change: ChangeArg,
    new: Option<&Path>,
    refs: &[String],
    migration: bool,
) -> Result<(), Failure> {
    let old: ComponentDescriptor = parse(descriptor)?;
    let new: Option<ComponentDescriptor> = new.map(parse).transpose()?;
    let change = match change {
        ChangeArg::Functional => ChangeKind::Functional,
        ChangeArg::NonFunctional => ChangeKind::NonFunctional,
        ChangeArg::Structural => ChangeKind::Structural,
    };
    let refs: BTreeSet<String> = refs.iter().filter(|r| !r.is_empty()).cloned().collect();
    let v = pirma::classify_structural_safety(&old, new.as_ref(), change, &refs, migration);
    println!("{}", serde_json::to_string(&v).expect("verdict serializes"));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Simulate {
            app,
            scenario,
            until,
            snapshot_at,
        } => simulate(cli, app, scenario, *until, *snapshot_at),
        Cmd::Redeploy {
            app,
            scenario,
            request,
            mode,
            blocking,
            window,
            swap_cost,
            sync_cost,
            step_cost,
            state,
            archive,
            migrations,
        } => {
            if let Some(state) = state {
                let archive = archive.as_deref().expect("required by clap");
                return lifecycle::redeploy(cli, state, archive, migrations.as_deref(), *mode);
            }
            let (Some(app), Some(scenario), Some(request)) = (app, scenario, request) else {
                return Err(Failure::Usage(anyhow!(
                    "redeploy needs APP SCENARIO REQUEST, or --state with --archive"
                )));
            };
            let cost = CostModel {
                swap: *swap_cost,
                sync: *sync_cost,
                other: *step_cost,
            };
            redeploy(cli, app, scenario, request, *mode, *blocking, *window, cost)
        }
        Cmd::AnalyzeDeps {
            app,
            snapshot,
            targets,
            window,
            format,
        } => analyze_deps(cli, app, snapshot, targets, window, *format),
        Cmd::Distribute { state, archive } => lifecycle::distribute(cli, state, archive),
        Cmd::Start { state, module } => lifecycle::op(cli, state, lifecycle::Op::Start, module),
        Cmd::Stop { state, module } => lifecycle::op(cli, state, lifecycle::Op::Stop, module),
        Cmd::Undeploy { state, module } => lifecycle::op(cli, state, lifecycle::Op::Undeploy, module),
        Cmd::Classify {
            descriptor,
            change,
            new,
            refs,
            migration,
        } => classify(descriptor, *change, new.as_deref(), refs, *migration),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Protocol(e)) => {
            eprintln!("protocol violation: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Rejected(text)) => {
            eprint!("{text}");
            ExitCode::from(3)
        }
    }
}

