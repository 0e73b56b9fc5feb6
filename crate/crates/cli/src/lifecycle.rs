//! Module lifecycle commands. The state file holds the seed and the list of
//! operations that succeeded so far; each command replays it on a fresh
//! engine, applies one operation and appends it on success.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use reconf_core::deployapi::{DeployError, DeploymentManager, ModuleArchive, RedeployMode};
use reconf_core::pirma::EntityMigration;

use crate::{parse, pretty, rejection_text, write, Cli, Failure, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Start,
    Stop,
    Undeploy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Entry {
    Distribute {
        archive: ModuleArchive,
    },
    Start {
        module: String,
    },
    Stop {
        module: String,
    },
    Undeploy {
        module: String,
    },
    Redeploy {
        archive: ModuleArchive,
        #[serde(default)]
        migrations: Vec<EntityMigration>,
        mode: RedeployMode,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    seed: u64,
    history: Vec<Entry>,
}

fn apply(m: &mut DeploymentManager, e: &Entry) -> Result<(), DeployError> {
    match e {
        Entry::Distribute { archive } => m.distribute(archive.clone()).map(drop),
        Entry::Start { module } => m.start(module).map(drop),
        Entry::Stop { module } => m.stop(module).map(drop),
        Entry::Undeploy { module } => m.undeploy(module).map(drop),
        Entry::Redeploy {
            archive,
            migrations,
            mode,
        } => {
            m.mode = *mode;
            let module = archive.module.clone();
            m.redeploy(&module, archive.clone(), migrations.clone()).map(drop)
        }
    }
}

fn failure(e: DeployError) -> Failure {
    match e {
        DeployError::Rejected(r) => Failure::Rejected(rejection_text(&r)),
        e => Failure::Usage(anyhow!(e)),
    }
}

fn step(cli: &Cli, state: &Path, entry: Entry) -> Result<(), Failure> {
    let mut file: StateFile = if state.exists() {
        parse(state)?
    } else {
        StateFile {
            seed: cli.seed.unwrap_or(0),
            history: vec![],
        }
    };
    let mut m = DeploymentManager::new(file.seed);
    for (i, e) in file.history.iter().enumerate() {
        apply(&mut m, e).with_context(|| format!("replaying entry {i} of {}", state.display()))?;
    }
    let before = m.progress().len();
    let result = apply(&mut m, &entry);
    let mut progress = String::new();
    for ev in &m.progress()[before..] {
        progress.push_str(&serde_json::to_string(ev).expect("progress serializes"));
        progress.push('\n');
    }
    write(&cli.out, "progress.jsonl", &progress)?;
    result.map_err(failure)?;
    file.history.push(entry);
    fs::write(state, pretty(&file)).with_context(|| format!("writing {}", state.display()))?;
    let states: Vec<String> = m.modules().iter().map(|(k, r)| format!("{k}: {:?}", r.state)).collect();
    println!("{}", states.join("\n"));
    Ok(())
}

pub fn distribute(cli: &Cli, state: &Path, archive: &Path) -> Result<(), Failure> {
    let archive: ModuleArchive = parse(archive)?;
    step(cli, state, Entry::Distribute { archive })
}

pub fn op(cli: &Cli, state: &Path, op: Op, module: &str) -> Result<(), Failure> {
    let module = module.to_string();
    let entry = match op {
        Op::Start => Entry::Start { module },
        Op::Stop => Entry::Stop { module },
        Op::Undeploy => Entry::Undeploy { module },
    };
    step(cli, state, entry)
}

pub fn redeploy(cli: &Cli, state: &Path, archive: &Path, migrations: Option<&Path>, mode: Mode) -> Result<(), Failure> {
    let archive: ModuleArchive = parse(archive)?;
    let migrations: Vec<EntityMigration> = migrations.map(parse).transpose()?.unwrap_or_default();
    let mode = match mode {
        Mode::Strict => RedeployMode::Strict,
        Mode::Weakened => RedeployMode::Weakened,
    };
    step(
        cli,
        state,
        Entry::Redeploy {
            archive,
            migrations,
            mode,
        },
    )
}
