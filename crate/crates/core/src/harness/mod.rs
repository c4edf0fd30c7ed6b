//! Scripted scenarios, the attack suite and provenance audits.

mod audit;
mod exec;
mod report;
mod script;

pub use audit::{allowed_fields, audit_ic, changed_fields, OwnerNames};
pub use exec::{
    default_metering_key, owner_key_seed, run_script, scan_for_secrets, secret_needles, Mode,
    ScenarioRun,
};
pub use report::{AttackVerdict, IcReport, InvariantResult, ScenarioReport, StepReport};
pub use script::{Action, Expectation, OwnerDecl, Script, ScriptError, Step, HEADER};

use thiserror::Error;

use crate::consensus::NetworkConfig;

pub const TABLE2: &str = include_str!("scripts/table2.ictoken");
pub const MULTI_IC: &str = include_str!("scripts/multi-ic.ictoken");

pub const SCENARIOS: [(&str, &str); 2] = [("table2", TABLE2), ("multi-ic", MULTI_IC)];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown attack {0:?}")]
    UnknownAttack(String),
}

/// A must-fail script and the rejection classes that count as a catch.
#[derive(Clone, Copy, Debug)]
pub struct Attack {
    pub name: &'static str,
    pub threat: &'static str,
    pub expected: &'static [&'static str],
    pub script: &'static str,
}

pub const ATTACKS: [Attack; 7] = [
    Attack {
        name: "clone",
        threat: "overbuilding/cloning",
        expected: &["DuplicateICID"],
        script: include_str!("scripts/clone.ictoken"),
    },
    Attack {
        name: "remark",
        threat: "remarking",
        expected: &["IllegalFieldChange"],
        script: include_str!("scripts/remark.ictoken"),
    },
    Attack {
        name: "rollback",
        threat: "recycling",
        expected: &["StageRollback"],
        script: include_str!("scripts/rollback.ictoken"),
    },
    Attack {
        name: "swap",
        threat: "component substitution",
        expected: &["MerkleMismatch", "CompositionAlreadySet"],
        script: include_str!("scripts/swap.ictoken"),
    },
    Attack {
        name: "defectiveResale",
        threat: "defective circulation",
        expected: &["DefectiveToken"],
        script: include_str!("scripts/defective-resale.ictoken"),
    },
    Attack {
        name: "foreignTransfer",
        threat: "transfer outside the consortium",
        expected: &["NewOwnerNotEnrolled"],
        script: include_str!("scripts/foreign-transfer.ictoken"),
    },
    Attack {
        name: "keyTamper",
        threat: "metering key substitution",
        expected: &["KeyTrailBroken"],
        script: include_str!("scripts/key-tamper.ictoken"),
    },
];

pub fn attack(name: &str) -> Option<&'static Attack> {
    ATTACKS.iter().find(|a| a.name == name)
}

/// Four honest nodes, quorum three.
pub fn default_network(seed: u64) -> Mode {
    let mut config = NetworkConfig::new(4);
    config.seed = seed;
    Mode::Network {
        config,
        byzantine: Vec::new(),
    }
}

pub fn run_scenario(name: &str, seed: u64, mode: &Mode) -> Result<ScenarioRun, HarnessError> {
    let (_, text) = SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| HarnessError::UnknownScenario(name.to_string()))?;
    Ok(run_script(name, &Script::parse(text)?, seed, mode))
}

pub fn replay_table2(seed: u64, mode: &Mode) -> ScenarioRun {
    run_scenario("table2", seed, mode).expect("embedded script parses")
}

/// Runs an attack on a fresh ledger. The verdict passes only if every
/// must-fail step was rejected with one of the documented classes.
pub fn run_attack(name: &str, seed: u64, mode: &Mode) -> Result<ScenarioRun, HarnessError> {
    let attack = attack(name).ok_or_else(|| HarnessError::UnknownAttack(name.to_string()))?;
    let script = Script::parse(attack.script)?;
    let mut run = run_script(&format!("attack {name}"), &script, seed, mode);
    let must_fail: Vec<&StepReport> = run
        .report
        .steps
        .iter()
        .filter(|s| s.expected.starts_with("rejected:"))
        .collect();
    let observed: Vec<String> = must_fail
        .iter()
        .map(|s| match s.outcome.strip_prefix("rejected:") {
            Some(class) => format!("rejected: {class}"),
            None => "ACCEPTED".to_string(),
        })
        .collect();
    let passed = !must_fail.is_empty()
        && must_fail.iter().all(|s| {
            s.matched
                && s.outcome
                    .strip_prefix("rejected:")
                    .is_some_and(|c| attack.expected.contains(&c))
        });
    run.report.attack = Some(AttackVerdict {
        name: name.to_string(),
        expected: attack.expected.iter().map(|s| s.to_string()).collect(),
        observed,
        passed,
    });
    run.report_text = run.report.to_string();
    run.report_json = run.report.to_json();
    Ok(run)
}
