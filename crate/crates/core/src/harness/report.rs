use std::fmt;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub line: usize,
    pub actor: String,
    pub action: &'static str,
    pub args: String,
    pub expected: String,
    pub outcome: String,
    /// Sequence indexes of committed tokens, for accepted steps.
    pub seq: Vec<u64>,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IcReport {
    pub label: String,
    pub icid: String,
    /// Version numbered from 1, as in a printed life-cycle table.
    pub row: usize,
    pub version: u8,
    pub stage: u8,
    pub status: u8,
    pub defective: bool,
    pub owner: String,
    pub pid: Option<String>,
    pub edid: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl InvariantResult {
    pub(crate) fn check(name: &'static str, failures: Vec<String>, ok_detail: String) -> Self {
        InvariantResult {
            name,
            passed: failures.is_empty(),
            detail: if failures.is_empty() { ok_detail } else { failures.join("; ") },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AttackVerdict {
    pub name: String,
    pub expected: Vec<String>,
    /// Outcome of each must-fail step.
    pub observed: Vec<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub backend: String,
    pub steps: Vec<StepReport>,
    pub chain_height: u64,
    pub committed_tokens: u64,
    pub ics: Vec<IcReport>,
    pub invariants: Vec<InvariantResult>,
    pub attack: Option<AttackVerdict>,
}

impl ScenarioReport {
    pub fn accepted_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.outcome == "accepted").count()
    }

    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.matched)
            && self.invariants.iter().all(|i| i.passed)
            && self.attack.as_ref().is_none_or(|a| a.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantResult> {
        self.invariants.iter().find(|i| i.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (seed {}, {})", self.scenario, self.seed, self.backend)?;
        for s in &self.steps {
            let seq = if s.seq.is_empty() {
                String::new()
            } else {
                format!(
                    " seq={}",
                    s.seq.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
                )
            };
            writeln!(
                f,
                "step {:>2}  {:<4} {:<13} {:<34} {}{}{}",
                s.step,
                s.actor,
                s.action,
                s.args,
                s.outcome,
                seq,
                if s.matched { String::new() } else { format!("  MISMATCH (expected {})", s.expected) },
            )?;
        }
        writeln!(
            f,
            "chain: {} blocks, {} tokens",
            self.chain_height, self.committed_tokens
        )?;
        for ic in &self.ics {
            writeln!(
                f,
                "{} icid={} row={} (version {}) stage={} status={} owner={}{}{}{}",
                ic.label,
                &ic.icid[..16],
                ic.row,
                ic.version,
                ic.stage,
                ic.status,
                ic.owner,
                if ic.defective { " DEFECTIVE" } else { "" },
                ic.pid.as_ref().map_or(String::new(), |p| format!(" pid={}", &p[..8])),
                ic.edid.as_ref().map_or(String::new(), |e| format!(" edid={}", &e[..8])),
            )?;
        }
        writeln!(f, "invariants:")?;
        for inv in &self.invariants {
            writeln!(
                f,
                "  [{}] {}: {}",
                if inv.passed { "pass" } else { "FAIL" },
                inv.name,
                inv.detail
            )?;
        }
        if let Some(attack) = &self.attack {
            writeln!(
                f,
                "attack {}: {} (documented: {})",
                attack.name,
                attack.observed.join(", "),
                attack.expected.join(" or ")
            )?;
        }
        writeln!(f, "result: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}
