//! Line-oriented scenario scripts.
//!
//! ```text
//! ictoken-script v1
//! owner O1 role=fab seed=1
//! owner X role=grey-market seed=9 enrolled=no
//! O1 enroll-ic ic=IC1 uid="FAB1/W07/D113" markings="ACME MCU-32F4"
//! O1 transfer ic=IC1 to=X expect=reject:NewOwnerNotEnrolled
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Values may be
//! double-quoted.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::token::{Stage, Status};
use crate::wallet::METERING_KEY_LEN;

pub const HEADER: &str = "ictoken-script v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnerDecl {
    pub label: String,
    pub role: String,
    pub seed: u64,
    /// Whether the owner is registered with the tracker before step one.
    pub enrolled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expectation {
    Accept,
    Reject(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    EnrollIc {
        ic: String,
        uid: String,
        markings: String,
        key: Option<[u8; METERING_KEY_LEN]>,
    },
    Transfer {
        ic: String,
        to: String,
    },
    UpdateStage {
        ic: String,
        stage: Stage,
        status: Status,
    },
    /// Binds ICs to a PCB. `claim` reuses the identifier of an existing
    /// board instead of computing one; `force` skips wallet-side checks.
    Assemble {
        ics: Vec<String>,
        pcb: Option<String>,
        claim: Option<String>,
        force: bool,
    },
    Integrate {
        ics: Vec<String>,
        device: Option<String>,
        claim: Option<String>,
        force: bool,
    },
    ReportDefect {
        ic: String,
    },
    /// Stage update that also rewrites the marking hash.
    Remark {
        ic: String,
        markings: String,
    },
    /// Transfer whose keyHash no longer matches the key trail.
    TamperKey {
        ic: String,
        to: String,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::EnrollIc { .. } => "enroll-ic",
            Action::Transfer { .. } => "transfer",
            Action::UpdateStage { .. } => "update-stage",
            Action::Assemble { .. } => "assemble",
            Action::Integrate { .. } => "integrate",
            Action::ReportDefect { .. } => "report-defect",
            Action::Remark { .. } => "remark",
            Action::TamperKey { .. } => "tamper-key",
        }
    }

    /// Arguments safe to print: labels and stages, never UIDs, markings
    /// or keys.
    pub fn summary(&self) -> String {
        let composed = |ics: &[String], kind: &str, target: &Option<String>, claim: &Option<String>, force: bool| {
            let mut s = format!("ics={}", ics.join(","));
            if let Some(t) = target {
                s += &format!(" {kind}={t}");
            }
            if let Some(c) = claim {
                s += &format!(" claim={c}");
            }
            if force {
                s += " force=yes";
            }
            s
        };
        match self {
            Action::EnrollIc { ic, .. } | Action::ReportDefect { ic } | Action::Remark { ic, .. } => {
                format!("ic={ic}")
            }
            Action::Transfer { ic, to } | Action::TamperKey { ic, to } => format!("ic={ic} to={to}"),
            Action::UpdateStage { ic, stage, status } => {
                format!("ic={ic} stage={} status={}", stage.code(), status.code())
            }
            Action::Assemble { ics, pcb, claim, force } => composed(ics, "pcb", pcb, claim, *force),
            Action::Integrate { ics, device, claim, force } => {
                composed(ics, "device", device, claim, *force)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub actor: String,
    pub action: Action,
    pub expect: Expectation,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Script {
    pub owners: Vec<OwnerDecl>,
    pub steps: Vec<Step>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((line, other)) => return Err(err(line, format!("expected header {HEADER:?}, found {other:?}"))),
            None => return Err(err(1, "empty script")),
        }

        let mut script = Script::default();
        let mut owners = BTreeSet::new();
        let mut ics = BTreeSet::new();
        let mut boards = BTreeSet::new();
        let mut devices = BTreeSet::new();
        for (line, text) in lines {
            let words = shlex::split(text).ok_or_else(|| err(line, "unbalanced quotes"))?;
            let (head, rest) = words.split_first().expect("non-empty line");
            if head == "owner" {
                let decl = parse_owner(line, rest)?;
                if !owners.insert(decl.label.clone()) {
                    return Err(err(line, format!("owner {} declared twice", decl.label)));
                }
                script.owners.push(decl);
                continue;
            }
            if !owners.contains(head) {
                return Err(err(line, format!("actor {head} is not declared")));
            }
            let (action, rest) = rest
                .split_first()
                .ok_or_else(|| err(line, "missing action"))?;
            let mut args = Args::new(line, rest)?;
            let expect = match args.take("expect") {
                None => Expectation::Accept,
                Some(v) if v == "accept" => Expectation::Accept,
                Some(v) => match v.strip_prefix("reject:") {
                    Some(class) if !class.is_empty() => Expectation::Reject(class.to_string()),
                    _ => return Err(err(line, format!("bad expectation {v:?}"))),
                },
            };
            let action = parse_action(&mut args, action)?;
            args.finish()?;

            let known_owner = |label: &String| {
                if owners.contains(label) {
                    Ok(())
                } else {
                    Err(err(line, format!("owner {label} is not declared")))
                }
            };
            let known = |set: &BTreeSet<String>, label: &String, what: &str| {
                if set.contains(label) {
                    Ok(())
                } else {
                    Err(err(line, format!("{what} {label} is not defined by an earlier step")))
                }
            };
            match &action {
                Action::EnrollIc { ic, .. } => {
                    ics.insert(ic.clone());
                }
                Action::Transfer { ic, to } | Action::TamperKey { ic, to } => {
                    known(&ics, ic, "IC")?;
                    known_owner(to)?;
                }
                Action::UpdateStage { ic, .. } | Action::ReportDefect { ic } | Action::Remark { ic, .. } => {
                    known(&ics, ic, "IC")?
                }
                Action::Assemble { ics: list, pcb, claim, .. } => {
                    list.iter().try_for_each(|ic| known(&ics, ic, "IC"))?;
                    if let Some(c) = claim {
                        known(&boards, c, "PCB")?;
                    }
                    boards.extend(pcb.clone());
                }
                Action::Integrate { ics: list, device, claim, .. } => {
                    list.iter().try_for_each(|ic| known(&ics, ic, "IC"))?;
                    if let Some(c) = claim {
                        known(&devices, c, "device")?;
                    }
                    devices.extend(device.clone());
                }
            }
            script.steps.push(Step {
                line,
                actor: head.clone(),
                action,
                expect,
            });
        }
        Ok(script)
    }
}

fn err(line: usize, message: impl Into<String>) -> ScriptError {
    ScriptError {
        line,
        message: message.into(),
    }
}

struct Args {
    line: usize,
    values: BTreeMap<String, String>,
}

impl Args {
    fn new(line: usize, words: &[String]) -> Result<Args, ScriptError> {
        let mut values = BTreeMap::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, found {word:?}")))?;
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(line, format!("argument {k} given twice")));
            }
        }
        Ok(Args { line, values })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn need(&mut self, key: &str) -> Result<String, ScriptError> {
        self.take(key)
            .ok_or_else(|| err(self.line, format!("missing argument {key}")))
    }

    fn flag(&mut self, key: &str) -> Result<bool, ScriptError> {
        match self.take(key).as_deref() {
            None | Some("no") => Ok(false),
            Some("yes") => Ok(true),
            Some(other) => Err(err(self.line, format!("{key} must be yes or no, found {other:?}"))),
        }
    }

    fn number(&mut self, key: &str) -> Result<u64, ScriptError> {
        let v = self.need(key)?;
        v.parse()
            .map_err(|_| err(self.line, format!("{key} must be a number, found {v:?}")))
    }

    fn finish(self) -> Result<(), ScriptError> {
        match self.values.keys().next() {
            None => Ok(()),
            Some(k) => Err(err(self.line, format!("unknown argument {k}"))),
        }
    }
}

fn parse_owner(line: usize, words: &[String]) -> Result<OwnerDecl, ScriptError> {
    let (label, rest) = words
        .split_first()
        .ok_or_else(|| err(line, "owner needs a label"))?;
    if label.contains('=') {
        return Err(err(line, "owner needs a label"));
    }
    let mut args = Args::new(line, rest)?;
    let role = args.need("role")?;
    let seed = args.number("seed")?;
    let enrolled = match args.take("enrolled").as_deref() {
        None | Some("yes") => true,
        Some("no") => false,
        Some(other) => return Err(err(line, format!("enrolled must be yes or no, found {other:?}"))),
    };
    args.finish()?;
    Ok(OwnerDecl {
        label: label.clone(),
        role,
        seed,
        enrolled,
    })
}

fn parse_action(args: &mut Args, action: &str) -> Result<Action, ScriptError> {
    let line = args.line;
    let list = |v: String| -> Vec<String> { v.split(',').map(str::to_string).collect() };
    Ok(match action {
        "enroll-ic" => Action::EnrollIc {
            ic: args.need("ic")?,
            uid: args.need("uid")?,
            markings: args.need("markings")?,
            key: match args.take("key") {
                None => None,
                Some(hex_key) => {
                    let mut key = [0u8; METERING_KEY_LEN];
                    hex::decode_to_slice(&hex_key, &mut key)
                        .map_err(|_| err(line, "key must be 64 hex digits"))?;
                    Some(key)
                }
            },
        },
        "transfer" => Action::Transfer {
            ic: args.need("ic")?,
            to: args.need("to")?,
        },
        "tamper-key" => Action::TamperKey {
            ic: args.need("ic")?,
            to: args.need("to")?,
        },
        "update-stage" => {
            let ic = args.need("ic")?;
            let stage = u8::try_from(args.number("stage")?)
                .ok()
                .and_then(|s| Stage::try_from(s).ok())
                .ok_or_else(|| err(line, "stage must be 1..=4"))?;
            let status = u8::try_from(args.number("status")?)
                .ok()
                .and_then(|s| Status::try_from(s).ok())
                .ok_or_else(|| err(line, "status must be 0 or 1"))?;
            Action::UpdateStage { ic, stage, status }
        }
        "assemble" | "integrate" => {
            let ics = list(args.need("ics")?);
            let target_key = if action == "assemble" { "pcb" } else { "device" };
            let target = args.take(target_key);
            let claim = args.take("claim");
            if target.is_some() == claim.is_some() {
                return Err(err(line, format!("give exactly one of {target_key}= and claim=")));
            }
            let force = args.flag("force")?;
            if action == "assemble" {
                Action::Assemble { ics, pcb: target, claim, force }
            } else {
                Action::Integrate { ics, device: target, claim, force }
            }
        }
        "report-defect" => Action::ReportDefect { ic: args.need("ic")? },
        "remark" => Action::Remark {
            ic: args.need("ic")?,
            markings: args.need("markings")?,
        },
        other => return Err(err(line, format!("unknown action {other:?}"))),
    })
}
