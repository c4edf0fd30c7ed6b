//! Runs a script against a single tracker or a simulated network and
//! checks the global invariants afterwards.

use std::collections::{BTreeMap, BTreeSet};

use crate::consensus::{Behavior, Network, NetworkConfig, TxStatus};
use crate::crypto::{hash, hash_parts, Digest};
use crate::token::{compute_edid, compute_pid, make_mark_hash, normalize_markings, IcToken, PublicId, SeqIndex};
use crate::tracker::{verify_ledger_text, Ledger, Service, Tracker, Transaction};
use crate::wallet::{CompositionTarget, Owner, TrackerEndpoint, Wallet, WalletError, METERING_KEY_LEN};

use super::audit::{allowed_fields, changed_fields};
use super::report::{IcReport, InvariantResult, ScenarioReport, StepReport};
use super::script::{Action, Expectation, Script};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Single { capacity: usize },
    Network {
        config: NetworkConfig,
        byzantine: Vec<(usize, Behavior)>,
    },
}

impl Mode {
    pub fn describe(&self) -> String {
        match self {
            Mode::Single { capacity } => format!("single tracker, block capacity {capacity}"),
            Mode::Network { config, byzantine } => {
                let mut s = format!(
                    "network n={} q={} block capacity {}",
                    config.node_count, config.quorum, config.block_capacity
                );
                for (node, behavior) in byzantine {
                    s += &format!(" n{node}={behavior}");
                }
                s
            }
        }
    }
}

/// Everything a run produced. `report` is a pure function of the script,
/// seed and mode; so is `ledger_text`.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub report_text: String,
    pub report_json: String,
    pub ledger_text: String,
    pub round_log: Vec<String>,
    /// The lowest-numbered honest node's tracker.
    pub tracker: Tracker,
    pub owner_names: BTreeMap<PublicId, String>,
    pub ic_labels: BTreeMap<String, Digest>,
    pub wallets: BTreeMap<String, Wallet>,
    /// UIDs, marking strings and metering keys used in the run.
    pub secrets: Vec<Vec<u8>>,
    pub metering_keys: BTreeMap<Digest, [u8; METERING_KEY_LEN]>,
}

enum Engine {
    Single(Tracker),
    Net { net: Box<Network>, log: Vec<String> },
}

impl Engine {
    fn new(mode: &Mode) -> Engine {
        match mode {
            Mode::Single { capacity } => Engine::Single(Tracker::with_capacity(*capacity)),
            Mode::Network { config, byzantine } => {
                let mut net = Network::new(config.clone());
                for (node, behavior) in byzantine {
                    net.inject_byzantine(*node, *behavior);
                }
                Engine::Net { net: Box::new(net), log: Vec::new() }
            }
        }
    }

    fn endpoint(&self) -> &dyn TrackerEndpoint {
        match self {
            Engine::Single(t) => t,
            Engine::Net { net, .. } => net.as_ref(),
        }
    }

    fn reference(&self) -> &Tracker {
        match self {
            Engine::Single(t) => t,
            Engine::Net { net, .. } => net.reference(),
        }
    }

    fn execute(&mut self, tx: Transaction) -> Result<(), String> {
        match self {
            Engine::Single(t) => t.submit(&tx).map(|_| ()).map_err(|e| e.class().to_string()),
            Engine::Net { net, log } => {
                let id = net.submit(tx);
                let limit = 2 * net.config().node_count + 2;
                for _ in 0..limit {
                    log.push(net.run_round().to_string());
                    match net.status(&id) {
                        Some(TxStatus::Committed { .. }) => return Ok(()),
                        Some(TxStatus::Dropped(e)) => return Err(e.class().to_string()),
                        _ => {}
                    }
                }
                Err("NotCommitted".to_string())
            }
        }
    }

    fn execute_all(&mut self, txs: Vec<Transaction>) -> Vec<Result<(), String>> {
        match self {
            Engine::Single(_) => txs.into_iter().map(|tx| self.execute(tx)).collect(),
            Engine::Net { net, log } => {
                let ids: Vec<Digest> = txs.into_iter().map(|tx| net.submit(tx)).collect();
                log.extend(
                    net.run_until_settled(2 * net.config().node_count + 2)
                        .iter()
                        .map(ToString::to_string),
                );
                ids.iter()
                    .map(|id| match net.status(id) {
                        Some(TxStatus::Committed { .. }) => Ok(()),
                        Some(TxStatus::Dropped(e)) => Err(e.class().to_string()),
                        _ => Err("NotCommitted".to_string()),
                    })
                    .collect()
            }
        }
    }

    fn finish(&mut self) {
        match self {
            Engine::Single(t) => {
                t.flush();
            }
            Engine::Net { net, log } => {
                let traces = net.run_until_settled(2 * net.config().node_count + 2);
                log.extend(traces.iter().map(ToString::to_string));
            }
        }
    }
}

struct IcRecord {
    icid: Digest,
}

struct Runner {
    seed: u64,
    engine: Engine,
    owners: BTreeMap<String, Owner>,
    wallets: BTreeMap<String, Wallet>,
    ics: BTreeMap<String, IcRecord>,
    boards: BTreeMap<String, Digest>,
    devices: BTreeMap<String, Digest>,
    secrets: Vec<Vec<u8>>,
    keys: BTreeMap<Digest, [u8; METERING_KEY_LEN]>,
}

/// Seed for an owner's keypair, derived from the run seed, the owner's
/// label and its declared seed.
pub fn owner_key_seed(run_seed: u64, label: &str, declared: u64) -> u64 {
    let d = hash_parts(&[b"owner", &run_seed.to_be_bytes(), label.as_bytes(), &declared.to_be_bytes()]);
    u64::from_be_bytes(d.0[..8].try_into().expect("8 bytes"))
}

/// Metering key used when a script does not give one.
pub fn default_metering_key(run_seed: u64, ic_label: &str) -> [u8; METERING_KEY_LEN] {
    hash_parts(&[b"metering", &run_seed.to_be_bytes(), ic_label.as_bytes()]).0
}

impl Runner {
    fn wallet(&mut self, actor: &str) -> &mut Wallet {
        let wallet = self.wallets.get_mut(actor).expect("parser checks actors");
        // Endpoint errors leave the previous view; the tracker judges anyway.
        let _ = wallet.sync_assets(self.engine.endpoint());
        wallet
    }

    fn icid(&self, label: &str) -> Digest {
        self.ics[label].icid
    }

    fn build(&mut self, actor: &str, action: &Action) -> Result<Transaction, WalletError> {
        let seed = self.seed;
        match action {
            Action::EnrollIc { ic, uid, markings, key } => {
                let key = key.unwrap_or_else(|| default_metering_key(seed, ic));
                self.secrets.push(uid.as_bytes().to_vec());
                self.secrets.push(markings.as_bytes().to_vec());
                self.secrets.push(normalize_markings(markings).into_bytes());
                self.secrets.push(key.to_vec());
                let token = self.wallet(actor).build_enrollment(uid.as_bytes(), markings, &key)?;
                let icid = token.icid();
                self.keys.entry(icid).or_insert(key);
                self.ics.entry(ic.clone()).or_insert(IcRecord { icid });
                Ok(Transaction::EnrollIc(token))
            }
            Action::Transfer { ic, to } => {
                let icid = self.icid(ic);
                let profile = self.owners[to].profile();
                Ok(Transaction::Transfer(self.wallet(actor).build_transfer(&icid, &profile)?))
            }
            Action::TamperKey { ic, to } => {
                let icid = self.icid(ic);
                let profile = self.owners[to].profile();
                let wallet = self.wallet(actor);
                let mut token = wallet.build_transfer(&icid, &profile)?;
                token.key.key_hash = hash(&token.key.key_hash.0);
                Ok(Transaction::Transfer(wallet.sign_token(token)?))
            }
            Action::UpdateStage { ic, stage, status } => {
                let icid = self.icid(ic);
                let token = self.wallet(actor).build_stage_update(&icid, *stage, *status)?;
                Ok(Transaction::UpdateStage(token))
            }
            Action::Remark { ic, markings } => {
                self.secrets.push(markings.as_bytes().to_vec());
                self.secrets.push(normalize_markings(markings).into_bytes());
                let icid = self.icid(ic);
                let wallet = self.wallet(actor);
                let mut token = wallet.token(&icid)?.clone();
                token.metadata.mark_hash = make_mark_hash(markings);
                Ok(Transaction::UpdateStage(wallet.sign_token(token)?))
            }
            Action::ReportDefect { ic } => {
                let icid = self.icid(ic);
                Ok(Transaction::ReportDefective(self.wallet(actor).build_defect_report(&icid)?))
            }
            Action::Assemble { ics, claim, force, .. } => {
                let icids: Vec<Digest> = ics.iter().map(|l| self.icid(l)).collect();
                let claimed = claim.as_ref().map(|c| self.boards[c]);
                let wallet = self.wallet(actor);
                let batch = match (claimed, force) {
                    (Some(pid), _) => wallet.build_composition_claiming(&icids, CompositionTarget::Pcb, pid)?,
                    (None, true) => {
                        let pid = compute_pid(&icids)?;
                        wallet.build_composition_claiming(&icids, CompositionTarget::Pcb, pid)?
                    }
                    (None, false) => wallet.build_composition_update(&icids, CompositionTarget::Pcb)?,
                };
                Ok(Transaction::UpdateComposition(batch))
            }
            Action::Integrate { ics, claim, force, .. } => {
                let icids: Vec<Digest> = ics.iter().map(|l| self.icid(l)).collect();
                let claimed = claim.as_ref().map(|c| self.devices[c]);
                let wallet = self.wallet(actor);
                let batch = match (claimed, force) {
                    (Some(edid), _) => {
                        wallet.build_composition_claiming(&icids, CompositionTarget::Device, edid)?
                    }
                    (None, true) => {
                        let pids: BTreeSet<Digest> = icids
                            .iter()
                            .map(|icid| wallet.token(icid).map(|t| t.metadata.pid))
                            .collect::<Result<Vec<_>, _>>()?
                            .into_iter()
                            .flatten()
                            .collect();
                        let edid = compute_edid(&pids.into_iter().collect::<Vec<_>>())?;
                        wallet.build_composition_claiming(&icids, CompositionTarget::Device, edid)?
                    }
                    (None, false) => {
                        wallet.build_composition_update(&icids, CompositionTarget::Device)?
                    }
                };
                Ok(Transaction::UpdateComposition(batch))
            }
        }
    }

    fn record_composition(&mut self, action: &Action, tx: &Transaction) {
        let first = tx.tokens().first().map(|t| &t.metadata);
        match action {
            Action::Assemble { pcb: Some(label), .. } => {
                if let Some(pid) = first.and_then(|m| m.pid) {
                    self.boards.insert(label.clone(), pid);
                }
            }
            Action::Integrate { device: Some(label), .. } => {
                if let Some(edid) = first.and_then(|m| m.edid) {
                    self.devices.insert(label.clone(), edid);
                }
            }
            _ => {}
        }
    }
}

/// Executes `script` and returns its report and artefacts.
pub fn run_script(name: &str, script: &Script, seed: u64, mode: &Mode) -> ScenarioRun {
    let owners: BTreeMap<String, Owner> = script
        .owners
        .iter()
        .map(|d| {
            let owner = Owner::create(&d.role, Some(owner_key_seed(seed, &d.label, d.seed)));
            (d.label.clone(), owner)
        })
        .collect();
    let mut runner = Runner {
        seed,
        engine: Engine::new(mode),
        wallets: owners
            .iter()
            .map(|(label, o)| (label.clone(), Wallet::new(o.clone())))
            .collect(),
        owners,
        ics: BTreeMap::new(),
        boards: BTreeMap::new(),
        devices: BTreeMap::new(),
        secrets: Vec::new(),
        keys: BTreeMap::new(),
    };

    let enrollments: Vec<Transaction> = script
        .owners
        .iter()
        .filter(|d| d.enrolled)
        .map(|d| Transaction::EnrollOwner(runner.owners[&d.label].profile()))
        .collect();
    let setup_failures: Vec<String> = runner
        .engine
        .execute_all(enrollments)
        .into_iter()
        .zip(script.owners.iter().filter(|d| d.enrolled))
        .filter_map(|(r, d)| r.err().map(|class| format!("owner {} not enrolled: {class}", d.label)))
        .collect();

    let mut steps = Vec::new();
    for (i, step) in script.steps.iter().enumerate() {
        let outcome = runner
            .build(&step.actor, &step.action)
            .map_err(|e| e.class().to_string())
            .and_then(|tx| {
                runner.engine.execute(tx.clone())?;
                Ok(tx)
            });
        let (outcome_text, seq) = match &outcome {
            Ok(tx) => {
                runner.record_composition(&step.action, tx);
                let icdb = &runner.engine.reference().state().icdb;
                let seq = tx.tokens().iter().filter_map(|t| icdb.get(&t.icid())).map(|s| s.get()).collect();
                ("accepted".to_string(), seq)
            }
            Err(class) => (format!("rejected:{class}"), Vec::new()),
        };
        let expected = match &step.expect {
            Expectation::Accept => "accepted".to_string(),
            Expectation::Reject(class) => format!("rejected:{class}"),
        };
        steps.push(StepReport {
            step: i + 1,
            line: step.line,
            actor: step.actor.clone(),
            action: step.action.name(),
            args: step.action.summary(),
            matched: expected == outcome_text,
            expected,
            outcome: outcome_text,
            seq,
        });
    }
    runner.engine.finish();

    for wallet in runner.wallets.values_mut() {
        let _ = wallet.sync_assets(runner.engine.endpoint());
    }
    let tracker = runner.engine.reference().clone();
    let ledger_text = tracker.ledger().to_text();
    let owner_names: BTreeMap<PublicId, String> = runner
        .owners
        .iter()
        .map(|(label, o)| (o.public_id, format!("{label}({})", o.role)))
        .collect();

    let mut invariants = vec![InvariantResult::check(
        "setup",
        setup_failures,
        format!("{} owners enrolled", script.owners.iter().filter(|d| d.enrolled).count()),
    )];
    invariants.extend(check_invariants(&tracker, &ledger_text, &runner));

    let state = tracker.state();
    let name_of = |id: &PublicId| owner_names.get(id).cloned().unwrap_or_else(|| id.0.short());
    let ics = runner
        .ics
        .iter()
        .filter_map(|(label, rec)| {
            let t = state.latest(&rec.icid)?;
            let m = &t.metadata;
            Some(IcReport {
                label: label.clone(),
                icid: rec.icid.to_hex(),
                row: m.version as usize + 1,
                version: m.version,
                stage: m.stage.code(),
                status: m.status.code(),
                defective: m.is_defective,
                owner: name_of(&t.owner),
                pid: m.pid.map(|d| d.to_hex()),
                edid: m.edid.map(|d| d.to_hex()),
            })
        })
        .collect();

    let mut report = ScenarioReport {
        scenario: name.to_string(),
        seed,
        backend: mode.describe(),
        steps,
        chain_height: tracker.ledger().height(),
        committed_tokens: state.committed_tokens(),
        ics,
        invariants,
        attack: None,
    };
    let round_log = match &runner.engine {
        Engine::Single(_) => Vec::new(),
        Engine::Net { log, .. } => log.clone(),
    };
    if let Engine::Net { net, .. } = &runner.engine {
        report.invariants.push(check_network(net));
    }
    // The privacy scan covers the rendered report itself, so it is rendered
    // once without the result, scanned, then rendered again.
    let draft = format!("{report}{}", report.to_json());
    let privacy = scan_for_secrets(
        &runner.secrets,
        &[
            ("ledger", ledger_text.as_bytes()),
            ("report", draft.as_bytes()),
            ("round log", round_log.join("\n").as_bytes()),
        ],
    );
    report.invariants.push(privacy);

    ScenarioRun {
        report_text: report.to_string(),
        report_json: report.to_json(),
        report,
        ledger_text,
        round_log,
        tracker,
        owner_names,
        ic_labels: runner.ics.iter().map(|(l, r)| (l.clone(), r.icid)).collect(),
        wallets: runner.wallets,
        secrets: runner.secrets,
        metering_keys: runner.keys,
    }
}

/// Needles searched for in emitted artefacts: each secret as raw bytes and
/// as lowercase and uppercase hex.
pub fn secret_needles(secrets: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut needles = BTreeSet::new();
    for s in secrets.iter().filter(|s| !s.is_empty()) {
        needles.insert(s.clone());
        needles.insert(hex::encode(s).into_bytes());
        needles.insert(hex::encode_upper(s).into_bytes());
    }
    needles.into_iter().collect()
}

pub fn scan_for_secrets(secrets: &[Vec<u8>], artefacts: &[(&str, &[u8])]) -> InvariantResult {
    let needles = secret_needles(secrets);
    let mut failures = Vec::new();
    for (name, bytes) in artefacts {
        for (i, needle) in needles.iter().enumerate() {
            if bytes.windows(needle.len()).any(|w| w == needle.as_slice()) {
                failures.push(format!("{name} contains secret #{i}"));
            }
        }
    }
    InvariantResult::check(
        "privacy",
        failures,
        format!("{} needles absent from {} artefacts", needles.len(), artefacts.len()),
    )
}

fn check_invariants(tracker: &Tracker, ledger_text: &str, runner: &Runner) -> Vec<InvariantResult> {
    let state = tracker.state();
    let icids: Vec<Digest> = state.icdb.keys().copied().collect();
    let mut out = Vec::new();

    let mut failures = Vec::new();
    match Ledger::from_text(ledger_text).map(|l| Tracker::from_ledger(l, tracker.capacity())) {
        Ok(Ok(rebuilt)) if rebuilt.state() == state => {}
        Ok(Ok(_)) => failures.push("rebuilt state differs from live state".to_string()),
        Ok(Err(fault)) | Err(fault) => failures.push(format!("rebuild failed: {fault}")),
    }
    out.push(InvariantResult::check(
        "rebuild",
        failures,
        "state rebuilt from genesis equals live state".to_string(),
    ));

    let report = verify_ledger_text(ledger_text);
    let mut failures: Vec<String> = report.faults.iter().map(ToString::to_string).collect();
    if report.is_valid() && report.tokens_checked != state.committed_tokens() {
        failures.push("token count differs from state".to_string());
    }
    out.push(InvariantResult::check("chain", failures, report.to_string()));

    let mut version_failures = Vec::new();
    let mut monotone_failures = Vec::new();
    let mut diff_failures = Vec::new();
    let mut composition_failures = Vec::new();
    let mut versions = 0;
    for icid in &icids {
        let history = tracker.trace_history(icid);
        versions += history.len();
        let label = icid.short();
        if history.first().map(|(_, _, s)| *s) != Some(Service::EnrollIc) {
            version_failures.push(format!("{label}: history does not start at enrollment"));
        }
        if history.last().map(|(s, _, _)| *s) != state.icdb.get(icid).copied() {
            version_failures.push(format!("{label}: latest is not the ICdb entry"));
        }
        for (i, (_, t, _)) in history.iter().enumerate() {
            if t.metadata.version as usize != i {
                version_failures.push(format!("{label}: version {} at position {i}", t.metadata.version));
            }
        }
        for pair in history.windows(2) {
            let ((prev_seq, prev, _), (_, next, service)) = (&pair[0], &pair[1]);
            if next.metadata.prev_ver != Some(*prev_seq) {
                version_failures.push(format!("{label}: broken prevVer link"));
            }
            let (a, b) = (&prev.metadata, &next.metadata);
            if b.stage < a.stage || (b.status < a.status && b.stage == a.stage) {
                monotone_failures.push(format!("{label}: v{} goes backwards", b.version));
            }
            if a.is_defective && !b.is_defective {
                monotone_failures.push(format!("{label}: defect flag cleared"));
            }
            if (a.pid.is_some() && a.pid != b.pid) || (a.edid.is_some() && a.edid != b.edid) {
                composition_failures.push(format!("{label}: identifier rewritten at v{}", b.version));
            }
            let allowed = allowed_fields(*service);
            for field in changed_fields(prev, next) {
                if !allowed.contains(&field) {
                    diff_failures.push(format!("{label}: {service} changed {field}"));
                }
            }
        }
    }
    for (pid, members) in &state.pcbdb {
        let carrying: Vec<Digest> = state
            .latest_tokens()
            .filter(|t| t.metadata.pid == Some(*pid))
            .map(IcToken::icid)
            .collect();
        if &carrying != members {
            composition_failures.push(format!("PCBdb entry {} disagrees with tokens", pid.short()));
        }
    }
    for (edid, pids) in &state.devdb {
        let carrying: BTreeSet<Digest> = state
            .latest_tokens()
            .filter(|t| t.metadata.edid == Some(*edid))
            .filter_map(|t| t.metadata.pid)
            .collect();
        if carrying.into_iter().collect::<Vec<_>>() != *pids {
            composition_failures.push(format!("DEVdb entry {} disagrees with tokens", edid.short()));
        }
    }
    out.push(InvariantResult::check(
        "versions",
        version_failures,
        format!("{versions} versions over {} ICs form unbroken chains", icids.len()),
    ));
    out.push(InvariantResult::check(
        "monotone",
        monotone_failures,
        "stage, status and defect flag never roll back".to_string(),
    ));
    out.push(InvariantResult::check(
        "composition",
        composition_failures,
        format!(
            "{} PCB and {} device identifiers immutable and consistent",
            state.pcbdb.len(),
            state.devdb.len()
        ),
    ));
    out.push(InvariantResult::check(
        "field-diffs",
        diff_failures,
        "adjacent versions differ only in fields their service allows".to_string(),
    ));

    let mut failures = Vec::new();
    for n in 1..=state.committed_tokens() {
        let seq = SeqIndex::new(n).expect("n >= 1");
        if !tracker.reverify(seq).unwrap_or(false) {
            failures.push(format!("seq {n} signature fails"));
        }
    }
    out.push(InvariantResult::check(
        "signatures",
        failures,
        format!("{} signatures re-verified", state.committed_tokens()),
    ));

    let mut failures = Vec::new();
    for icid in &icids {
        let owner = state.latest(icid).expect("icdb entry").owner;
        let holders = state.owndb.values().filter(|e| e.assets.contains(icid)).count();
        let listed_by_owner = state.owndb.get(&owner).is_some_and(|e| e.assets.contains(icid));
        if holders != 1 || !listed_by_owner {
            failures.push(format!("{}: listed by {holders} owners", icid.short()));
        }
        let wallets: Vec<(&String, &Wallet)> = runner
            .wallets
            .iter()
            .filter(|(_, w)| w.held().contains_key(icid))
            .collect();
        match wallets.as_slice() {
            [(label, w)] if w.public_id() == owner => {
                let key = w.metering_key(icid);
                let expected = runner.keys.get(icid);
                if key.as_deref().ok() != expected.map(|k| k.as_slice()) {
                    failures.push(format!("{}: {label} cannot recover the metering key", icid.short()));
                }
            }
            other => failures.push(format!("{}: held by {} wallets", icid.short(), other.len())),
        }
    }
    out.push(InvariantResult::check(
        "custody",
        failures,
        format!("each of {} ICs held by exactly its owner, key decrypts to keyHash", icids.len()),
    ));
    out
}

fn check_network(net: &Network) -> InvariantResult {
    let mut failures = Vec::new();
    let comparison = net.compare_chains();
    if let Some(i) = comparison.first_divergence {
        failures.push(format!("honest ledgers diverge at block {i}"));
    }
    for (i, node) in net.honest_nodes() {
        match node.tracker.rebuild_state() {
            Ok(state) if &state == node.tracker.state() => {}
            _ => failures.push(format!("n{i}: rebuilt state differs")),
        }
    }
    InvariantResult::check(
        "replicas",
        failures,
        format!(
            "{} honest ledgers identical at height {}",
            comparison.heights.len(),
            comparison.heights.first().map_or(0, |h| h.1)
        ),
    )
}
