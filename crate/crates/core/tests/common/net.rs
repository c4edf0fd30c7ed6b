//! Seeded workloads for the simulated consortium and the property checks
//! applied after every round.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use ictoken::consensus::{Behavior, Network, NetworkConfig, TxStatus};
use ictoken::crypto::Digest;
use ictoken::token::{Stage, Status};
use ictoken::tracker::{verify_chain, Transaction};
use ictoken::wallet::{Owner, Wallet};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub const NODES: usize = 4;
pub const QUORUM: usize = 3;
/// Rounds from submission to commit, counting both.
pub const LATENCY_BOUND: u64 = 4;
pub const ROUNDS_PER_BEHAVIOR: usize = 100;
const RUNS: usize = 4;

#[derive(Debug)]
pub struct ConsensusStats {
    pub behavior: Behavior,
    pub rounds: usize,
    pub commits: usize,
    pub valid_submitted: usize,
    pub valid_committed: usize,
    pub invalid_submitted: usize,
    pub invalid_committed: Vec<String>,
    pub max_latency: u64,
    pub late: Vec<String>,
    pub divergences: Vec<String>,
    pub chain_faults: Vec<String>,
    pub elapsed: Duration,
}

impl ConsensusStats {
    pub fn clean(&self) -> bool {
        self.invalid_committed.is_empty()
            && self.late.is_empty()
            && self.divergences.is_empty()
            && self.chain_faults.is_empty()
            && self.max_latency <= LATENCY_BOUND
    }
}

/// Runs `ROUNDS_PER_BEHAVIOR` rounds split over four networks, putting
/// the faulty node at each index in turn.
pub fn consensus_campaign(behavior: Behavior, seed: u64) -> ConsensusStats {
    let start = Instant::now();
    let mut stats = ConsensusStats {
        behavior,
        rounds: 0,
        commits: 0,
        valid_submitted: 0,
        valid_committed: 0,
        invalid_submitted: 0,
        invalid_committed: Vec::new(),
        max_latency: 0,
        late: Vec::new(),
        divergences: Vec::new(),
        chain_faults: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for run in 0..RUNS {
        Workload::new(behavior, run, seed.wrapping_mul(31).wrapping_add(run as u64))
            .run(ROUNDS_PER_BEHAVIOR / RUNS, &mut stats);
    }
    stats.elapsed = start.elapsed();
    stats
}

struct Pending {
    round: u64,
    icid: Option<Digest>,
    what: String,
}

struct Workload {
    net: Network,
    rng: StdRng,
    wallets: Vec<Wallet>,
    outsider: Owner,
    /// Device UIDs of enrolled ICs, for clone attempts.
    uids: Vec<Vec<u8>>,
    next_uid: usize,
    valid: BTreeMap<Digest, Pending>,
    invalid: BTreeMap<Digest, String>,
    busy: BTreeSet<Digest>,
    run: usize,
}

impl Workload {
    fn new(behavior: Behavior, faulty: usize, seed: u64) -> Workload {
        let mut config = NetworkConfig::new(NODES);
        config.quorum = QUORUM;
        config.seed = seed;
        let mut net = Network::new(config);
        net.inject_byzantine(faulty, behavior);
        let wallets = (0..3)
            .map(|i| Wallet::new(Owner::create("member", Some(9300 + i))))
            .collect();
        Workload {
            net,
            rng: StdRng::seed_from_u64(seed),
            wallets,
            outsider: Owner::create("outsider", Some(9399)),
            uids: Vec::new(),
            next_uid: 0,
            valid: BTreeMap::new(),
            invalid: BTreeMap::new(),
            busy: BTreeSet::new(),
            run: faulty,
        }
    }

    fn run(mut self, rounds: usize, stats: &mut ConsensusStats) {
        for i in 0..self.wallets.len() {
            let profile = self.wallets[i].profile();
            self.submit_valid(Transaction::EnrollOwner(profile), None, "enroll owner".into(), stats);
        }
        for _ in 0..rounds {
            let enrolled = self
                .wallets
                .iter()
                .all(|w| self.net.reference().state().enrolled(&w.public_id()).is_some());
            if enrolled {
                for w in &mut self.wallets {
                    w.sync_assets(&self.net).unwrap();
                }
                for _ in 0..self.rng.gen_range(1..=3) {
                    self.act(stats);
                }
            }
            let trace = self.net.run_round();
            stats.rounds += 1;
            stats.commits += usize::from(trace.committed.is_some());
            self.check_round(stats);
        }
        let reference = self.net.reference();
        let report = verify_chain(reference.ledger());
        if !report.is_valid() {
            stats.chain_faults.push(format!("run {}: {report}", self.run));
        }
    }

    fn submit_valid(&mut self, tx: Transaction, icid: Option<Digest>, what: String, stats: &mut ConsensusStats) {
        let round = self.net.round();
        let id = self.net.submit(tx);
        if let Some(icid) = icid {
            self.busy.insert(icid);
        }
        self.valid.insert(id, Pending { round, icid, what });
        stats.valid_submitted += 1;
    }

    fn submit_invalid(&mut self, tx: Transaction, what: String, stats: &mut ConsensusStats) {
        let id = self.net.submit(tx);
        self.invalid.insert(id, what);
        stats.invalid_submitted += 1;
    }

    fn act(&mut self, stats: &mut ConsensusStats) {
        let roll = self.rng.gen_range(0..100);
        let w = self.rng.gen_range(0..self.wallets.len());
        let free: Vec<Digest> = self.wallets[w]
            .held()
            .iter()
            .filter(|(icid, t)| !self.busy.contains(icid) && !t.metadata.is_defective)
            .map(|(icid, _)| *icid)
            .collect();
        match roll {
            0..=39 => {
                let uid = format!("net-{}-{}", self.run, self.next_uid).into_bytes();
                self.next_uid += 1;
                let token = self.wallets[w]
                    .build_enrollment(&uid, "NET", &self.rng.gen())
                    .unwrap();
                self.uids.push(uid);
                let icid = token.icid();
                self.submit_valid(Transaction::EnrollIc(token), Some(icid), "enroll".into(), stats);
            }
            40..=64 => {
                let Some(icid) = free.choose(&mut self.rng).copied() else { return };
                let m = &self.wallets[w].held()[&icid].metadata;
                let (stage, status) = match (m.stage, m.status) {
                    (s, Status::InProgress) => (s, Status::Completed),
                    (Stage::EndUser, Status::Completed) => return,
                    (s, Status::Completed) => (
                        Stage::ALL[s as usize],
                        if self.rng.gen() { Status::Completed } else { Status::InProgress },
                    ),
                };
                let token = self.wallets[w].build_stage_update(&icid, stage, status).unwrap();
                self.submit_valid(Transaction::UpdateStage(token), Some(icid), "stage".into(), stats);
            }
            65..=79 => {
                let Some(icid) = free
                    .iter()
                    .copied()
                    .filter(|i| self.wallets[w].held()[i].metadata.status == Status::Completed)
                    .collect::<Vec<_>>()
                    .choose(&mut self.rng)
                    .copied()
                else {
                    return;
                };
                let to = self.wallets[(w + 1) % self.wallets.len()].profile();
                let token = self.wallets[w].build_transfer(&icid, &to).unwrap();
                self.submit_valid(Transaction::Transfer(token), Some(icid), "transfer".into(), stats);
            }
            _ => self.act_invalid(w, stats),
        }
    }

    /// Submissions no honest node may ever commit.
    fn act_invalid(&mut self, w: usize, stats: &mut ConsensusStats) {
        let held: Vec<Digest> = self.wallets[w].held().keys().copied().collect();
        match self.rng.gen_range(0..4) {
            0 => {
                let Some(uid) = self.uids.choose(&mut self.rng).cloned() else { return };
                let other = (w + 1) % self.wallets.len();
                let token = self.wallets[other].build_enrollment(&uid, "CLONE", &[9; 32]).unwrap();
                // A clone of an IC whose own enrollment is still pending
                // could win the race; only clone committed ICs.
                if self.net.reference().latest(&token.icid()).is_none() {
                    return;
                }
                self.submit_invalid(Transaction::EnrollIc(token), "clone".into(), stats);
            }
            1 => {
                let Some(icid) = held
                    .iter()
                    .copied()
                    .filter(|i| self.wallets[w].held()[i].metadata.stage > Stage::Fabrication)
                    .collect::<Vec<_>>()
                    .choose(&mut self.rng)
                    .copied()
                else {
                    return;
                };
                let token = self.wallets[w]
                    .build_stage_update(&icid, Stage::Fabrication, Status::Completed)
                    .unwrap();
                self.submit_invalid(Transaction::UpdateStage(token), "rollback".into(), stats);
            }
            2 => {
                let Some(icid) = held.choose(&mut self.rng).copied() else { return };
                let mut token = self.wallets[w].held()[&icid].clone();
                token.metadata.status = Status::Completed;
                let forger = &self.wallets[(w + 1) % self.wallets.len()];
                let token = forger.sign_token(token).unwrap();
                self.submit_invalid(Transaction::UpdateStage(token), "foreign signature".into(), stats);
            }
            _ => {
                let Some(icid) = held.choose(&mut self.rng).copied() else { return };
                let Ok(token) = self.wallets[w].build_transfer(&icid, &self.outsider.profile()) else {
                    return;
                };
                self.submit_invalid(Transaction::Transfer(token), "transfer to outsider".into(), stats);
            }
        }
    }

    fn check_round(&mut self, stats: &mut ConsensusStats) {
        let round = self.net.round();
        let honest: Vec<(usize, String)> = self
            .net
            .honest_nodes()
            .map(|(i, n)| (i, n.tracker.ledger().to_text()))
            .collect();
        if let Some(((first, text), rest)) = honest.split_first() {
            for (other, other_text) in rest {
                if other_text != text {
                    stats
                        .divergences
                        .push(format!("run {} round {}: node {first} and node {other} differ", self.run, round - 1));
                }
            }
        }
        for (id, what) in &self.invalid {
            if matches!(self.net.status(id), Some(TxStatus::Committed { .. })) {
                stats.invalid_committed.push(format!("run {}: {what}", self.run));
            }
        }
        self.invalid
            .retain(|id, _| !matches!(self.net.status(id), Some(TxStatus::Committed { .. })));

        let mut settled = Vec::new();
        for (id, p) in &self.valid {
            match self.net.status(id) {
                Some(TxStatus::Committed { round: at, .. }) => {
                    let latency = at - p.round + 1;
                    stats.max_latency = stats.max_latency.max(latency);
                    stats.valid_committed += 1;
                    if latency > LATENCY_BOUND {
                        stats.late.push(format!("run {}: {} took {latency} rounds", self.run, p.what));
                    }
                    settled.push(*id);
                }
                Some(TxStatus::Dropped(e)) => {
                    stats.late.push(format!("run {}: valid {} dropped: {e}", self.run, p.what));
                    settled.push(*id);
                }
                _ if round - p.round >= LATENCY_BOUND => {
                    stats.late.push(format!("run {}: {} pending after {LATENCY_BOUND} rounds", self.run, p.what));
                    settled.push(*id);
                }
                _ => {}
            }
        }
        for id in settled {
            if let Some(icid) = self.valid.remove(&id).and_then(|p| p.icid) {
                self.busy.remove(&icid);
            }
        }
    }
}
