//! Leader-based block agreement among a fixed set of tracker nodes.
//!
//! Each round one node (round-robin) proposes the next block from its pool.
//! Every node checks the block it received against its own state and
//! votes; a block hash that gathers `quorum` accept votes at any node is
//! certified, and every node commits a certified block that also passes its
//! own checks. With `n >= 3f + 1` and `quorum = ⌊2n/3⌋ + 1`, `f` faulty
//! nodes cannot certify a block no honest node accepted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::crypto::Digest;
use crate::token::{IcToken, PublicId};
use crate::tracker::{Block, Tracker, TrackerError, Transaction, DEFAULT_BLOCK_CAPACITY};
use crate::wallet::{Owner, PublicProfile, TrackerEndpoint, WalletError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub node_count: usize,
    pub quorum: usize,
    pub block_capacity: usize,
    pub seed: u64,
    /// Validate proposals on one thread per node.
    pub parallel: bool,
}

impl NetworkConfig {
    pub fn new(node_count: usize) -> NetworkConfig {
        NetworkConfig {
            node_count,
            quorum: default_quorum(node_count),
            block_capacity: DEFAULT_BLOCK_CAPACITY,
            seed: 0,
            parallel: false,
        }
    }

    /// Largest number of faulty nodes this configuration tolerates.
    pub fn fault_tolerance(&self) -> usize {
        self.node_count.saturating_sub(1) / 3
    }
}

pub fn default_quorum(node_count: usize) -> usize {
    2 * node_count / 3 + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Behavior {
    Honest,
    /// As leader, slips an invalid entry into the block; always votes accept.
    ProposeInvalid,
    /// Votes at random, independently for each recipient.
    VoteRandom,
    /// As leader, sends different blocks to different halves of the
    /// network; as voter, tells half the network accept and the rest reject.
    Equivocate,
}

impl Behavior {
    pub const BYZANTINE: [Behavior; 3] = [
        Behavior::ProposeInvalid,
        Behavior::VoteRandom,
        Behavior::Equivocate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::ProposeInvalid => "propose-invalid",
            Behavior::VoteRandom => "vote-random",
            Behavior::Equivocate => "equivocate",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Behavior::Honest]
            .into_iter()
            .chain(Behavior::BYZANTINE)
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown behavior {s:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub tracker: Tracker,
    pub behavior: Behavior,
    pool: Vec<Transaction>,
}

impl Node {
    pub fn pool(&self) -> &[Transaction] {
        &self.pool
    }
}

/// Where a submitted transaction stands, as seen by honest nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxStatus {
    Pending { since_round: u64 },
    Committed { block: u64, round: u64 },
    Dropped(TrackerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Vote {
    Accept,
    Reject,
}

/// What happened in one round, for logs and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundTrace {
    pub round: u64,
    pub leader: usize,
    /// Block hash each node received, if any.
    pub proposals: Vec<Option<Digest>>,
    /// `votes[voter][recipient]`.
    pub votes: Vec<Vec<Option<Vote>>>,
    pub certified: Vec<Digest>,
    /// Height and hash of the block honest nodes committed.
    pub committed: Option<(u64, Digest)>,
    pub committed_txs: usize,
    pub dropped: Vec<(Digest, &'static str)>,
}

impl fmt::Display for RoundTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round={} leader=n{}", self.round, self.leader)?;
        let proposals: BTreeSet<String> =
            self.proposals.iter().flatten().map(Digest::short).collect();
        let proposals: Vec<String> = proposals.into_iter().collect();
        write!(
            f,
            " proposals={}",
            if proposals.is_empty() { "-".to_string() } else { proposals.join(",") }
        )?;
        let votes: Vec<String> = self
            .votes
            .iter()
            .enumerate()
            .map(|(voter, row)| {
                let marks: String = row
                    .iter()
                    .map(|v| match v {
                        Some(Vote::Accept) => 'A',
                        Some(Vote::Reject) => 'R',
                        None => '-',
                    })
                    .collect();
                format!("n{voter}:{marks}")
            })
            .collect();
        write!(f, " votes={}", votes.join(","))?;
        match self.committed {
            Some((height, hash)) => write!(
                f,
                " commit=block{}:{} txs={}",
                height,
                hash.short(),
                self.committed_txs
            )?,
            None => f.write_str(" commit=none")?,
        }
        write!(f, " dropped={}", self.dropped.len())?;
        for (id, class) in &self.dropped {
            write!(f, " drop={}:{}", id.short(), class)?;
        }
        Ok(())
    }
}

/// Result of comparing honest nodes' ledger files byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainComparison {
    pub heights: Vec<(usize, u64)>,
    /// First block index at which two honest ledgers differ.
    pub first_divergence: Option<u64>,
}

impl ChainComparison {
    pub fn identical(&self) -> bool {
        self.first_divergence.is_none()
    }
}

pub struct Network {
    config: NetworkConfig,
    nodes: Vec<Node>,
    round: u64,
    rng: ChaCha20Rng,
    status: HashMap<Digest, TxStatus>,
    forger: Option<Owner>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Network {
        assert!(config.node_count > 0, "a network needs at least one node");
        assert!(
            (1..=config.node_count).contains(&config.quorum),
            "quorum must be between 1 and the node count"
        );
        let nodes = (0..config.node_count)
            .map(|_| Node {
                tracker: Tracker::with_capacity(config.block_capacity),
                behavior: Behavior::Honest,
                pool: Vec::new(),
            })
            .collect();
        Network {
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            config,
            nodes,
            round: 0,
            status: HashMap::new(),
            forger: None,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn inject_byzantine(&mut self, node: usize, behavior: Behavior) {
        self.nodes[node].behavior = behavior;
    }

    pub fn honest_nodes(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.behavior == Behavior::Honest)
    }

    /// The tracker of the lowest-numbered honest node.
    pub fn reference(&self) -> &Tracker {
        let (_, node) = self.honest_nodes().next().expect("at least one honest node");
        &node.tracker
    }

    /// Broadcasts `tx` to every node's pool and returns its identifier. A
    /// copy already pending is not pooled twice; a resubmission of a settled
    /// transaction is validated afresh.
    pub fn submit(&mut self, tx: Transaction) -> Digest {
        let id = tx.id();
        if matches!(self.status.get(&id), Some(TxStatus::Pending { .. })) {
            return id;
        }
        for node in &mut self.nodes {
            node.pool.push(tx.clone());
        }
        self.status.insert(id, TxStatus::Pending { since_round: self.round });
        id
    }

    pub fn status(&self, id: &Digest) -> Option<&TxStatus> {
        self.status.get(id)
    }

    pub fn has_pending(&self) -> bool {
        self.honest_nodes().any(|(_, n)| !n.pool.is_empty())
    }

    /// Runs rounds until honest pools are empty or `max_rounds` have run.
    pub fn run_until_settled(&mut self, max_rounds: usize) -> Vec<RoundTrace> {
        let mut traces = Vec::new();
        while self.has_pending() && traces.len() < max_rounds {
            traces.push(self.run_round());
        }
        traces
    }

    pub fn run_round(&mut self) -> RoundTrace {
        let n = self.nodes.len();
        let leader = (self.round % n as u64) as usize;
        let dropped = self.prune_pools();

        let honest_block = {
            let node = &self.nodes[leader];
            let prefix = capacity_prefix(&node.pool, self.config.block_capacity);
            let trial = node.tracker.trial(&node.pool[..prefix], usize::MAX);
            (!trial.stored.is_empty()).then(|| node.tracker.propose(trial.stored))
        };
        let proposals = self.proposals(leader, honest_block);
        let blocks: BTreeMap<Digest, Block> = proposals
            .iter()
            .flatten()
            .map(|b| (b.block_hash, b.clone()))
            .collect();
        let proposal_hashes: Vec<Option<Digest>> =
            proposals.iter().map(|p| p.as_ref().map(|b| b.block_hash)).collect();

        let verdicts = self.check_all(&proposals);
        let votes: Vec<Vec<Option<Vote>>> = (0..n)
            .map(|voter| self.cast_votes(voter, &proposals[voter], verdicts[voter]))
            .collect();

        // Accept votes per (recipient, block hash); a hash reaching quorum at
        // any recipient is certified and the certificate is forwarded to all.
        let mut certified = BTreeSet::new();
        for recipient in 0..n {
            let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
            for (voter, row) in votes.iter().enumerate() {
                if let (Some(Vote::Accept), Some(hash)) = (row[recipient], proposal_hashes[voter]) {
                    *tally.entry(hash).or_default() += 1;
                }
            }
            certified.extend(
                tally
                    .into_iter()
                    .filter(|(_, count)| *count >= self.config.quorum)
                    .map(|(hash, _)| hash),
            );
        }
        let candidates: Vec<&Block> = certified.iter().map(|h| &blocks[h]).collect();
        let (committed, committed_txs) = self.commit_certified(&candidates);

        let trace = RoundTrace {
            round: self.round,
            leader,
            proposals: proposal_hashes,
            votes,
            certified: certified.into_iter().collect(),
            committed,
            committed_txs,
            dropped,
        };
        self.round += 1;
        trace
    }

    /// Drops pool entries that fail validation; reports honest nodes' view.
    fn prune_pools(&mut self) -> Vec<(Digest, &'static str)> {
        let mut dropped = BTreeMap::new();
        for node in &mut self.nodes {
            let trial = node.tracker.trial(&node.pool, usize::MAX);
            if node.behavior == Behavior::Honest {
                for (tx, error) in &trial.rejected {
                    let id = tx.id();
                    dropped.insert(id, error.class());
                    self.status.insert(id, TxStatus::Dropped(error.clone()));
                }
            }
            node.pool = trial.accepted;
        }
        dropped.into_iter().collect()
    }

    fn proposals(&mut self, leader: usize, honest: Option<Block>) -> Vec<Option<Block>> {
        let n = self.nodes.len();
        match self.nodes[leader].behavior {
            Behavior::Honest | Behavior::VoteRandom => vec![honest; n],
            Behavior::ProposeInvalid => {
                let mut entries = honest.map(|b| b.entries).unwrap_or_default();
                entries.push(self.forged_entry(leader));
                vec![Some(self.nodes[leader].tracker.propose(entries)); n]
            }
            Behavior::Equivocate => {
                let Some(a) = honest else {
                    return vec![None; n];
                };
                let mut entries = a.entries.clone();
                if entries.len() > 1 {
                    entries.pop();
                } else {
                    entries = vec![self.forged_entry(leader)];
                }
                let b = self.nodes[leader].tracker.propose(entries);
                (0..n)
                    .map(|i| Some(if i % 2 == 0 { a.clone() } else { b.clone() }))
                    .collect()
            }
        }
    }

    /// An entry no honest node accepts: a second enrollment of an IC that
    /// already exists, or an owner profile whose publicID does not match.
    fn forged_entry(&mut self, leader: usize) -> Transaction {
        let tracker = &self.nodes[leader].tracker;
        let existing = tracker
            .state()
            .icdb
            .keys()
            .next()
            .and_then(|icid| tracker.trace_history(icid).first().map(|(_, t, _)| (*t).clone()));
        if let Some(token) = existing {
            return Transaction::EnrollIc(token);
        }
        let seed = self.config.seed;
        let forger = self
            .forger
            .get_or_insert_with(|| Owner::create("forger", Some(seed ^ 0xf0f0)));
        let mut profile = forger.profile();
        profile.public_id = PublicId(Digest([0xff; 32]));
        Transaction::EnrollOwner(profile)
    }

    fn check_all(&self, proposals: &[Option<Block>]) -> Vec<bool> {
        let check = |node: &Node, block: &Option<Block>| {
            block
                .as_ref()
                .is_some_and(|b| node.tracker.check_block(b).is_ok())
        };
        if self.config.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .nodes
                    .iter()
                    .zip(proposals)
                    .map(|(node, block)| scope.spawn(move || check(node, block)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("validation thread panicked"))
                    .collect()
            })
        } else {
            self.nodes.iter().zip(proposals).map(|(n, b)| check(n, b)).collect()
        }
    }

    fn cast_votes(&mut self, voter: usize, received: &Option<Block>, valid: bool) -> Vec<Option<Vote>> {
        let n = self.nodes.len();
        if received.is_none() {
            return vec![None; n];
        }
        let verdict = |ok: bool| Some(if ok { Vote::Accept } else { Vote::Reject });
        match self.nodes[voter].behavior {
            Behavior::Honest => vec![verdict(valid); n],
            Behavior::ProposeInvalid => vec![verdict(true); n],
            Behavior::VoteRandom => (0..n).map(|_| verdict(self.rng.next_u32() & 1 == 1)).collect(),
            Behavior::Equivocate => (0..n).map(|r| verdict(r % 2 == 0)).collect(),
        }
    }

    /// Every node commits the lowest-hash certified block that passes its
    /// own checks.
    fn commit_certified(&mut self, candidates: &[&Block]) -> (Option<(u64, Digest)>, usize) {
        let round = self.round;
        let mut outcome = (None, 0);
        let mut reported = false;
        for node in &mut self.nodes {
            let Some(block) = candidates
                .iter()
                .find(|b| node.tracker.check_block(b).is_ok())
            else {
                continue;
            };
            let index = block.index;
            let hash = block.block_hash;
            let submitted = node
                .tracker
                .commit_block((*block).clone())
                .expect("block passed its check");
            let ids: BTreeSet<Digest> = submitted.iter().map(Transaction::id).collect();
            node.pool.retain(|tx| !ids.contains(&tx.id()));
            if node.behavior == Behavior::Honest && !reported {
                reported = true;
                outcome = (Some((index, hash)), submitted.len());
                for id in ids {
                    self.status.insert(id, TxStatus::Committed { block: index, round });
                }
            }
        }
        outcome
    }

    pub fn compare_chains(&self) -> ChainComparison {
        let texts: Vec<(usize, &Tracker)> =
            self.honest_nodes().map(|(i, n)| (i, &n.tracker)).collect();
        let heights = texts.iter().map(|(i, t)| (*i, t.ledger().height())).collect();
        let mut first_divergence = None;
        if let Some(((_, first), rest)) = texts.split_first() {
            for (_, other) in rest {
                let a = first.ledger().blocks();
                let b = other.ledger().blocks();
                let diverge = (0..a.len().max(b.len()))
                    .find(|&i| a.get(i).map(Block::to_line) != b.get(i).map(Block::to_line));
                if let Some(i) = diverge {
                    let i = i as u64;
                    first_divergence = Some(first_divergence.map_or(i, |d: u64| d.min(i)));
                }
            }
        }
        ChainComparison {
            heights,
            first_divergence,
        }
    }
}

fn capacity_prefix(pool: &[Transaction], capacity: usize) -> usize {
    let mut used = 0;
    pool.iter()
        .take_while(|tx| {
            used += tx.weight();
            used <= capacity
        })
        .count()
}

impl TrackerEndpoint for Network {
    fn assets(&self, owner: &PublicId) -> Result<Vec<IcToken>, WalletError> {
        self.reference().assets(owner)
    }

    fn profile(&self, owner: &PublicId) -> Option<PublicProfile> {
        TrackerEndpoint::profile(self.reference(), owner)
    }
}
