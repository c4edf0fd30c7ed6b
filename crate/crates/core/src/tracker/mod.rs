//! The tracker: service checks, block sealing and the committed ledger
//! held by one consortium node.

mod error;
mod ledger;
mod state;
mod tx;

pub use error::TrackerError;
pub use ledger::{verify_chain, verify_ledger_text, Block, ChainFault, ChainReport, Ledger};
pub use state::{NodeState, OwnerEntry};
pub use tx::{Service, Transaction};

use crate::crypto::Digest;
use crate::token::{IcToken, PublicId, SeqIndex};
use crate::wallet::{PublicProfile, TrackerEndpoint, WalletError};

use ledger::{replay_entries, Replay};

pub const DEFAULT_BLOCK_CAPACITY: usize = 16;

/// Result of running a pool of submissions against a copy of the state.
#[derive(Clone, Debug, Default)]
pub struct Trial {
    /// Accepted submissions, in order.
    pub accepted: Vec<Transaction>,
    /// Stored forms of `accepted`, ready to seal.
    pub stored: Vec<Transaction>,
    /// Valid at this point but beyond the capacity limit.
    pub deferred: Vec<Transaction>,
    pub rejected: Vec<(Transaction, TrackerError)>,
}

/// A single node's view: the committed ledger plus not-yet-sealed entries.
///
/// Entries accepted by [`Tracker::submit`] get their sequence index at
/// once and are visible through [`Tracker::state`]; they reach the ledger
/// when the pending block fills up or on [`Tracker::flush`].
#[derive(Clone, Debug)]
pub struct Tracker {
    capacity: usize,
    state: NodeState,
    ledger: Ledger,
    log: Vec<(IcToken, Service)>,
    pending: Vec<Transaction>,
}

impl Default for Tracker {
    fn default() -> Self {
        Tracker::new()
    }
}

impl Tracker {
    pub fn new() -> Tracker {
        Tracker::with_capacity(DEFAULT_BLOCK_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Tracker {
        assert!(capacity > 0, "block capacity must be positive");
        Tracker {
            capacity,
            state: NodeState::default(),
            ledger: Ledger::default(),
            log: Vec::new(),
            pending: Vec::new(),
        }
    }

    /// Rebuilds a tracker by verifying and replaying `ledger`.
    pub fn from_ledger(ledger: Ledger, capacity: usize) -> Result<Tracker, ChainFault> {
        if let Some(fault) = ledger.header_faults().into_iter().next() {
            return Err(fault);
        }
        let Replay { state, log } = ledger.replay()?;
        Ok(Tracker {
            capacity,
            state,
            ledger,
            log,
            pending: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn latest(&self, icid: &Digest) -> Option<&IcToken> {
        self.state.latest(icid)
    }

    /// Validates and applies `tx`, returning the sequence indexes given to
    /// its tokens (empty for an owner enrollment).
    pub fn submit(&mut self, tx: &Transaction) -> Result<Vec<SeqIndex>, TrackerError> {
        let weight = tx.weight();
        if weight > self.capacity {
            return Err(TrackerError::BatchTooLarge);
        }
        let stored = self.state.validate(tx)?;
        if self.pending_weight() + weight > self.capacity {
            self.flush();
        }
        let first = self.state.committed_tokens();
        self.state.apply(&stored);
        let service = stored.service();
        self.log
            .extend(stored.tokens().iter().map(|t| (t.clone(), service)));
        self.pending.push(stored);
        Ok((first + 1..=self.state.committed_tokens())
            .map(|n| SeqIndex::new(n).expect("indexes start at one"))
            .collect())
    }

    pub fn enroll_owner(&mut self, profile: PublicProfile) -> Result<(), TrackerError> {
        self.submit(&Transaction::EnrollOwner(profile)).map(|_| ())
    }

    pub fn enroll_ic(&mut self, token: IcToken) -> Result<SeqIndex, TrackerError> {
        self.submit_one(Transaction::EnrollIc(token))
    }

    pub fn update_stage(&mut self, token: IcToken) -> Result<SeqIndex, TrackerError> {
        self.submit_one(Transaction::UpdateStage(token))
    }

    pub fn update_pid_or_edid(&mut self, batch: Vec<IcToken>) -> Result<Vec<SeqIndex>, TrackerError> {
        self.submit(&Transaction::UpdateComposition(batch))
    }

    pub fn transfer_ic(&mut self, token: IcToken) -> Result<SeqIndex, TrackerError> {
        self.submit_one(Transaction::Transfer(token))
    }

    pub fn report_defective(&mut self, token: IcToken) -> Result<SeqIndex, TrackerError> {
        self.submit_one(Transaction::ReportDefective(token))
    }

    fn submit_one(&mut self, tx: Transaction) -> Result<SeqIndex, TrackerError> {
        Ok(self.submit(&tx)?[0])
    }

    fn pending_weight(&self) -> usize {
        self.pending.iter().map(Transaction::weight).sum()
    }

    /// Seals pending entries into a block. Returns the new block, if any.
    pub fn flush(&mut self) -> Option<&Block> {
        if self.pending.is_empty() {
            return None;
        }
        let entries = std::mem::take(&mut self.pending);
        let block = Block::seal(self.ledger.height(), self.ledger.head_hash(), entries);
        self.ledger.push(block);
        self.ledger.blocks().last()
    }

    pub fn token_at(&self, seq: SeqIndex) -> Option<&IcToken> {
        self.log.get(seq.get() as usize - 1).map(|(t, _)| t)
    }

    pub fn service_at(&self, seq: SeqIndex) -> Option<Service> {
        self.log.get(seq.get() as usize - 1).map(|(_, s)| *s)
    }

    /// Every version of `icid`, oldest first, found by following prevVer
    /// links back from the latest.
    pub fn trace_history(&self, icid: &Digest) -> Vec<(SeqIndex, &IcToken, Service)> {
        let mut history = Vec::new();
        let mut cursor = self.state.icdb.get(icid).copied();
        while let Some(seq) = cursor {
            let Some((token, service)) = self.log.get(seq.get() as usize - 1) else {
                break;
            };
            history.push((seq, token, *service));
            cursor = token.metadata.prev_ver;
        }
        history.reverse();
        history
    }

    /// Checks `token`'s signature against `owner`'s registered key.
    pub fn verify_transaxn(&self, owner: &PublicId, token: &IcToken) -> Result<bool, TrackerError> {
        self.state.verify_transaxn(owner, token)
    }

    /// Re-checks the signature on the committed token at `seq`. The signer
    /// is the owner of the previous version (the sender, for a transfer),
    /// and the signed version fields are the ones that version carried.
    pub fn reverify(&self, seq: SeqIndex) -> Result<bool, TrackerError> {
        let token = self.token_at(seq).ok_or(TrackerError::UnknownIcid)?;
        let mut signed = token.clone();
        let mut signer = token.owner;
        if let Some(prev_seq) = token.metadata.prev_ver {
            let prev = self.token_at(prev_seq).ok_or(TrackerError::UnknownIcid)?;
            signed.metadata.version = prev.metadata.version;
            signed.metadata.prev_ver = prev.metadata.prev_ver;
            signer = prev.owner;
        }
        self.state.verify_transaxn(&signer, &signed)
    }

    /// Runs `pool` in order against a copy of the current state. Rejected
    /// entries do not affect later ones. At most `capacity` slots are
    /// accepted; valid entries past that are deferred.
    pub fn trial(&self, pool: &[Transaction], capacity: usize) -> Trial {
        let mut state = self.state.clone();
        let mut used = 0;
        let mut out = Trial::default();
        for tx in pool {
            let weight = tx.weight();
            if weight > capacity {
                out.rejected.push((tx.clone(), TrackerError::BatchTooLarge));
                continue;
            }
            match state.validate(tx) {
                Err(e) => out.rejected.push((tx.clone(), e)),
                Ok(_) if used + weight > capacity => out.deferred.push(tx.clone()),
                Ok(stored) => {
                    state.apply(&stored);
                    used += weight;
                    out.accepted.push(tx.clone());
                    out.stored.push(stored);
                }
            }
        }
        out
    }

    /// Seals stored entries as the next block without committing it.
    pub fn propose(&self, stored: Vec<Transaction>) -> Block {
        Block::seal(self.ledger.height(), self.ledger.head_hash(), stored)
    }

    /// Full check of a proposed next block. Returns the submitted forms of
    /// its entries.
    pub fn check_block(&self, block: &Block) -> Result<Vec<Transaction>, ChainFault> {
        self.replay_block(block).map(|(submitted, _)| submitted)
    }

    fn replay_block(&self, block: &Block) -> Result<(Vec<Transaction>, Replay), ChainFault> {
        let index = self.ledger.height();
        if !self.pending.is_empty() {
            return Err(ChainFault::IndexMismatch { block: block.index });
        }
        if block.index != index {
            return Err(ChainFault::IndexMismatch { block: block.index });
        }
        if block.prev_hash != self.ledger.head_hash() {
            return Err(ChainFault::PrevHashMismatch { block: index });
        }
        if block.entries.is_empty() {
            return Err(ChainFault::EmptyBlock { block: index });
        }
        let weight = block.weight();
        if weight > self.capacity {
            return Err(ChainFault::Overfull {
                block: index,
                weight,
                capacity: self.capacity,
            });
        }
        if Block::compute_root(&block.entries).ok() != Some(block.token_root) {
            return Err(ChainFault::RootMismatch { block: index });
        }
        if Block::header_hash(block.index, &block.prev_hash, &block.token_root) != block.block_hash {
            return Err(ChainFault::HashMismatch { block: index });
        }
        let mut replay = Replay {
            state: self.state.clone(),
            log: Vec::new(),
        };
        let submitted = replay_entries(&mut replay, index, &block.entries)?;
        Ok((submitted, replay))
    }

    /// Checks and appends `block`. Returns the submitted forms of its
    /// entries.
    pub fn commit_block(&mut self, block: Block) -> Result<Vec<Transaction>, ChainFault> {
        let (submitted, replay) = self.replay_block(&block)?;
        self.state = replay.state;
        self.log.extend(replay.log);
        self.ledger.push(block);
        Ok(submitted)
    }

    /// Node state recomputed from the ledger alone.
    pub fn rebuild_state(&self) -> Result<NodeState, ChainFault> {
        self.ledger.replay().map(|r| r.state)
    }
}

impl TrackerEndpoint for Tracker {
    fn assets(&self, owner: &PublicId) -> Result<Vec<IcToken>, WalletError> {
        Ok(self
            .state
            .enrolled(owner)
            .map(|entry| {
                entry
                    .assets
                    .iter()
                    .filter_map(|icid| self.state.latest(icid).cloned())
                    .collect()
            })
            .unwrap_or_default())
    }

    fn profile(&self, owner: &PublicId) -> Option<PublicProfile> {
        self.state.enrolled(owner).map(|e| e.profile.clone())
    }
}
