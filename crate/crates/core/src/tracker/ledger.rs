//! Hash-chained blocks and the line-delimited ledger file.
//!
//! Each line of the file is one block as compact JSON. Loading is strict:
//! every line must re-serialize to exactly the bytes read, so any edit to
//! the file either fails to parse or changes a hashed value.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{hash_parts, merkle_root, Digest};

use super::state::NodeState;
use super::{Service, Transaction, TrackerError};
use crate::token::IcToken;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub token_root: Digest,
    pub block_hash: Digest,
    pub entries: Vec<Transaction>,
}

impl Block {
    pub fn seal(index: u64, prev_hash: Digest, entries: Vec<Transaction>) -> Block {
        let token_root = Block::compute_root(&entries).expect("sealed entries are validated");
        Block {
            index,
            prev_hash,
            token_root,
            block_hash: Block::header_hash(index, &prev_hash, &token_root),
            entries,
        }
    }

    /// Merkle root over `H(position ‖ entry image)`. The position prefix
    /// binds entry order, which the set-semantics merkle root alone would
    /// not.
    pub fn compute_root(entries: &[Transaction]) -> Result<Digest, TrackerError> {
        let leaves = entries
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let position = u32::try_from(i).expect("block entry count fits u32");
                Ok(hash_parts(&[&position.to_be_bytes(), &entry.encode()?]))
            })
            .collect::<Result<Vec<_>, TrackerError>>()?;
        merkle_root(&leaves).map_err(|_| TrackerError::BatchInvalid("empty block"))
    }

    pub fn header_hash(index: u64, prev_hash: &Digest, token_root: &Digest) -> Digest {
        hash_parts(&[&index.to_be_bytes(), &prev_hash.0, &token_root.0])
    }

    pub fn weight(&self) -> usize {
        self.entries.iter().map(Transaction::weight).sum()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("blocks always serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainFault {
    Parse { line: usize, reason: String },
    NonCanonical { line: usize },
    MissingTrailingNewline,
    IndexMismatch { block: u64 },
    PrevHashMismatch { block: u64 },
    RootMismatch { block: u64 },
    HashMismatch { block: u64 },
    EmptyBlock { block: u64 },
    Overfull { block: u64, weight: usize, capacity: usize },
    Rejected { block: u64, entry: usize, error: TrackerError },
    StoredMismatch { block: u64, entry: usize },
}

impl fmt::Display for ChainFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainFault::Parse { line, reason } => write!(f, "line {line}: unparseable block: {reason}"),
            ChainFault::NonCanonical { line } => write!(f, "line {line}: non-canonical encoding"),
            ChainFault::MissingTrailingNewline => f.write_str("file does not end with a newline"),
            ChainFault::IndexMismatch { block } => write!(f, "block {block}: index out of sequence"),
            ChainFault::PrevHashMismatch { block } => write!(f, "block {block}: prev_hash does not link"),
            ChainFault::RootMismatch { block } => write!(f, "block {block}: token_root does not match entries"),
            ChainFault::HashMismatch { block } => write!(f, "block {block}: block_hash does not match header"),
            ChainFault::EmptyBlock { block } => write!(f, "block {block}: no entries"),
            ChainFault::Overfull { block, weight, capacity } => {
                write!(f, "block {block}: {weight} slots used, capacity is {capacity}")
            }
            ChainFault::Rejected { block, entry, error } => {
                write!(f, "block {block} entry {entry}: rejected on replay: {error}")
            }
            ChainFault::StoredMismatch { block, entry } => {
                write!(f, "block {block} entry {entry}: stored version links differ from replay")
            }
        }
    }
}

/// Outcome of [`verify_chain`]: empty `faults` means the chain is intact.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChainReport {
    pub blocks_checked: u64,
    pub tokens_checked: u64,
    pub faults: Vec<ChainFault>,
}

impl ChainReport {
    pub fn is_valid(&self) -> bool {
        self.faults.is_empty()
    }
}

impl fmt::Display for ChainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(
                f,
                "ledger ok: {} blocks, {} tokens verified",
                self.blocks_checked, self.tokens_checked
            );
        }
        writeln!(f, "ledger INVALID: {} fault(s)", self.faults.len())?;
        for fault in &self.faults {
            writeln!(f, "  {fault}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    blocks: Vec<Block>,
}

/// Committed chain replayed from genesis.
pub(crate) struct Replay {
    pub state: NodeState,
    pub log: Vec<(IcToken, Service)>,
}

impl Ledger {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn head_hash(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, |b| b.block_hash)
    }

    pub(crate) fn push(&mut self, block: Block) {
        debug_assert_eq!(block.index, self.height());
        debug_assert_eq!(block.prev_hash, self.head_hash());
        self.blocks.push(block);
    }

    /// Builds a ledger from blocks without checking them.
    pub fn from_blocks(blocks: Vec<Block>) -> Ledger {
        Ledger { blocks }
    }

    pub fn to_text(&self) -> String {
        self.blocks.iter().map(|b| b.to_line() + "\n").collect()
    }

    /// Parses the ledger file. Only syntax and canonical form are checked
    /// here; use [`verify_chain`] for the hash chain and signatures.
    pub fn from_text(text: &str) -> Result<Ledger, ChainFault> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(ChainFault::MissingTrailingNewline);
        }
        let blocks = text
            .split_terminator('\n')
            .enumerate()
            .map(|(i, line)| {
                let line_no = i + 1;
                let block: Block = serde_json::from_str(line).map_err(|e| ChainFault::Parse {
                    line: line_no,
                    reason: e.to_string(),
                })?;
                if block.to_line() != line {
                    return Err(ChainFault::NonCanonical { line: line_no });
                }
                Ok(block)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ledger { blocks })
    }

    pub(crate) fn header_faults(&self) -> Vec<ChainFault> {
        let mut faults = Vec::new();
        let mut prev = Digest::ZERO;
        for (i, block) in self.blocks.iter().enumerate() {
            let i = i as u64;
            if block.index != i {
                faults.push(ChainFault::IndexMismatch { block: i });
            }
            if block.prev_hash != prev {
                faults.push(ChainFault::PrevHashMismatch { block: i });
            }
            if block.entries.is_empty() {
                faults.push(ChainFault::EmptyBlock { block: i });
            } else if Block::compute_root(&block.entries).ok() != Some(block.token_root) {
                faults.push(ChainFault::RootMismatch { block: i });
            }
            if Block::header_hash(block.index, &block.prev_hash, &block.token_root) != block.block_hash {
                faults.push(ChainFault::HashMismatch { block: i });
            }
            prev = block.block_hash;
        }
        faults
    }

    /// Re-runs every entry through the service checks from an empty state.
    pub(crate) fn replay(&self) -> Result<Replay, ChainFault> {
        let mut replay = Replay {
            state: NodeState::default(),
            log: Vec::new(),
        };
        for block in &self.blocks {
            replay_entries(&mut replay, block.index, &block.entries)?;
        }
        Ok(replay)
    }
}

pub(crate) fn replay_entries(
    replay: &mut Replay,
    block: u64,
    entries: &[Transaction],
) -> Result<Vec<Transaction>, ChainFault> {
    let mut submitted = Vec::with_capacity(entries.len());
    for (entry, stored) in entries.iter().enumerate() {
        let tx = replay.state.submitted_form(stored);
        let rebuilt = replay
            .state
            .validate(&tx)
            .map_err(|error| ChainFault::Rejected { block, entry, error })?;
        if rebuilt != *stored {
            return Err(ChainFault::StoredMismatch { block, entry });
        }
        replay.state.apply(&rebuilt);
        let service = rebuilt.service();
        replay
            .log
            .extend(rebuilt.tokens().iter().map(|t| (t.clone(), service)));
        submitted.push(tx);
    }
    Ok(submitted)
}

/// Recomputes every header hash, token root and link, then replays all
/// entries from genesis, re-checking each token's signature and the
/// service rules it was committed under.
pub fn verify_chain(ledger: &Ledger) -> ChainReport {
    let mut report = ChainReport {
        blocks_checked: ledger.height(),
        tokens_checked: 0,
        faults: ledger.header_faults(),
    };
    if report.is_valid() {
        match ledger.replay() {
            Ok(replay) => report.tokens_checked = replay.log.len() as u64,
            Err(fault) => report.faults.push(fault),
        }
    }
    report
}

/// [`verify_chain`] over the ledger file text.
pub fn verify_ledger_text(text: &str) -> ChainReport {
    match Ledger::from_text(text) {
        Ok(ledger) => verify_chain(&ledger),
        Err(fault) => ChainReport {
            faults: vec![fault],
            ..ChainReport::default()
        },
    }
}
