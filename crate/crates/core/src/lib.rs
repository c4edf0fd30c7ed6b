//! Per-IC provenance tokens, owner wallets, a permissioned ledger and the
//! consensus network that replicates it.

pub mod consensus;
pub mod crypto;
pub mod harness;
pub mod token;
pub mod tracker;
pub mod wallet;

#[cfg(test)]
pub(crate) mod testkit;
