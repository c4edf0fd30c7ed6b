//! Ledger fixtures and single-byte corruption sweeps.

use std::time::{Duration, Instant};

use ictoken::token::{Stage, Status};
use ictoken::tracker::{verify_ledger_text, Tracker};
use ictoken::wallet::{CompositionTarget, Owner, Wallet};

/// Two owners and 54 committed tokens across several blocks.
pub fn fifty_token_ledger() -> Tracker {
    let mut a = Wallet::new(Owner::create("fab", Some(9201)));
    let b = Wallet::new(Owner::create("assembler", Some(9202)));
    let mut t = Tracker::new();
    t.enroll_owner(a.profile()).unwrap();
    t.enroll_owner(b.profile()).unwrap();
    let mut icids = Vec::new();
    for i in 0..12u8 {
        let token = a
            .build_enrollment(format!("chain-uid-{i}").as_bytes(), &format!("CH {i}"), &[i; 32])
            .unwrap();
        icids.push(token.icid());
        t.enroll_ic(token).unwrap();
    }
    a.sync_assets(&t).unwrap();
    for (stage, status) in [
        (Stage::Fabrication, Status::Completed),
        (Stage::PcbAssembly, Status::InProgress),
        (Stage::PcbAssembly, Status::Completed),
    ] {
        for icid in &icids {
            let token = a.build_stage_update(icid, stage, status).unwrap();
            t.update_stage(token).unwrap();
        }
        a.sync_assets(&t).unwrap();
    }
    t.update_pid_or_edid(a.build_composition_update(&icids[..4], CompositionTarget::Pcb).unwrap())
        .unwrap();
    a.sync_assets(&t).unwrap();
    for icid in &icids[4..6] {
        let token = a.build_transfer(icid, &b.profile()).unwrap();
        t.transfer_ic(token).unwrap();
    }
    t.flush();
    t
}

/// One owner and one IC in a single block.
pub fn small_ledger() -> Tracker {
    let mut a = Wallet::new(Owner::create("fab", Some(9203)));
    let mut t = Tracker::new();
    t.enroll_owner(a.profile()).unwrap();
    t.enroll_ic(a.build_enrollment(b"small-uid", "SM 1", &[3; 32]).unwrap())
        .unwrap();
    t.flush();
    t
}

#[derive(Debug, Default)]
pub struct SweepStats {
    pub positions: usize,
    pub corruptions: usize,
    /// (offset, replacement byte) pairs that verified clean.
    pub misses: Vec<(usize, u8)>,
    pub elapsed: Duration,
}

/// Substitutes every byte of `text` with each value `alternatives` yields
/// for it and runs the full chain check on the result.
pub fn sweep(text: &str, alternatives: impl Fn(u8) -> Vec<u8>) -> SweepStats {
    let start = Instant::now();
    let mut bytes = text.as_bytes().to_vec();
    let mut stats = SweepStats::default();
    for at in 0..bytes.len() {
        let original = bytes[at];
        stats.positions += 1;
        for replacement in alternatives(original) {
            debug_assert_ne!(replacement, original);
            bytes[at] = replacement;
            stats.corruptions += 1;
            // Non-UTF-8 files are rejected before any parsing.
            let detected = match std::str::from_utf8(&bytes) {
                Ok(corrupted) => !verify_ledger_text(corrupted).is_valid(),
                Err(_) => true,
            };
            if !detected {
                stats.misses.push((at, replacement));
            }
        }
        bytes[at] = original;
    }
    stats.elapsed = start.elapsed();
    stats
}

/// Every other byte value.
pub fn all_values(original: u8) -> Vec<u8> {
    (0..=255u8).filter(|&b| b != original).collect()
}
