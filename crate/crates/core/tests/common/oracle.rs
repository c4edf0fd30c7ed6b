//! Reference computations written against the byte-level definitions,
//! without going through the library's own helpers.

use ictoken::crypto::Digest;
use ictoken::token::IcToken;
use sha2::{Digest as _, Sha256};

fn sha(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Builds the tree level by level: sorted distinct leaves, `0x00` leaf
/// prefix, `0x01` node prefix, a lone last node carried up unchanged.
pub fn merkle_reference(leaves: &[Digest]) -> Option<Digest> {
    let mut set: Vec<[u8; 32]> = leaves.iter().map(|d| d.0).collect();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return None;
    }
    let mut levels: Vec<Vec<[u8; 32]>> = vec![set.iter().map(|d| sha(&[&[0x00], d])).collect()];
    while levels.last().unwrap().len() > 1 {
        let below = levels.last().unwrap();
        let mut above = Vec::with_capacity(below.len().div_ceil(2));
        for pair in below.chunks(2) {
            match pair {
                [l, r] => above.push(sha(&[&[0x01], l, r])),
                [lone] => above.push(*lone),
                _ => unreachable!(),
            }
        }
        levels.push(above);
    }
    Some(Digest(levels.pop().unwrap()[0]))
}

/// The first 458 bytes of the wire image, assembled field by field.
pub fn signing_payload(t: &IcToken) -> Vec<u8> {
    let m = &t.metadata;
    let absent = [0u8; 32];
    let mut out = Vec::with_capacity(458);
    out.extend_from_slice(&m.icid.0);
    out.extend_from_slice(m.pid.as_ref().map_or(&absent, |d| &d.0));
    out.extend_from_slice(m.edid.as_ref().map_or(&absent, |d| &d.0));
    out.extend_from_slice(&m.mark_hash.0);
    out.push(((m.stage as u8) << 5) | ((m.status as u8) << 4) | (u8::from(m.is_defective) << 3));
    out.extend_from_slice(&m.prev_ver.map_or(0, |s| s.get()).to_be_bytes());
    out.push(m.version);
    out.extend_from_slice(&t.key.key_encr.0);
    out.extend_from_slice(&t.key.key_hash.0);
    out.extend_from_slice(&t.owner.0 .0);
    assert_eq!(out.len(), 458);
    out
}

/// Structural rules every token must satisfy before any service check.
pub fn well_formed(t: &IcToken) -> bool {
    let m = &t.metadata;
    let zero = |d: &Digest| d.0 == [0u8; 32];
    (m.version == 0) == m.prev_ver.is_none()
        && !(m.edid.is_some() && m.pid.is_none())
        && !zero(&m.icid)
        && !m.pid.as_ref().is_some_and(zero)
        && !m.edid.as_ref().is_some_and(zero)
}

#[derive(Debug, Default)]
pub struct MerkleStats {
    pub sets: usize,
    pub mismatches: Vec<String>,
    pub permutation_failures: usize,
    pub substitution_failures: usize,
}

impl MerkleStats {
    pub fn clean(&self) -> bool {
        self.mismatches.is_empty() && self.permutation_failures == 0 && self.substitution_failures == 0
    }
}

/// Checks `compute_pid` and `compute_edid` against [`merkle_reference`]
/// on every non-empty subset of a 7-leaf universe and on 500 random sets
/// of 8 to 300 leaves, with permutation, duplication and substitution
/// checks on each.
pub fn merkle_campaign(seed: u64) -> MerkleStats {
    use ictoken::token::{compute_edid, compute_pid};
    use rand::rngs::StdRng;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(seed);
    let mut stats = MerkleStats::default();
    let check = |set: &[Digest], rng: &mut StdRng, stats: &mut MerkleStats| {
        stats.sets += 1;
        let expected = merkle_reference(set).unwrap();
        for (name, got) in [("pid", compute_pid(set)), ("edid", compute_edid(set))] {
            if got.as_ref().ok() != Some(&expected) {
                stats.mismatches.push(format!("{name} over {} leaves: {got:?}", set.len()));
            }
        }
        let mut shuffled = set.to_vec();
        shuffled.shuffle(rng);
        shuffled.push(*shuffled.choose(rng).unwrap());
        if compute_pid(&shuffled).ok() != Some(expected) {
            stats.permutation_failures += 1;
        }
        let positions: Vec<usize> = if set.len() <= 7 {
            (0..set.len()).collect()
        } else {
            vec![rng.gen_range(0..set.len())]
        };
        for at in positions {
            let mut changed = set.to_vec();
            changed[at] = Digest(rng.gen());
            if compute_pid(&changed).ok() == Some(expected) {
                stats.substitution_failures += 1;
            }
        }
    };

    let universe: Vec<Digest> = (0..7).map(|_| Digest(rng.gen())).collect();
    for mask in 1u32..(1 << universe.len()) {
        let set: Vec<Digest> = (0..universe.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| universe[i])
            .collect();
        check(&set, &mut rng, &mut stats);
    }
    for _ in 0..500 {
        let n = rng.gen_range(8..=300);
        let set: Vec<Digest> = (0..n).map(|_| Digest(rng.gen())).collect();
        check(&set, &mut rng, &mut stats);
    }
    stats
}
