use super::{hash_parts, CryptoError, Digest};

pub const LEAF_PREFIX: u8 = 0x00;
pub const INTERNAL_PREFIX: u8 = 0x01;

/// Root of a binary merkle tree over the *set* of `leaves`.
///
/// Leaves are sorted bytewise and deduplicated first, so the root depends
/// only on set membership. Leaf nodes are `H(0x00 ‖ d)`, internal nodes
/// `H(0x01 ‖ left ‖ right)`; a trailing odd node is promoted to the next
/// level unchanged.
pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, CryptoError> {
    let mut set = leaves.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(CryptoError::EmptyLeafSet);
    }

    let mut level: Vec<Digest> = set
        .iter()
        .map(|d| hash_parts(&[&[LEAF_PREFIX], &d.0]))
        .collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [left, right] => hash_parts(&[&[INTERNAL_PREFIX], &left.0, &right.0]),
                [odd] => *odd,
                _ => unreachable!("chunks(2) yields one or two items"),
            })
            .collect();
    }
    Ok(level[0])
}
