use crate::crypto::KeyPair;
use crate::wallet::Owner;

/// Deterministic keypair number `n`.
pub fn keys(n: u64) -> KeyPair {
    Owner::create("test", Some(n)).keys.clone()
}

pub fn owner(role: &str, seed: u64) -> Owner {
    Owner::create(role, Some(seed))
}
