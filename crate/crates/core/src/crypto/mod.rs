//! Hashing, merkle aggregation and the asymmetric scheme used for owner
//! signatures and metering-key encryption.
//!
//! Every fixed-size value here has a hard byte length: digests are 32 bytes,
//! signatures and ciphertexts are 256 bytes. Those sizes are part of the
//! token wire format and must not drift if the scheme is swapped.

mod bytes;
mod merkle;
mod scheme;

pub use bytes::{Ciphertext, Digest, Signature};
pub use merkle::{merkle_root, INTERNAL_PREFIX, LEAF_PREFIX};
pub use scheme::{
    change_enc_key, decrypt, encrypt, sign, verify, KeyPair, PrivateKey, PublicKey,
    MAX_PLAINTEXT_LEN, MODULUS_BITS,
};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 256;
pub const CIPHERTEXT_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("EmptyLeafSet: merkle root over zero leaves")]
    EmptyLeafSet,
    #[error("PlaintextTooLong: {len} bytes exceeds capacity of {MAX_PLAINTEXT_LEN}")]
    PlaintextTooLong { len: usize },
    #[error("DecryptionFailure")]
    DecryptionFailure,
    #[error("invalid key material: {0}")]
    InvalidKey(String),
}

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts`, without materializing it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}
