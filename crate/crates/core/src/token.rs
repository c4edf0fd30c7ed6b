//! The ICtoken record and its canonical 714-byte image.
//!
//! ```text
//! offset  size  field
//!      0    32  ICID
//!     32    32  PID        (zero = absent)
//!     64    32  EDID       (zero = absent)
//!     96    32  markHash
//!    128     1  flags      stage:3 | status:1 | isDefective:1 | pad:3 (MSB first)
//!    129     8  prevVer    big-endian, zero = absent
//!    137     1  version
//!    138   256  keyEncr
//!    394    32  keyHash
//!    426    32  owner publicID
//!    458   256  trnsaxnID  (signature over bytes 0..458)
//! ```

use std::fmt;
use std::num::NonZeroU64;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hash, merkle_root, Ciphertext, CryptoError, Digest, Signature};

pub const TOKEN_LEN: usize = 714;
pub const PAYLOAD_LEN: usize = TOKEN_LEN - Signature::LEN;

/// Field name and width in bytes, in wire order. `flags` packs stage,
/// status and isDefective into one byte.
pub const LAYOUT: [(&str, usize); 11] = [
    ("ICID", 32),
    ("PID", 32),
    ("EDID", 32),
    ("markHash", 32),
    ("flags", 1),
    ("prevVer", 8),
    ("version", 1),
    ("keyEncr", 256),
    ("keyHash", 32),
    ("publicID", 32),
    ("trnsaxnID", 256),
];

const FLAGS_AT: usize = 128;
const PREV_AT: usize = 129;
const VERSION_AT: usize = 137;
const KEY_ENCR_AT: usize = 138;
const KEY_HASH_AT: usize = 394;
const OWNER_AT: usize = 426;

const STAGE_SHIFT: u8 = 5;
const STATUS_BIT: u8 = 1 << 4;
const DEFECTIVE_BIT: u8 = 1 << 3;
const PAD_MASK: u8 = 0b0000_0111;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("MalformedToken: {0}")]
    Malformed(&'static str),
    #[error("MalformedToken: expected {TOKEN_LEN} bytes, got {0}")]
    WrongLength(usize),
    #[error("EmptyIdentifier")]
    EmptyIdentifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum Stage {
    Fabrication = 1,
    PcbAssembly = 2,
    SystemIntegration = 3,
    EndUser = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Fabrication,
        Stage::PcbAssembly,
        Stage::SystemIntegration,
        Stage::EndUser,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = TokenError;

    fn try_from(code: u8) -> Result<Self, TokenError> {
        match code {
            1 => Ok(Stage::Fabrication),
            2 => Ok(Stage::PcbAssembly),
            3 => Ok(Stage::SystemIntegration),
            4 => Ok(Stage::EndUser),
            _ => Err(TokenError::Malformed("stage outside 1..=4")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(stage: Stage) -> u8 {
        stage.code()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum Status {
    InProgress = 0,
    Completed = 1,
}

impl Status {
    pub fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Status {
    type Error = TokenError;

    fn try_from(code: u8) -> Result<Self, TokenError> {
        match code {
            0 => Ok(Status::InProgress),
            1 => Ok(Status::Completed),
            _ => Err(TokenError::Malformed("status outside 0..=1")),
        }
    }
}

impl From<Status> for u8 {
    fn from(status: Status) -> u8 {
        status.code()
    }
}

/// Global position of a token in commit order. Starts at 1; zero is the
/// wire encoding of "no previous version".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct SeqIndex(NonZeroU64);

impl SeqIndex {
    pub const FIRST: SeqIndex = SeqIndex(NonZeroU64::MIN);

    pub fn new(value: u64) -> Option<Self> {
        NonZeroU64::new(value).map(SeqIndex)
    }

    pub fn get(self) -> u64 {
        self.0.get()
    }

    pub fn next(self) -> SeqIndex {
        SeqIndex(self.0.checked_add(1).expect("sequence space exhausted"))
    }
}

impl TryFrom<u64> for SeqIndex {
    type Error = TokenError;

    fn try_from(value: u64) -> Result<Self, TokenError> {
        SeqIndex::new(value).ok_or(TokenError::Malformed("sequence index zero"))
    }
}

impl From<SeqIndex> for u64 {
    fn from(seq: SeqIndex) -> u64 {
        seq.get()
    }
}

impl fmt::Display for SeqIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.get())
    }
}

/// Owner identifier: SHA-256 of the owner's public key bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicId(pub Digest);

impl PublicId {
    pub fn of_key(key: &crypto::PublicKey) -> Self {
        PublicId(hash(key.to_der()))
    }
}

impl fmt::Display for PublicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for PublicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicId({})", self.0.short())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcMetadata {
    pub icid: Digest,
    pub pid: Option<Digest>,
    pub edid: Option<Digest>,
    pub mark_hash: Digest,
    pub stage: Stage,
    pub status: Status,
    pub prev_ver: Option<SeqIndex>,
    pub version: u8,
    pub is_defective: bool,
}

impl IcMetadata {
    /// Metadata for a freshly fabricated IC.
    pub fn fabricated(icid: Digest, mark_hash: Digest) -> Self {
        Self {
            icid,
            pid: None,
            edid: None,
            mark_hash,
            stage: Stage::Fabrication,
            status: Status::Completed,
            prev_ver: None,
            version: 0,
            is_defective: false,
        }
    }

    pub fn check(&self) -> Result<(), TokenError> {
        if (self.version == 0) != self.prev_ver.is_none() {
            return Err(TokenError::Malformed("version is zero iff prevVer is absent"));
        }
        if self.edid.is_some() && self.pid.is_none() {
            return Err(TokenError::Malformed("EDID set without PID"));
        }
        if [Some(self.icid), self.pid, self.edid].iter().flatten().any(Digest::is_zero) {
            return Err(TokenError::Malformed("all-zero identifier"));
        }
        Ok(())
    }

    fn flags(&self) -> u8 {
        (self.stage.code() << STAGE_SHIFT)
            | if self.status == Status::Completed { STATUS_BIT } else { 0 }
            | if self.is_defective { DEFECTIVE_BIT } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcKeyBox {
    pub key_encr: Ciphertext,
    pub key_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcToken {
    pub metadata: IcMetadata,
    pub key: IcKeyBox,
    pub owner: PublicId,
    pub trnsaxn_id: Signature,
}

impl IcToken {
    pub fn icid(&self) -> Digest {
        self.metadata.icid
    }

    pub fn encode(&self) -> Result<[u8; TOKEN_LEN], TokenError> {
        self.metadata.check()?;
        let mut out = [0u8; TOKEN_LEN];
        let m = &self.metadata;
        out[..32].copy_from_slice(&m.icid.0);
        out[32..64].copy_from_slice(&m.pid.unwrap_or(Digest::ZERO).0);
        out[64..96].copy_from_slice(&m.edid.unwrap_or(Digest::ZERO).0);
        out[96..FLAGS_AT].copy_from_slice(&m.mark_hash.0);
        out[FLAGS_AT] = m.flags();
        let prev = m.prev_ver.map_or(0, SeqIndex::get);
        out[PREV_AT..VERSION_AT].copy_from_slice(&prev.to_be_bytes());
        out[VERSION_AT] = m.version;
        out[KEY_ENCR_AT..KEY_HASH_AT].copy_from_slice(&self.key.key_encr.0);
        out[KEY_HASH_AT..OWNER_AT].copy_from_slice(&self.key.key_hash.0);
        out[OWNER_AT..PAYLOAD_LEN].copy_from_slice(&self.owner.0 .0);
        out[PAYLOAD_LEN..].copy_from_slice(&self.trnsaxn_id.0);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() != TOKEN_LEN {
            return Err(TokenError::WrongLength(bytes.len()));
        }
        let digest_at = |at: usize| Digest::from_slice(&bytes[at..at + 32]).expect("32 bytes");
        let optional = |at: usize| Some(digest_at(at)).filter(|d| !d.is_zero());

        let flags = bytes[FLAGS_AT];
        if flags & PAD_MASK != 0 {
            return Err(TokenError::Malformed("nonzero flag padding"));
        }
        let prev = u64::from_be_bytes(bytes[PREV_AT..VERSION_AT].try_into().expect("8 bytes"));
        let token = IcToken {
            metadata: IcMetadata {
                icid: digest_at(0),
                pid: optional(32),
                edid: optional(64),
                mark_hash: digest_at(96),
                stage: Stage::try_from(flags >> STAGE_SHIFT)?,
                status: if flags & STATUS_BIT != 0 {
                    Status::Completed
                } else {
                    Status::InProgress
                },
                prev_ver: SeqIndex::new(prev),
                version: bytes[VERSION_AT],
                is_defective: flags & DEFECTIVE_BIT != 0,
            },
            key: IcKeyBox {
                key_encr: Ciphertext::from_slice(&bytes[KEY_ENCR_AT..KEY_HASH_AT]).expect("256 bytes"),
                key_hash: digest_at(KEY_HASH_AT),
            },
            owner: PublicId(digest_at(OWNER_AT)),
            trnsaxn_id: Signature::from_slice(&bytes[PAYLOAD_LEN..]).expect("256 bytes"),
        };
        token.metadata.check()?;
        Ok(token)
    }

    /// The signed portion of the canonical image: everything but trnsaxnID.
    pub fn signing_payload(&self) -> Result<[u8; PAYLOAD_LEN], TokenError> {
        let full = self.encode()?;
        let mut out = [0u8; PAYLOAD_LEN];
        out.copy_from_slice(&full[..PAYLOAD_LEN]);
        Ok(out)
    }

    pub fn digest(&self) -> Result<Digest, TokenError> {
        Ok(hash(&self.encode()?))
    }
}

/// ICID: SHA-256 of the device's unique identifier.
pub fn make_icid(device_uid: &[u8]) -> Result<Digest, TokenError> {
    if device_uid.is_empty() {
        return Err(TokenError::EmptyIdentifier);
    }
    Ok(hash(device_uid))
}

/// Trims the marking text and collapses internal whitespace runs to one
/// space, so relabelled spacing cannot change the digest.
pub fn normalize_markings(markings: &str) -> String {
    markings.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn make_mark_hash(markings: &str) -> Digest {
    hash(normalize_markings(markings).as_bytes())
}

/// PCB identifier: merkle root over the set of its ICIDs.
pub fn compute_pid(icids: &[Digest]) -> Result<Digest, CryptoError> {
    merkle_root(icids)
}

/// Device identifier: merkle root over the set of its PIDs.
pub fn compute_edid(pids: &[Digest]) -> Result<Digest, CryptoError> {
    merkle_root(pids)
}
