//! Owner identities and the client side of every ledger service.
//!
//! A wallet builds and signs new token versions; it never assigns version
//! numbers or previous-version links. Those belong to the tracker, which
//! checks the signature over the fields the wallet copied from its held
//! (latest committed) token.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Mutex, OnceLock};

use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, change_enc_key, decrypt, encrypt, hash, hash_parts, CryptoError, Digest, KeyPair,
    PrivateKey, PublicKey, Signature,
};
use crate::token::{
    compute_edid, compute_pid, make_icid, make_mark_hash, IcKeyBox, IcMetadata, IcToken, PublicId,
    Stage, Status, TokenError,
};

pub const METERING_KEY_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum WalletError {
    #[error("NotHeld: {0}")]
    NotHeld(Digest),
    #[error("MixedStages: batch tokens are not all at the composition stage")]
    MixedStages,
    #[error("EmptyList")]
    EmptyList,
    #[error("TrackerUnavailable")]
    TrackerUnavailable,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("wallet file: {0}")]
    Format(String),
}

impl WalletError {
    pub fn class(&self) -> &'static str {
        match self {
            WalletError::NotHeld(_) => "NotHeld",
            WalletError::MixedStages => "MixedStages",
            WalletError::EmptyList => "EmptyList",
            WalletError::TrackerUnavailable => "TrackerUnavailable",
            WalletError::Crypto(CryptoError::DecryptionFailure) => "DecryptionFailure",
            WalletError::Crypto(CryptoError::PlaintextTooLong { .. }) => "PlaintextTooLong",
            WalletError::Crypto(_) => "InvalidKey",
            WalletError::Token(TokenError::EmptyIdentifier) => "EmptyIdentifier",
            WalletError::Token(_) => "MalformedToken",
            WalletError::Format(_) => "WalletFormat",
        }
    }
}

/// The public half of an owner, as registered with the tracker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicProfile {
    pub public_id: PublicId,
    pub public_key: PublicKey,
}

impl PublicProfile {
    pub fn is_consistent(&self) -> bool {
        self.public_id == PublicId::of_key(&self.public_key)
    }

    pub fn verify_sign(&self, message: &[u8], sig: &Signature) -> bool {
        crypto::verify(&self.public_key, message, sig)
    }
}

#[derive(Clone, Debug)]
pub struct Owner {
    pub public_id: PublicId,
    pub keys: KeyPair,
    pub role: String,
}

fn seeded_keys(seed: u64) -> KeyPair {
    static CACHE: OnceLock<Mutex<HashMap<u64, KeyPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(keys) = cache.lock().expect("key cache poisoned").get(&seed) {
        return keys.clone();
    }
    // Generated outside the lock; a concurrent miss on the same seed yields
    // the same key pair anyway.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let keys = KeyPair::generate(&mut rng).expect("RSA key generation");
    cache
        .lock()
        .expect("key cache poisoned")
        .entry(seed)
        .or_insert(keys)
        .clone()
}

impl Owner {
    /// Fresh owner. A seed makes the key pair (and so the publicID)
    /// reproducible; seeded key pairs are memoized per process.
    pub fn create(role: &str, seed: Option<u64>) -> Owner {
        let keys = match seed {
            Some(seed) => seeded_keys(seed),
            None => KeyPair::generate(&mut ChaCha20Rng::from_entropy()).expect("RSA key generation"),
        };
        Owner::from_keys(role, keys)
    }

    pub fn from_keys(role: &str, keys: KeyPair) -> Owner {
        Owner {
            public_id: PublicId::of_key(&keys.public),
            keys,
            role: role.to_string(),
        }
    }

    pub fn profile(&self) -> PublicProfile {
        PublicProfile {
            public_id: self.public_id,
            public_key: self.keys.public.clone(),
        }
    }
}

/// Read access to a tracker node or network, as a wallet needs it.
pub trait TrackerEndpoint {
    /// Latest committed tokens currently owned by `owner`.
    fn assets(&self, owner: &PublicId) -> Result<Vec<IcToken>, WalletError>;

    fn profile(&self, owner: &PublicId) -> Option<PublicProfile>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompositionTarget {
    /// Bind ICs at PCB Assembly/Completed to a PCB identifier.
    Pcb,
    /// Bind ICs at System Integration/Completed to a device identifier.
    Device,
}

pub struct Wallet {
    owner: Owner,
    held: BTreeMap<Digest, IcToken>,
    rng: ChaCha20Rng,
}

impl Wallet {
    pub fn new(owner: Owner) -> Wallet {
        // OAEP padding randomness, derived from the private key so runs
        // with seeded owners are reproducible.
        let seed = hash_parts(&[b"wallet-rng", &owner.keys.private.secret_der()]);
        Wallet {
            owner,
            held: BTreeMap::new(),
            rng: ChaCha20Rng::from_seed(seed.0),
        }
    }

    pub fn owner(&self) -> &Owner {
        &self.owner
    }

    pub fn public_id(&self) -> PublicId {
        self.owner.public_id
    }

    pub fn profile(&self) -> PublicProfile {
        self.owner.profile()
    }

    pub fn held(&self) -> &BTreeMap<Digest, IcToken> {
        &self.held
    }

    pub fn token(&self, icid: &Digest) -> Result<&IcToken, WalletError> {
        self.held.get(icid).ok_or(WalletError::NotHeld(*icid))
    }

    /// Signs `token` as-is with this owner's key, replacing trnsaxnID.
    pub fn sign_token(&self, mut token: IcToken) -> Result<IcToken, TokenError> {
        token.trnsaxn_id = crypto::sign(&self.owner.keys.private, &token.signing_payload()?);
        Ok(token)
    }

    pub fn build_enrollment(
        &mut self,
        device_uid: &[u8],
        markings: &str,
        metering_key: &[u8; METERING_KEY_LEN],
    ) -> Result<IcToken, WalletError> {
        let metadata = IcMetadata::fabricated(make_icid(device_uid)?, make_mark_hash(markings));
        let key = IcKeyBox {
            key_encr: encrypt(&self.owner.keys.public, &mut self.rng, metering_key)?,
            key_hash: hash(metering_key),
        };
        let token = IcToken {
            metadata,
            key,
            owner: self.owner.public_id,
            trnsaxn_id: Signature::default(),
        };
        Ok(self.sign_token(token)?)
    }

    pub fn build_stage_update(
        &self,
        icid: &Digest,
        stage: Stage,
        status: Status,
    ) -> Result<IcToken, WalletError> {
        let mut token = self.token(icid)?.clone();
        token.metadata.stage = stage;
        token.metadata.status = status;
        Ok(self.sign_token(token)?)
    }

    /// One signed token per ICID, all carrying the identifier computed
    /// from the batch.
    pub fn build_composition_update(
        &self,
        icids: &[Digest],
        target: CompositionTarget,
    ) -> Result<Vec<IcToken>, WalletError> {
        if icids.is_empty() {
            return Err(WalletError::EmptyList);
        }
        let tokens = icids
            .iter()
            .map(|icid| self.token(icid))
            .collect::<Result<Vec<_>, _>>()?;
        let ready = tokens.iter().all(|t| {
            let m = &t.metadata;
            let composable = match target {
                CompositionTarget::Pcb => m.stage == Stage::PcbAssembly && m.pid.is_none(),
                CompositionTarget::Device => {
                    m.stage == Stage::SystemIntegration && m.pid.is_some() && m.edid.is_none()
                }
            };
            composable && m.status == Status::Completed
        });
        if !ready {
            return Err(WalletError::MixedStages);
        }
        let identifier = match target {
            CompositionTarget::Pcb => compute_pid(icids)?,
            CompositionTarget::Device => {
                let pids: BTreeSet<Digest> = tokens.iter().filter_map(|t| t.metadata.pid).collect();
                compute_edid(&pids.into_iter().collect::<Vec<_>>())?
            }
        };
        self.build_composition_claiming(icids, target, identifier)
    }

    /// Like [`Wallet::build_composition_update`] but writes `identifier`
    /// verbatim and skips the stage checks. The tracker is the judge.
    pub fn build_composition_claiming(
        &self,
        icids: &[Digest],
        target: CompositionTarget,
        identifier: Digest,
    ) -> Result<Vec<IcToken>, WalletError> {
        icids
            .iter()
            .map(|icid| {
                let mut token = self.token(icid)?.clone();
                match target {
                    CompositionTarget::Pcb => token.metadata.pid = Some(identifier),
                    CompositionTarget::Device => token.metadata.edid = Some(identifier),
                }
                Ok(self.sign_token(token)?)
            })
            .collect()
    }

    /// New version owned by `new_owner`, metering key re-encrypted to it,
    /// signed by the current owner.
    pub fn build_transfer(
        &mut self,
        icid: &Digest,
        new_owner: &PublicProfile,
    ) -> Result<IcToken, WalletError> {
        let mut token = self.token(icid)?.clone();
        token.key.key_encr = change_enc_key(
            &self.owner.keys.private,
            &new_owner.public_key,
            &mut self.rng,
            &token.key.key_encr,
        )?;
        token.owner = new_owner.public_id;
        Ok(self.sign_token(token)?)
    }

    pub fn build_defect_report(&self, icid: &Digest) -> Result<IcToken, WalletError> {
        let mut token = self.token(icid)?.clone();
        token.metadata.is_defective = true;
        Ok(self.sign_token(token)?)
    }

    /// Replaces the held set with what the tracker says this owner holds.
    pub fn sync_assets(
        &mut self,
        endpoint: &dyn TrackerEndpoint,
    ) -> Result<&BTreeMap<Digest, IcToken>, WalletError> {
        let tokens = endpoint.assets(&self.owner.public_id)?;
        self.held = tokens.into_iter().map(|t| (t.icid(), t)).collect();
        Ok(&self.held)
    }

    /// Decrypts the metering key of a held token and checks it against
    /// keyHash.
    pub fn metering_key(&self, icid: &Digest) -> Result<Vec<u8>, WalletError> {
        let token = self.token(icid)?;
        let key = decrypt(&self.owner.keys.private, &token.key.key_encr)?;
        if hash(&key) != token.key.key_hash {
            return Err(CryptoError::DecryptionFailure.into());
        }
        Ok(key)
    }

    /// Key-value text form. The private key is stored as PKCS#8 PEM after
    /// the header fields; held tokens are listed by ICID only.
    pub fn to_text(&self) -> String {
        let held: Vec<String> = self.held.keys().map(Digest::to_hex).collect();
        format!(
            "ictoken-wallet v1\nrole={}\npublic_id={}\nheld={}\n{}",
            self.owner.role,
            self.owner.public_id,
            held.join(","),
            self.owner.keys.private.to_pkcs8_pem()
        )
    }

    /// Parses [`Wallet::to_text`] output. Held tokens are not restored; call
    /// [`Wallet::sync_assets`] to fetch them from the ledger.
    pub fn from_text(text: &str) -> Result<Wallet, WalletError> {
        let fail = |msg: &str| WalletError::Format(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("ictoken-wallet v1") {
            return Err(fail("missing header"));
        }
        let pem_start = text.find("-----BEGIN").ok_or_else(|| fail("missing private key"))?;
        let mut fields = HashMap::new();
        for line in text[..pem_start].lines().skip(1) {
            let (k, v) = line.split_once('=').ok_or_else(|| fail("expected key=value"))?;
            fields.insert(k, v);
        }
        let private = PrivateKey::from_pkcs8_pem(&text[pem_start..])?;
        let role = fields.get("role").ok_or_else(|| fail("missing role"))?;
        let owner = Owner::from_keys(role, KeyPair::from_private(private));
        let listed = fields.get("public_id").ok_or_else(|| fail("missing public_id"))?;
        if *listed != owner.public_id.to_string() {
            return Err(fail("public_id does not match the private key"));
        }
        Ok(Wallet::new(owner))
    }
}
