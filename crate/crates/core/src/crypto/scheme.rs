//! RSA-2048: PKCS#1 v1.5 signatures over SHA-256, OAEP-SHA256 encryption.
//!
//! Both produce exactly 256-byte outputs. OAEP-SHA256 at this modulus size
//! caps plaintexts at 256 - 2*32 - 2 = 190 bytes.

use std::fmt;

use rand_core::CryptoRngCore;
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey, LineEnding};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use sha2::Sha256;

use super::{hash, Ciphertext, CryptoError, Signature, CIPHERTEXT_LEN, SIGNATURE_LEN};

pub const MODULUS_BITS: usize = 2048;
pub const MAX_PLAINTEXT_LEN: usize = 190;

/// An RSA-2048 public key. Its canonical bytes are the PKCS#1 DER encoding.
#[derive(Clone)]
pub struct PublicKey {
    inner: RsaPublicKey,
    der: Vec<u8>,
}

impl PublicKey {
    fn from_inner(inner: RsaPublicKey) -> Self {
        let der = inner
            .to_pkcs1_der()
            .expect("RSA public key always encodes")
            .as_bytes()
            .to_vec();
        Self { inner, der }
    }

    pub fn from_der(der: &[u8]) -> Result<Self, CryptoError> {
        let inner = RsaPublicKey::from_pkcs1_der(der)
            .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        if inner.size() != SIGNATURE_LEN {
            return Err(CryptoError::InvalidKey(format!(
                "modulus is {} bytes, expected {SIGNATURE_LEN}",
                inner.size()
            )));
        }
        let key = Self::from_inner(inner);
        if key.der != der {
            return Err(CryptoError::InvalidKey("non-canonical DER".into()));
        }
        Ok(key)
    }

    pub fn to_der(&self) -> &[u8] {
        &self.der
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.der == other.der
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hash(&self.der).short())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(&self.der))
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        if text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(de::Error::custom("public key hex must be lowercase"));
        }
        let der = hex::decode(&text).map_err(de::Error::custom)?;
        PublicKey::from_der(&der).map_err(de::Error::custom)
    }
}

#[derive(Clone)]
pub struct PrivateKey {
    inner: RsaPrivateKey,
}

impl PrivateKey {
    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_inner(RsaPublicKey::from(&self.inner))
    }

    pub fn to_pkcs8_pem(&self) -> String {
        self.inner
            .to_pkcs8_pem(LineEnding::LF)
            .expect("RSA private key always encodes")
            .to_string()
    }

    pub fn from_pkcs8_pem(pem: &str) -> Result<Self, CryptoError> {
        let inner =
            RsaPrivateKey::from_pkcs8_pem(pem).map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        if inner.size() != SIGNATURE_LEN {
            return Err(CryptoError::InvalidKey("modulus is not 2048 bits".into()));
        }
        Ok(Self { inner })
    }

    /// PKCS#8 DER bytes. Never leaves the process except through the
    /// wallet file.
    pub(crate) fn secret_der(&self) -> Vec<u8> {
        self.inner
            .to_pkcs8_der()
            .expect("RSA private key always encodes")
            .as_bytes()
            .to_vec()
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl KeyPair {
    pub fn generate<R: CryptoRngCore>(rng: &mut R) -> Result<Self, CryptoError> {
        let inner = RsaPrivateKey::new(rng, MODULUS_BITS)
            .map_err(|e| CryptoError::InvalidKey(e.to_string()))?;
        Ok(Self::from_private(PrivateKey { inner }))
    }

    pub fn from_private(private: PrivateKey) -> Self {
        Self {
            public: private.public_key(),
            private,
        }
    }
}

/// Deterministic signature over SHA-256(`message`).
pub fn sign(key: &PrivateKey, message: &[u8]) -> Signature {
    let digest = hash(message);
    let raw = key
        .inner
        .sign(Pkcs1v15Sign::new::<Sha256>(), &digest.0)
        .expect("signing a 32-byte digest with a 2048-bit key cannot fail");
    Signature::from_slice(&raw).expect("2048-bit modulus yields 256-byte signatures")
}

pub fn verify(key: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let digest = hash(message);
    key.inner
        .verify(Pkcs1v15Sign::new::<Sha256>(), &digest.0, &sig.0)
        .is_ok()
}

pub fn encrypt<R: CryptoRngCore>(
    key: &PublicKey,
    rng: &mut R,
    plaintext: &[u8],
) -> Result<Ciphertext, CryptoError> {
    if plaintext.len() > MAX_PLAINTEXT_LEN {
        return Err(CryptoError::PlaintextTooLong {
            len: plaintext.len(),
        });
    }
    let raw = key
        .inner
        .encrypt(rng, Oaep::new::<Sha256>(), plaintext)
        .map_err(|_| CryptoError::PlaintextTooLong {
            len: plaintext.len(),
        })?;
    debug_assert_eq!(raw.len(), CIPHERTEXT_LEN);
    Ok(Ciphertext::from_slice(&raw).expect("2048-bit modulus yields 256-byte ciphertexts"))
}

pub fn decrypt(key: &PrivateKey, ct: &Ciphertext) -> Result<Vec<u8>, CryptoError> {
    key.inner
        .decrypt(Oaep::new::<Sha256>(), &ct.0)
        .map_err(|_| CryptoError::DecryptionFailure)
}

/// Re-encrypts `ct` from the holder of `own` to the owner of `new_owner`.
pub fn change_enc_key<R: CryptoRngCore>(
    own: &PrivateKey,
    new_owner: &PublicKey,
    rng: &mut R,
    ct: &Ciphertext,
) -> Result<Ciphertext, CryptoError> {
    let plaintext = decrypt(own, ct)?;
    encrypt(new_owner, rng, &plaintext)
}
