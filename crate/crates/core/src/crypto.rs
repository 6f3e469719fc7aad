//! Anonymous hybrid public-key encryption.
//!
//! Every ciphertext is `ephemeral_pk || aead(plaintext)`:
//!
//! ```text
//! shared = X25519(ephemeral_sk, recipient_pk)
//! okm    = HKDF-SHA256(salt = ephemeral_pk || recipient_pk, ikm = shared, info = "warp2 seal v1")
//! key    = okm[0..32], nonce = okm[32..44]
//! body   = ChaCha20-Poly1305(key, nonce, plaintext, aad = "")
//! ```
//!
//! The ephemeral key is fresh for every call, so the bytes carry nothing that
//! identifies the recipient: no key id, no fingerprint, and a length that only
//! depends on the plaintext length. The recipient public key enters only the
//! KDF salt, which the recipient reconstructs from its own key.

use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use chrono::{DateTime, SubsecRound, Utc};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use x25519_dalek::{PublicKey as DalekPublic, StaticSecret};
use zeroize::Zeroizing;

pub const PUBLIC_KEY_LEN: usize = 32;
const EPHEMERAL_LEN: usize = 32;
const TAG_LEN: usize = 16;
const KDF_INFO: &[u8] = b"warp2 seal v1";

/// Bytes added by [`seal`] on top of the plaintext length.
pub const SEAL_OVERHEAD: usize = EPHEMERAL_LEN + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("entropy source unavailable")]
    EntropyUnavailable,
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("malformed key encoding: {0}")]
    MalformedKey(&'static str),
}

/// Trial decryption did not succeed: wrong key, or not a ciphertext at all.
///
/// This is the expected result for almost every header on a shared inbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("decryption failed")]
pub struct DecryptFailure;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let raw: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedKey("public key must be 32 bytes"))?;
        Ok(Self(raw))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    /// Length-prefixed wire form: a big-endian `u16` length followed by the raw key.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + PUBLIC_KEY_LEN);
        out.extend_from_slice(&(PUBLIC_KEY_LEN as u16).to_be_bytes());
        out.extend_from_slice(&self.0);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (len, rest) = bytes
            .split_first_chunk::<2>()
            .ok_or(CryptoError::MalformedKey("missing length prefix"))?;
        if u16::from_be_bytes(*len) as usize != rest.len() {
            return Err(CryptoError::MalformedKey("length prefix mismatch"));
        }
        Self::from_bytes(rest)
    }

    /// Base64 of [`PublicKey::to_wire`], for pasting into mail or chat.
    pub fn to_base64(&self) -> String {
        BASE64.encode(self.to_wire())
    }

    pub fn from_base64(text: &str) -> Result<Self, CryptoError> {
        let raw = BASE64
            .decode(text.trim())
            .map_err(|_| CryptoError::MalformedKey("not base64"))?;
        Self::from_wire(&raw)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::from_base64(&s).map_err(serde::de::Error::custom)
    }
}

/// An identity key pair. The secret half is zeroized on drop.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    secret: StaticSecret,
    created_at: DateTime<Utc>,
}

impl KeyPair {
    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn secret_bytes(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.secret.to_bytes())
    }

    pub fn from_secret_bytes(secret: [u8; 32], created_at: DateTime<Utc>) -> Self {
        let secret = StaticSecret::from(secret);
        let public = PublicKey(DalekPublic::from(&secret).to_bytes());
        Self {
            public,
            secret,
            created_at,
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyPairRepr {
    secret: String,
    created_at: DateTime<Utc>,
}

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        KeyPairRepr {
            secret: BASE64.encode(self.secret.as_bytes()),
            created_at: self.created_at,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = KeyPairRepr::deserialize(deserializer)?;
        let raw = Zeroizing::new(
            BASE64
                .decode(&repr.secret)
                .map_err(serde::de::Error::custom)?,
        );
        let secret: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| serde::de::Error::custom("secret key must be 32 bytes"))?;
        Ok(Self::from_secret_bytes(secret, repr.created_at))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext(Vec<u8>);

impl Ciphertext {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for Ciphertext {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&BASE64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Ciphertext {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        BASE64.decode(s).map(Self).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bytes)", self.0.len())
    }
}

pub fn generate_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> Result<KeyPair, CryptoError> {
    let mut secret = Zeroizing::new([0u8; 32]);
    rng.try_fill_bytes(secret.as_mut())
        .map_err(|_| CryptoError::EntropyUnavailable)?;
    Ok(KeyPair::from_secret_bytes(
        *secret,
        Utc::now().trunc_subsecs(0),
    ))
}

fn derive(
    shared: &[u8; 32],
    ephemeral: &[u8],
    recipient: &[u8],
) -> (Zeroizing<[u8; 32]>, [u8; 12]) {
    let mut salt = [0u8; EPHEMERAL_LEN + PUBLIC_KEY_LEN];
    salt[..EPHEMERAL_LEN].copy_from_slice(ephemeral);
    salt[EPHEMERAL_LEN..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = Zeroizing::new([0u8; 44]);
    hk.expand(KDF_INFO, okm.as_mut())
        .expect("44 bytes is a valid HKDF-SHA256 output length");
    let mut key = Zeroizing::new([0u8; 32]);
    key.copy_from_slice(&okm[..32]);
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&okm[32..]);
    (key, nonce)
}

/// Encrypts `plaintext` so that only the holder of `recipient`'s secret key can read it.
pub fn seal<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    recipient: &PublicKey,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let recipient_point = DalekPublic::from(recipient.0);
    let mut eph_bytes = Zeroizing::new([0u8; 32]);
    rng.try_fill_bytes(eph_bytes.as_mut())
        .map_err(|_| CryptoError::EntropyUnavailable)?;
    let eph_secret = StaticSecret::from(*eph_bytes);
    let eph_public = DalekPublic::from(&eph_secret);
    let shared = eph_secret.diffie_hellman(&recipient_point);
    // Low-order points give an all-zero shared secret that anyone could compute.
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidPublicKey);
    }

    let (key, nonce) = derive(shared.as_bytes(), eph_public.as_bytes(), &recipient.0);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_ref()));

    let mut out = Vec::with_capacity(plaintext.len() + SEAL_OVERHEAD);
    out.extend_from_slice(eph_public.as_bytes());
    out.extend_from_slice(plaintext);
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), b"", &mut out[EPHEMERAL_LEN..])
        .expect("plaintext within ChaCha20-Poly1305 limits");
    out.extend_from_slice(&tag);
    Ok(Ciphertext(out))
}

/// Attempts to decrypt `ciphertext` with `keypair`.
///
/// Accepts arbitrary bytes. Any mismatch, truncation or tampering yields [`DecryptFailure`].
pub fn open(ciphertext: &[u8], keypair: &KeyPair) -> Result<Vec<u8>, DecryptFailure> {
    if ciphertext.len() < SEAL_OVERHEAD {
        return Err(DecryptFailure);
    }
    let (eph, rest) = ciphertext.split_at(EPHEMERAL_LEN);
    let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
    let eph_point: [u8; 32] = eph.try_into().expect("split at 32");
    let shared = keypair.secret.diffie_hellman(&DalekPublic::from(eph_point));
    if !shared.was_contributory() {
        return Err(DecryptFailure);
    }
    let (key, nonce) = derive(shared.as_bytes(), eph, &keypair.public.0);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_ref()));
    let mut buf = body.to_vec();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            b"",
            &mut buf,
            Tag::from_slice(tag),
        )
        .map_err(|_| DecryptFailure)?;
    Ok(buf)
}
