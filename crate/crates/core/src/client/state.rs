//! Client-side state and its encrypted on-disk form.
//!
//! File layout (`client.state`):
//!
//! ```text
//! "W2CS" | version: u8 = 1 | argon2id salt: 16 bytes | nonce: 12 bytes | ChaCha20-Poly1305(JSON)
//! ```
//!
//! The file is rewritten atomically (temp file, fsync, rename) after every
//! state mutation. The format is documented but not a compatibility surface.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use chrono::{DateTime, Utc};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::keyring::{Contacts, KeyId, Keyring};
use crate::hash::HashId;
use crate::message::{Envelope, MessageHeader};

const MAGIC: &[u8; 4] = b"W2CS";
const VERSION: u8 = 1;
const SALT_LEN: usize = 16;
const NONCE_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Mail,
    KeyRotation,
}

/// A message received and decrypted by this client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub header_id: HashId,
    pub seq: u64,
    pub header: MessageHeader,
    /// Alias of the contact whose address matched `header.from`, if any.
    pub contact: Option<String>,
    pub kind: MessageKind,
    #[serde(with = "b64")]
    pub body: Vec<u8>,
    #[serde(default, with = "b64_opt", skip_serializing_if = "Option::is_none")]
    pub attachment: Option<Vec<u8>>,
    /// `sha256` of the body ciphertext as fetched; always equals `header.body_hash`.
    pub body_ct_hash: HashId,
    pub key_id: KeyId,
    pub received_at: DateTime<Utc>,
    pub read: bool,
    pub acked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub header_id: HashId,
    pub receipt_lock: HashId,
    pub to: String,
    pub subject: String,
    pub date: DateTime<Utc>,
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    /// Kept until the server confirms the upload, for idempotent retry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Envelope>,
    pub delivered: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientState {
    pub cursor: u64,
    pub skip_cache: BTreeSet<HashId>,
    pub mailstore: BTreeMap<HashId, StoredMessage>,
    /// Headers that decrypted but could not be used, with the reason.
    pub quarantine: BTreeMap<HashId, String>,
    pub outbox: Vec<OutboxEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_sync: Option<DateTime<Utc>>,
}

impl ClientState {
    pub fn has_seen(&self, id: &HashId) -> bool {
        self.skip_cache.contains(id)
            || self.mailstore.contains_key(id)
            || self.quarantine.contains_key(id)
    }
}

/// Everything a client persists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    pub address: String,
    pub keyring: Keyring,
    pub contacts: Contacts,
    pub state: ClientState,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("wrong passphrase or corrupted state file")]
    Decrypt,
    #[error("not a warp2 state file")]
    BadMagic,
    #[error("unsupported state file version {0}")]
    Version(u8),
    #[error("state encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("key derivation: {0}")]
    Kdf(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cost of the passphrase KDF.
#[derive(Debug, Clone, Copy)]
pub struct KdfCost {
    pub memory_kib: u32,
    pub iterations: u32,
}

impl Default for KdfCost {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
        }
    }
}

impl KdfCost {
    /// Cheap setting for tests.
    pub const fn insecure_fast() -> Self {
        Self {
            memory_kib: 64,
            iterations: 1,
        }
    }
}

/// An open, unlocked state file.
pub struct StateFile {
    path: PathBuf,
    salt: [u8; SALT_LEN],
    key: Zeroizing<[u8; 32]>,
}

fn derive_key(
    passphrase: &[u8],
    salt: &[u8],
    cost: KdfCost,
) -> Result<Zeroizing<[u8; 32]>, StoreError> {
    let params = Params::new(cost.memory_kib, cost.iterations, 1, Some(32))
        .map_err(|e| StoreError::Kdf(e.to_string()))?;
    let mut key = Zeroizing::new([0u8; 32]);
    Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
        .hash_password_into(passphrase, salt, key.as_mut())
        .map_err(|e| StoreError::Kdf(e.to_string()))?;
    Ok(key)
}

impl StateFile {
    pub fn create(path: &Path, passphrase: &[u8], cost: KdfCost) -> Result<Self, StoreError> {
        let mut salt = [0u8; SALT_LEN];
        OsRng.fill_bytes(&mut salt);
        Ok(Self {
            path: path.to_owned(),
            salt,
            key: derive_key(passphrase, &salt, cost)?,
        })
    }

    pub fn open(
        path: &Path,
        passphrase: &[u8],
        cost: KdfCost,
    ) -> Result<(Self, Profile), StoreError> {
        let data = fs::read(path)?;
        let header_len = MAGIC.len() + 1 + SALT_LEN + NONCE_LEN;
        if data.len() < header_len || &data[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        if data[4] != VERSION {
            return Err(StoreError::Version(data[4]));
        }
        let salt: [u8; SALT_LEN] = data[5..5 + SALT_LEN].try_into().expect("length checked");
        let nonce = &data[5 + SALT_LEN..header_len];
        let key = derive_key(passphrase, &salt, cost)?;
        let plain = Zeroizing::new(
            ChaCha20Poly1305::new(Key::from_slice(key.as_ref()))
                .decrypt(Nonce::from_slice(nonce), &data[header_len..])
                .map_err(|_| StoreError::Decrypt)?,
        );
        let profile = serde_json::from_slice(&plain)?;
        Ok((
            Self {
                path: path.to_owned(),
                salt,
                key,
            },
            profile,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn save(&self, profile: &Profile) -> Result<(), StoreError> {
        let plain = Zeroizing::new(serde_json::to_vec(profile)?);
        let mut nonce = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let ct = ChaCha20Poly1305::new(Key::from_slice(self.key.as_ref()))
            .encrypt(Nonce::from_slice(&nonce), plain.as_slice())
            .map_err(|_| StoreError::Decrypt)?;

        let tmp = self.path.with_extension("state.tmp");
        {
            let mut file = owner_only_file(&tmp)?;
            file.write_all(MAGIC)?;
            file.write_all(&[VERSION])?;
            file.write_all(&self.salt)?;
            file.write_all(&nonce)?;
            file.write_all(&ct)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[cfg(unix)]
fn owner_only_file(path: &Path) -> std::io::Result<File> {
    use std::os::unix::fs::OpenOptionsExt;
    fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)
}

#[cfg(not(unix))]
fn owner_only_file(path: &Path) -> std::io::Result<File> {
    File::create(path)
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD
            .decode(String::deserialize(d)?)
            .map_err(serde::de::Error::custom)
    }
}

mod b64_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::b64::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        use base64::Engine as _;
        Option::<String>::deserialize(d)?
            .map(|s| base64::engine::general_purpose::STANDARD.decode(s))
            .transpose()
            .map_err(serde::de::Error::custom)
    }
}
