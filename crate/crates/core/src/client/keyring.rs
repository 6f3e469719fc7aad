//! Own key pairs and contacts' public keys.
//!
//! Each contact is bound to one of our key pairs (`my_key`): the key that
//! contact seals to. After an in-band rotation every contact gets a key pair
//! of its own, so key material no longer links conversations. A key pair no
//! contact references is retired and its secret destroyed once the grace
//! window has passed.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoError, KeyPair, PublicKey};

pub type KeyId = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwnKey {
    pub id: KeyId,
    pub keypair: KeyPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retired_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Keyring {
    keys: Vec<OwnKey>,
    next_id: KeyId,
    /// Key handed out to new contacts out of band.
    identity: KeyId,
}

impl Keyring {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Self, CryptoError> {
        let keypair = crypto::generate_keypair(rng)?;
        Ok(Self {
            keys: vec![OwnKey {
                id: 0,
                keypair,
                retired_at: None,
            }],
            next_id: 1,
            identity: 0,
        })
    }

    pub fn add<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Result<KeyId, CryptoError> {
        let keypair = crypto::generate_keypair(rng)?;
        let id = self.next_id;
        self.next_id += 1;
        self.keys.push(OwnKey {
            id,
            keypair,
            retired_at: None,
        });
        Ok(id)
    }

    pub fn identity(&self) -> &OwnKey {
        self.get(self.identity)
            .expect("identity key is never destroyed while it is the identity")
    }

    pub fn identity_id(&self) -> KeyId {
        self.identity
    }

    pub fn get(&self, id: KeyId) -> Option<&OwnKey> {
        self.keys.iter().find(|k| k.id == id)
    }

    /// Every key pair whose secret still exists, retired or not.
    pub fn live(&self) -> impl Iterator<Item = &OwnKey> {
        self.keys.iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Marks `id` retired. A retired identity is replaced by a fresh one so new
    /// contacts never receive a dying key.
    pub fn retire<R: RngCore + CryptoRng>(
        &mut self,
        id: KeyId,
        now: DateTime<Utc>,
        rng: &mut R,
    ) -> Result<(), CryptoError> {
        if let Some(key) = self.keys.iter_mut().find(|k| k.id == id) {
            key.retired_at.get_or_insert(now);
        }
        if id == self.identity {
            self.identity = self.add(rng)?;
        }
        Ok(())
    }

    pub fn unretire(&mut self, id: KeyId) {
        if let Some(key) = self.keys.iter_mut().find(|k| k.id == id) {
            key.retired_at = None;
        }
    }

    /// Drops retired secrets whose grace window has elapsed. Returns how many.
    pub fn destroy_expired(&mut self, now: DateTime<Utc>, grace: Duration) -> usize {
        let before = self.keys.len();
        self.keys.retain(|k| match k.retired_at {
            Some(at) => now - at < grace,
            None => true,
        });
        before - self.keys.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationState {
    Stable,
    Offered,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub alias: String,
    /// Address the contact writes in the `from` field of its headers.
    pub address: String,
    pub current_pub: PublicKey,
    pub previous_pubs: Vec<PublicKey>,
    pub rotation_state: RotationState,
    /// Our key pair this contact currently seals to.
    pub my_key: KeyId,
    /// Our freshly offered key pair while a rotation is pending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_key: Option<KeyId>,
    /// Ordering key of the last rotation applied from this contact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_peer_rotation: Option<(DateTime<Utc>, PublicKey)>,
}

impl Contact {
    /// Installs a new public key for this contact, keeping the old one for history.
    pub fn replace_key(&mut self, key: PublicKey) {
        if key == self.current_pub {
            return;
        }
        self.previous_pubs.retain(|k| *k != key);
        self.previous_pubs.push(self.current_pub);
        self.current_pub = key;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContactError {
    #[error("alias `{0}` is already in use")]
    DuplicateAlias(String),
    #[error("no contact named `{0}`")]
    UnknownContact(String),
    #[error("malformed key: {0}")]
    MalformedKey(#[from] CryptoError),
    #[error("alias must be non-empty")]
    EmptyAlias,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Contacts(BTreeMap<String, Contact>);

impl Contacts {
    pub fn import(
        &mut self,
        alias: &str,
        address: &str,
        key: PublicKey,
        my_key: KeyId,
    ) -> Result<&Contact, ContactError> {
        if alias.is_empty() || address.is_empty() {
            return Err(ContactError::EmptyAlias);
        }
        if self.0.contains_key(alias) {
            return Err(ContactError::DuplicateAlias(alias.to_owned()));
        }
        let contact = Contact {
            alias: alias.to_owned(),
            address: address.to_owned(),
            current_pub: key,
            previous_pubs: Vec::new(),
            rotation_state: RotationState::Stable,
            my_key,
            pending_key: None,
            last_peer_rotation: None,
        };
        Ok(self.0.entry(alias.to_owned()).or_insert(contact))
    }

    pub fn remove(&mut self, alias: &str) -> Result<Contact, ContactError> {
        self.0
            .remove(alias)
            .ok_or_else(|| ContactError::UnknownContact(alias.to_owned()))
    }

    pub fn get(&self, alias: &str) -> Option<&Contact> {
        self.0.get(alias)
    }

    pub fn get_mut(&mut self, alias: &str) -> Option<&mut Contact> {
        self.0.get_mut(alias)
    }

    pub fn by_address(&self, address: &str) -> Option<&Contact> {
        self.0.values().find(|c| c.address == address)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Contact> {
        self.0.values()
    }

    /// Whether any contact still needs our key pair `id`.
    pub fn references(&self, id: KeyId) -> bool {
        self.0
            .values()
            .any(|c| c.my_key == id || c.pending_key == Some(id))
    }
}
