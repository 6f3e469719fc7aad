//! The client engine.
//!
//! A [`Client`] owns one user's keys, contacts and mailstore. It pages through
//! the shared inbox, trial-decrypts each unseen header with every secret key it
//! holds, fetches and verifies the content blobs of the headers that open, and
//! acknowledges delivery by revealing the receipt preimage.

pub mod daemon;
pub mod keyring;
pub mod state;
pub mod transport;

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, DurationRound, SubsecRound, Utc};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoError, PublicKey};
use crate::hash::{sha256, HashId};
use crate::message::{
    self, compose_envelope, BlobKind, Draft, MessageError, MessageHeader, ReceiptSecret,
    ROTATION_SUBJECT,
};

pub use keyring::{Contact, ContactError, Contacts, KeyId, Keyring, RotationState};
pub use state::{
    ClientState, KdfCost, MessageKind, OutboxEntry, Profile, StateFile, StoreError, StoredMessage,
};
pub use transport::{HttpInbox, InboxTransport, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("unknown contact `{0}`")]
    UnknownContact(String),
    #[error("message {0} is not in the mailstore")]
    NotInMailstore(HashId),
    #[error("a key rotation with `{0}` is already pending")]
    RotationAlreadyPending(String),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ClientError {
    pub fn is_network(&self) -> bool {
        matches!(self, Self::Transport(t) if t.is_network())
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// How long a retired secret key keeps decrypting in-flight mail.
    pub key_grace: Duration,
    /// Round header dates down to the hour.
    pub round_dates_to_hour: bool,
    /// Header page size to request; `None` uses the server default.
    pub page_limit: Option<usize>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            key_grace: Duration::days(7),
            round_dates_to_hour: false,
            page_limit: None,
        }
    }
}

/// In-band key announcement carried in the body of a rotation message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationPayload {
    pub new_public_key: PublicKey,
    pub effective_from: DateTime<Utc>,
}

impl RotationPayload {
    /// Only meaningful for a decrypted message whose subject is the rotation tag.
    pub fn from_message(header: &MessageHeader, body: &[u8]) -> Option<Self> {
        if !header.is_rotation() {
            return None;
        }
        serde_json::from_slice(body).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub new_messages: Vec<HashId>,
    pub headers_seen: usize,
    pub trial_decryptions: u64,
    pub skipped: usize,
    pub quarantined: usize,
    pub rotations_applied: usize,
    pub delivered: Vec<HashId>,
    pub cursor: u64,
}

pub struct Client {
    transport: Arc<dyn InboxTransport>,
    profile: Profile,
    options: ClientOptions,
    file: Option<StateFile>,
    trial_decryptions: u64,
}

impl Client {
    /// A fresh client with a new identity key and no persistence.
    pub fn new(
        address: &str,
        transport: Arc<dyn InboxTransport>,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let profile = Profile {
            address: address.to_owned(),
            keyring: Keyring::generate(&mut OsRng)?,
            contacts: Contacts::default(),
            state: ClientState::default(),
        };
        Ok(Self {
            transport,
            profile,
            options,
            file: None,
            trial_decryptions: 0,
        })
    }

    /// Creates a new persistent client at `path`.
    pub fn create(
        path: &Path,
        passphrase: &[u8],
        cost: KdfCost,
        address: &str,
        transport: Arc<dyn InboxTransport>,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let mut client = Self::new(address, transport, options)?;
        let file = StateFile::create(path, passphrase, cost)?;
        file.save(&client.profile)?;
        client.file = Some(file);
        Ok(client)
    }

    /// Unlocks an existing state file.
    pub fn open(
        path: &Path,
        passphrase: &[u8],
        cost: KdfCost,
        transport: Arc<dyn InboxTransport>,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let (file, profile) = StateFile::open(path, passphrase, cost)?;
        Ok(Self {
            transport,
            profile,
            options,
            file: Some(file),
            trial_decryptions: 0,
        })
    }

    fn persist(&self) -> Result<(), ClientError> {
        if let Some(file) = &self.file {
            file.save(&self.profile)?;
        }
        Ok(())
    }

    pub fn address(&self) -> &str {
        &self.profile.address
    }

    pub fn public_key(&self) -> PublicKey {
        *self.profile.keyring.identity().keypair.public()
    }

    pub fn keyring(&self) -> &Keyring {
        &self.profile.keyring
    }

    pub fn contacts(&self) -> &Contacts {
        &self.profile.contacts
    }

    pub fn state(&self) -> &ClientState {
        &self.profile.state
    }

    pub fn options(&self) -> &ClientOptions {
        &self.options
    }

    /// Number of `open()` attempts made on headers since this client was loaded.
    pub fn trial_decryptions(&self) -> u64 {
        self.trial_decryptions
    }

    pub fn message(&self, id: &HashId) -> Option<&StoredMessage> {
        self.profile.state.mailstore.get(id)
    }

    /// Mail messages (not rotation messages), oldest first.
    pub fn messages(&self) -> impl Iterator<Item = &StoredMessage> {
        let mut all: Vec<_> = self
            .profile
            .state
            .mailstore
            .values()
            .filter(|m| m.kind == MessageKind::Mail)
            .collect();
        all.sort_by_key(|m| m.seq);
        all.into_iter()
    }

    /// Finds a stored message by full id or unique hex prefix.
    pub fn resolve_id(&self, prefix: &str) -> Option<HashId> {
        if let Ok(id) = prefix.parse::<HashId>() {
            return Some(id);
        }
        let mut hits = self
            .profile
            .state
            .mailstore
            .keys()
            .filter(|id| id.to_hex().starts_with(prefix));
        match (hits.next(), hits.next()) {
            (Some(id), None) => Some(*id),
            _ => None,
        }
    }

    pub fn mark_read(&mut self, id: &HashId) -> Result<(), ClientError> {
        let msg = self
            .profile
            .state
            .mailstore
            .get_mut(id)
            .ok_or(ClientError::NotInMailstore(*id))?;
        if !msg.read {
            msg.read = true;
            self.persist()?;
        }
        Ok(())
    }

    pub fn import_contact(&mut self, alias: &str, key: &[u8]) -> Result<Contact, ClientError> {
        self.import_contact_with_address(alias, alias, key)
    }

    /// Adds a contact from its exported public key (wire bytes or base64 text).
    pub fn import_contact_with_address(
        &mut self,
        alias: &str,
        address: &str,
        key: &[u8],
    ) -> Result<Contact, ClientError> {
        let key = PublicKey::from_wire(key)
            .or_else(|_| PublicKey::from_base64(&String::from_utf8_lossy(key)))
            .map_err(ContactError::MalformedKey)?;
        let my_key = self.profile.keyring.identity_id();
        let contact = self
            .profile
            .contacts
            .import(alias, address, key, my_key)?
            .clone();
        self.persist()?;
        Ok(contact)
    }

    pub fn remove_contact(&mut self, alias: &str) -> Result<Contact, ClientError> {
        let contact = self.profile.contacts.remove(alias)?;
        self.persist()?;
        Ok(contact)
    }

    fn header_date(&self) -> DateTime<Utc> {
        let now = Utc::now().trunc_subsecs(0);
        if self.options.round_dates_to_hour {
            now.duration_trunc(Duration::hours(1)).unwrap_or(now)
        } else {
            now
        }
    }

    pub async fn send(
        &mut self,
        to: &str,
        subject: &str,
        body: &[u8],
        attachment: Option<&[u8]>,
    ) -> Result<HashId, ClientError> {
        if subject == ROTATION_SUBJECT {
            return Err(MessageError::InvalidHeader("subject is reserved").into());
        }
        self.send_kind(to, subject, body, attachment, MessageKind::Mail)
            .await
    }

    async fn send_kind(
        &mut self,
        to: &str,
        subject: &str,
        body: &[u8],
        attachment: Option<&[u8]>,
        kind: MessageKind,
    ) -> Result<HashId, ClientError> {
        let contact = self
            .profile
            .contacts
            .get(to)
            .ok_or_else(|| ClientError::UnknownContact(to.to_owned()))?;
        let date = self.header_date();
        let (envelope, receipt) = compose_envelope(
            &Draft {
                to: &contact.address,
                from: &self.profile.address,
                subject,
                date,
                body,
                attachment,
            },
            &contact.current_pub,
            &mut OsRng,
        )?;
        let header_id = envelope.header_id();
        self.profile.state.outbox.push(OutboxEntry {
            header_id,
            receipt_lock: receipt.lock(),
            to: to.to_owned(),
            subject: subject.to_owned(),
            date,
            kind,
            seq: None,
            pending: Some(envelope),
            delivered: false,
        });
        self.persist()?;
        self.flush_outbox().await?;
        Ok(header_id)
    }

    /// Uploads every envelope still waiting for server confirmation.
    pub async fn flush_outbox(&mut self) -> Result<usize, ClientError> {
        let mut uploaded = 0;
        for i in 0..self.profile.state.outbox.len() {
            let Some(envelope) = self.profile.state.outbox[i].pending.clone() else {
                continue;
            };
            let receipt = self.transport.upload(&envelope).await?;
            let entry = &mut self.profile.state.outbox[i];
            entry.seq = Some(receipt.seq);
            entry.pending = None;
            uploaded += 1;
            self.persist()?;
        }
        Ok(uploaded)
    }

    pub fn pending_uploads(&self) -> usize {
        self.profile
            .state
            .outbox
            .iter()
            .filter(|e| e.pending.is_some())
            .count()
    }

    /// Pages the inbox from the stored cursor and processes every unseen header.
    pub async fn sync(&mut self) -> Result<SyncReport, ClientError> {
        let mut report = SyncReport::default();
        let now = Utc::now();
        self.profile
            .keyring
            .destroy_expired(now, self.options.key_grace);
        // Pending uploads are retried first; a failure here must not block reading mail.
        if let Err(e) = self.flush_outbox().await {
            tracing::warn!(error = %e, "outbox retry failed");
        }
        let start_decryptions = self.trial_decryptions;

        loop {
            let page = self
                .transport
                .list_headers(self.profile.state.cursor, self.options.page_limit)
                .await?;
            report.headers_seen += page.entries.len();
            let mut rotations = Vec::new();
            for entry in &page.entries {
                if self.profile.state.has_seen(&entry.header_id) {
                    report.skipped += 1;
                    continue;
                }
                // Our own uploads are sealed to someone else.
                if self
                    .profile
                    .state
                    .outbox
                    .iter()
                    .any(|e| e.header_id == entry.header_id)
                {
                    self.profile.state.skip_cache.insert(entry.header_id);
                    report.skipped += 1;
                    continue;
                }
                if sha256(entry.header_ct.as_bytes()) != entry.header_id {
                    tracing::warn!(id = %entry.header_id, "header id does not match its ciphertext");
                    continue;
                }
                match self.trial_open(entry.header_ct.as_bytes()) {
                    None => {
                        self.profile.state.skip_cache.insert(entry.header_id);
                    }
                    Some((key_id, Err(e))) => {
                        tracing::warn!(id = %entry.header_id, key_id, error = %e, "quarantining header");
                        self.profile
                            .state
                            .quarantine
                            .insert(entry.header_id, e.to_string());
                        report.quarantined += 1;
                    }
                    Some((key_id, Ok(header))) => {
                        match self
                            .receive(entry.header_id, entry.seq, key_id, header)
                            .await
                        {
                            Ok(msg) => {
                                if msg.kind == MessageKind::KeyRotation {
                                    rotations.push(msg.header_id);
                                } else {
                                    report.new_messages.push(msg.header_id);
                                }
                                self.profile.state.mailstore.insert(msg.header_id, msg);
                            }
                            Err(ClientError::Transport(t)) if t.is_network() => {
                                self.persist()?;
                                return Err(t.into());
                            }
                            Err(e) => {
                                tracing::warn!(id = %entry.header_id, error = %e, "quarantining message");
                                self.profile
                                    .state
                                    .quarantine
                                    .insert(entry.header_id, e.to_string());
                                report.quarantined += 1;
                            }
                        }
                    }
                }
            }
            report.rotations_applied += self.apply_rotations(&rotations).await?;
            let advanced = page.next_cursor > self.profile.state.cursor;
            if advanced {
                self.profile.state.cursor = page.next_cursor;
            }
            self.persist()?;
            if page.entries.is_empty() || !advanced {
                break;
            }
        }

        report.delivered = self.refresh_delivery().await?;
        self.profile.state.last_sync = Some(Utc::now());
        self.persist()?;
        report.trial_decryptions = self.trial_decryptions - start_decryptions;
        report.cursor = self.profile.state.cursor;
        Ok(report)
    }

    /// Tries every held secret key. `None` means no key opened the header.
    fn trial_open(
        &mut self,
        header_ct: &[u8],
    ) -> Option<(KeyId, Result<MessageHeader, MessageError>)> {
        for key in self.profile.keyring.live() {
            self.trial_decryptions += 1;
            if let Ok(plain) = crypto::open(header_ct, &key.keypair) {
                return Some((key.id, message::parse_header(&plain)));
            }
        }
        None
    }

    async fn receive(
        &self,
        header_id: HashId,
        seq: u64,
        key_id: KeyId,
        header: MessageHeader,
    ) -> Result<StoredMessage, ClientError> {
        let body_ct = self
            .transport
            .fetch_blob(BlobKind::Body, &header_id)
            .await?;
        let attachment_ct = match header.attachment_hash {
            Some(_) => Some(
                self.transport
                    .fetch_blob(BlobKind::Attachment, &header_id)
                    .await?,
            ),
            None => None,
        };
        let keypair = &self
            .profile
            .keyring
            .get(key_id)
            .expect("key used for trial decryption is still held")
            .keypair;
        let opened =
            message::verify_and_open(&header, &body_ct, attachment_ct.as_deref(), keypair)?;
        let contact = self
            .profile
            .contacts
            .by_address(&header.from)
            .map(|c| c.alias.clone());
        let kind = if header.is_rotation() {
            MessageKind::KeyRotation
        } else {
            MessageKind::Mail
        };
        Ok(StoredMessage {
            header_id,
            seq,
            body_ct_hash: sha256(&body_ct),
            header,
            contact,
            kind,
            body: opened.body,
            attachment: opened.attachment,
            key_id,
            received_at: Utc::now(),
            read: false,
            acked: false,
        })
    }

    /// Applies rotation payloads received in one page, in arrival order. One
    /// sender's offers reach the server in the order they were made, so
    /// sequence order is causal order.
    async fn apply_rotations(&mut self, ids: &[HashId]) -> Result<usize, ClientError> {
        let offers: Vec<(String, RotationPayload, HashId)> = ids
            .iter()
            .filter_map(|id| {
                let msg = self.profile.state.mailstore.get(id)?;
                let alias = msg.contact.clone()?;
                let payload = RotationPayload::from_message(&msg.header, &msg.body)?;
                Some((alias, payload, *id))
            })
            .collect();

        let mut applied = 0;
        for (alias, payload, id) in offers {
            if self.apply_rotation(&alias, &payload).await? {
                applied += 1;
            }
            // Rotation messages are consumed here; purge them from the server.
            if let Err(e) = self.acknowledge(&id).await {
                tracing::debug!(error = %e, "could not acknowledge rotation message");
            }
        }
        Ok(applied)
    }

    async fn apply_rotation(
        &mut self,
        alias: &str,
        payload: &RotationPayload,
    ) -> Result<bool, ClientError> {
        let now = Utc::now();
        let contact = self
            .profile
            .contacts
            .get_mut(alias)
            .ok_or_else(|| ClientError::UnknownContact(alias.to_owned()))?;
        let key = payload.new_public_key;
        if key == contact.current_pub || contact.previous_pubs.contains(&key) {
            return Ok(false);
        }
        contact.last_peer_rotation = Some((payload.effective_from, key));
        contact.replace_key(payload.new_public_key);

        let old_key = contact.my_key;
        if contact.rotation_state == RotationState::Offered {
            // Our offer was answered, or both sides offered at once.
            contact.my_key = contact.pending_key.take().unwrap_or(old_key);
            contact.rotation_state = RotationState::Completed;
            self.retire_if_unused(old_key, now)?;
            self.persist()?;
        } else {
            // Answer with our own fresh key, sealed to the key just received.
            let new_key = self.profile.keyring.add(&mut OsRng)?;
            let contact = self.profile.contacts.get_mut(alias).expect("present");
            contact.my_key = new_key;
            contact.rotation_state = RotationState::Completed;
            self.retire_if_unused(old_key, now)?;
            let answer = RotationPayload {
                new_public_key: *self
                    .profile
                    .keyring
                    .get(new_key)
                    .expect("just added")
                    .keypair
                    .public(),
                effective_from: now.trunc_subsecs(0),
            };
            let body = serde_json::to_vec(&answer).expect("payload serializes");
            match self
                .send_kind(
                    alias,
                    ROTATION_SUBJECT,
                    &body,
                    None,
                    MessageKind::KeyRotation,
                )
                .await
            {
                // The answer stays in the outbox and goes out with the next retry.
                Err(e) if e.is_network() => {
                    tracing::warn!(error = %e, "rotation answer queued for retry")
                }
                other => {
                    other?;
                }
            }
        }
        Ok(true)
    }

    fn retire_if_unused(&mut self, key: KeyId, now: DateTime<Utc>) -> Result<(), ClientError> {
        if !self.profile.contacts.references(key) {
            self.profile.keyring.retire(key, now, &mut OsRng)?;
            self.profile
                .keyring
                .destroy_expired(now, self.options.key_grace);
        }
        Ok(())
    }

    /// Starts an in-band key exchange with `alias`: a fresh key pair is
    /// announced under the contact's current key.
    pub async fn rotate_keys(&mut self, alias: &str) -> Result<HashId, ClientError> {
        let contact = self
            .profile
            .contacts
            .get(alias)
            .ok_or_else(|| ClientError::UnknownContact(alias.to_owned()))?;
        if contact.rotation_state == RotationState::Offered {
            return Err(ClientError::RotationAlreadyPending(alias.to_owned()));
        }
        let new_key = self.profile.keyring.add(&mut OsRng)?;
        let payload = RotationPayload {
            new_public_key: *self
                .profile
                .keyring
                .get(new_key)
                .expect("just added")
                .keypair
                .public(),
            effective_from: Utc::now().trunc_subsecs(0),
        };
        let contact = self.profile.contacts.get_mut(alias).expect("checked above");
        contact.pending_key = Some(new_key);
        contact.rotation_state = RotationState::Offered;
        let body = serde_json::to_vec(&payload).expect("payload serializes");
        self.send_kind(
            alias,
            ROTATION_SUBJECT,
            &body,
            None,
            MessageKind::KeyRotation,
        )
        .await
    }

    /// Reveals the receipt preimage of a received message so the server purges it.
    pub async fn acknowledge(&mut self, header_id: &HashId) -> Result<bool, ClientError> {
        let msg = self
            .profile
            .state
            .mailstore
            .get(header_id)
            .ok_or(ClientError::NotInMailstore(*header_id))?;
        let receipt = ReceiptSecret::from_header(&msg.header)?;
        let purged = self.transport.acknowledge(&receipt.preimage).await?;
        if purged {
            if let Some(msg) = self.profile.state.mailstore.get_mut(header_id) {
                msg.acked = true;
            }
            self.persist()?;
        }
        Ok(purged)
    }

    /// Marks sent messages whose server record has been purged as delivered.
    async fn refresh_delivery(&mut self) -> Result<Vec<HashId>, ClientError> {
        let mut delivered = Vec::new();
        for i in 0..self.profile.state.outbox.len() {
            let entry = &self.profile.state.outbox[i];
            let (Some(seq), false) = (entry.seq, entry.delivered) else {
                continue;
            };
            let page = self
                .transport
                .list_headers(seq.saturating_sub(1), Some(1))
                .await?;
            let live = page
                .entries
                .first()
                .is_some_and(|e| e.header_id == entry.header_id);
            if !live {
                let entry = &mut self.profile.state.outbox[i];
                entry.delivered = true;
                delivered.push(entry.header_id);
            }
        }
        Ok(delivered)
    }

    /// Server statistics, passed through.
    pub async fn server_stats(&self) -> Result<crate::inbox::InboxStats, ClientError> {
        Ok(self.transport.stats().await?)
    }
}
