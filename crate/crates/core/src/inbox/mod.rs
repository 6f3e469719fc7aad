//! The shared public inbox.
//!
//! One append-only pool of envelopes for every user. Records are keyed by the
//! hash of their sealed header and carry nothing but ciphertext, hashes and an
//! arrival sequence number. A record is purged when someone presents a value
//! whose hash equals its receipt lock.

pub mod api;
pub mod config;
pub mod http;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};

use crate::crypto::SEAL_OVERHEAD;
use crate::hash::{sha256, HashId};
use crate::message::{BlobKind, Envelope, ReceiptSecret, HEADER_CT_LEN};

pub use api::{HeaderEntry, HeaderPage, InboxStats, UploadReceipt};
pub use config::ServerConfig;
use store::{BlobStore, IndexLog, LogEntry};

pub const DEFAULT_PAGE_LIMIT: usize = 1000;
pub const DEFAULT_BLOB_LIMIT: usize = 25 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum InboxError {
    #[error("{kind} blob is {size} bytes, limit is {limit}")]
    OversizeBlob {
        kind: BlobKind,
        size: usize,
        limit: usize,
    },
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(&'static str),
    #[error("no such message")]
    NotFound,
    #[error("message has no attachment")]
    NoAttachment,
    #[error("rate limited")]
    RateLimited,
    #[error("corrupt inbox index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct InboxOptions {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub page_limit: usize,
    pub blob_limit: usize,
    /// How long a purged record's tombstone is kept before [`Inbox::compact`] drops it.
    pub tombstone_retention: Duration,
}

impl Default for InboxOptions {
    fn default() -> Self {
        Self {
            data_dir: None,
            page_limit: DEFAULT_PAGE_LIMIT,
            blob_limit: DEFAULT_BLOB_LIMIT,
            tombstone_retention: Duration::from_secs(30 * 24 * 3600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordState {
    Live,
    Purged { at: DateTime<Utc> },
}

/// One stored message as the server sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboxRecord {
    pub header_id: HashId,
    pub seq: u64,
    pub header_ct: Vec<u8>,
    pub body_ct: Option<Vec<u8>>,
    pub attachment_ct: Option<Vec<u8>>,
    pub receipt_lock: HashId,
    pub state: RecordState,
}

#[derive(Debug, Clone)]
struct Meta {
    header_id: HashId,
    header_ct: Vec<u8>,
    body_id: HashId,
    attachment_id: Option<HashId>,
    receipt_lock: HashId,
    bytes: u64,
    state: RecordState,
}

impl Meta {
    fn blob_ids(&self) -> impl Iterator<Item = HashId> {
        [Some(self.header_id), Some(self.body_id), self.attachment_id]
            .into_iter()
            .flatten()
    }
}

struct State {
    last_seq: u64,
    records: BTreeMap<u64, Meta>,
    by_id: HashMap<HashId, u64>,
    by_lock: HashMap<HashId, Vec<u64>>,
    live: u64,
    purged: u64,
    live_bytes: u64,
    /// Live records referencing each blob. Two envelopes may carry the same
    /// content blob, and purging one must not delete the other's copy.
    blob_refs: HashMap<HashId, u32>,
    blobs: BlobStore,
    log: Option<IndexLog>,
}

pub struct Inbox {
    options: InboxOptions,
    state: Mutex<State>,
}

impl Inbox {
    pub fn in_memory(options: InboxOptions) -> Self {
        Self {
            options: InboxOptions {
                data_dir: None,
                ..options
            },
            state: Mutex::new(State::empty(BlobStore::memory(), None)),
        }
    }

    /// Opens (or creates) a persistent inbox under `options.data_dir`.
    pub fn open(options: InboxOptions) -> Result<Self, InboxError> {
        let Some(dir) = options.data_dir.clone() else {
            return Ok(Self::in_memory(options));
        };
        let blobs = BlobStore::directory(dir.join("blobs"))?;
        let (log, entries) = IndexLog::open(&dir.join("index.log"))?;
        let mut state = State::empty(blobs, None);
        state.replay(entries)?;
        state.log = Some(log);
        Ok(Self {
            options,
            state: Mutex::new(state),
        })
    }

    pub fn options(&self) -> &InboxOptions {
        &self.options
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn upload(&self, envelope: &Envelope) -> Result<UploadReceipt, InboxError> {
        if envelope.header_ct.len() != HEADER_CT_LEN {
            return Err(InboxError::MalformedEnvelope(
                "header ciphertext has the wrong size",
            ));
        }
        let blobs = std::iter::once((BlobKind::Body, &envelope.body_ct)).chain(
            envelope
                .attachment_ct
                .iter()
                .map(|a| (BlobKind::Attachment, a)),
        );
        for (kind, blob) in blobs {
            if blob.len() <= SEAL_OVERHEAD {
                return Err(InboxError::MalformedEnvelope("content blob too short"));
            }
            if blob.len() > self.options.blob_limit {
                return Err(InboxError::OversizeBlob {
                    kind,
                    size: blob.len(),
                    limit: self.options.blob_limit,
                });
            }
        }

        let header_id = envelope.header_id();
        let mut state = self.lock();
        if let Some(&seq) = state.by_id.get(&header_id) {
            return Ok(UploadReceipt { header_id, seq });
        }

        let body_id = sha256(envelope.body_ct.as_bytes());
        let attachment_id = envelope
            .attachment_ct
            .as_ref()
            .map(|a| sha256(a.as_bytes()));
        state.blobs.put(&header_id, envelope.header_ct.as_bytes())?;
        state.blobs.put(&body_id, envelope.body_ct.as_bytes())?;
        if let (Some(id), Some(ct)) = (&attachment_id, &envelope.attachment_ct) {
            state.blobs.put(id, ct.as_bytes())?;
        }

        let seq = state.last_seq + 1;
        let entry = LogEntry::Put {
            seq,
            header_id,
            body_id,
            attachment_id,
            receipt_lock: envelope.receipt_lock,
        };
        if let Some(log) = state.log.as_mut() {
            log.append(&entry)?;
        }
        let bytes = (envelope.header_ct.len()
            + envelope.body_ct.len()
            + envelope.attachment_ct.as_ref().map_or(0, |a| a.len())) as u64;
        state.insert(
            seq,
            Meta {
                header_id,
                header_ct: envelope.header_ct.as_bytes().to_vec(),
                body_id,
                attachment_id,
                receipt_lock: envelope.receipt_lock,
                bytes,
                state: RecordState::Live,
            },
        );
        tracing::debug!(%header_id, seq, "stored envelope");
        Ok(UploadReceipt { header_id, seq })
    }

    /// Live headers with `seq > after`, oldest first.
    pub fn list_headers(&self, after: u64, limit: Option<usize>) -> HeaderPage {
        let limit = limit
            .unwrap_or(self.options.page_limit)
            .clamp(1, self.options.page_limit);
        let state = self.lock();
        let mut entries = Vec::new();
        let mut next_cursor = after;
        for (&seq, meta) in state.records.range(after.saturating_add(1)..) {
            if entries.len() == limit {
                break;
            }
            next_cursor = seq;
            if meta.state == RecordState::Live {
                entries.push(HeaderEntry {
                    seq,
                    header_id: meta.header_id,
                    header_ct: crate::Ciphertext::from_bytes(meta.header_ct.clone()),
                });
            }
        }
        HeaderPage {
            entries,
            next_cursor,
        }
    }

    pub fn fetch_blob(&self, kind: BlobKind, header_id: &HashId) -> Result<Vec<u8>, InboxError> {
        let state = self.lock();
        let meta = state
            .by_id
            .get(header_id)
            .and_then(|seq| state.records.get(seq))
            .filter(|m| m.state == RecordState::Live)
            .ok_or(InboxError::NotFound)?;
        let blob_id = match kind {
            BlobKind::Body => meta.body_id,
            BlobKind::Attachment => meta.attachment_id.ok_or(InboxError::NoAttachment)?,
        };
        state.blobs.get(&blob_id)?.ok_or(InboxError::NotFound)
    }

    /// Purges every live record whose lock is `sha256(receipt.preimage)`.
    ///
    /// Unknown or replayed values return `false` and change nothing.
    pub fn acknowledge(&self, receipt: &ReceiptSecret) -> Result<bool, InboxError> {
        let lock = receipt.lock();
        let mut state = self.lock();
        let Some(seqs) = state.by_lock.get(&lock).cloned() else {
            return Ok(false);
        };
        let now = Utc::now();
        let mut purged = false;
        for seq in seqs {
            let header_id = match state.records.get(&seq) {
                Some(meta) if meta.state == RecordState::Live => meta.header_id,
                _ => continue,
            };
            if let Some(log) = state.log.as_mut() {
                log.append(&LogEntry::Purge { header_id, at: now })?;
            }
            state.purge(seq, now)?;
            purged = true;
        }
        Ok(purged)
    }

    pub fn stats(&self) -> InboxStats {
        let state = self.lock();
        InboxStats {
            live: state.live,
            purged: state.purged,
            bytes: state.live_bytes,
        }
    }

    pub fn record(&self, header_id: &HashId) -> Option<InboxRecord> {
        let state = self.lock();
        let seq = *state.by_id.get(header_id)?;
        let meta = state.records.get(&seq)?;
        let live = meta.state == RecordState::Live;
        Some(InboxRecord {
            header_id: meta.header_id,
            seq,
            header_ct: meta.header_ct.clone(),
            body_ct: if live {
                state.blobs.get(&meta.body_id).ok().flatten()
            } else {
                None
            },
            attachment_ct: match (live, meta.attachment_id) {
                (true, Some(id)) => state.blobs.get(&id).ok().flatten(),
                _ => None,
            },
            receipt_lock: meta.receipt_lock,
            state: meta.state,
        })
    }

    /// Every hash the server would show to anyone: header ids and receipt locks.
    pub fn visible_hashes(&self) -> Vec<HashId> {
        let state = self.lock();
        state
            .records
            .values()
            .flat_map(|m| [m.header_id, m.receipt_lock])
            .collect()
    }

    /// Drops tombstones older than the retention window and rewrites the index.
    pub fn compact(&self, now: DateTime<Utc>) -> Result<usize, InboxError> {
        let retention = chrono::Duration::from_std(self.options.tombstone_retention)
            .unwrap_or(chrono::Duration::MAX);
        let mut state = self.lock();
        let expired: Vec<u64> = state
            .records
            .iter()
            .filter_map(|(&seq, m)| match m.state {
                RecordState::Purged { at } if now - at >= retention => Some(seq),
                _ => None,
            })
            .collect();
        if expired.is_empty() {
            return Ok(0);
        }
        for seq in &expired {
            state.forget(*seq);
        }
        let entries = state.snapshot_entries();
        if let Some(log) = state.log.as_mut() {
            log.rewrite(&entries)?;
        }
        Ok(expired.len())
    }
}

impl State {
    fn empty(blobs: BlobStore, log: Option<IndexLog>) -> Self {
        Self {
            last_seq: 0,
            records: BTreeMap::new(),
            by_id: HashMap::new(),
            by_lock: HashMap::new(),
            live: 0,
            purged: 0,
            live_bytes: 0,
            blob_refs: HashMap::new(),
            blobs,
            log,
        }
    }

    fn insert(&mut self, seq: u64, meta: Meta) {
        self.last_seq = self.last_seq.max(seq);
        self.by_id.insert(meta.header_id, seq);
        self.by_lock.entry(meta.receipt_lock).or_default().push(seq);
        match meta.state {
            RecordState::Live => {
                self.live += 1;
                self.live_bytes += meta.bytes;
                for id in meta.blob_ids() {
                    *self.blob_refs.entry(id).or_default() += 1;
                }
            }
            RecordState::Purged { .. } => self.purged += 1,
        }
        self.records.insert(seq, meta);
    }

    fn purge(&mut self, seq: u64, at: DateTime<Utc>) -> Result<(), InboxError> {
        let Some(meta) = self.records.get_mut(&seq) else {
            return Ok(());
        };
        if meta.state != RecordState::Live {
            return Ok(());
        }
        meta.state = RecordState::Purged { at };
        meta.header_ct = Vec::new();
        let ids: Vec<HashId> = meta.blob_ids().collect();
        self.live -= 1;
        self.purged += 1;
        self.live_bytes -= meta.bytes;
        for id in ids {
            let refs = self.blob_refs.entry(id).or_default();
            *refs = refs.saturating_sub(1);
            if *refs == 0 {
                self.blob_refs.remove(&id);
                self.blobs.remove(&id)?;
            }
        }
        Ok(())
    }

    fn forget(&mut self, seq: u64) {
        if let Some(meta) = self.records.remove(&seq) {
            self.by_id.remove(&meta.header_id);
            if let Some(v) = self.by_lock.get_mut(&meta.receipt_lock) {
                v.retain(|s| *s != seq);
                if v.is_empty() {
                    self.by_lock.remove(&meta.receipt_lock);
                }
            }
            self.purged -= 1;
        }
    }

    fn replay(&mut self, entries: Vec<LogEntry>) -> Result<(), InboxError> {
        // Blobs of purged records may already be gone, so learn purges first.
        let purged: HashMap<HashId, DateTime<Utc>> = entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Purge { header_id, at } => Some((*header_id, *at)),
                _ => None,
            })
            .collect();
        let mut leftovers = Vec::new();
        for entry in entries {
            match entry {
                LogEntry::Put {
                    seq,
                    header_id,
                    body_id,
                    attachment_id,
                    receipt_lock,
                } => {
                    let mut meta = Meta {
                        header_id,
                        header_ct: Vec::new(),
                        body_id,
                        attachment_id,
                        receipt_lock,
                        bytes: 0,
                        state: RecordState::Live,
                    };
                    if let Some(&at) = purged.get(&header_id) {
                        meta.state = RecordState::Purged { at };
                        leftovers.extend(meta.blob_ids());
                    } else {
                        meta.header_ct = self.blobs.get(&header_id)?.ok_or_else(|| {
                            InboxError::Corrupt(format!("missing header blob {header_id}"))
                        })?;
                        let size = |id: &HashId| self.blobs.size(id).unwrap_or(0);
                        meta.bytes = meta.header_ct.len() as u64
                            + size(&body_id)
                            + attachment_id.as_ref().map_or(0, size);
                    }
                    self.insert(seq, meta);
                }
                LogEntry::Tombstone {
                    seq,
                    header_id,
                    receipt_lock,
                    at,
                } => self.insert(
                    seq,
                    Meta {
                        header_id,
                        header_ct: Vec::new(),
                        body_id: header_id,
                        attachment_id: None,
                        receipt_lock,
                        bytes: 0,
                        state: RecordState::Purged { at },
                    },
                ),
                LogEntry::Purge { .. } => {}
                LogEntry::Seq { last_seq } => self.last_seq = self.last_seq.max(last_seq),
            }
        }
        // Finish blob deletions a crash may have interrupted.
        for id in leftovers {
            if !self.blob_refs.contains_key(&id) {
                self.blobs.remove(&id)?;
            }
        }
        Ok(())
    }

    /// Minimal log reproducing the current state.
    fn snapshot_entries(&self) -> Vec<LogEntry> {
        let mut out = vec![LogEntry::Seq {
            last_seq: self.last_seq,
        }];
        for (&seq, m) in &self.records {
            out.push(match m.state {
                RecordState::Live => LogEntry::Put {
                    seq,
                    header_id: m.header_id,
                    body_id: m.body_id,
                    attachment_id: m.attachment_id,
                    receipt_lock: m.receipt_lock,
                },
                RecordState::Purged { at } => LogEntry::Tombstone {
                    seq,
                    header_id: m.header_id,
                    receipt_lock: m.receipt_lock,
                    at,
                },
            });
        }
        out
    }
}
