//! On-disk layout: `blobs/<sha256 hex>` for every ciphertext and `index.log`,
//! one JSON object per line, for record metadata. Nothing else is written.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::InboxError;
use crate::hash::HashId;

pub(super) enum BlobStore {
    Memory(HashMap<HashId, Vec<u8>>),
    Directory(PathBuf),
}

impl BlobStore {
    pub fn memory() -> Self {
        Self::Memory(HashMap::new())
    }

    pub fn directory(path: PathBuf) -> io::Result<Self> {
        fs::create_dir_all(&path)?;
        Ok(Self::Directory(path))
    }

    fn path(dir: &Path, id: &HashId) -> PathBuf {
        dir.join(id.to_hex())
    }

    pub fn put(&mut self, id: &HashId, data: &[u8]) -> io::Result<()> {
        match self {
            Self::Memory(map) => {
                map.insert(*id, data.to_vec());
                Ok(())
            }
            Self::Directory(dir) => {
                let target = Self::path(dir, id);
                if target.exists() {
                    return Ok(());
                }
                let tmp = dir.join(format!(".{}.tmp", id.to_hex()));
                let mut file = File::create(&tmp)?;
                file.write_all(data)?;
                file.sync_data()?;
                fs::rename(tmp, target)
            }
        }
    }

    pub fn get(&self, id: &HashId) -> io::Result<Option<Vec<u8>>> {
        match self {
            Self::Memory(map) => Ok(map.get(id).cloned()),
            Self::Directory(dir) => match fs::read(Self::path(dir, id)) {
                Ok(data) => Ok(Some(data)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e),
            },
        }
    }

    pub fn size(&self, id: &HashId) -> Option<u64> {
        match self {
            Self::Memory(map) => map.get(id).map(|d| d.len() as u64),
            Self::Directory(dir) => fs::metadata(Self::path(dir, id)).ok().map(|m| m.len()),
        }
    }

    pub fn remove(&mut self, id: &HashId) -> io::Result<()> {
        match self {
            Self::Memory(map) => {
                map.remove(id);
                Ok(())
            }
            Self::Directory(dir) => match fs::remove_file(Self::path(dir, id)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(super) enum LogEntry {
    Put {
        seq: u64,
        header_id: HashId,
        body_id: HashId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attachment_id: Option<HashId>,
        receipt_lock: HashId,
    },
    Purge {
        header_id: HashId,
        at: DateTime<Utc>,
    },
    /// A purged record carried over by compaction.
    Tombstone {
        seq: u64,
        header_id: HashId,
        receipt_lock: HashId,
        at: DateTime<Utc>,
    },
    /// Keeps sequence numbers from being reused after compaction.
    Seq { last_seq: u64 },
}

pub(super) struct IndexLog {
    path: PathBuf,
    file: File,
}

impl IndexLog {
    /// Opens the log and returns its entries. A torn final line left by a
    /// crash is discarded; corruption anywhere else is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogEntry>), InboxError> {
        let mut entries = Vec::new();
        let mut valid_len = 0u64;
        let data = match fs::read(path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut rest = &data[..];
        while !rest.is_empty() {
            let Some(end) = rest.iter().position(|&b| b == b'\n') else {
                tracing::warn!(path = %path.display(), "dropping torn index line");
                break;
            };
            let entry = serde_json::from_slice::<LogEntry>(&rest[..end])
                .map_err(|e| InboxError::Corrupt(e.to_string()))?;
            entries.push(entry);
            valid_len += end as u64 + 1;
            rest = &rest[end + 1..];
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok((
            Self {
                path: path.to_owned(),
                file,
            },
            entries,
        ))
    }

    pub fn append(&mut self, entry: &LogEntry) -> io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }

    pub fn rewrite(&mut self, entries: &[LogEntry]) -> io::Result<()> {
        let tmp = self.path.with_extension("log.tmp");
        {
            let mut out = File::create(&tmp)?;
            for entry in entries {
                let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
                line.push(b'\n');
                out.write_all(&line)?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new()
            .append(true)
            .read(true)
            .open(&self.path)?;
        Ok(())
    }
}
