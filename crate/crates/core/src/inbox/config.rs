//! Server configuration: TOML file, then `WARP2_SERVER_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{InboxOptions, DEFAULT_BLOB_LIMIT, DEFAULT_PAGE_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub page_limit: usize,
    pub blob_limit: usize,
    /// Uploads per minute per client address; 0 disables the limit.
    pub upload_rate_per_min: u32,
    /// Receipt submissions per minute per client address; 0 disables the limit.
    pub receipt_rate_per_min: u32,
    pub tombstone_retention_secs: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8470)),
            data_dir: PathBuf::from("warp2-inbox"),
            page_limit: DEFAULT_PAGE_LIMIT,
            blob_limit: DEFAULT_BLOB_LIMIT,
            upload_rate_per_min: 60,
            receipt_rate_per_min: 600,
            tombstone_retention_secs: 30 * 24 * 3600,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("environment variable {name}: {reason}")]
    Env { name: &'static str, reason: String },
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    /// Applies `WARP2_SERVER_LISTEN`, `WARP2_SERVER_DATA_DIR`, `WARP2_SERVER_PAGE_LIMIT`,
    /// `WARP2_SERVER_BLOB_LIMIT`, `WARP2_SERVER_UPLOAD_RATE`, `WARP2_SERVER_RECEIPT_RATE`
    /// and `WARP2_SERVER_TOMBSTONE_RETENTION_SECS` from `lookup`.
    pub fn apply_env<F>(&mut self, lookup: F) -> Result<(), ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        fn parse<T: std::str::FromStr>(name: &'static str, v: String) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| ConfigError::Env {
                name,
                reason: e.to_string(),
            })
        }
        if let Some(v) = lookup("WARP2_SERVER_LISTEN") {
            self.listen = parse("WARP2_SERVER_LISTEN", v)?;
        }
        if let Some(v) = lookup("WARP2_SERVER_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup("WARP2_SERVER_PAGE_LIMIT") {
            self.page_limit = parse("WARP2_SERVER_PAGE_LIMIT", v)?;
        }
        if let Some(v) = lookup("WARP2_SERVER_BLOB_LIMIT") {
            self.blob_limit = parse("WARP2_SERVER_BLOB_LIMIT", v)?;
        }
        if let Some(v) = lookup("WARP2_SERVER_UPLOAD_RATE") {
            self.upload_rate_per_min = parse("WARP2_SERVER_UPLOAD_RATE", v)?;
        }
        if let Some(v) = lookup("WARP2_SERVER_RECEIPT_RATE") {
            self.receipt_rate_per_min = parse("WARP2_SERVER_RECEIPT_RATE", v)?;
        }
        if let Some(v) = lookup("WARP2_SERVER_TOMBSTONE_RETENTION_SECS") {
            self.tombstone_retention_secs = parse("WARP2_SERVER_TOMBSTONE_RETENTION_SECS", v)?;
        }
        Ok(())
    }

    pub fn inbox_options(&self) -> InboxOptions {
        InboxOptions {
            data_dir: Some(self.data_dir.clone()),
            page_limit: self.page_limit.max(1),
            blob_limit: self.blob_limit,
            tombstone_retention: Duration::from_secs(self.tombstone_retention_secs),
        }
    }
}
