//! Settings resolution: flags, then environment, then the config file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use warp2_core::inbox::ServerConfig;

use crate::output::Failure;

pub const DEFAULT_SERVER_URL: &str = "http://127.0.0.1:8470";
pub const DEFAULT_DAEMON_LISTEN: &str = "127.0.0.1:8471";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub server_url: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub identity: Option<String>,
    pub output: Option<OutputMode>,
    pub round_dates_to_hour: Option<bool>,
    pub key_grace_days: Option<i64>,
    pub daemon: DaemonFileConfig,
    pub server: ServerConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonFileConfig {
    pub listen: Option<SocketAddr>,
    pub token_file: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Human,
    Json,
}

pub fn default_config_path() -> Option<PathBuf> {
    dirs::config_dir().map(|d| d.join("warp2").join("config.toml"))
}

/// Reads the config file. A missing file is only an error when named explicitly.
pub fn load(explicit: Option<&Path>) -> Result<FileConfig, Failure> {
    let (path, required) = match explicit {
        Some(p) => (p.to_owned(), true),
        None => match default_config_path() {
            Some(p) => (p, false),
            None => return Ok(FileConfig::default()),
        },
    };
    match std::fs::read_to_string(&path) {
        Ok(text) => toml::from_str(&text)
            .map_err(|e| Failure::user("bad-config", format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => {
            Ok(FileConfig::default())
        }
        Err(e) => Err(Failure::user(
            "bad-config",
            format!("{}: {e}", path.display()),
        )),
    }
}

pub fn default_data_dir() -> PathBuf {
    dirs::data_dir()
        .map(|d| d.join("warp2"))
        .unwrap_or_else(|| PathBuf::from(".warp2"))
}

/// Creates `dir` readable by its owner only.
pub fn ensure_private_dir(dir: &Path) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::{DirBuilderExt, PermissionsExt};
        if !dir.exists() {
            std::fs::DirBuilder::new()
                .recursive(true)
                .mode(0o700)
                .create(dir)?;
            std::fs::set_permissions(dir, std::fs::Permissions::from_mode(0o700))?;
        }
    }
    #[cfg(not(unix))]
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `contents` to a file only the owner can read.
pub fn write_private(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    std::io::Write::write_all(&mut opts.open(path)?, contents)
}
