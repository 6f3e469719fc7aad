//! Human text or versioned JSON lines, and the exit-code contract.

use std::process::ExitCode;

use serde::Serialize;
use serde_json::{json, Map, Value};
use warp2_core::client::daemon::error_code;
use warp2_core::client::{ClientError, StoreError};

use crate::config::OutputMode;

/// Version of the JSON line format. Every line carries it as `v`.
pub const SCHEMA_VERSION: u64 = 1;

pub const EXIT_USER: u8 = 1;
pub const EXIT_NETWORK: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl Failure {
    pub fn user(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_USER,
            code,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_INTERNAL,
            code: "internal",
            message: message.into(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        let (_, code) = error_code(&e);
        let exit = match &e {
            ClientError::Transport(t) => match t.code() {
                Some("oversize-blob" | "malformed-envelope") => EXIT_USER,
                _ => EXIT_NETWORK,
            },
            ClientError::Store(StoreError::Decrypt) => {
                return Failure::user("bad-passphrase", e.to_string());
            }
            ClientError::Crypto(_) | ClientError::Store(_) => EXIT_INTERNAL,
            _ => EXIT_USER,
        };
        Self {
            exit,
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::internal(e.to_string())
    }
}

pub struct Output {
    pub mode: OutputMode,
}

impl Output {
    /// Prints one record: a JSON line tagged with `kind`, or the human rendering.
    pub fn emit<T: Serialize>(&self, kind: &str, value: &T, human: impl FnOnce() -> String) {
        match self.mode {
            OutputMode::Json => println!("{}", line(kind, value)),
            OutputMode::Human => {
                let text = human();
                if !text.is_empty() {
                    println!("{text}");
                }
            }
        }
    }

    pub fn fail(&self, f: &Failure) -> ExitCode {
        match self.mode {
            OutputMode::Json => eprintln!(
                "{}",
                line(
                    "error",
                    &json!({"code": f.code, "exit": f.exit, "message": f.message})
                )
            ),
            OutputMode::Human => eprintln!("warp2: {}", f.message),
        }
        ExitCode::from(f.exit)
    }
}

pub fn line<T: Serialize>(kind: &str, value: &T) -> String {
    let mut obj = Map::new();
    obj.insert("v".into(), SCHEMA_VERSION.into());
    obj.insert("kind".into(), kind.into());
    match serde_json::to_value(value).expect("output values serialize") {
        Value::Object(fields) => obj.extend(fields),
        Value::Null => {}
        other => {
            obj.insert("value".into(), other);
        }
    }
    Value::Object(obj).to_string()
}
