//! JSON bodies of the `/v1` inbox API. Blobs travel as standard base64.

use serde::{Deserialize, Serialize};

use crate::crypto::Ciphertext;
use crate::hash::HashId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReceipt {
    pub header_id: HashId,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub seq: u64,
    pub header_id: HashId,
    pub header_ct: Ciphertext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderPage {
    pub entries: Vec<HeaderEntry>,
    pub next_cursor: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InboxStats {
    pub live: u64,
    pub purged: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadersQuery {
    #[serde(default)]
    pub after: u64,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyResponse {
    pub body_ct: Ciphertext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttachmentResponse {
    pub attachment_ct: Ciphertext,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReceiptRequest {
    pub preimage: HashId,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReceiptResponse {
    pub purged: bool,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Stable machine code: `oversize-blob`, `malformed-envelope`, `not-found`,
    /// `no-attachment`, `rate-limited`, `bad-request` or `internal`.
    pub error: String,
    pub message: String,
}
