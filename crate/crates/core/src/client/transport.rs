//! How a client reaches an inbox: in-process, or over the `/v1` HTTP API.

use async_trait::async_trait;
use reqwest::StatusCode;

use crate::hash::HashId;
use crate::inbox::api::{
    AttachmentResponse, BodyResponse, ErrorBody, ReceiptRequest, ReceiptResponse,
};
use crate::inbox::{HeaderPage, Inbox, InboxError, InboxStats, UploadReceipt};
use crate::message::{BlobKind, Envelope, ReceiptSecret};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("network failure: {0}")]
    Network(String),
    /// The server answered with an error. `code` is the API's machine code.
    #[error("server rejected request ({code}): {message}")]
    Rejected { code: String, message: String },
}

impl TransportError {
    pub fn is_network(&self) -> bool {
        matches!(self, Self::Network(_))
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Rejected { code, .. } => Some(code),
            Self::Network(_) => None,
        }
    }
}

impl From<InboxError> for TransportError {
    fn from(e: InboxError) -> Self {
        let code = match &e {
            InboxError::OversizeBlob { .. } => "oversize-blob",
            InboxError::MalformedEnvelope(_) => "malformed-envelope",
            InboxError::NotFound => "not-found",
            InboxError::NoAttachment => "no-attachment",
            InboxError::RateLimited => "rate-limited",
            InboxError::Corrupt(_) | InboxError::Io(_) => "internal",
        };
        Self::Rejected {
            code: code.to_owned(),
            message: e.to_string(),
        }
    }
}

#[async_trait]
pub trait InboxTransport: Send + Sync {
    async fn upload(&self, envelope: &Envelope) -> Result<UploadReceipt, TransportError>;
    async fn list_headers(
        &self,
        after: u64,
        limit: Option<usize>,
    ) -> Result<HeaderPage, TransportError>;
    async fn fetch_blob(
        &self,
        kind: BlobKind,
        header_id: &HashId,
    ) -> Result<Vec<u8>, TransportError>;
    async fn acknowledge(&self, preimage: &HashId) -> Result<bool, TransportError>;
    async fn stats(&self) -> Result<InboxStats, TransportError>;
}

#[async_trait]
impl InboxTransport for Inbox {
    async fn upload(&self, envelope: &Envelope) -> Result<UploadReceipt, TransportError> {
        Ok(Inbox::upload(self, envelope)?)
    }

    async fn list_headers(
        &self,
        after: u64,
        limit: Option<usize>,
    ) -> Result<HeaderPage, TransportError> {
        Ok(Inbox::list_headers(self, after, limit))
    }

    async fn fetch_blob(
        &self,
        kind: BlobKind,
        header_id: &HashId,
    ) -> Result<Vec<u8>, TransportError> {
        Ok(Inbox::fetch_blob(self, kind, header_id)?)
    }

    async fn acknowledge(&self, preimage: &HashId) -> Result<bool, TransportError> {
        Ok(Inbox::acknowledge(
            self,
            &ReceiptSecret {
                preimage: *preimage,
            },
        )?)
    }

    async fn stats(&self) -> Result<InboxStats, TransportError> {
        Ok(Inbox::stats(self))
    }
}

/// Client for a remote inbox's `/v1` API.
#[derive(Debug, Clone)]
pub struct HttpInbox {
    base: String,
    http: reqwest::Client,
}

impl HttpInbox {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: serde::de::DeserializeOwned>(
        resp: reqwest::Response,
    ) -> Result<T, TransportError> {
        let status = resp.status();
        if status.is_success() {
            return resp
                .json()
                .await
                .map_err(|e| TransportError::Network(e.to_string()));
        }
        match resp.json::<ErrorBody>().await {
            Ok(body) => Err(TransportError::Rejected {
                code: body.error,
                message: body.message,
            }),
            Err(_) if status == StatusCode::PAYLOAD_TOO_LARGE => Err(TransportError::Rejected {
                code: "oversize-blob".into(),
                message: status.to_string(),
            }),
            Err(_) => Err(TransportError::Rejected {
                code: "bad-request".into(),
                message: status.to_string(),
            }),
        }
    }
}

fn net(e: reqwest::Error) -> TransportError {
    TransportError::Network(e.to_string())
}

#[async_trait]
impl InboxTransport for HttpInbox {
    async fn upload(&self, envelope: &Envelope) -> Result<UploadReceipt, TransportError> {
        let resp = self
            .http
            .post(format!("{}/v1/messages", self.base))
            .json(envelope)
            .send()
            .await
            .map_err(net)?;
        Self::decode(resp).await
    }

    async fn list_headers(
        &self,
        after: u64,
        limit: Option<usize>,
    ) -> Result<HeaderPage, TransportError> {
        let mut req = self
            .http
            .get(format!("{}/v1/headers", self.base))
            .query(&[("after", after)]);
        if let Some(limit) = limit {
            req = req.query(&[("limit", limit)]);
        }
        Self::decode(req.send().await.map_err(net)?).await
    }

    async fn fetch_blob(
        &self,
        kind: BlobKind,
        header_id: &HashId,
    ) -> Result<Vec<u8>, TransportError> {
        let resp = self
            .http
            .get(format!("{}/v1/blob/{}/{}", self.base, kind, header_id))
            .send()
            .await
            .map_err(net)?;
        Ok(match kind {
            BlobKind::Body => Self::decode::<BodyResponse>(resp)
                .await?
                .body_ct
                .into_bytes(),
            BlobKind::Attachment => Self::decode::<AttachmentResponse>(resp)
                .await?
                .attachment_ct
                .into_bytes(),
        })
    }

    async fn acknowledge(&self, preimage: &HashId) -> Result<bool, TransportError> {
        let resp = self
            .http
            .post(format!("{}/v1/receipts", self.base))
            .json(&ReceiptRequest {
                preimage: *preimage,
            })
            .send()
            .await
            .map_err(net)?;
        Ok(Self::decode::<ReceiptResponse>(resp).await?.purged)
    }

    async fn stats(&self) -> Result<InboxStats, TransportError> {
        let resp = self
            .http
            .get(format!("{}/v1/stats", self.base))
            .send()
            .await
            .map_err(net)?;
        Self::decode(resp).await
    }
}
