//! HTTP/JSON front end for [`Inbox`].
//!
//! Plain HTTP only. Deployments put a TLS-terminating proxy in front.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{ConnectInfo, DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use tokio::net::TcpListener;

use super::api::{
    AttachmentResponse, BodyResponse, ErrorBody, HeadersQuery, ReceiptRequest, ReceiptResponse,
};
use super::{Inbox, InboxError, ServerConfig};
use crate::crypto::Ciphertext;
use crate::hash::HashId;
use crate::message::{BlobKind, Envelope, ReceiptSecret};

/// Token bucket per client address.
pub struct RateLimiter {
    per_minute: u32,
    buckets: Mutex<HashMap<IpAddr, (f64, Instant)>>,
}

impl RateLimiter {
    /// `per_minute == 0` admits everything.
    pub fn new(per_minute: u32) -> Self {
        Self {
            per_minute,
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn check(&self, addr: IpAddr) -> bool {
        self.check_at(addr, Instant::now())
    }

    fn check_at(&self, addr: IpAddr, now: Instant) -> bool {
        if self.per_minute == 0 {
            return true;
        }
        let capacity = f64::from(self.per_minute);
        let refill_per_sec = capacity / 60.0;
        let mut buckets = self.buckets.lock().unwrap_or_else(|e| e.into_inner());
        if buckets.len() > 100_000 {
            buckets.retain(|_, (_, last)| now.duration_since(*last) < Duration::from_secs(60));
        }
        let (tokens, last) = buckets.entry(addr).or_insert((capacity, now));
        let elapsed = now.saturating_duration_since(*last).as_secs_f64();
        *tokens = (*tokens + elapsed * refill_per_sec).min(capacity);
        *last = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Clone)]
pub struct ServerState {
    pub inbox: Arc<Inbox>,
    pub uploads: Arc<RateLimiter>,
    pub receipts: Arc<RateLimiter>,
}

impl ServerState {
    pub fn new(inbox: Arc<Inbox>, upload_rate_per_min: u32, receipt_rate_per_min: u32) -> Self {
        Self {
            inbox,
            uploads: Arc::new(RateLimiter::new(upload_rate_per_min)),
            receipts: Arc::new(RateLimiter::new(receipt_rate_per_min)),
        }
    }
}

pub struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.1.to_owned(),
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

impl From<InboxError> for ApiError {
    fn from(e: InboxError) -> Self {
        let (status, code) = match &e {
            InboxError::OversizeBlob { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "oversize-blob"),
            InboxError::MalformedEnvelope(_) => (StatusCode::BAD_REQUEST, "malformed-envelope"),
            InboxError::NotFound => (StatusCode::NOT_FOUND, "not-found"),
            InboxError::NoAttachment => (StatusCode::NOT_FOUND, "no-attachment"),
            InboxError::RateLimited => (StatusCode::TOO_MANY_REQUESTS, "rate-limited"),
            InboxError::Corrupt(_) | InboxError::Io(_) => {
                tracing::error!(error = %e, "inbox failure");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        ApiError(status, code, e.to_string())
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, InboxError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn client_ip(info: Option<Extension<ConnectInfo<SocketAddr>>>) -> IpAddr {
    info.map_or(
        IpAddr::from([127, 0, 0, 1]),
        |Extension(ConnectInfo(addr))| addr.ip(),
    )
}

async fn upload(
    State(state): State<ServerState>,
    info: Option<Extension<ConnectInfo<SocketAddr>>>,
    Json(envelope): Json<Envelope>,
) -> Result<impl IntoResponse, ApiError> {
    if !state.uploads.check(client_ip(info)) {
        return Err(InboxError::RateLimited.into());
    }
    let inbox = state.inbox.clone();
    let receipt = blocking(move || inbox.upload(&envelope)).await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn headers(
    State(state): State<ServerState>,
    Query(query): Query<HeadersQuery>,
) -> impl IntoResponse {
    Json(state.inbox.list_headers(query.after, query.limit))
}

fn parse_id(raw: &str) -> Result<HashId, ApiError> {
    raw.parse().map_err(|e: crate::hash::HashIdError| {
        ApiError(StatusCode::BAD_REQUEST, "bad-request", e.to_string())
    })
}

async fn body_blob(
    State(state): State<ServerState>,
    Path(id): Path<String>,
) -> Result<Json<BodyResponse>, ApiError> {
    let id = parse_id(&id)?;
    let inbox = state.inbox.clone();
    let data = blocking(move || inbox.fetch_blob(BlobKind::Body, &id)).await?;
    Ok(Json(BodyResponse {
        body_ct: Ciphertext::from_bytes(data),
    }))
}

async fn attachment_blob(
    State(state): State<ServerState>,
    Path(id): Path<String>,
) -> Result<Json<AttachmentResponse>, ApiError> {
    let id = parse_id(&id)?;
    let inbox = state.inbox.clone();
    let data = blocking(move || inbox.fetch_blob(BlobKind::Attachment, &id)).await?;
    Ok(Json(AttachmentResponse {
        attachment_ct: Ciphertext::from_bytes(data),
    }))
}

async fn receipts(
    State(state): State<ServerState>,
    info: Option<Extension<ConnectInfo<SocketAddr>>>,
    Json(req): Json<ReceiptRequest>,
) -> Result<Json<ReceiptResponse>, ApiError> {
    if !state.receipts.check(client_ip(info)) {
        return Err(InboxError::RateLimited.into());
    }
    let inbox = state.inbox.clone();
    let purged = blocking(move || {
        inbox.acknowledge(&ReceiptSecret {
            preimage: req.preimage,
        })
    })
    .await?;
    Ok(Json(ReceiptResponse { purged }))
}

async fn stats(State(state): State<ServerState>) -> impl IntoResponse {
    Json(state.inbox.stats())
}

pub fn router(state: ServerState) -> Router {
    // base64 inflates by 4/3; leave room for body + attachment + header and framing.
    let body_limit = state
        .inbox
        .options()
        .blob_limit
        .saturating_mul(3)
        .saturating_add(64 * 1024);
    Router::new()
        .route("/v1/messages", post(upload))
        .route("/v1/headers", get(headers))
        .route("/v1/blob/body/{id}", get(body_blob))
        .route("/v1/blob/attachment/{id}", get(attachment_blob))
        .route("/v1/receipts", post(receipts))
        .route("/v1/stats", get(stats))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves the inbox API on `listener` until the process ends.
pub async fn serve(listener: TcpListener, state: ServerState) -> std::io::Result<()> {
    let app = router(state).into_make_service_with_connect_info::<SocketAddr>();
    axum::serve(listener, app).await
}

/// Opens the inbox described by `config`, binds, and serves.
pub async fn run(config: &ServerConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let inbox = Arc::new(Inbox::open(config.inbox_options())?);
    let listener = TcpListener::bind(config.listen).await?;
    run_on(listener, inbox, config).await
}

/// Serves `inbox` on `listener` with the rate limits of `config`. Runs
/// tombstone compaction hourly.
pub async fn run_on(
    listener: TcpListener,
    inbox: Arc<Inbox>,
    config: &ServerConfig,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    tracing::info!(addr = %listener.local_addr()?, "inbox listening");
    let compactor = inbox.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(3600));
        loop {
            tick.tick().await;
            let inbox = compactor.clone();
            match tokio::task::spawn_blocking(move || inbox.compact(chrono::Utc::now())).await {
                Ok(Ok(n)) if n > 0 => tracing::info!(dropped = n, "compacted tombstones"),
                Ok(Err(e)) => tracing::warn!(error = %e, "compaction failed"),
                _ => {}
            }
        }
    });
    serve(
        listener,
        ServerState::new(
            inbox,
            config.upload_rate_per_min,
            config.receipt_rate_per_min,
        ),
    )
    .await?;
    Ok(())
}
