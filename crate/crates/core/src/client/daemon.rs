//! Loopback HTTP/JSON API over one [`Client`], consumed by the web UI.
//!
//! Every `/local` request must carry `Authorization: Bearer <token>`.
//! Mutations are serialized through a single lock on the client. The route
//! list and JSON shapes are described in `schema/local-api.schema.json`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;

use super::{
    Client, ClientError, ContactError, MessageKind, RotationState, StoredMessage, SyncReport,
};
use crate::hash::{sha256, HashId};
use crate::load::{self, LoadParams};
use crate::message::HEADER_CT_LEN;

/// Every route the daemon serves, as `(method, path)`.
pub const ROUTES: &[(&str, &str)] = &[
    ("GET", "/local/messages"),
    ("GET", "/local/messages/{id}"),
    ("POST", "/local/send"),
    ("POST", "/local/ack/{id}"),
    ("POST", "/local/sync"),
    ("GET", "/local/contacts"),
    ("POST", "/local/contacts"),
    ("POST", "/local/rotate/{alias}"),
    ("GET", "/local/status"),
    ("GET", "/local/plan"),
];

#[derive(Clone)]
pub struct DaemonState {
    client: Arc<Mutex<Client>>,
    token_hash: HashId,
    server_url: Arc<str>,
}

impl DaemonState {
    pub fn new(client: Client, token: &str, server_url: &str) -> Self {
        Self {
            client: Arc::new(Mutex::new(client)),
            token_hash: sha256(token.as_bytes()),
            server_url: server_url.into(),
        }
    }

    pub fn client(&self) -> Arc<Mutex<Client>> {
        self.client.clone()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DaemonError {
    pub error: String,
    pub message: String,
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.0,
            Json(DaemonError {
                error: self.1.into(),
                message: self.2,
            }),
        )
            .into_response()
    }
}

/// Machine error code and HTTP status for a client failure.
pub fn error_code(e: &ClientError) -> (StatusCode, &'static str) {
    match e {
        ClientError::UnknownContact(_) => (StatusCode::NOT_FOUND, "unknown-contact"),
        ClientError::NotInMailstore(_) => (StatusCode::NOT_FOUND, "not-in-mailstore"),
        ClientError::RotationAlreadyPending(_) => {
            (StatusCode::CONFLICT, "rotation-already-pending")
        }
        ClientError::Contact(ContactError::DuplicateAlias(_)) => {
            (StatusCode::CONFLICT, "duplicate-alias")
        }
        ClientError::Contact(ContactError::UnknownContact(_)) => {
            (StatusCode::NOT_FOUND, "unknown-contact")
        }
        ClientError::Contact(_) => (StatusCode::BAD_REQUEST, "malformed-key"),
        ClientError::Message(_) => (StatusCode::BAD_REQUEST, "invalid-message"),
        ClientError::Transport(t) if t.is_network() => (StatusCode::BAD_GATEWAY, "network-failure"),
        ClientError::Transport(_) => (StatusCode::BAD_GATEWAY, "server-rejected"),
        ClientError::Crypto(_) | ClientError::Store(_) => {
            (StatusCode::INTERNAL_SERVER_ERROR, "internal")
        }
    }
}

impl From<ClientError> for ApiError {
    fn from(e: ClientError) -> Self {
        let (status, code) = error_code(&e);
        ApiError(status, code, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "bad-request", msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageSummary {
    pub id: HashId,
    pub direction: Direction,
    pub contact: Option<String>,
    pub subject: String,
    pub date: DateTime<Utc>,
    pub has_attachment: bool,
    pub read: bool,
    pub acked: bool,
    /// For sent mail: the recipient's receipt purged the server copy.
    pub purged_from_server: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageDetail {
    #[serde(flatten)]
    pub summary: MessageSummary,
    pub from: String,
    pub to: String,
    /// Body as UTF-8 text when it is valid UTF-8.
    pub body_text: Option<String>,
    pub body_base64: String,
    pub attachment_base64: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SendRequest {
    pub to: String,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default)]
    pub body_base64: Option<String>,
    #[serde(default)]
    pub attachment_base64: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdResponse {
    pub header_id: HashId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AckResponse {
    pub purged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactView {
    pub alias: String,
    pub address: String,
    pub public_key: String,
    pub previous_keys: usize,
    pub rotation_state: RotationState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportContactRequest {
    pub alias: String,
    pub public_key: String,
    #[serde(default)]
    pub address: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusView {
    pub address: String,
    pub public_key: String,
    pub server_url: String,
    pub cursor: u64,
    pub skip_cache_size: usize,
    pub mailstore_size: usize,
    pub pending_uploads: usize,
    pub live_secret_keys: usize,
    pub trial_decryptions: u64,
    pub last_sync: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PlanQuery {
    pub users: u64,
    pub rate: u64,
    pub header_size: Option<u64>,
    pub syncs: Option<u64>,
}

pub fn contact_view(c: &super::Contact) -> ContactView {
    ContactView {
        alias: c.alias.clone(),
        address: c.address.clone(),
        public_key: c.current_pub.to_base64(),
        previous_keys: c.previous_pubs.len(),
        rotation_state: c.rotation_state,
    }
}

/// Received and sent mail, oldest first.
pub fn summaries(client: &Client) -> Vec<MessageSummary> {
    let mut out: Vec<MessageSummary> = client
        .messages()
        .map(|m| MessageSummary {
            id: m.header_id,
            direction: Direction::Received,
            contact: m.contact.clone(),
            subject: m.header.subject.clone(),
            date: m.header.date,
            has_attachment: m.attachment.is_some(),
            read: m.read,
            acked: m.acked,
            purged_from_server: m.acked,
        })
        .collect();
    out.extend(
        client
            .state()
            .outbox
            .iter()
            .filter(|e| e.kind == MessageKind::Mail)
            .map(|e| MessageSummary {
                id: e.header_id,
                direction: Direction::Sent,
                contact: Some(e.to.clone()),
                subject: e.subject.clone(),
                date: e.date,
                has_attachment: false,
                read: true,
                acked: e.delivered,
                purged_from_server: e.delivered,
            }),
    );
    out.sort_by_key(|m| m.date);
    out
}

pub fn message_detail(m: &StoredMessage) -> MessageDetail {
    MessageDetail {
        summary: MessageSummary {
            id: m.header_id,
            direction: Direction::Received,
            contact: m.contact.clone(),
            subject: m.header.subject.clone(),
            date: m.header.date,
            has_attachment: m.attachment.is_some(),
            read: m.read,
            acked: m.acked,
            purged_from_server: m.acked,
        },
        from: m.header.from.clone(),
        to: m.header.to.clone(),
        body_text: String::from_utf8(m.body.clone()).ok(),
        body_base64: BASE64.encode(&m.body),
        attachment_base64: m.attachment.as_ref().map(|a| BASE64.encode(a)),
    }
}

async fn list_messages(State(s): State<DaemonState>) -> Json<Vec<MessageSummary>> {
    Json(summaries(&*s.client.lock().await))
}

async fn get_message(
    State(s): State<DaemonState>,
    Path(id): Path<String>,
) -> Result<Json<MessageDetail>, ApiError> {
    let mut client = s.client.lock().await;
    let id = client
        .resolve_id(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "not-in-mailstore", id.clone()))?;
    client.mark_read(&id)?;
    let m = client.message(&id).expect("resolved and marked");
    Ok(Json(message_detail(m)))
}

async fn send(
    State(s): State<DaemonState>,
    Json(req): Json<SendRequest>,
) -> Result<Json<IdResponse>, ApiError> {
    let body = match (req.body, req.body_base64) {
        (Some(text), None) => text.into_bytes(),
        (None, Some(b64)) => BASE64.decode(b64).map_err(|e| bad_request(e.to_string()))?,
        _ => {
            return Err(bad_request(
                "exactly one of `body` or `body_base64` is required",
            ))
        }
    };
    let attachment = req
        .attachment_base64
        .map(|a| BASE64.decode(a))
        .transpose()
        .map_err(|e| bad_request(e.to_string()))?;
    let header_id = s
        .client
        .lock()
        .await
        .send(&req.to, &req.subject, &body, attachment.as_deref())
        .await?;
    Ok(Json(IdResponse { header_id }))
}

async fn ack(
    State(s): State<DaemonState>,
    Path(id): Path<String>,
) -> Result<Json<AckResponse>, ApiError> {
    let mut client = s.client.lock().await;
    let id = client
        .resolve_id(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "not-in-mailstore", id.clone()))?;
    let purged = client.acknowledge(&id).await?;
    Ok(Json(AckResponse { purged }))
}

async fn sync(State(s): State<DaemonState>) -> Result<Json<SyncReport>, ApiError> {
    Ok(Json(s.client.lock().await.sync().await?))
}

async fn list_contacts(State(s): State<DaemonState>) -> Json<Vec<ContactView>> {
    Json(
        s.client
            .lock()
            .await
            .contacts()
            .iter()
            .map(contact_view)
            .collect(),
    )
}

async fn add_contact(
    State(s): State<DaemonState>,
    Json(req): Json<ImportContactRequest>,
) -> Result<(StatusCode, Json<ContactView>), ApiError> {
    let address = req.address.unwrap_or_else(|| req.alias.clone());
    let contact = s.client.lock().await.import_contact_with_address(
        &req.alias,
        &address,
        req.public_key.as_bytes(),
    )?;
    Ok((StatusCode::CREATED, Json(contact_view(&contact))))
}

async fn rotate(
    State(s): State<DaemonState>,
    Path(alias): Path<String>,
) -> Result<Json<IdResponse>, ApiError> {
    let header_id = s.client.lock().await.rotate_keys(&alias).await?;
    Ok(Json(IdResponse { header_id }))
}

async fn status(State(s): State<DaemonState>) -> Json<StatusView> {
    let client = s.client.lock().await;
    let st = client.state();
    Json(StatusView {
        address: client.address().to_owned(),
        public_key: client.public_key().to_base64(),
        server_url: s.server_url.to_string(),
        cursor: st.cursor,
        skip_cache_size: st.skip_cache.len(),
        mailstore_size: st.mailstore.len(),
        pending_uploads: client.pending_uploads(),
        live_secret_keys: client.keyring().len(),
        trial_decryptions: client.trial_decryptions(),
        last_sync: st.last_sync,
    })
}

async fn plan(Query(q): Query<PlanQuery>) -> Result<Json<load::LoadEstimate>, ApiError> {
    let params = LoadParams {
        users: q.users,
        messages_per_user_per_day: q.rate,
        header_ct_size: q.header_size.unwrap_or(HEADER_CT_LEN as u64),
        syncs_per_user_per_day: q.syncs.unwrap_or(1),
    };
    load::estimate(&params)
        .map(Json)
        .map_err(|e| bad_request(e.to_string()))
}

async fn require_token(
    State(s): State<DaemonState>,
    req: Request,
    next: Next,
) -> Result<Response, ApiError> {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // Compare digests so timing does not depend on where the strings differ.
    match presented {
        Some(token) if sha256(token.as_bytes()) == s.token_hash => Ok(next.run(req).await),
        _ => Err(ApiError(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong bearer token".into(),
        )),
    }
}

/// The `/local` API, plus static UI assets from `ui_dir` when given.
pub fn router(state: DaemonState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/local/messages", get(list_messages))
        .route("/local/messages/{id}", get(get_message))
        .route("/local/send", post(send))
        .route("/local/ack/{id}", post(ack))
        .route("/local/sync", post(sync))
        .route("/local/contacts", get(list_contacts).post(add_contact))
        .route("/local/rotate/{alias}", post(rotate))
        .route("/local/status", get(status))
        .route("/local/plan", get(plan))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DaemonStartError {
    #[error("refusing to listen on non-loopback address {0}")]
    NotLoopback(SocketAddr),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds `addr` (loopback only) and serves until the process ends.
pub async fn serve(
    addr: SocketAddr,
    state: DaemonState,
    ui_dir: Option<PathBuf>,
) -> Result<(), DaemonStartError> {
    if !addr.ip().is_loopback() {
        return Err(DaemonStartError::NotLoopback(addr));
    }
    serve_on(TcpListener::bind(addr).await?, state, ui_dir).await
}

/// Serves on an already bound listener, which must be on a loopback address.
pub async fn serve_on(
    listener: TcpListener,
    state: DaemonState,
    ui_dir: Option<PathBuf>,
) -> Result<(), DaemonStartError> {
    let addr = listener.local_addr()?;
    if !addr.ip().is_loopback() {
        return Err(DaemonStartError::NotLoopback(addr));
    }
    tracing::info!(%addr, "daemon listening");
    axum::serve(listener, router(state, ui_dir)).await?;
    Ok(())
}
