//! `warp2`: command-line client, local daemon and inbox server.

mod config;
mod output;

use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;

use warp2_core::client::daemon::{self, DaemonState};
use warp2_core::client::{Client, ClientOptions, HttpInbox, InboxTransport, KdfCost};
use warp2_core::inbox::{http as inbox_http, Inbox, ServerConfig};
use warp2_core::message::HEADER_CT_LEN;
use warp2_core::{estimate, HashId, LoadParams};

use config::{FileConfig, OutputMode};
use output::{Failure, Output};

#[derive(Parser)]
#[command(
    name = "warp2",
    version,
    about = "Metadata-hiding mail over a shared encrypted inbox"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file [default: <user config dir>/warp2/config.toml]
    #[arg(long, env = "WARP2_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Inbox server base URL
    #[arg(long, env = "WARP2_SERVER_URL", global = true)]
    server_url: Option<String>,
    /// Directory holding identity state files
    #[arg(long, env = "WARP2_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    /// Which identity in the data directory to use
    #[arg(long, env = "WARP2_IDENTITY", global = true)]
    identity: Option<String>,
    #[arg(long, value_enum, env = "WARP2_OUTPUT", global = true)]
    output: Option<OutputMode>,
    /// Read the passphrase from this file
    #[arg(long, env = "WARP2_PASSPHRASE_FILE", global = true)]
    passphrase_file: Option<PathBuf>,
    /// Read the passphrase from this open file descriptor
    #[arg(long, env = "WARP2_PASSPHRASE_FD", global = true)]
    passphrase_fd: Option<i32>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a new identity
    Keygen {
        /// Address other users will see in the `from` field
        #[arg(long)]
        address: String,
    },
    /// Show this identity's address and public key
    Whoami,
    /// Manage contacts
    #[command(subcommand)]
    Contacts(ContactsCommand),
    /// Send a message; the body is read from --body-file or stdin
    Send {
        #[arg(long)]
        to: String,
        #[arg(long, default_value = "")]
        subject: String,
        #[arg(long)]
        attach: Option<PathBuf>,
        #[arg(long)]
        body_file: Option<PathBuf>,
    },
    /// Fetch and trial-decrypt new headers
    Sync,
    /// List received and sent mail
    List,
    /// Show one message; <id> may be a unique prefix
    Read {
        id: String,
        #[arg(long)]
        save_attachment: Option<PathBuf>,
    },
    /// Confirm receipt, purging the message from the server
    Ack { id: String },
    /// Offer fresh keys to a contact
    Rotate { alias: String },
    /// Estimate load for a shared inbox
    Plan {
        #[arg(long)]
        users: u64,
        /// Messages per user per day
        #[arg(long)]
        rate: u64,
        /// Encrypted header size in bytes [default: this build's header size]
        #[arg(long)]
        header_size: Option<u64>,
        /// Syncs per user per day
        #[arg(long, default_value_t = 1)]
        syncs: u64,
    },
    /// Run the local HTTP API for this identity
    Daemon {
        /// Loopback address [default: 127.0.0.1:8471]
        #[arg(long, env = "WARP2_DAEMON_LISTEN")]
        listen: Option<SocketAddr>,
        /// Serve static UI files from this directory
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Run an inbox server
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum ContactsCommand {
    /// Import a contact's public key
    Add {
        alias: String,
        /// Public key, base64
        #[arg(long)]
        key: String,
        /// Address the contact sends from [default: alias]
        #[arg(long)]
        address: Option<String>,
    },
    List,
    Remove {
        alias: String,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Inbox storage directory
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    page_limit: Option<usize>,
    #[arg(long)]
    blob_limit: Option<usize>,
    /// Uploads per minute per address, 0 for unlimited
    #[arg(long)]
    upload_rate: Option<u32>,
    /// Receipts per minute per address, 0 for unlimited
    #[arg(long)]
    receipt_rate: Option<u32>,
}

struct Ctx {
    global: Global,
    file: FileConfig,
    out: Output,
}

impl Ctx {
    fn server_url(&self) -> String {
        self.global
            .server_url
            .clone()
            .or_else(|| self.file.server_url.clone())
            .unwrap_or_else(|| config::DEFAULT_SERVER_URL.to_owned())
    }

    fn data_dir(&self) -> PathBuf {
        self.global
            .data_dir
            .clone()
            .or_else(|| self.file.data_dir.clone())
            .unwrap_or_else(config::default_data_dir)
    }

    fn identity(&self) -> String {
        self.global
            .identity
            .clone()
            .or_else(|| self.file.identity.clone())
            .unwrap_or_else(|| "default".to_owned())
    }

    fn state_path(&self) -> PathBuf {
        self.data_dir().join(format!("{}.state", self.identity()))
    }

    fn client_options(&self) -> ClientOptions {
        let mut opts = ClientOptions::default();
        if let Some(r) = self.file.round_dates_to_hour {
            opts.round_dates_to_hour = r;
        }
        if let Some(days) = self.file.key_grace_days {
            opts.key_grace = chrono::Duration::days(days);
        }
        opts
    }

    fn transport(&self) -> Arc<dyn InboxTransport> {
        Arc::new(HttpInbox::new(&self.server_url()))
    }

    fn passphrase(&self, confirm: bool) -> Result<Vec<u8>, Failure> {
        let from_source = |mut src: Box<dyn Read>| -> Result<Vec<u8>, Failure> {
            let mut buf = Vec::new();
            src.read_to_end(&mut buf)?;
            Ok(trim_newline(buf))
        };
        if let Some(path) = &self.global.passphrase_file {
            let f = std::fs::File::open(path)
                .map_err(|e| Failure::user("bad-passphrase", format!("{}: {e}", path.display())))?;
            return from_source(Box::new(f));
        }
        if let Some(fd) = self.global.passphrase_fd {
            return from_source(Box::new(open_fd(fd)?));
        }
        if let Some(p) = std::env::var_os("WARP2_PASSPHRASE") {
            return Ok(p.into_encoded_bytes());
        }
        let first = rpassword::prompt_password("Passphrase: ")
            .map_err(|e| Failure::user("bad-passphrase", format!("cannot prompt: {e}")))?;
        if confirm {
            let again = rpassword::prompt_password("Repeat passphrase: ")
                .map_err(|e| Failure::user("bad-passphrase", format!("cannot prompt: {e}")))?;
            if again != first {
                return Err(Failure::user("bad-passphrase", "passphrases differ"));
            }
        }
        Ok(first.into_bytes())
    }

    fn open_client(&self) -> Result<Client, Failure> {
        let path = self.state_path();
        if !path.exists() {
            return Err(Failure::user(
                "no-identity",
                format!(
                    "no identity `{}` in {}; create one with `warp2 keygen`",
                    self.identity(),
                    self.data_dir().display()
                ),
            ));
        }
        let pass = self.passphrase(false)?;
        Ok(Client::open(
            &path,
            &pass,
            kdf_cost(),
            self.transport(),
            self.client_options(),
        )?)
    }
}

fn trim_newline(mut buf: Vec<u8>) -> Vec<u8> {
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
    }
    buf
}

#[cfg(unix)]
fn open_fd(fd: i32) -> Result<std::fs::File, Failure> {
    use std::os::fd::FromRawFd;
    if fd < 3 {
        return Err(Failure::user(
            "bad-passphrase",
            "passphrase fd must be 3 or higher",
        ));
    }
    // SAFETY: the caller handed us this descriptor for reading; we own it from here.
    Ok(unsafe { std::fs::File::from_raw_fd(fd) })
}

#[cfg(not(unix))]
fn open_fd(_: i32) -> Result<std::fs::File, Failure> {
    Err(Failure::user(
        "bad-passphrase",
        "--passphrase-fd needs a unix system",
    ))
}

/// Argon2 cost for state files. `WARP2_INSECURE_FAST_KDF=1` is for test suites only.
fn kdf_cost() -> KdfCost {
    match std::env::var("WARP2_INSECURE_FAST_KDF").as_deref() {
        Ok("1") => KdfCost::insecure_fast(),
        _ => KdfCost::default(),
    }
}

fn resolve(client: &Client, id: &str) -> Result<HashId, Failure> {
    client.resolve_id(id).ok_or_else(|| {
        Failure::user(
            "not-in-mailstore",
            format!("no unique message matches `{id}`"),
        )
    })
}

/// Decimal units, like the figures in capacity estimates.
fn human_bytes(n: u128) -> String {
    const UNITS: [&str; 5] = ["B", "kB", "MB", "GB", "TB"];
    let mut value = n as f64;
    let mut unit = 0;
    while value >= 1000.0 && unit < UNITS.len() - 1 {
        value /= 1000.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{n} B")
    } else {
        format!("{value:.1} {}", UNITS[unit])
    }
}

fn short(id: &HashId) -> String {
    id.to_hex()[..12].to_owned()
}

#[derive(Serialize)]
struct Identity<'a> {
    address: &'a str,
    public_key: String,
    state_file: &'a Path,
}

fn emit_identity(ctx: &Ctx, client: &Client, path: &Path) {
    let id = Identity {
        address: client.address(),
        public_key: client.public_key().to_base64(),
        state_file: path,
    };
    ctx.out.emit("identity", &id, || {
        format!("address:    {}\npublic key: {}", id.address, id.public_key)
    });
}

async fn run(ctx: &Ctx, command: Command) -> Result<(), Failure> {
    match command {
        Command::Keygen { address } => {
            let path = ctx.state_path();
            if path.exists() {
                return Err(Failure::user(
                    "identity-exists",
                    format!("{} already exists", path.display()),
                ));
            }
            config::ensure_private_dir(&ctx.data_dir())?;
            let pass = ctx.passphrase(true)?;
            let client = Client::create(
                &path,
                &pass,
                kdf_cost(),
                &address,
                ctx.transport(),
                ctx.client_options(),
            )?;
            emit_identity(ctx, &client, &path);
        }
        Command::Whoami => {
            let client = ctx.open_client()?;
            emit_identity(ctx, &client, &ctx.state_path());
        }
        Command::Contacts(cmd) => contacts(ctx, cmd)?,
        Command::Send {
            to,
            subject,
            attach,
            body_file,
        } => {
            let body = match body_file {
                Some(p) => std::fs::read(&p)
                    .map_err(|e| Failure::user("bad-input", format!("{}: {e}", p.display())))?,
                None => {
                    let mut buf = Vec::new();
                    std::io::stdin().read_to_end(&mut buf)?;
                    buf
                }
            };
            let attachment = attach
                .map(|p| {
                    std::fs::read(&p)
                        .map_err(|e| Failure::user("bad-input", format!("{}: {e}", p.display())))
                })
                .transpose()?;
            let mut client = ctx.open_client()?;
            match client
                .send(&to, &subject, &body, attachment.as_deref())
                .await
            {
                Ok(id) => ctx
                    .out
                    .emit("sent", &json!({"header_id": id, "to": to}), || {
                        format!("sent {} to {to}", short(&id))
                    }),
                Err(e) if e.is_network() => {
                    let mut f = Failure::from(e);
                    f.message
                        .push_str("; the message is queued and will be retried on the next sync");
                    return Err(f);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Sync => {
            let mut client = ctx.open_client()?;
            let report = client.sync().await?;
            ctx.out.emit("sync", &report, || {
                let mut s = format!(
                    "{} new, {} skipped, {} delivered",
                    report.new_messages.len(),
                    report.skipped,
                    report.delivered.len()
                );
                if report.rotations_applied > 0 {
                    s.push_str(&format!(
                        ", {} key rotations applied",
                        report.rotations_applied
                    ));
                }
                if report.quarantined > 0 {
                    s.push_str(&format!(", {} quarantined", report.quarantined));
                }
                s
            });
        }
        Command::List => {
            let client = ctx.open_client()?;
            for m in daemon::summaries(&client) {
                ctx.out.emit("message", &m, || {
                    let flag = match (m.direction, m.read, m.acked) {
                        (daemon::Direction::Sent, _, true) => "delivered",
                        (daemon::Direction::Sent, _, false) => "sent",
                        (_, false, _) => "new",
                        (_, true, true) => "acked",
                        (_, true, false) => "read",
                    };
                    format!(
                        "{}  {}  {:<9}  {:<20}  {}",
                        short(&m.id),
                        m.date.format("%Y-%m-%d %H:%M"),
                        flag,
                        m.contact.as_deref().unwrap_or("?"),
                        m.subject.lines().next().unwrap_or("")
                    )
                });
            }
        }
        Command::Read {
            id,
            save_attachment,
        } => {
            let mut client = ctx.open_client()?;
            let id = resolve(&client, &id)?;
            client.mark_read(&id)?;
            let m = client.message(&id).expect("resolved id is stored");
            if let (Some(path), Some(data)) = (&save_attachment, &m.attachment) {
                std::fs::write(path, data)?;
            }
            let detail = daemon::message_detail(m);
            ctx.out.emit("message", &detail, || {
                let mut s = format!(
                    "Id:      {}\nFrom:    {}{}\nTo:      {}\nDate:    {}\nSubject: {}\n",
                    id,
                    m.header.from,
                    m.contact
                        .as_ref()
                        .map(|c| format!(" ({c})"))
                        .unwrap_or_default(),
                    m.header.to,
                    m.header.date.to_rfc3339(),
                    m.header.subject
                );
                if let Some(a) = &m.attachment {
                    s.push_str(&format!("Attachment: {} bytes", a.len()));
                    if let Some(p) = &save_attachment {
                        s.push_str(&format!(", saved to {}", p.display()));
                    }
                    s.push('\n');
                }
                s.push('\n');
                s.push_str(&String::from_utf8_lossy(&m.body));
                s
            });
        }
        Command::Ack { id } => {
            let mut client = ctx.open_client()?;
            let id = resolve(&client, &id)?;
            let purged = client.acknowledge(&id).await?;
            ctx.out
                .emit("ack", &json!({"header_id": id, "purged": purged}), || {
                    if purged {
                        format!("{} acknowledged and purged from the server", short(&id))
                    } else {
                        format!("{} was already gone from the server", short(&id))
                    }
                });
        }
        Command::Rotate { alias } => {
            let mut client = ctx.open_client()?;
            let id = client.rotate_keys(&alias).await?;
            ctx.out.emit(
                "rotation_offered",
                &json!({"alias": alias, "header_id": id}),
                || format!("offered new keys to {alias}; rotation completes when they answer"),
            );
        }
        Command::Plan {
            users,
            rate,
            header_size,
            syncs,
        } => {
            let params = LoadParams {
                users,
                messages_per_user_per_day: rate,
                header_ct_size: header_size.unwrap_or(HEADER_CT_LEN as u64),
                syncs_per_user_per_day: syncs,
            };
            let est = estimate(&params)
                .map_err(|e| Failure::user("non-positive-parameter", e.to_string()))?;
            ctx.out
                .emit("plan", &json!({"params": params, "estimate": est}), || {
                    format!(
                    "users {users}, {rate} messages/user/day, {} byte headers, {syncs} syncs/day\n\
                     new header data per day:         {:>16} bytes  ({})\n\
                     per-client decrypt per day:      {:>16} bytes  ({})\n\
                     server egress per day:           {:>16} bytes  ({})\n\
                     trial decryptions/client/day:    {:>16}\n\
                     download per sync:               {:>16} bytes  ({})",
                    params.header_ct_size,
                    est.daily_new_header_bytes,
                    human_bytes(est.daily_new_header_bytes),
                    est.per_client_daily_decrypt_bytes,
                    human_bytes(est.per_client_daily_decrypt_bytes),
                    est.server_daily_egress_bytes,
                    human_bytes(est.server_daily_egress_bytes),
                    est.trial_decryptions_per_client_per_day,
                    est.per_sync_download_bytes,
                    human_bytes(est.per_sync_download_bytes),
                )
                });
        }
        Command::Daemon { listen, ui_dir } => {
            let client = ctx.open_client()?;
            let token = daemon_token(ctx)?;
            let addr = listen
                .or(ctx.file.daemon.listen)
                .unwrap_or_else(|| config::DEFAULT_DAEMON_LISTEN.parse().unwrap());
            if !addr.ip().is_loopback() {
                return Err(Failure::user(
                    "bad-listen",
                    format!("the daemon only listens on loopback, not {addr}"),
                ));
            }
            let listener = TcpListener::bind(addr).await?;
            let bound = listener.local_addr()?;
            let ui_dir = ui_dir.or_else(|| ctx.file.daemon.ui_dir.clone());
            ctx.out.emit(
                "daemon",
                &json!({"listen": bound.to_string(), "token_file": token.1}),
                || match &token.1 {
                    Some(p) => {
                        format!("daemon on http://{bound} (bearer token in {})", p.display())
                    }
                    None => format!("daemon on http://{bound}"),
                },
            );
            let state = DaemonState::new(client, &token.0, &ctx.server_url());
            daemon::serve_on(listener, state, ui_dir)
                .await
                .map_err(|e| Failure::internal(e.to_string()))?;
        }
        Command::Serve(args) => serve(ctx, args).await?,
    }
    Ok(())
}

fn contacts(ctx: &Ctx, cmd: ContactsCommand) -> Result<(), Failure> {
    let mut client = ctx.open_client()?;
    match cmd {
        ContactsCommand::Add {
            alias,
            key,
            address,
        } => {
            let address = address.unwrap_or_else(|| alias.clone());
            let c = client.import_contact_with_address(&alias, &address, key.as_bytes())?;
            let view = daemon::contact_view(&c);
            ctx.out.emit("contact", &view, || {
                format!("added {} <{}>", view.alias, view.address)
            });
        }
        ContactsCommand::List => {
            for c in client.contacts().iter() {
                let view = daemon::contact_view(c);
                ctx.out.emit("contact", &view, || {
                    format!(
                        "{:<20}  {:<30}  {}",
                        view.alias, view.address, view.public_key
                    )
                });
            }
        }
        ContactsCommand::Remove { alias } => {
            client.remove_contact(&alias)?;
            ctx.out
                .emit("contact_removed", &json!({"alias": alias}), || {
                    format!("removed {alias}")
                });
        }
    }
    Ok(())
}

/// The daemon's bearer token and, when it lives in a file, that file.
fn daemon_token(ctx: &Ctx) -> Result<(String, Option<PathBuf>), Failure> {
    if let Ok(t) = std::env::var("WARP2_DAEMON_TOKEN") {
        if !t.is_empty() {
            return Ok((t, None));
        }
    }
    let path = ctx
        .file
        .daemon
        .token_file
        .clone()
        .unwrap_or_else(|| ctx.data_dir().join(format!("{}.token", ctx.identity())));
    match std::fs::read_to_string(&path) {
        Ok(t) if !t.trim().is_empty() => Ok((t.trim().to_owned(), Some(path))),
        _ => {
            let bytes: [u8; 32] = rand::random();
            let token: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
            config::write_private(&path, token.as_bytes())?;
            Ok((token, Some(path)))
        }
    }
}

async fn serve(ctx: &Ctx, args: ServeArgs) -> Result<(), Failure> {
    let mut cfg: ServerConfig = ctx.file.server.clone();
    cfg.apply_env(|k| std::env::var(k).ok())
        .map_err(|e| Failure::user("bad-config", e.to_string()))?;
    if let Some(v) = args.listen {
        cfg.listen = v;
    }
    if let Some(v) = args.store {
        cfg.data_dir = v;
    }
    if let Some(v) = args.page_limit {
        cfg.page_limit = v;
    }
    if let Some(v) = args.blob_limit {
        cfg.blob_limit = v;
    }
    if let Some(v) = args.upload_rate {
        cfg.upload_rate_per_min = v;
    }
    if let Some(v) = args.receipt_rate {
        cfg.receipt_rate_per_min = v;
    }
    config::ensure_private_dir(&cfg.data_dir)?;
    let inbox =
        Arc::new(Inbox::open(cfg.inbox_options()).map_err(|e| Failure::internal(e.to_string()))?);
    let listener = TcpListener::bind(cfg.listen).await?;
    let bound = listener.local_addr()?;
    ctx.out.emit(
        "serving",
        &json!({"listen": bound.to_string(), "store": cfg.data_dir}),
        || {
            format!(
                "inbox on http://{bound}, storing in {}",
                cfg.data_dir.display()
            )
        },
    );
    inbox_http::run_on(listener, inbox, &cfg)
        .await
        .map_err(|e| Failure::internal(e.to_string()))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("WARP2_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    // Usage errors are user errors; clap's own exit code would read as a network failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { output::EXIT_USER } else { 0 });
        }
    };
    let file = match config::load(cli.global.config.as_deref()) {
        Ok(f) => f,
        Err(f) => {
            let mode = cli.global.output.unwrap_or(OutputMode::Human);
            return Output { mode }.fail(&f);
        }
    };
    let mode = cli
        .global
        .output
        .or(file.output)
        .unwrap_or(OutputMode::Human);
    let ctx = Ctx {
        global: cli.global,
        file,
        out: Output { mode },
    };
    match run(&ctx, cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => ctx.out.fail(&f),
    }
}
