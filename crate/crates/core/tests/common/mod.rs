#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tokio::net::TcpListener;

use warp2_core::client::{Client, ClientOptions, InboxTransport, TransportError};
use warp2_core::inbox::http::{self, ServerState};
use warp2_core::inbox::{HeaderPage, Inbox, InboxStats, UploadReceipt};
use warp2_core::message::{BlobKind, Envelope};
use warp2_core::HashId;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// True when some 8-byte substring occurs in every `a` sample and in no `b` sample.
pub fn has_recipient_marker(a: &[Vec<u8>], b: &[Vec<u8>]) -> bool {
    fn grams(s: &[u8]) -> HashSet<&[u8]> {
        s.windows(8).collect()
    }
    let Some((first, rest)) = a.split_first() else {
        return false;
    };
    let mut common = grams(first);
    for s in rest {
        let g = grams(s);
        common.retain(|w| g.contains(w));
        if common.is_empty() {
            return false;
        }
    }
    for s in b {
        let g = grams(s);
        common.retain(|w| !g.contains(w));
    }
    !common.is_empty()
}

/// Serves `inbox` on an ephemeral loopback port. Returns the base URL.
pub async fn spawn_server(inbox: Arc<Inbox>, upload_rate: u32, receipt_rate: u32) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let state = ServerState::new(inbox, upload_rate, receipt_rate);
    tokio::spawn(async move { http::serve(listener, state).await });
    format!("http://{addr}")
}

/// Makes `a` and `b` contacts of each other under their addresses.
pub fn introduce(a: &mut Client, b: &mut Client) {
    let (a_addr, a_key) = (a.address().to_owned(), a.public_key().to_wire());
    let (b_addr, b_key) = (b.address().to_owned(), b.public_key().to_wire());
    a.import_contact_with_address(&b_addr, &b_addr, &b_key)
        .unwrap();
    b.import_contact_with_address(&a_addr, &a_addr, &a_key)
        .unwrap();
}

/// Wraps an inbox and injects network failures at chosen call numbers.
///
/// Calls are numbered from 1 across all methods. A failing upload is still
/// applied on the server; only the response is lost.
pub struct Faulty {
    pub inner: Arc<Inbox>,
    calls: AtomicU64,
    fail_at: std::sync::Mutex<HashSet<u64>>,
}

impl Faulty {
    pub fn new(inner: Arc<Inbox>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            fail_at: Default::default(),
        }
    }

    pub fn fail_call(&self, n: u64) {
        self.fail_at.lock().unwrap().insert(n);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) -> Result<(), TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_at.lock().unwrap().remove(&n) {
            Err(TransportError::Network(format!(
                "injected failure at call {n}"
            )))
        } else {
            Ok(())
        }
    }
}

#[async_trait]
impl InboxTransport for Faulty {
    async fn upload(&self, envelope: &Envelope) -> Result<UploadReceipt, TransportError> {
        let receipt = Inbox::upload(&self.inner, envelope)?;
        self.tick()?;
        Ok(receipt)
    }

    async fn list_headers(
        &self,
        after: u64,
        limit: Option<usize>,
    ) -> Result<HeaderPage, TransportError> {
        self.tick()?;
        Ok(Inbox::list_headers(&self.inner, after, limit))
    }

    async fn fetch_blob(
        &self,
        kind: BlobKind,
        header_id: &HashId,
    ) -> Result<Vec<u8>, TransportError> {
        self.tick()?;
        Ok(Inbox::fetch_blob(&self.inner, kind, header_id)?)
    }

    async fn acknowledge(&self, preimage: &HashId) -> Result<bool, TransportError> {
        self.tick()?;
        InboxTransport::acknowledge(&*self.inner, preimage).await
    }

    async fn stats(&self) -> Result<InboxStats, TransportError> {
        self.tick()?;
        Ok(Inbox::stats(&self.inner))
    }
}

pub struct SentMessage {
    pub header_id: HashId,
    pub from: usize,
    pub to: usize,
    pub subject: String,
    pub body: Vec<u8>,
}

pub struct Simulation {
    pub clients: Vec<Client>,
    pub sent: Vec<SentMessage>,
}

pub fn address(i: usize) -> String {
    format!("user{i:02}@warp2.example")
}

/// `n` clients on one inbox send `messages` messages between random pairs,
/// with syncs interleaved at random, then everyone syncs until quiet.
pub async fn simulate(inbox: Arc<Inbox>, n: usize, messages: usize, seed: u64) -> Simulation {
    let mut rng = rng(seed);
    let transport: Arc<dyn InboxTransport> = inbox;
    let mut clients: Vec<Client> = (0..n)
        .map(|i| Client::new(&address(i), transport.clone(), ClientOptions::default()).unwrap())
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let (left, right) = clients.split_at_mut(j);
            introduce(&mut left[i], &mut right[0]);
        }
    }

    let mut sent = Vec::new();
    while sent.len() < messages {
        if rng.gen_bool(0.7) {
            let from = rng.gen_range(0..n);
            let to = (from + rng.gen_range(1..n)) % n;
            let k = sent.len();
            let subject = format!("subject {k:03} {}", rng.gen::<u32>());
            let mut body = format!(
                "body of message {k} from {} to {}\n",
                address(from),
                address(to)
            )
            .into_bytes();
            let pad = rng.gen_range(0..2048);
            body.extend((0..pad).map(|_| rng.gen::<u8>()));
            let header_id = clients[from]
                .send(&address(to), &subject, &body, None)
                .await
                .unwrap();
            sent.push(SentMessage {
                header_id,
                from,
                to,
                subject,
                body,
            });
        } else {
            let who = rng.gen_range(0..n);
            clients[who].sync().await.unwrap();
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in order {
        clients[i].sync().await.unwrap();
    }
    Simulation { clients, sent }
}

/// Checks the delivery invariant: every message sits, byte-identical, in
/// exactly its recipient's mailstore.
pub fn check_delivery(sim: &Simulation) -> Result<(), String> {
    let mut expected: BTreeMap<usize, HashSet<HashId>> = BTreeMap::new();
    for m in &sim.sent {
        expected.entry(m.to).or_default().insert(m.header_id);
        for (i, client) in sim.clients.iter().enumerate() {
            let stored = client.message(&m.header_id);
            if i == m.to {
                let stored =
                    stored.ok_or_else(|| format!("{} missing at recipient", m.header_id))?;
                if stored.body != m.body || stored.header.subject != m.subject {
                    return Err(format!("{} differs at recipient", m.header_id));
                }
                if stored.contact.as_deref() != Some(address(m.from).as_str()) {
                    return Err(format!("{} attributed to the wrong contact", m.header_id));
                }
            } else if stored.is_some() {
                return Err(format!("{} found at client {i}", m.header_id));
            }
        }
    }
    for (i, client) in sim.clients.iter().enumerate() {
        let got: HashSet<HashId> = client.messages().map(|m| m.header_id).collect();
        if got != expected.remove(&i).unwrap_or_default() {
            return Err(format!("client {i} holds unexpected messages"));
        }
    }
    Ok(())
}

/// Every file under `dir`, concatenated per file.
pub fn read_tree(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let data = std::fs::read(&path).unwrap();
                out.push((path, data));
            }
        }
    }
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Plaintext strings and key bytes of a simulation that must never reach the server.
pub fn secrets_of(sim: &Simulation) -> Vec<Vec<u8>> {
    let mut needles: Vec<Vec<u8>> = Vec::new();
    for m in &sim.sent {
        needles.push(m.subject.clone().into_bytes());
        needles.push(m.body[..m.body.iter().position(|&b| b == b'\n').unwrap()].to_vec());
    }
    for c in &sim.clients {
        needles.push(c.address().as_bytes().to_vec());
        for key in c.keyring().live() {
            let public = key.keypair.public();
            needles.push(public.as_bytes().to_vec());
            needles.push(public.to_base64().into_bytes());
            needles.push(hex::encode(public.as_bytes()).into_bytes());
        }
    }
    needles
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_text(rng: &mut ChaCha20Rng, max: usize) -> String {
    const ALPHABET: &[char] = &[
        'a', 'Z', '0', ' ', '\n', '\\', '=', 'é', '€', '😀', '\t', '%',
    ];
    let len = rng.gen_range(0..=max);
    let mut s = String::new();
    for _ in 0..len {
        let c = ALPHABET[rng.gen_range(0..ALPHABET.len())];
        if s.len() + c.len_utf8() > max {
            break;
        }
        s.push(c);
    }
    s
}

/// Composes `n` randomized messages and checks that the preimage the
/// recipient recomputes from the decrypted header equals the sender's.
pub fn receipt_cross_check(n: usize, seed: u64) -> Result<(), String> {
    use chrono::TimeZone;
    use warp2_core::crypto::generate_keypair;
    use warp2_core::message::{compose_envelope, open_header, Draft, ReceiptSecret};

    let mut rng = rng(seed);
    let recipient = generate_keypair(&mut rng).map_err(|e| e.to_string())?;
    for i in 0..n {
        let subject = random_text(&mut rng, 80);
        let to = format!("to-{}", random_text(&mut rng, 20));
        let from = format!("from-{}", random_text(&mut rng, 20));
        let date = chrono::Utc
            .timestamp_opt(rng.gen_range(0..4_000_000_000i64), 0)
            .unwrap();
        let body: Vec<u8> = (0..rng.gen_range(1..300)).map(|_| rng.gen()).collect();
        let attachment: Option<Vec<u8>> = rng
            .gen_bool(0.3)
            .then(|| (0..rng.gen_range(1..300)).map(|_| rng.gen()).collect());
        let (envelope, sender_secret) = compose_envelope(
            &Draft {
                to: &to,
                from: &from,
                subject: &subject,
                date,
                body: &body,
                attachment: attachment.as_deref(),
            },
            recipient.public(),
            &mut rng,
        )
        .map_err(|e| format!("message {i}: {e}"))?;
        let header = open_header(envelope.header_ct.as_bytes(), &recipient)
            .map_err(|e| format!("message {i}: {e}"))?
            .ok_or_else(|| format!("message {i}: header did not open"))?;
        let recomputed = ReceiptSecret::from_header(&header).map_err(|e| e.to_string())?;
        ensure!(recomputed == sender_secret, "message {i}: preimages differ");
        ensure!(
            recomputed.lock() == envelope.receipt_lock,
            "message {i}: lock mismatch"
        );
    }
    Ok(())
}

fn own_key_for(owner: &Client, peer: &str) -> Option<warp2_core::PublicKey> {
    let id = owner.contacts().get(peer)?.my_key;
    Some(*owner.keyring().get(id)?.keypair.public())
}

/// Both sides agree on which keys they seal to, and no rotation is half done.
pub fn rotation_consistent(a: &Client, b: &Client) -> Result<(), String> {
    use warp2_core::client::RotationState;
    let ab = a.contacts().get(b.address()).ok_or("a lost contact b")?;
    let ba = b.contacts().get(a.address()).ok_or("b lost contact a")?;
    ensure!(
        Some(ab.current_pub) == own_key_for(b, a.address()),
        "a seals to a key b does not use"
    );
    ensure!(
        Some(ba.current_pub) == own_key_for(a, b.address()),
        "b seals to a key a does not use"
    );
    for c in [ab, ba] {
        ensure!(
            c.rotation_state != RotationState::Offered,
            "{} still has an open offer",
            c.alias
        );
        ensure!(
            c.pending_key.is_none(),
            "{} still has a pending key",
            c.alias
        );
        ensure!(
            !c.previous_pubs.contains(&c.current_pub),
            "{} current key in history",
            c.alias
        );
    }
    Ok(())
}

/// A rotates with B under a zero grace window. Afterwards both converse under
/// new keys and mail sealed to A's old key by a third party no longer opens.
pub async fn rotation_walkthrough() -> Result<(), String> {
    let inbox: Arc<dyn InboxTransport> = Arc::new(Inbox::in_memory(Default::default()));
    let opts = ClientOptions {
        key_grace: chrono::Duration::zero(),
        ..ClientOptions::default()
    };
    let err = |e: warp2_core::client::ClientError| e.to_string();
    let mut a = Client::new("alice", inbox.clone(), opts.clone()).map_err(err)?;
    let mut b = Client::new("bob", inbox.clone(), opts.clone()).map_err(err)?;
    let mut c = Client::new("carol", inbox.clone(), opts).map_err(err)?;
    introduce(&mut a, &mut b);
    // Carol knows Alice's bootstrap key; Alice does not list Carol.
    c.import_contact("alice", &a.public_key().to_wire())
        .map_err(err)?;
    let old_id = a.keyring().identity_id();
    let old_pub = a.public_key();

    let before = c
        .send("alice", "before", b"sealed to the old key", None)
        .await
        .map_err(err)?;
    a.sync().await.map_err(err)?;
    ensure!(
        a.message(&before).is_some(),
        "old-key mail did not open before rotation"
    );

    a.rotate_keys("bob").await.map_err(err)?;
    for _ in 0..2 {
        b.sync().await.map_err(err)?;
        a.sync().await.map_err(err)?;
    }
    rotation_consistent(&a, &b)?;
    ensure!(
        a.keyring().get(old_id).is_none(),
        "old secret key still held"
    );
    ensure!(a.public_key() != old_pub, "identity key was not replaced");
    ensure!(
        b.contacts().get("alice").unwrap().current_pub != old_pub,
        "bob still seals to the old key"
    );

    let ab = a
        .send("bob", "after a", b"hello under new keys", None)
        .await
        .map_err(err)?;
    let ba = b
        .send("alice", "after b", b"hello back", None)
        .await
        .map_err(err)?;
    b.sync().await.map_err(err)?;
    a.sync().await.map_err(err)?;
    ensure!(
        b.message(&ab).map(|m| m.body.as_slice()) == Some(b"hello under new keys".as_slice()),
        "a to b failed"
    );
    ensure!(
        a.message(&ba).map(|m| m.body.as_slice()) == Some(b"hello back".as_slice()),
        "b to a failed"
    );

    let after = c
        .send("alice", "after", b"sealed to the old key", None)
        .await
        .map_err(err)?;
    a.sync().await.map_err(err)?;
    ensure!(
        a.message(&after).is_none(),
        "old-key mail still opens after rotation"
    );
    ensure!(
        a.state().skip_cache.contains(&after),
        "old-key mail not in skip cache"
    );
    Ok(())
}

/// Ten rotations and ten messages between A and B in seeded random order,
/// with random syncs between them.
pub async fn rotation_stress(seed: u64) -> Result<(), String> {
    use warp2_core::client::ClientError;
    let mut rng = rng(seed);
    let inbox: Arc<dyn InboxTransport> = Arc::new(Inbox::in_memory(Default::default()));
    let err = |e: ClientError| e.to_string();
    let mut pair = [
        Client::new("alice", inbox.clone(), ClientOptions::default()).map_err(err)?,
        Client::new("bob", inbox.clone(), ClientOptions::default()).map_err(err)?,
    ];
    {
        let [a, b] = &mut pair;
        introduce(a, b);
    }
    let names = ["alice", "bob"];
    let mut ops: Vec<bool> = [true; 10].into_iter().chain([false; 10]).collect();
    ops.shuffle(&mut rng);

    let mut sent: Vec<(usize, HashId, Vec<u8>)> = Vec::new();
    let mut rotations = 0;
    let mut trace = Vec::new();
    for (step, rotate) in ops.into_iter().enumerate() {
        let side = rng.gen_range(0..2);
        let peer = names[1 - side];
        if rotate {
            loop {
                match pair[side].rotate_keys(peer).await {
                    Ok(_) => break,
                    Err(ClientError::RotationAlreadyPending(_)) => {
                        trace.push(format!("{step}: {} waits for answer", names[side]));
                        pair[1 - side].sync().await.map_err(err)?;
                        pair[side].sync().await.map_err(err)?;
                    }
                    Err(e) => return Err(e.to_string()),
                }
            }
            rotations += 1;
            trace.push(format!("{step}: {} rotates", names[side]));
        } else {
            let body = format!("message {step} from {}", names[side]).into_bytes();
            let id = pair[side].send(peer, "m", &body, None).await.map_err(err)?;
            sent.push((1 - side, id, body));
            trace.push(format!("{step}: {} sends", names[side]));
        }
        for who in 0..2 {
            if rng.gen_bool(0.4) {
                pair[who].sync().await.map_err(err)?;
                trace.push(format!("{step}: {} syncs", names[who]));
            }
        }
    }
    for _ in 0..3 {
        for c in &mut pair {
            c.sync().await.map_err(err)?;
        }
    }

    let trace = trace.join("; ");
    ensure!(rotations == 10, "only {rotations} rotations ran");
    for (to, id, body) in &sent {
        let got = pair[*to].message(id).map(|m| &m.body);
        ensure!(
            got == Some(body),
            "message {id} not delivered to {} [{trace}]",
            names[*to]
        );
    }
    for c in &pair {
        ensure!(
            c.state().quarantine.is_empty(),
            "{} quarantined mail [{trace}]",
            c.address()
        );
        ensure!(
            c.pending_uploads() == 0,
            "{} has unsent envelopes",
            c.address()
        );
    }
    rotation_consistent(&pair[0], &pair[1]).map_err(|e| format!("{e} [{trace}]"))?;
    Ok(())
}
