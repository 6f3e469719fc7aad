use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_warp2");

/// An isolated environment: own config file, data directories and passphrase.
struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(env.config(), "").unwrap();
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    fn cmd(&self, user: &str) -> Command {
        let mut c = Command::new(BIN);
        c.env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("WARP2_CONFIG", self.config())
            .env("WARP2_DATA_DIR", self.path(user))
            .env("WARP2_PASSPHRASE", format!("{user} passphrase"))
            .env("WARP2_INSECURE_FAST_KDF", "1")
            .env("WARP2_OUTPUT", "json");
        c
    }

    /// Starts an inbox server and returns it with its base URL.
    fn serve(&self) -> (Server, String) {
        let mut child = self
            .cmd("server")
            .args([
                "serve",
                "--listen",
                "127.0.0.1:0",
                "--upload-rate",
                "0",
                "--store",
            ])
            .arg(self.path("inbox"))
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let line = first_line(&mut child);
        assert_eq!(line["kind"], "serving");
        let url = format!("http://{}", line["listen"].as_str().unwrap());
        (Server(child), url)
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn first_line(child: &mut Child) -> Value {
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"))
}

fn run(mut cmd: Command, stdin: &[u8]) -> Output {
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{e}: {l}")))
        .collect()
}

/// Runs a command that must succeed and returns its JSON lines.
fn ok(cmd: Command, stdin: &[u8]) -> Vec<Value> {
    let out = run(cmd, stdin);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = lines(&out);
    assert!(v.iter().all(|l| l["v"] == 1));
    v
}

/// Raw HTTP GET, enough for a loopback JSON endpoint.
fn http_get(url: &str, token: Option<&str>) -> (u16, Value) {
    let rest = url.strip_prefix("http://").unwrap();
    let (host, path) = rest.split_once('/').unwrap();
    let mut s = TcpStream::connect(host).unwrap();
    let auth = token
        .map(|t| format!("Authorization: Bearer {t}\r\n"))
        .unwrap_or_default();
    write!(s, "GET /{path} HTTP/1.0\r\nHost: {host}\r\n{auth}\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let body = resp.split_once("\r\n\r\n").unwrap().1;
    (status, serde_json::from_str(body).unwrap())
}

/// Replaces values that differ between runs so transcripts can be compared.
fn normalize(v: &mut Value) {
    match v {
        Value::String(s) if s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()) => {
            *s = "<hash>".into()
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                match k.as_str() {
                    "date" | "public_key" | "state_file" | "listen" | "store" | "token_file" => {
                        *val = "<var>".into()
                    }
                    _ => normalize(val),
                }
            }
        }
        _ => {}
    }
}

fn assert_golden(name: &str, transcript: &[Value]) {
    let got: Vec<String> = transcript
        .iter()
        .map(|l| {
            let mut l = l.clone();
            normalize(&mut l);
            l.to_string()
        })
        .collect();
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("WARP2_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, got.join("\n") + "\n").unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(got, want.lines().collect::<Vec<_>>());
}

fn keygen(env: &Env, user: &str, url: &str) -> String {
    let out = ok(
        {
            let mut c = env.cmd(user);
            c.args(["--server-url", url, "keygen", "--address"])
                .arg(format!("{user}@warp2.example"));
            c
        },
        b"",
    );
    out[0]["public_key"].as_str().unwrap().to_owned()
}

fn user_cmd(env: &Env, user: &str, url: &str, args: &[&str]) -> Command {
    let mut c = env.cmd(user);
    c.arg("--server-url").arg(url).args(args);
    c
}

#[test]
fn plan_reproduces_capacity_figures() {
    let env = Env::new();
    let mut c = env.cmd("x");
    c.args([
        "plan",
        "--users",
        "1000",
        "--rate",
        "10",
        "--header-size",
        "1000",
    ]);
    assert_golden("plan.jsonl", &ok(c, b""));

    let mut c = env.cmd("x");
    c.env("WARP2_OUTPUT", "human").args([
        "plan",
        "--users",
        "1000",
        "--rate",
        "10",
        "--header-size",
        "1000",
    ]);
    let out = run(c, b"");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("10000000 bytes  (10.0 MB)"), "{text}");
    assert!(text.contains("10000000000 bytes  (10.0 GB)"), "{text}");

    // Without a header size the build's own encrypted header size is used.
    let mut c = env.cmd("x");
    c.args(["plan", "--users", "10", "--rate", "1"]);
    assert_eq!(ok(c, b"")[0]["params"]["header_ct_size"], 560);
}

#[test]
fn two_terminal_conversation() {
    let env = Env::new();
    let (_server, url) = env.serve();
    let alice_key = keygen(&env, "alice", &url);
    let bob_key = keygen(&env, "bob", &url);
    let alice = |args: &[&str]| user_cmd(&env, "alice", &url, args);
    let bob = |args: &[&str]| user_cmd(&env, "bob", &url, args);

    let mut transcript = Vec::new();
    transcript.extend(ok(
        alice(&[
            "contacts",
            "add",
            "bob",
            "--address",
            "bob@warp2.example",
            "--key",
            &bob_key,
        ]),
        b"",
    ));
    transcript.extend(ok(
        bob(&[
            "contacts",
            "add",
            "alice",
            "--address",
            "alice@warp2.example",
            "--key",
            &alice_key,
        ]),
        b"",
    ));

    let attachment = env.path("notes.bin");
    std::fs::write(&attachment, [7u8; 30]).unwrap();
    let sent = ok(
        {
            let mut c = alice(&["send", "--to", "bob", "--subject", "Lunch?", "--attach"]);
            c.arg(&attachment);
            c
        },
        b"Noon at the usual place.\n",
    );
    let id = sent[0]["header_id"].as_str().unwrap().to_owned();
    transcript.extend(sent);

    transcript.extend(ok(alice(&["sync"]), b""));
    let synced = ok(bob(&["sync"]), b"");
    assert_eq!(synced[0]["new_messages"][0], id.as_str());
    transcript.extend(synced);
    transcript.extend(ok(bob(&["list"]), b""));

    let saved = env.path("saved.bin");
    let read = ok(
        {
            let mut c = bob(&["read", &id[..10], "--save-attachment"]);
            c.arg(&saved);
            c
        },
        b"",
    );
    assert_eq!(read[0]["body_text"], "Noon at the usual place.\n");
    assert_eq!(read[0]["from"], "alice@warp2.example");
    assert_eq!(std::fs::read(&saved).unwrap(), [7u8; 30]);
    transcript.extend(read);

    transcript.extend(ok(bob(&["ack", &id]), b""));
    let delivered = ok(alice(&["sync"]), b"");
    assert_eq!(delivered[0]["delivered"][0], id.as_str());
    transcript.extend(delivered);
    transcript.extend(ok(alice(&["list"]), b""));

    transcript.extend(ok(alice(&["rotate", "bob"]), b""));
    transcript.extend(ok(bob(&["sync"]), b""));
    transcript.extend(ok(alice(&["sync"]), b""));
    transcript.extend(ok(alice(&["contacts", "list"]), b""));
    transcript.extend(ok(
        alice(&["send", "--to", "bob", "--subject", "After"]),
        b"new keys\n",
    ));
    transcript.extend(ok(bob(&["sync"]), b""));

    let (_, stats) = http_get(&format!("{url}/v1/stats"), None);
    assert_eq!(stats["live"], 1);
    assert_eq!(stats["purged"], 3);
    assert_golden("conversation.jsonl", &transcript);
}

#[test]
fn unknown_alias_is_a_user_error_and_uploads_nothing() {
    let env = Env::new();
    let (_server, url) = env.serve();
    keygen(&env, "alice", &url);
    for mode in ["json", "human"] {
        let mut c = user_cmd(
            &env,
            "alice",
            &url,
            &["send", "--to", "nobody", "--subject", "x"],
        );
        c.env("WARP2_OUTPUT", mode);
        let out = run(c, b"hello");
        assert_eq!(out.status.code(), Some(1));
        assert!(out.stdout.is_empty());
        let err = String::from_utf8(out.stderr).unwrap();
        if mode == "json" {
            let line: Value = serde_json::from_str(err.trim()).unwrap();
            assert_eq!(
                (line["kind"].as_str(), line["code"].as_str()),
                (Some("error"), Some("unknown-contact"))
            );
            assert_eq!(line["exit"], 1);
        } else {
            assert!(err.contains("nobody"), "{err}");
        }
    }
    let (_, stats) = http_get(&format!("{url}/v1/stats"), None);
    assert_eq!(stats["live"], 0);
}

#[test]
fn exit_codes() {
    let env = Env::new();
    let closed = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    keygen(&env, "alice", &closed);

    let out = run(user_cmd(&env, "alice", &closed, &["sync"]), b"");
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["code"], "network-failure");

    let mut c = user_cmd(&env, "alice", &closed, &["list"]);
    c.env("WARP2_PASSPHRASE", "wrong");
    assert_eq!(run(c, b"").status.code(), Some(1));

    let out = run(user_cmd(&env, "nobody", &closed, &["list"]), b"");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-identity"));

    assert_eq!(
        run(
            user_cmd(&env, "alice", &closed, &["keygen", "--address", "a"]),
            b""
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        run(user_cmd(&env, "alice", &closed, &["read", "ffff"]), b"")
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(user_cmd(&env, "alice", &closed, &["frobnicate"]), b"")
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(user_cmd(&env, "alice", &closed, &["--help"]), b"")
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        run(
            user_cmd(&env, "alice", &closed, &["daemon", "--listen", "0.0.0.0:0"]),
            b""
        )
        .status
        .code(),
        Some(1)
    );
}

#[cfg(unix)]
#[test]
fn data_dir_is_private_and_passphrase_sources_work() {
    use std::os::unix::fs::PermissionsExt;
    let env = Env::new();
    keygen(&env, "alice", "http://127.0.0.1:9");
    let mode = std::fs::metadata(env.path("alice"))
        .unwrap()
        .permissions()
        .mode();
    assert_eq!(mode & 0o777, 0o700);

    std::fs::write(env.path("pw"), "alice passphrase\n").unwrap();
    let mut c = env.cmd("alice");
    c.env_remove("WARP2_PASSPHRASE")
        .arg("--passphrase-file")
        .arg(env.path("pw"))
        .arg("whoami");
    assert_eq!(ok(c, b"")[0]["address"], "alice@warp2.example");

    let mut c = Command::new("sh");
    c.env_clear()
        .env("WARP2_CONFIG", env.config())
        .env("WARP2_DATA_DIR", env.path("alice"))
        .env("WARP2_INSECURE_FAST_KDF", "1")
        .arg("-c")
        .arg(format!(
            "exec {BIN} --output json --passphrase-fd 3 whoami 3<\"$0\"",
        ))
        .arg(env.path("pw"));
    assert_eq!(ok(c, b"")[0]["address"], "alice@warp2.example");
}

#[test]
fn flags_beat_environment_beat_config_file() {
    let env = Env::new();
    let (_server, url) = env.serve();
    let closed = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    keygen(&env, "alice", &url);
    std::fs::write(
        env.config(),
        format!("server_url = \"{url}\"\noutput = \"human\"\n"),
    )
    .unwrap();

    let sync = || {
        let mut c = env.cmd("alice");
        c.env_remove("WARP2_OUTPUT").arg("sync");
        c
    };
    let out = run(sync(), b"");
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 new"));

    let mut c = sync();
    c.env("WARP2_SERVER_URL", &closed);
    assert_eq!(run(c, b"").status.code(), Some(2));

    let mut c = sync();
    c.env("WARP2_SERVER_URL", &closed)
        .args(["--server-url", &url, "--output", "json"]);
    assert_eq!(ok(c, b"")[0]["kind"], "sync");
}

#[test]
fn daemon_serves_the_local_api() {
    let env = Env::new();
    let (_server, url) = env.serve();
    keygen(&env, "alice", &url);
    let mut child = user_cmd(&env, "alice", &url, &["daemon", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let line = first_line(&mut child);
    let _guard = Server(child);
    assert_eq!(line["kind"], "daemon");
    let token_file = line["token_file"].as_str().unwrap();
    let token = std::fs::read_to_string(token_file).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(token_file).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o600);
    }
    let base = format!("http://{}", line["listen"].as_str().unwrap());
    let (status, _) = http_get(&format!("{base}/local/status"), None);
    assert_eq!(status, 401);
    let (status, body) = http_get(&format!("{base}/local/status"), Some(&token));
    assert_eq!(status, 200);
    assert_eq!(body["address"], "alice@warp2.example");
    assert_eq!(body["server_url"], url.as_str());
}
