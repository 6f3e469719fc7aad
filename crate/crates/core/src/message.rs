//! The warp2 message arrangement: a small encrypted header that names an
//! encrypted body and an optional encrypted attachment by content hash.
//!
//! The plaintext header has a frozen 512-byte canonical encoding:
//!
//! ```text
//! to=<addr>\n
//! from=<addr>\n
//! date=<RFC 3339, seconds, Z>\n
//! subject=<text>\n
//! body_hash=<64 hex>\n
//! attachment_hash=<64 hex>\n      (only when an attachment exists)
//! receipt_nonce=<32 hex>\n
//! \0, then zero padding up to 512 bytes
//! ```
//!
//! In values, `\` is written `\\` and a newline is written `\n`. Hex is
//! lowercase. Fields appear in exactly this order; the parser accepts nothing
//! else, so `serialize(parse(x)) == x` for every accepted `x`.

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Ciphertext, CryptoError, DecryptFailure, KeyPair, PublicKey};
use crate::hash::{sha256, HashId};

/// Size of every padded plaintext header.
pub const HEADER_LEN: usize = 512;
/// Size of every sealed header.
pub const HEADER_CT_LEN: usize = HEADER_LEN + crypto::SEAL_OVERHEAD;
pub const MAX_SUBJECT_BYTES: usize = 256;
pub const NONCE_LEN: usize = 16;

/// Subject marking an in-band key rotation message.
pub const ROTATION_SUBJECT: &str = "\x01KEYROTATE";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MessageError {
    #[error("header too large: {0} content bytes, at most 511 fit")]
    HeaderTooLarge(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("message body must not be empty")]
    EmptyBody,
    #[error("{0} blob does not match the hash in the header")]
    HashMismatch(BlobKind),
    #[error("header declares an attachment but none was supplied")]
    MissingAttachment,
    #[error("attachment supplied but the header declares none")]
    UnexpectedAttachment,
    #[error(transparent)]
    Decrypt(#[from] DecryptFailure),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobKind {
    Body,
    Attachment,
}

impl BlobKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlobKind::Body => "body",
            BlobKind::Attachment => "attachment",
        }
    }
}

impl std::fmt::Display for BlobKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BlobKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "body" => Ok(Self::Body),
            "attachment" => Ok(Self::Attachment),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub to: String,
    pub from: String,
    pub date: DateTime<Utc>,
    pub subject: String,
    pub body_hash: HashId,
    pub attachment_hash: Option<HashId>,
    #[serde(with = "hex_nonce")]
    pub receipt_nonce: [u8; NONCE_LEN],
}

mod hex_nonce {
    use super::NONCE_LEN;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(nonce: &[u8; NONCE_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(nonce))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; NONCE_LEN], D::Error> {
        let text = String::deserialize(d)?;
        let mut out = [0u8; NONCE_LEN];
        hex::decode_to_slice(text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

impl MessageHeader {
    pub fn validate(&self) -> Result<(), MessageError> {
        if self.to.is_empty() {
            return Err(MessageError::InvalidHeader("`to` is empty"));
        }
        if self.from.is_empty() {
            return Err(MessageError::InvalidHeader("`from` is empty"));
        }
        if self.subject.len() > MAX_SUBJECT_BYTES {
            return Err(MessageError::InvalidHeader("subject longer than 256 bytes"));
        }
        // NUL terminates the encoded content.
        if [&self.to, &self.from, &self.subject]
            .iter()
            .any(|s| s.contains('\0'))
        {
            return Err(MessageError::InvalidHeader("fields may not contain NUL"));
        }
        if self.date.nanosecond() != 0 {
            return Err(MessageError::InvalidHeader("date must have whole seconds"));
        }
        Ok(())
    }

    pub fn is_rotation(&self) -> bool {
        self.subject == ROTATION_SUBJECT
    }
}

fn escape_into(out: &mut Vec<u8>, value: &str) {
    for b in value.bytes() {
        match b {
            b'\\' => out.extend_from_slice(b"\\\\"),
            b'\n' => out.extend_from_slice(b"\\n"),
            _ => out.push(b),
        }
    }
}

fn unescape(raw: &[u8]) -> Result<String, MessageError> {
    let mut out = Vec::with_capacity(raw.len());
    let mut iter = raw.iter();
    while let Some(&b) = iter.next() {
        if b == b'\\' {
            match iter.next() {
                Some(b'\\') => out.push(b'\\'),
                Some(b'n') => out.push(b'\n'),
                _ => return Err(MessageError::MalformedHeader("bad escape sequence")),
            }
        } else {
            out.push(b);
        }
    }
    String::from_utf8(out).map_err(|_| MessageError::MalformedHeader("field is not UTF-8"))
}

fn render_date(date: &DateTime<Utc>) -> String {
    date.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Encodes `header` into its padded 512-byte canonical form.
pub fn canonical_serialize(header: &MessageHeader) -> Result<[u8; HEADER_LEN], MessageError> {
    header.validate()?;
    let mut content = Vec::with_capacity(HEADER_LEN);
    let mut field = |name: &str, value: &str| {
        content.extend_from_slice(name.as_bytes());
        content.push(b'=');
        escape_into(&mut content, value);
        content.push(b'\n');
    };
    field("to", &header.to);
    field("from", &header.from);
    field("date", &render_date(&header.date));
    field("subject", &header.subject);
    field("body_hash", &header.body_hash.to_hex());
    if let Some(att) = &header.attachment_hash {
        field("attachment_hash", &att.to_hex());
    }
    field("receipt_nonce", &hex::encode(header.receipt_nonce));

    if content.len() > HEADER_LEN - 1 {
        return Err(MessageError::HeaderTooLarge(content.len()));
    }
    let mut out = [0u8; HEADER_LEN];
    out[..content.len()].copy_from_slice(&content);
    Ok(out)
}

/// Inverse of [`canonical_serialize`]. Anything that is not the exact canonical
/// encoding of a valid header is rejected.
pub fn parse_header(data: &[u8]) -> Result<MessageHeader, MessageError> {
    use MessageError::MalformedHeader as Bad;

    if data.len() != HEADER_LEN {
        return Err(Bad("header must be 512 bytes"));
    }
    let end = data
        .iter()
        .position(|&b| b == 0)
        .ok_or(Bad("missing terminator"))?;
    if data[end..].iter().any(|&b| b != 0) {
        return Err(Bad("non-zero padding"));
    }
    let content = &data[..end];
    if content.last() != Some(&b'\n') {
        return Err(Bad("content must end with a newline"));
    }

    let mut lines = content[..content.len() - 1]
        .split(|&b| b == b'\n')
        .peekable();
    let mut take = |name: &'static str| -> Result<String, MessageError> {
        let line = lines.next().ok_or(Bad("missing field"))?;
        let value = line
            .strip_prefix(name.as_bytes())
            .and_then(|rest| rest.strip_prefix(b"="))
            .ok_or(Bad("unexpected or out-of-order field"))?;
        unescape(value)
    };

    let to = take("to")?;
    let from = take("from")?;
    let date_text = take("date")?;
    let subject = take("subject")?;
    let body_hash = take("body_hash")?
        .parse::<HashId>()
        .map_err(|_| Bad("bad body_hash"))?;

    // attachment_hash is the only optional field; peek before consuming.
    let next_is_attachment = lines
        .peek()
        .is_some_and(|l| l.starts_with(b"attachment_hash="));
    let mut take = |name: &'static str| -> Result<String, MessageError> {
        let line = lines.next().ok_or(Bad("missing field"))?;
        let value = line
            .strip_prefix(name.as_bytes())
            .and_then(|rest| rest.strip_prefix(b"="))
            .ok_or(Bad("unexpected or out-of-order field"))?;
        unescape(value)
    };
    let attachment_hash = if next_is_attachment {
        Some(
            take("attachment_hash")?
                .parse::<HashId>()
                .map_err(|_| Bad("bad attachment_hash"))?,
        )
    } else {
        None
    };
    let nonce_text = take("receipt_nonce")?;
    if lines.next().is_some() {
        return Err(Bad("trailing fields"));
    }

    let date = DateTime::parse_from_rfc3339(&date_text)
        .map_err(|_| Bad("bad date"))?
        .with_timezone(&Utc);
    if render_date(&date) != date_text {
        return Err(Bad("date not in canonical form"));
    }
    if nonce_text.len() != NONCE_LEN * 2
        || !nonce_text
            .bytes()
            .all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    {
        return Err(Bad("bad receipt_nonce"));
    }
    let mut receipt_nonce = [0u8; NONCE_LEN];
    hex::decode_to_slice(&nonce_text, &mut receipt_nonce).map_err(|_| Bad("bad receipt_nonce"))?;

    let header = MessageHeader {
        to,
        from,
        date,
        subject,
        body_hash,
        attachment_hash,
        receipt_nonce,
    };
    header
        .validate()
        .map_err(|_| Bad("field constraints violated"))?;
    Ok(header)
}

/// Hash of the padded canonical header plaintext. Revealing it proves receipt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReceiptSecret {
    pub preimage: HashId,
}

impl ReceiptSecret {
    pub fn from_padded_header(padded: &[u8; HEADER_LEN]) -> Self {
        Self {
            preimage: sha256(padded),
        }
    }

    pub fn from_header(header: &MessageHeader) -> Result<Self, MessageError> {
        Ok(Self::from_padded_header(&canonical_serialize(header)?))
    }

    /// The public lock stored next to the envelope: `sha256(preimage)`.
    pub fn lock(&self) -> HashId {
        self.preimage.rehash()
    }
}

/// The upload unit: three blobs plus the receipt lock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub header_ct: Ciphertext,
    pub body_ct: Ciphertext,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attachment_ct: Option<Ciphertext>,
    pub receipt_lock: HashId,
}

impl Envelope {
    pub fn header_id(&self) -> HashId {
        sha256(self.header_ct.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct Draft<'a> {
    pub to: &'a str,
    pub from: &'a str,
    pub subject: &'a str,
    pub date: DateTime<Utc>,
    pub body: &'a [u8],
    pub attachment: Option<&'a [u8]>,
}

/// Seals body and attachment, builds the header around their hashes, then seals the header.
///
/// The returned [`ReceiptSecret`] is for the sender's own bookkeeping; the
/// recipient recomputes it from the decrypted header.
pub fn compose_envelope<R: RngCore + CryptoRng>(
    draft: &Draft<'_>,
    recipient: &PublicKey,
    rng: &mut R,
) -> Result<(Envelope, ReceiptSecret), MessageError> {
    if draft.body.is_empty() {
        return Err(MessageError::EmptyBody);
    }
    let body_ct = crypto::seal(draft.body, recipient, rng)?;
    let attachment_ct = draft
        .attachment
        .map(|a| crypto::seal(a, recipient, rng))
        .transpose()?;

    let mut receipt_nonce = [0u8; NONCE_LEN];
    rng.try_fill_bytes(&mut receipt_nonce)
        .map_err(|_| CryptoError::EntropyUnavailable)?;
    let header = MessageHeader {
        to: draft.to.to_owned(),
        from: draft.from.to_owned(),
        date: draft.date,
        subject: draft.subject.to_owned(),
        body_hash: sha256(body_ct.as_bytes()),
        attachment_hash: attachment_ct.as_ref().map(|c| sha256(c.as_bytes())),
        receipt_nonce,
    };
    let padded = canonical_serialize(&header)?;
    let header_ct = crypto::seal(&padded, recipient, rng)?;
    let receipt = ReceiptSecret::from_padded_header(&padded);

    Ok((
        Envelope {
            header_ct,
            body_ct,
            attachment_ct,
            receipt_lock: receipt.lock(),
        },
        receipt,
    ))
}

/// Opens a sealed header and parses it. `Ok(None)` means "not for this key".
pub fn open_header(
    header_ct: &[u8],
    keypair: &KeyPair,
) -> Result<Option<MessageHeader>, MessageError> {
    match crypto::open(header_ct, keypair) {
        Ok(plain) => parse_header(&plain).map(Some),
        Err(DecryptFailure) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedContent {
    pub body: Vec<u8>,
    pub attachment: Option<Vec<u8>>,
}

/// Checks the content blobs against the header hashes, then decrypts them.
pub fn verify_and_open(
    header: &MessageHeader,
    body_ct: &[u8],
    attachment_ct: Option<&[u8]>,
    keypair: &KeyPair,
) -> Result<OpenedContent, MessageError> {
    if sha256(body_ct) != header.body_hash {
        return Err(MessageError::HashMismatch(BlobKind::Body));
    }
    match (header.attachment_hash, attachment_ct) {
        (Some(expected), Some(ct)) if sha256(ct) != expected => {
            return Err(MessageError::HashMismatch(BlobKind::Attachment))
        }
        (Some(_), None) => return Err(MessageError::MissingAttachment),
        (None, Some(_)) => return Err(MessageError::UnexpectedAttachment),
        _ => {}
    }
    let body = crypto::open(body_ct, keypair)?;
    let attachment = attachment_ct
        .map(|ct| crypto::open(ct, keypair))
        .transpose()?;
    Ok(OpenedContent { body, attachment })
}
