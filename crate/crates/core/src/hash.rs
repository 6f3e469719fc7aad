//! SHA-256 content identifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Length of a digest in bytes.
pub const HASH_LEN: usize = 32;

/// A SHA-256 digest used to name blobs, headers and receipts.
///
/// Rendered as 64 lowercase hex characters with no prefix.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashId([u8; HASH_LEN]);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HashIdError {
    #[error("hash id must be {expected} hex characters, got {0}", expected = HASH_LEN * 2)]
    BadLength(usize),
    #[error("hash id must be lowercase hex")]
    NotLowercaseHex,
}

impl HashId {
    pub const fn from_bytes(bytes: [u8; HASH_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; HASH_LEN]>::try_from(bytes).ok().map(Self)
    }

    pub fn as_bytes(&self) -> &[u8; HASH_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Hash of this digest's raw bytes. Used to turn a receipt secret into its lock.
    pub fn rehash(&self) -> HashId {
        sha256(&self.0)
    }
}

/// SHA-256 of `data`.
pub fn sha256(data: &[u8]) -> HashId {
    HashId(Sha256::digest(data).into())
}

impl FromStr for HashId {
    type Err = HashIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != HASH_LEN * 2 {
            return Err(HashIdError::BadLength(s.len()));
        }
        // Only the canonical rendering is accepted so equal ids have equal strings.
        if !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(HashIdError::NotLowercaseHex);
        }
        let mut out = [0u8; HASH_LEN];
        hex::decode_to_slice(s, &mut out).map_err(|_| HashIdError::NotLowercaseHex)?;
        Ok(Self(out))
    }
}

impl fmt::Display for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashId({})", self.to_hex())
    }
}

impl Serialize for HashId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Frozen from Python's hashlib.sha256 as an independent reference.
    const EMPTY: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
    const ABC: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
    // hashlib.sha256 over 1 MiB produced by `lcg_bytes(1 << 20)` (same recurrence in Python).
    const LCG_1MIB: &str = "b9a56eb486a3f0de877bfc5063efc387683db561edd38f0273fcc3078153980a";

    fn lcg_bytes(n: usize) -> Vec<u8> {
        let mut state: u32 = 0x1234_5678;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                (state >> 24) as u8
            })
            .collect()
    }

    #[test]
    fn empty_input_matches_reference() {
        assert_eq!(sha256(b"").to_hex(), EMPTY);
        assert_eq!(sha256(b"abc").to_hex(), ABC);
    }

    #[test]
    fn one_mib_buffer_matches_reference() {
        assert_eq!(sha256(&lcg_bytes(1 << 20)).to_hex(), LCG_1MIB);
    }

    #[test]
    fn parse_rejects_non_canonical() {
        assert_eq!(
            EMPTY.to_uppercase().parse::<HashId>(),
            Err(HashIdError::NotLowercaseHex)
        );
        assert_eq!("abcd".parse::<HashId>(), Err(HashIdError::BadLength(4)));
        assert_eq!(EMPTY.parse::<HashId>().unwrap(), sha256(b""));
    }

    proptest! {
        #[test]
        fn hex_is_lowercase_and_round_trips(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let id = sha256(&data);
            let hex = id.to_hex();
            prop_assert_eq!(hex.len(), 64);
            prop_assert!(hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
            prop_assert_eq!(hex.parse::<HashId>().unwrap(), id);
            prop_assert_eq!(sha256(&data), id);
        }
    }
}
