//! Metadata-hiding messaging over a single shared inbox.
//!
//! Senders upload an encrypted header plus encrypted body and attachment to a
//! public pool that holds no addressing information. Recipients download every
//! header, keep the ones their keys can open, fetch the content blobs by hash,
//! and reveal a receipt preimage that lets the server purge the delivered
//! message.

pub mod client;
pub mod crypto;
pub mod hash;
pub mod inbox;
pub mod load;
pub mod message;

pub use crypto::{Ciphertext, CryptoError, DecryptFailure, KeyPair, PublicKey};
pub use hash::{sha256, HashId};
pub use load::{estimate, LoadEstimate, LoadParams};
pub use message::{
    BlobKind, Draft, Envelope, MessageError, MessageHeader, ReceiptSecret, HEADER_CT_LEN,
    HEADER_LEN,
};
