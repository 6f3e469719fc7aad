use chrono::{TimeZone, Utc};
use warp2_core::message::{canonical_serialize, parse_header, MessageHeader, ReceiptSecret};
use warp2_core::sha256;

const GOLDEN: &[u8; 512] = include_bytes!("golden/header_v1.bin");

fn golden_header() -> MessageHeader {
    let nonce: [u8; 16] = std::array::from_fn(|i| i as u8);
    MessageHeader {
        to: "bob@warp2.example".into(),
        from: "alice@warp2.example".into(),
        date: Utc.with_ymd_and_hms(2014, 6, 1, 12, 0, 0).unwrap(),
        subject: "Meeting notes\nsecond line \\ with backslash, café".into(),
        body_hash: sha256(b"golden body ciphertext"),
        attachment_hash: Some(sha256(b"golden attachment ciphertext")),
        receipt_nonce: nonce,
    }
}

#[test]
fn serializes_to_golden_bytes() {
    assert_eq!(&canonical_serialize(&golden_header()).unwrap(), GOLDEN);
}

#[test]
fn golden_bytes_parse_to_golden_header() {
    assert_eq!(parse_header(GOLDEN).unwrap(), golden_header());
}

#[test]
fn golden_receipt_values() {
    let secret = ReceiptSecret::from_padded_header(GOLDEN);
    assert_eq!(
        secret.preimage.to_hex(),
        "4348aaf208e057925ac5f5e94bbe78db40783999d021fbc6491e41d6d6a5ffd1"
    );
    assert_eq!(
        secret.lock().to_hex(),
        "5ed57d350e264259bc57d19db53769f95ff1d18168ec7ceb03be020c0315114c"
    );
    assert_eq!(
        golden_header().body_hash.to_hex(),
        "0584fc744aa192a9ecad27002b63a57dc0b1b4849c2c42eeee4094d28986de1a"
    );
}
