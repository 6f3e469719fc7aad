#!/usr/bin/env python3
"""Independent encoder for the 512-byte canonical header (golden-file oracle).

Regenerating is never expected; the .bin file is frozen.
"""
import hashlib
import pathlib


def esc(value: str) -> bytes:
    return value.encode("utf-8").replace(b"\\", b"\\\\").replace(b"\n", b"\\n")


fields = [
    ("to", "bob@warp2.example"),
    ("from", "alice@warp2.example"),
    ("date", "2014-06-01T12:00:00Z"),
    ("subject", "Meeting notes\nsecond line \\ with backslash, café"),
    ("body_hash", hashlib.sha256(b"golden body ciphertext").hexdigest()),
    ("attachment_hash", hashlib.sha256(b"golden attachment ciphertext").hexdigest()),
    ("receipt_nonce", bytes(range(16)).hex()),
]
content = b"".join(name.encode() + b"=" + esc(value) + b"\n" for name, value in fields)
assert len(content) <= 511
out = content + b"\x00" * (512 - len(content))
path = pathlib.Path(__file__).with_name("header_v1.bin")
path.write_bytes(out)
print(path, hashlib.sha256(out).hexdigest())
