"""Key derivation and keyed-hash helpers.

One 32-byte deployment secret feeds every keyed primitive through
domain-separation labels, so marking, sealing and challenge codes can
never be cross-confused.
"""

from __future__ import annotations

import hashlib
import hmac

SECRET_LEN = 32

MARK_LABEL = b"mark"
SEAL_LABEL = b"seal"
OTP_LABEL = b"otp"


def load_secret(path: str) -> bytes:
    with open(path, "rb") as fh:
        secret = fh.read()
    if len(secret) != SECRET_LEN:
        raise ValueError(f"deployment secret must be exactly {SECRET_LEN} bytes")
    return secret


def derive_key(secret: bytes, label: bytes) -> bytes:
    return hmac.new(secret, label, hashlib.sha256).digest()


def mark_digest(secret: bytes, session_id: str, name: str, value: bytes) -> bytes:
    """Keyed hash binding a served parameter value to one session."""
    key = derive_key(secret, MARK_LABEL)
    msg = session_id.encode("utf-8") + b"\x00" + name.encode("utf-8") + b"\x00" + value
    return hmac.new(key, msg, hashlib.sha256).digest()


def digests_equal(a: bytes, b: bytes) -> bool:
    # Constant-time comparison; never use == on mark digests.
    return hmac.compare_digest(a, b)


def otp_code(secret: bytes, session_id: str, minute: int) -> str:
    """Deterministic 6-digit challenge code for (session, minute)."""
    key = derive_key(secret, OTP_LABEL)
    msg = session_id.encode("utf-8") + b"\x00" + str(minute).encode("ascii")
    digest = hmac.new(key, msg, hashlib.sha256).digest()
    return f"{int.from_bytes(digest[:4], 'big') % 1_000_000:06d}"
