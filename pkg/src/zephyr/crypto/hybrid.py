"""Sealing to an X25519 public key: ephemeral DH, derived key, secretbox."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

from nacl.bindings import crypto_scalarmult, crypto_scalarmult_base
from nacl.exceptions import CryptoError

from ..errors import AuthFailure, MalformedInput, OpenFailure
from .sym import NONCE_BYTES, TAG_BYTES, sym_decrypt, sym_encrypt

PUBLIC_BYTES = 32
OVERHEAD = PUBLIC_BYTES + NONCE_BYTES + TAG_BYTES


@dataclass(frozen=True)
class X25519KeyPair:
    public: bytes
    secret: bytes

    def __repr__(self) -> str:
        return f"X25519KeyPair(public={self.public.hex()[:16]}...)"


def generate_keypair(rng) -> X25519KeyPair:
    secret = rng.randbytes(32)
    return X25519KeyPair(crypto_scalarmult_base(secret), secret)


def _derive(shared: bytes, eph_pk: bytes, recipient_pk: bytes, label: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=32, person=label[:16])
    h.update(shared)
    h.update(eph_pk)
    h.update(recipient_pk)
    return h.digest()


def seal(recipient_pk: bytes, plaintext: bytes, rng, label: bytes = b"zephyr-layer") -> bytes:
    """eph_pk (32) || nonce (24) || secretbox(plaintext)."""
    eph = generate_keypair(rng)
    try:
        shared = crypto_scalarmult(eph.secret, recipient_pk)
    except CryptoError:
        raise MalformedInput("recipient public key is a low-order point") from None
    key = _derive(shared, eph.public, recipient_pk, label)
    nonce = rng.randbytes(NONCE_BYTES)
    return eph.public + nonce + sym_encrypt(key, nonce, plaintext)


def open_sealed(keypair: X25519KeyPair, blob: bytes, label: bytes = b"zephyr-layer") -> bytes:
    if len(blob) < OVERHEAD:
        raise OpenFailure("sealed blob too short")
    eph_pk = blob[:PUBLIC_BYTES]
    nonce = blob[PUBLIC_BYTES:PUBLIC_BYTES + NONCE_BYTES]
    try:
        shared = crypto_scalarmult(keypair.secret, eph_pk)
    except CryptoError:
        raise OpenFailure("ephemeral key is a low-order point") from None
    key = _derive(shared, eph_pk, keypair.public, label)
    try:
        return sym_decrypt(key, nonce, blob[PUBLIC_BYTES + NONCE_BYTES:])
    except (AuthFailure, MalformedInput):
        raise OpenFailure("layer did not authenticate") from None
