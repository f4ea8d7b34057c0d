"""XSalsa20-Poly1305 authenticated encryption (libsodium secretbox)."""
from __future__ import annotations

from nacl.bindings import crypto_secretbox, crypto_secretbox_open
from nacl.exceptions import CryptoError

from ..errors import AuthFailure, LengthError, MalformedInput

KEY_BYTES = 32
NONCE_BYTES = 24
TAG_BYTES = 16


def _check(key: bytes, nonce: bytes) -> None:
    if len(key) != KEY_BYTES:
        raise LengthError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
    if len(nonce) != NONCE_BYTES:
        raise LengthError(f"nonce must be {NONCE_BYTES} bytes, got {len(nonce)}")


def sym_encrypt(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    """Return tag || ciphertext; deterministic in (key, nonce, plaintext)."""
    _check(key, nonce)
    return crypto_secretbox(bytes(plaintext), bytes(nonce), bytes(key))


def sym_decrypt(key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    """Open a secretbox.

    Raises AuthFailure when the tag does not verify and MalformedInput when
    the input cannot even hold a tag.
    """
    _check(key, nonce)
    if len(ciphertext) < TAG_BYTES:
        raise MalformedInput(f"ciphertext shorter than the {TAG_BYTES}-byte tag")
    try:
        return crypto_secretbox_open(bytes(ciphertext), bytes(nonce), bytes(key))
    except CryptoError:
        raise AuthFailure("authentication failed") from None
