"""Boneh-Franklin BasicIdent identity-based encryption.

Setup picks a master secret s and publishes P_pub = s*P.  An identity's
public key is H1(identity) in G1; its private key is s*H1(identity).
Encryption of a short payload m (at most 32 bytes) is

    U = r*P,  V = m XOR H2(e(H1(id), P_pub)^r)

and decryption recomputes the mask as H2(e(d_id, U)).

BasicIdent is only CPA-secure.  Zephyr never uses it alone: the payload is
always a symmetric key whose ciphertext is authenticated separately.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from functools import lru_cache

from ..errors import DecodeError, InvalidIdentity, MalformedSerialization, PayloadTooLong
from ..wire import Reader, Writer, versioned
from .pairing import STANDARD, PairingContext, get_context

H1_TAG = b"zephyr-h1"
H2_TAG = b"zephyr-h2"
H2_BYTES = 32


def canonical_identity(identity: str | bytes) -> bytes:
    if isinstance(identity, bytes):
        identity = identity.decode("utf-8")
    folded = identity.casefold()
    if not folded:
        raise InvalidIdentity("identity must be non-empty")
    return folded.encode("utf-8")


@lru_cache(maxsize=4096)
def _h1(ctx: PairingContext, identity: bytes):
    return ctx.hash_to_g1(identity, dst=H1_TAG)


def hash_identity(ctx: PairingContext, identity: str | bytes):
    return _h1(ctx, canonical_identity(identity))


def _h2(ctx: PairingContext, g) -> bytes:
    return hashlib.shake_256(H2_TAG + b"\x00" + ctx.gt_to_bytes(g)).digest(H2_BYTES)


@lru_cache(maxsize=4096)
def _identity_gt(ctx: PairingContext, p_pub, identity: bytes):
    return ctx.pair(_h1(ctx, identity), p_pub)


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


@dataclass(frozen=True)
class MasterPublicKey:
    ctx: PairingContext
    p_pub: tuple

    def to_bytes(self) -> bytes:
        return versioned().text(self.ctx.name).raw(self.ctx.encode_point(self.p_pub)).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MasterPublicKey":
        r = Reader(data)
        r.version()
        ctx = get_context(r.text("context name"))
        start = r.offset
        try:
            p_pub = ctx.decode_point(r.raw(ctx.point_bytes, "p_pub"))
        except DecodeError as exc:
            raise MalformedSerialization(str(exc), start) from None
        r.done()
        if p_pub is None:
            raise MalformedSerialization("p_pub is the identity element", start)
        return cls(ctx, p_pub)


@dataclass(frozen=True)
class MasterKeyPair:
    mpk: MasterPublicKey
    msk: int

    def __repr__(self) -> str:
        return f"MasterKeyPair(ctx={self.mpk.ctx.name}, msk=<hidden>)"


@dataclass(frozen=True)
class IdentityPrivateKey:
    ctx: PairingContext
    identity: bytes
    d_id: tuple

    def to_bytes(self) -> bytes:
        return (
            versioned()
            .text(self.ctx.name)
            .short_bytes(self.identity)
            .raw(self.ctx.encode_point(self.d_id))
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "IdentityPrivateKey":
        r = Reader(data)
        r.version()
        ctx = get_context(r.text("context name"))
        identity = r.short_bytes("identity")
        start = r.offset
        try:
            d_id = ctx.decode_point(r.raw(ctx.point_bytes, "d_id"))
        except DecodeError as exc:
            raise MalformedSerialization(str(exc), start) from None
        r.done()
        return cls(ctx, identity, d_id)

    def __repr__(self) -> str:
        return f"IdentityPrivateKey(identity={self.identity!r})"


@dataclass(frozen=True)
class IbeCiphertext:
    u: tuple
    v: bytes

    def write(self, ctx: PairingContext, w: Writer) -> Writer:
        return w.raw(ctx.encode_point(self.u)).short_bytes(self.v)

    def to_bytes(self, ctx: PairingContext) -> bytes:
        return self.write(ctx, versioned()).getvalue()

    @classmethod
    def read(cls, ctx: PairingContext, r: Reader) -> "IbeCiphertext":
        start = r.offset
        raw = r.raw(ctx.point_bytes, "ciphertext u")
        try:
            u = ctx.decode_point(raw)
        except DecodeError as exc:
            raise MalformedSerialization(str(exc), start) from None
        return cls(u, r.short_bytes("ciphertext v"))

    @classmethod
    def from_bytes(cls, ctx: PairingContext, data: bytes) -> "IbeCiphertext":
        r = Reader(data)
        r.version()
        c = cls.read(ctx, r)
        r.done()
        return c


def ibe_setup(rng: random.Random | None = None, ctx: PairingContext = STANDARD) -> MasterKeyPair:
    """Generate master keys.  Pass a seeded ``random.Random`` for reproducible runs."""
    rng = rng or random.SystemRandom()
    msk = ctx.random_scalar(rng)
    return MasterKeyPair(MasterPublicKey(ctx, ctx.mul(msk, ctx.generator)), msk)


def ibe_extract(master: MasterKeyPair, identity: str | bytes) -> IdentityPrivateKey:
    ctx = master.mpk.ctx
    ident = canonical_identity(identity)
    return IdentityPrivateKey(ctx, ident, ctx.mul(master.msk, _h1(ctx, ident)))


def verify_identity_key(mpk: MasterPublicKey, sk: IdentityPrivateKey) -> bool:
    """Check e(d_id, P) == e(H1(id), P_pub) without the master secret."""
    ctx = mpk.ctx
    if sk.ctx != ctx or sk.d_id is None:
        return False
    return ctx.pair(sk.d_id, ctx.generator) == _identity_gt(ctx, mpk.p_pub, sk.identity)


def ibe_encrypt(
    mpk: MasterPublicKey, identity: str | bytes, plaintext: bytes, rng: random.Random | None = None
) -> IbeCiphertext:
    if len(plaintext) > H2_BYTES:
        raise PayloadTooLong(f"IBE payload limited to {H2_BYTES} bytes, got {len(plaintext)}")
    rng = rng or random.SystemRandom()
    ctx = mpk.ctx
    ident = canonical_identity(identity)
    r = ctx.random_scalar(rng)
    g = ctx.gt_pow(_identity_gt(ctx, mpk.p_pub, ident), r)
    return IbeCiphertext(ctx.mul(r, ctx.generator), _xor(plaintext, _h2(ctx, g)))


def ibe_decrypt(sk: IdentityPrivateKey, c: IbeCiphertext) -> bytes:
    ctx = sk.ctx
    if c.u is None or not ctx.is_on_curve(c.u):
        raise DecodeError("ciphertext component u is not a valid group element")
    if len(c.v) > H2_BYTES:
        raise DecodeError("ciphertext component v too long")
    return _xor(c.v, _h2(ctx, ctx.pair(sk.d_id, c.u)))
