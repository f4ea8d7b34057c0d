"""Recipient sealing, message padding and the onion packet format.

A message for a recipient is sealed with the digest-as-key construction:
the 32-byte digest of the message keys a secretbox over the message, and
only the digest is IBE-encrypted to the recipient's identity.  The sealed
message is then wrapped in one hybrid layer per mixer.  Each layer's
plaintext is a fixed-size address slot naming the next hop (a mixer, or the
destination mailbox for the innermost layer) followed by the inner bytes.
"""
from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .crypto import hybrid
from .crypto.hybrid import X25519KeyPair
from .crypto.ibe import (
    IbeCiphertext,
    IdentityPrivateKey,
    MasterPublicKey,
    ibe_decrypt,
    ibe_encrypt,
)
from .crypto.pairing import PairingContext
from .crypto.sym import NONCE_BYTES, sym_decrypt, sym_encrypt
from .errors import (
    AuthFailure,
    DecodeError,
    MalformedInput,
    MalformedSerialization,
    PayloadTooLong,
    RouteTooShort,
)
from .wire import Reader, Writer, versioned

SEAL_PERSON = b"zephyr-seal"
MAILBOX_ID_BYTES = 32
MAX_HOST_BYTES = 253
# kind + host length + host + port + mailbox id
ADDRESS_SLOT = 1 + 2 + MAX_HOST_BYTES + 2 + MAILBOX_ID_BYTES
PAD_BUCKETS = (1024, 4096, 16384)
PAD_HEADER = 4
MAX_MESSAGE = PAD_BUCKETS[-1] - PAD_HEADER


class AddressKind(enum.IntEnum):
    MIXER = 1
    MAILBOX = 2


@dataclass(frozen=True)
class Address:
    kind: AddressKind
    host: str
    port: int
    mailbox_id: bytes | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")
        if len(self.host.encode("utf-8")) > MAX_HOST_BYTES:
            raise ValueError("host name too long")
        if self.kind is AddressKind.MAILBOX:
            if self.mailbox_id is None or len(self.mailbox_id) != MAILBOX_ID_BYTES:
                raise ValueError("mailbox address needs a 32-byte mailbox_id")
        elif self.mailbox_id is not None:
            raise ValueError("mixer address must not carry a mailbox_id")

    @classmethod
    def mixer(cls, host: str, port: int) -> "Address":
        return cls(AddressKind.MIXER, host, port)

    @classmethod
    def mailbox(cls, host: str, port: int, mailbox_id: bytes) -> "Address":
        return cls(AddressKind.MAILBOX, host, port, bytes(mailbox_id))

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.host, self.port)

    def write(self, w: Writer) -> Writer:
        w.u8(self.kind).text(self.host).u16(self.port)
        if self.kind is AddressKind.MAILBOX:
            w.raw(self.mailbox_id)
        return w

    @classmethod
    def read(cls, r: Reader) -> "Address":
        start = r.offset
        kind_byte = r.u8("address kind")
        try:
            kind = AddressKind(kind_byte)
        except ValueError:
            raise MalformedSerialization(f"unknown address kind {kind_byte}", start) from None
        host = r.text("host")
        port_at = r.offset
        port = r.u16("port")
        if port == 0:
            raise MalformedSerialization("port 0 is invalid", port_at)
        mailbox_id = r.raw(MAILBOX_ID_BYTES, "mailbox id") if kind is AddressKind.MAILBOX else None
        try:
            return cls(kind, host, port, mailbox_id)
        except ValueError as exc:
            raise MalformedSerialization(str(exc), start) from None

    def to_bytes(self) -> bytes:
        return self.write(versioned()).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Address":
        r = Reader(data)
        r.version()
        a = cls.read(r)
        r.done()
        return a


@dataclass(frozen=True)
class SealedMessage:
    enc_digest: IbeCiphertext
    nonce: bytes
    body: bytes

    def to_bytes(self, ctx: PairingContext) -> bytes:
        w = versioned()
        self.enc_digest.write(ctx, w)
        return w.raw(self.nonce).blob(self.body).getvalue()

    @classmethod
    def from_bytes(cls, ctx: PairingContext, data: bytes) -> "SealedMessage":
        r = Reader(data)
        r.version()
        enc = IbeCiphertext.read(ctx, r)
        nonce = r.raw(NONCE_BYTES, "nonce")
        body = r.blob("body")
        r.done()
        return cls(enc, nonce, body)


def message_digest(message: bytes) -> bytes:
    return hashlib.blake2b(message, digest_size=32, person=SEAL_PERSON).digest()


def seal_to_recipient(
    mpk: MasterPublicKey, recipient: str | bytes, message: bytes, rng: random.Random | None = None
) -> SealedMessage:
    if not message:
        raise ValueError("message must be non-empty")
    rng = rng or random.SystemRandom()
    digest = message_digest(message)
    nonce = rng.randbytes(NONCE_BYTES)
    body = sym_encrypt(digest, nonce, message)
    return SealedMessage(ibe_encrypt(mpk, recipient, digest, rng), nonce, body)


def open_as_recipient(sk: IdentityPrivateKey, sealed: SealedMessage | bytes) -> bytes | None:
    """Trial-decrypt one sealed message.  Returns None when it is not ours.

    Raw bytes that do not parse raise MalformedSerialization instead.
    """
    if not isinstance(sealed, SealedMessage):
        sealed = SealedMessage.from_bytes(sk.ctx, sealed)
    try:
        digest = ibe_decrypt(sk, sealed.enc_digest)
    except DecodeError:
        return None
    if len(digest) != 32:
        return None
    try:
        message = sym_decrypt(digest, sealed.nonce, sealed.body)
    except (AuthFailure, MalformedInput):
        return None
    if message_digest(message) != digest:
        return None
    return message


def padded_size(length: int) -> int:
    for bucket in PAD_BUCKETS:
        if length + PAD_HEADER <= bucket:
            return bucket
    raise PayloadTooLong(f"message of {length} bytes exceeds the largest bucket ({MAX_MESSAGE})")


def pad_message(message: bytes) -> bytes:
    size = padded_size(len(message))
    return Writer().blob(message).raw(bytes(size - PAD_HEADER - len(message))).getvalue()


def unpad_message(padded: bytes) -> bytes:
    if len(padded) not in PAD_BUCKETS:
        raise MalformedSerialization(f"padded length {len(padded)} is not a bucket size", 0)
    r = Reader(padded)
    message = r.blob("message")
    if any(padded[r.offset:]):
        raise MalformedSerialization("non-zero padding", r.offset)
    return message


@dataclass(frozen=True)
class MixerKeyPair:
    public: bytes
    secret: bytes
    mixer_id: int

    @property
    def x25519(self) -> X25519KeyPair:
        return X25519KeyPair(self.public, self.secret)

    @classmethod
    def generate(cls, mixer_id: int, rng) -> "MixerKeyPair":
        kp = hybrid.generate_keypair(rng)
        return cls(kp.public, kp.secret, mixer_id)

    def __repr__(self) -> str:
        return f"MixerKeyPair(mixer_id={self.mixer_id:040x}, public={self.public.hex()[:16]}...)"


class Hop(NamedTuple):
    public_key: bytes
    address: Address


@dataclass(frozen=True)
class OnionPacket:
    layer: bytes

    def to_bytes(self) -> bytes:
        return versioned().raw(self.layer).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OnionPacket":
        r = Reader(data)
        r.version()
        if r.remaining() < hybrid.OVERHEAD:
            raise MalformedSerialization("onion layer shorter than the seal overhead", r.offset)
        return cls(r.raw(r.remaining(), "layer"))


def _layer_plaintext(next_hop: Address, inner: bytes) -> bytes:
    addr = next_hop.write(Writer()).getvalue()
    return Writer().raw(addr).raw(bytes(ADDRESS_SLOT - len(addr))).blob(inner).getvalue()


def _parse_layer(plaintext: bytes) -> tuple[Address, bytes]:
    r = Reader(plaintext)
    addr = Address.read(r)
    slot_end = ADDRESS_SLOT
    if len(plaintext) < slot_end:
        raise MalformedSerialization("layer shorter than the address slot", len(plaintext))
    if any(plaintext[r.offset:slot_end]):
        raise MalformedSerialization("non-zero bytes in address slot padding", r.offset)
    r.offset = slot_end
    inner = r.blob("inner")
    r.done()
    return addr, inner


def onion_wrap(
    route: Sequence[Hop], mailbox: Address, sealed: bytes, rng: random.Random | None = None
) -> OnionPacket:
    """Wrap serialized sealed bytes for ``route``; route[0] peels first."""
    if len(route) < 1:
        raise RouteTooShort("route needs at least one mixer")
    if mailbox.kind is not AddressKind.MAILBOX:
        raise ValueError("final destination must be a mailbox address")
    rng = rng or random.SystemRandom()
    inner = bytes(sealed)
    next_hop = mailbox
    for hop in reversed(route):
        inner = hybrid.seal(hop.public_key, _layer_plaintext(next_hop, inner), rng)
        next_hop = hop.address
    return OnionPacket(inner)


def onion_peel(keypair: MixerKeyPair, packet: OnionPacket) -> tuple[Address, bytes]:
    """Remove one layer.  Raises OpenFailure for a wrong key or tampering."""
    plaintext = hybrid.open_sealed(keypair.x25519, packet.layer)
    return _parse_layer(plaintext)
