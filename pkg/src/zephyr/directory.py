"""Per-round directory, signed coordinator commands and round reports.

The coordinator signs a canonical encoding of each round's directory with
a long-lived Ed25519 key pinned in every node's configuration.  When a
mixer substitutes for a failed coordinator it signs with its own key; a
node accepts that signature only if the signer is listed as a mixer in the
last directory it verified.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace

from nacl.exceptions import BadSignatureError
from nacl.signing import SigningKey, VerifyKey

from .dht import ID_BYTES, id_from_bytes, id_to_bytes, node_id_from_key
from .envelope import Address
from .errors import MalformedSerialization, NoLiveCandidates, SignatureInvalid
from .net import Endpoint
from .wire import Reader, Writer, versioned


class RoundPhase(enum.IntEnum):
    OPEN = 1
    MIXING = 2
    CLOSING = 3
    ROTATING = 4


@dataclass(frozen=True)
class MixerEntry:
    node_id: int
    address: Address
    verify_key: bytes


@dataclass(frozen=True)
class InfoEntry:
    node_id: int
    endpoint: Endpoint


@dataclass(frozen=True)
class Directory:
    round: int
    mixers: tuple[MixerEntry, ...]
    info_nodes: tuple[InfoEntry, ...]
    mailbox_count: int
    mailbox_servers: tuple[Endpoint, ...]
    pkg: Endpoint
    salt: bytes
    round_duration: float
    coordinator: int
    coordinator_endpoint: Endpoint
    signer_key: bytes = b""
    signature: bytes = b""

    def canonical(self) -> bytes:
        w = versioned().u64(self.round)
        w.u16(len(self.mixers))
        for m in sorted(self.mixers, key=lambda m: m.node_id):
            m.address.write(w.raw(id_to_bytes(m.node_id)))
            w.raw(m.verify_key)
        w.u16(len(self.info_nodes))
        for i in sorted(self.info_nodes, key=lambda i: i.node_id):
            i.endpoint.write(w.raw(id_to_bytes(i.node_id)))
        w.u32(self.mailbox_count)
        w.u16(len(self.mailbox_servers))
        for ep in self.mailbox_servers:
            ep.write(w)
        self.pkg.write(w)
        w.short_bytes(self.salt).f64(self.round_duration)
        w.raw(id_to_bytes(self.coordinator))
        self.coordinator_endpoint.write(w)
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().blob(self.canonical()).raw(self.signer_key).raw(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Directory":
        outer = Reader(data)
        body = outer.blob("directory")
        signer = outer.raw(32, "signer key")
        sig = outer.raw(64, "signature")
        outer.done()
        r = Reader(body)
        r.version()
        rnd = r.u64("round")
        mixers = []
        for _ in range(r.u16("mixer count")):
            nid = id_from_bytes(r.raw(ID_BYTES, "mixer id"))
            addr = Address.read(r)
            mixers.append(MixerEntry(nid, addr, r.raw(32, "verify key")))
        infos = []
        for _ in range(r.u16("info count")):
            nid = id_from_bytes(r.raw(ID_BYTES, "info id"))
            infos.append(InfoEntry(nid, Endpoint.read(r)))
        mailbox_count = r.u32("mailbox count")
        servers = tuple(Endpoint.read(r) for _ in range(r.u16("server count")))
        pkg = Endpoint.read(r)
        salt = r.short_bytes("salt")
        duration = r.f64("round duration")
        coord = id_from_bytes(r.raw(ID_BYTES, "coordinator"))
        coord_ep = Endpoint.read(r)
        r.done()
        return cls(rnd, tuple(mixers), tuple(infos), mailbox_count, servers, pkg, salt, duration,
                   coord, coord_ep, signer, sig)

    def signed(self, key: SigningKey) -> "Directory":
        body = self.canonical()
        return replace(self, signer_key=bytes(key.verify_key), signature=key.sign(body).signature)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def mixer(self, node_id: int) -> MixerEntry | None:
        for m in self.mixers:
            if m.node_id == node_id:
                return m
        return None

    def mixer_by_endpoint(self, endpoint) -> MixerEntry | None:
        for m in self.mixers:
            if m.address.endpoint == tuple(endpoint):
                return m
        return None

    def mailbox_address(self, index: int) -> Address:
        server = self.mailbox_servers[index % len(self.mailbox_servers)]
        return Address.mailbox(server.host, server.port, mailbox_id(index))

    def mailbox_for(self, identity: bytes) -> Address:
        return self.mailbox_address(mailbox_index(identity, self.round, self.salt, self.mailbox_count))


def mailbox_id(index: int) -> bytes:
    return hashlib.sha256(b"zephyr-mailbox" + struct.pack("<I", index)).digest()


def mailbox_index(identity: bytes, round_no: int, salt: bytes, count: int) -> int:
    """Public mailbox assignment: anyone holding the directory can compute it."""
    h = hashlib.sha256(b"zephyr-mbox" + identity + struct.pack("<Q", round_no) + salt).digest()
    return int.from_bytes(h[:8], "little") % count


@dataclass
class RoundState:
    directory: Directory
    phase: RoundPhase
    last_mixer: int | None = None
    # local clock reading when the round opened; not serialized
    opened_at: float = 0.0

    @property
    def round(self) -> int:
        return self.directory.round

    @property
    def coordinator(self) -> int:
        return self.directory.coordinator

    def to_bytes(self) -> bytes:
        return (
            versioned()
            .u8(self.phase)
            .raw(id_to_bytes(self.last_mixer or 0))
            .blob(self.directory.to_bytes())
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoundState":
        r = Reader(data)
        r.version()
        phase = RoundPhase(r.u8("phase"))
        last = id_from_bytes(r.raw(ID_BYTES, "last mixer"))
        d = Directory.from_bytes(r.blob("directory"))
        r.done()
        return cls(d, phase, last or None)


@dataclass
class DirectoryVerifier:
    """Tracks which signing keys a node currently trusts."""

    pinned: bytes
    last: Directory | None = None
    history: dict[int, Directory] = field(default_factory=dict)

    def trusted(self) -> set[bytes]:
        keys = {self.pinned}
        if self.last is not None:
            keys |= {m.verify_key for m in self.last.mixers}
        return keys

    def check_signature(self, signer: bytes, message: bytes, signature: bytes) -> None:
        if signer not in self.trusted():
            raise SignatureInvalid("signer is neither the pinned coordinator nor a directory mixer")
        try:
            VerifyKey(signer).verify(message, signature)
        except (BadSignatureError, ValueError):
            raise SignatureInvalid("bad signature") from None

    def verify(self, d: Directory) -> Directory:
        self.check_signature(d.signer_key, d.canonical(), d.signature)
        if node_id_from_key(d.signer_key) != d.coordinator and d.signer_key != self.pinned:
            raise SignatureInvalid("directory signer does not match its coordinator field")
        return d

    def accept(self, d: Directory) -> Directory:
        self.verify(d)
        if self.last is None or d.round >= self.last.round:
            self.last = d
        self.history[d.round] = d
        for old in [r for r in self.history if r < d.round - 1]:
            del self.history[old]
        return d


def sign_command(key: SigningKey, op_name: bytes, payload: bytes) -> bytes:
    sig = key.sign(op_name + payload).signature
    return Writer().raw(bytes(key.verify_key)).raw(sig).blob(payload).getvalue()


def open_command(verifier: DirectoryVerifier, op_name: bytes, r: Reader) -> tuple[bytes, Reader]:
    signer = r.raw(32, "signer")
    sig = r.raw(64, "signature")
    payload = r.blob("payload")
    r.done()
    verifier.check_signature(signer, op_name + payload, sig)
    return signer, Reader(payload)


@dataclass(frozen=True)
class RoundReport:
    round: int
    mixer_id: int
    received: int = 0
    peeled: int = 0
    dropped: int = 0
    forwarded: int = 0
    uploaded: int = 0
    aborted: bool = False
    barrier_at: float = 0.0

    def to_bytes(self) -> bytes:
        w = versioned().u64(self.round).raw(id_to_bytes(self.mixer_id))
        for v in (self.received, self.peeled, self.dropped, self.forwarded, self.uploaded):
            w.u32(v)
        return w.u8(int(self.aborted)).f64(self.barrier_at).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoundReport":
        r = Reader(data)
        r.version()
        rnd = r.u64()
        mid = id_from_bytes(r.raw(ID_BYTES))
        counts = [r.u32() for _ in range(5)]
        aborted = bool(r.u8())
        at = r.f64()
        r.done()
        return cls(rnd, mid, *counts, aborted=aborted, barrier_at=at)

    def conserved(self) -> bool:
        return self.received == self.dropped + self.forwarded + self.uploaded

    def as_text(self) -> str:
        return (
            f"round={self.round} mixer={self.mixer_id:040x} received={self.received} "
            f"peeled={self.peeled} dropped={self.dropped} forwarded={self.forwarded} "
            f"uploaded={self.uploaded} aborted={int(self.aborted)}"
        )


def elect(live: list[int]) -> int:
    """Deterministic coordinator election: the lowest live node id wins."""
    if not live:
        raise NoLiveCandidates("no live mixer can take over coordination")
    return min(live)


def read_phase(r: Reader) -> RoundPhase:
    start = r.offset
    v = r.u8("phase")
    try:
        return RoundPhase(v)
    except ValueError:
        raise MalformedSerialization(f"unknown phase {v}", start) from None
