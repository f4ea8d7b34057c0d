"""Key-distribution node: collects mixer public keys and serves bundles.

Mixers publish one record per (mixer, round) to any info node, which keeps a
local copy and replicates it into the DHT under
sha1("mixer-key" | mixer_id | round).  A bundle is assembled against the
coordinator-signed directory for the round, so every info node that sees the
same records produces byte-identical bundles.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

from .dht import ID_BYTES, DhtNode, dht_key, id_from_bytes, id_to_bytes, round_ttl
from .directory import Directory, DirectoryVerifier
from .envelope import Address, AddressKind
from .errors import (
    IncompleteBundle,
    MalformedSerialization,
    StaleRound,
    UnknownRound,
    ZephyrError,
)
from .net import Op
from .wire import Reader, versioned

log = logging.getLogger(__name__)

KEY_BYTES = 32


def mixer_key_dht(mixer_id: int, round_no: int) -> int:
    return dht_key(b"mixer-key" + id_to_bytes(mixer_id) + struct.pack("<Q", round_no))


@dataclass(frozen=True)
class MixerKeyRecord:
    mixer_id: int
    round: int
    public_key: bytes
    address: Address
    published_at: float

    def __post_init__(self) -> None:
        if self.address.kind is not AddressKind.MIXER:
            raise ValueError("a mixer key record needs a mixer address")
        if len(self.public_key) != KEY_BYTES:
            raise ValueError("mixer public key must be 32 bytes")

    def to_bytes(self) -> bytes:
        w = versioned().raw(id_to_bytes(self.mixer_id)).u64(self.round).raw(self.public_key)
        return self.address.write(w).f64(self.published_at).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "MixerKeyRecord":
        r.version()
        mixer_id = id_from_bytes(r.raw(ID_BYTES, "mixer id"))
        round_no = r.u64("round")
        key = r.raw(KEY_BYTES, "public key")
        start = r.offset
        addr = Address.read(r)
        published = r.f64("published at")
        try:
            return cls(mixer_id, round_no, key, addr, published)
        except ValueError as exc:
            raise MalformedSerialization(str(exc), start) from None

    @classmethod
    def from_bytes(cls, data: bytes) -> "MixerKeyRecord":
        r = Reader(data)
        rec = cls.read(r)
        r.done()
        return rec

    def rank(self) -> tuple[float, bytes]:
        # latest publication wins; bytes break ties so every node agrees
        return (self.published_at, self.to_bytes())


@dataclass(frozen=True)
class KeyBundle:
    round: int
    records: tuple[MixerKeyRecord, ...]
    mpk: bytes
    directory: bytes

    def to_bytes(self) -> bytes:
        w = versioned().u64(self.round).u16(len(self.records))
        for rec in sorted(self.records, key=lambda x: x.mixer_id):
            w.blob(rec.to_bytes())
        return w.blob(self.mpk).blob(self.directory).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyBundle":
        r = Reader(data)
        r.version()
        round_no = r.u64("round")
        records = tuple(MixerKeyRecord.from_bytes(r.blob("record")) for _ in range(r.u16("record count")))
        mpk = r.blob("mpk")
        directory = r.blob("directory")
        r.done()
        ids = [rec.mixer_id for rec in records]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise MalformedSerialization("bundle records are not in canonical order", 0)
        return cls(round_no, records, mpk, directory)

    def record(self, mixer_id: int) -> MixerKeyRecord | None:
        for rec in self.records:
            if rec.mixer_id == mixer_id:
                return rec
        return None


class InfoNode(DhtNode):
    role = "info"

    def __init__(self, endpoint, transport, rng, node_id: int, coordinator_key: bytes, **dht_args):
        super().__init__(endpoint, transport, rng, node_id, **dht_args)
        self.verifier = DirectoryVerifier(coordinator_key)
        self.records: dict[tuple[int, int], MixerKeyRecord] = {}
        self.directories: dict[int, Directory] = {}
        self.mpks: dict[int, bytes] = {}
        self.current_round = 0
        self._bundles: dict[int, bytes] = {}
        self.on(Op.PUBLISH_KEY, self._h_publish)
        self.on(Op.FETCH_BUNDLE, self._h_fetch)
        self.on(Op.OPEN_ROUND, self._h_open_round)

    # -- operations -----------------------------------------------------------

    async def publish_key(self, record: MixerKeyRecord) -> None:
        if record.round < self.current_round:
            raise StaleRound(f"record for round {record.round}, info node at {self.current_round}")
        self._keep(record)
        self._bundles.pop(record.round, None)
        current = self.directories.get(self.current_round)
        ttl = round_ttl(current.round_duration) if current else None
        await self.store(mixer_key_dht(record.mixer_id, record.round), record.to_bytes(), ttl)
        self.trace("key-published", mixer=record.mixer_id, round=record.round)

    def _keep(self, record: MixerKeyRecord) -> None:
        slot = (record.mixer_id, record.round)
        old = self.records.get(slot)
        if old is None or record.rank() > old.rank():
            self.records[slot] = record

    async def fetch_bundle(self, round_no: int) -> KeyBundle:
        if round_no not in self.directories or round_no not in self.mpks:
            raise UnknownRound(f"no directory for round {round_no}")
        cached = self._bundles.get(round_no)
        if cached is not None:
            return KeyBundle.from_bytes(cached)
        directory = self.directories[round_no]
        records = []
        missing = []
        for entry in sorted(directory.mixers, key=lambda m: m.node_id):
            rec = await self._resolve(entry.node_id, round_no)
            if rec is None:
                missing.append(entry.node_id)
            else:
                records.append(rec)
        if missing:
            raise IncompleteBundle(missing)
        bundle = KeyBundle(round_no, tuple(records), self.mpks[round_no], directory.to_bytes())
        self._bundles[round_no] = bundle.to_bytes()
        return bundle

    async def _resolve(self, mixer_id: int, round_no: int) -> MixerKeyRecord | None:
        for v in await self.find_value(mixer_key_dht(mixer_id, round_no)):
            try:
                rec = MixerKeyRecord.from_bytes(v.value)
            except ZephyrError:
                continue
            if rec.mixer_id == mixer_id and rec.round == round_no:
                self._keep(rec)
        return self.records.get((mixer_id, round_no))

    def open_round(self, directory: Directory, mpk: bytes) -> None:
        self.verifier.accept(directory)
        r = directory.round
        self.directories[r] = directory
        self.mpks[r] = mpk
        self._bundles.pop(r, None)
        self.current_round = max(self.current_round, r)
        # retain only the current and previous round
        floor = self.current_round - 1
        for table in (self.directories, self.mpks, self._bundles):
            for old in [k for k in table if k < floor]:
                del table[old]
        for slot in [s for s in self.records if s[1] < floor]:
            del self.records[slot]

    # -- handlers -------------------------------------------------------------

    async def _h_publish(self, r: Reader, src) -> bytes:
        record = MixerKeyRecord.read(r)
        r.done()
        await self.publish_key(record)
        return b""

    async def _h_fetch(self, r: Reader, src) -> bytes:
        round_no = r.u64("round")
        r.done()
        bundle = await self.fetch_bundle(round_no)
        self.trace("bundle-served", round=round_no, client=src.host)
        return bundle.to_bytes()

    async def _h_open_round(self, r: Reader, src) -> bytes:
        directory = Directory.from_bytes(r.blob("directory"))
        mpk = r.blob("params")
        r.done()
        self.open_round(directory, mpk)
        return b""

    def state_size(self) -> int:
        return (
            super().state_size()
            + sum(len(rec.to_bytes()) for rec in self.records.values())
            + sum(len(v) for v in self._bundles.values())
            + sum(len(v) for v in self.mpks.values())
        )
