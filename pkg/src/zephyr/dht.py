"""Kademlia overlay with a multi-value store.

Node ids and keys are 160-bit integers compared under the XOR metric.
Unlike classic Kademlia, a key holds a *set* of values deduplicated by
(publisher, value digest); the mixers' ``readytomix`` barrier counts that
set.  Value lookups merge the sets returned by every responding node among
the k closest rather than stopping at the first hit, so a partially
replicated set is still read in full.
"""
from __future__ import annotations

import asyncio
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import LookupFailed, RpcTimeout, ZephyrError
from .net import Endpoint, Node, Op
from .wire import Reader, Writer

log = logging.getLogger(__name__)

ID_BITS = 160
ID_BYTES = 20
MAX_VALUE_BYTES = 4096


def node_id_from_key(public_key: bytes) -> int:
    return int.from_bytes(hashlib.sha1(public_key).digest(), "big")


def dht_key(data: bytes) -> int:
    return int.from_bytes(hashlib.sha1(data).digest(), "big")


def xor_distance(a: int, b: int) -> int:
    return a ^ b


def id_to_bytes(node_id: int) -> bytes:
    return node_id.to_bytes(ID_BYTES, "little")


def id_from_bytes(data: bytes) -> int:
    return int.from_bytes(data, "little")


def barrier_key(round_no: int) -> int:
    return dht_key(b"readytomix" + struct.pack("<Q", round_no))


def round_ttl(round_duration: float) -> float:
    """Lifetime of per-round values (barrier signals, key records, round state)."""
    return 2 * round_duration


class Contact(NamedTuple):
    node_id: int
    endpoint: Endpoint

    def write(self, w: Writer) -> Writer:
        w.raw(id_to_bytes(self.node_id))
        return self.endpoint.write(w)

    @classmethod
    def read(cls, r: Reader) -> "Contact":
        node_id = id_from_bytes(r.raw(ID_BYTES, "node id"))
        return cls(node_id, Endpoint.read(r))


class DhtValue(NamedTuple):
    publisher: int
    value: bytes


class RoutingTable:
    def __init__(self, own_id: int, k: int = 8):
        self.own_id = own_id
        self.k = k
        self.buckets: list[list[Contact]] = [[] for _ in range(ID_BITS)]

    def bucket_index(self, node_id: int) -> int:
        d = self.own_id ^ node_id
        if d == 0:
            raise ValueError("a node does not store itself")
        return d.bit_length() - 1

    def add(self, contact: Contact) -> Contact | None:
        """Insert or refresh ``contact``.

        Returns the least-recently-seen contact when the bucket is full; the
        caller pings it and calls :meth:`replace` if it is gone.
        """
        bucket = self.buckets[self.bucket_index(contact.node_id)]
        for i, c in enumerate(bucket):
            if c.node_id == contact.node_id:
                del bucket[i]
                bucket.append(contact)
                return None
        if len(bucket) < self.k:
            bucket.append(contact)
            return None
        return bucket[0]

    def replace(self, stale: Contact, fresh: Contact) -> None:
        bucket = self.buckets[self.bucket_index(stale.node_id)]
        bucket[:] = [c for c in bucket if c.node_id != stale.node_id]
        if all(c.node_id != fresh.node_id for c in bucket) and len(bucket) < self.k:
            bucket.append(fresh)

    def remove(self, node_id: int) -> None:
        if node_id == self.own_id:
            return
        bucket = self.buckets[self.bucket_index(node_id)]
        bucket[:] = [c for c in bucket if c.node_id != node_id]

    def contacts(self) -> list[Contact]:
        return [c for b in self.buckets for c in b]

    def closest(self, target: int, n: int | None = None) -> list[Contact]:
        ranked = sorted(self.contacts(), key=lambda c: c.node_id ^ target)
        return ranked if n is None else ranked[:n]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)

    def check_invariants(self) -> None:
        seen = set()
        for i, bucket in enumerate(self.buckets):
            assert len(bucket) <= self.k, f"bucket {i} over capacity"
            for c in bucket:
                d = c.node_id ^ self.own_id
                assert 2**i <= d < 2 ** (i + 1), f"contact {c.node_id:x} misplaced in bucket {i}"
                assert c.node_id not in seen, "duplicate contact"
                seen.add(c.node_id)


@dataclass
class _Stored:
    value: bytes
    expiry: float


@dataclass
class LocalStore:
    entries: dict[int, dict[tuple[int, bytes], _Stored]] = field(default_factory=dict)

    def put(self, key: int, publisher: int, value: bytes, expiry: float) -> None:
        digest = hashlib.sha256(value).digest()
        self.entries.setdefault(key, {})[(publisher, digest)] = _Stored(value, expiry)

    def get(self, key: int, now: float) -> list[DhtValue]:
        slot = self.entries.get(key)
        if not slot:
            return []
        for k in [k for k, v in slot.items() if v.expiry <= now]:
            del slot[k]
        return sorted(DhtValue(pub, v.value) for (pub, _), v in slot.items())

    def size(self) -> int:
        return sum(len(v.value) + 64 for slot in self.entries.values() for v in slot.values())


@dataclass
class LookupResult:
    contacts: list[Contact]
    values: list[DhtValue]
    rounds: int
    queried: int


class DhtNode(Node):
    role = "dht"

    def __init__(
        self,
        endpoint: Endpoint,
        transport,
        rng,
        node_id: int,
        k: int = 8,
        alpha: int = 3,
        rpc_timeout: float = 0.5,
        ttl: float = 3600.0,
        tracer=None,
    ):
        super().__init__(endpoint, transport, rng, tracer)
        self.node_id = node_id
        self.contact = Contact(node_id, self.endpoint)
        self.table = RoutingTable(node_id, k)
        self.k = k
        self.alpha = alpha
        self.rpc_timeout = rpc_timeout
        self.ttl = ttl
        self.local = LocalStore()
        self.on(Op.PING, self._h_ping)
        self.on(Op.STORE, self._h_store)
        self.on(Op.FIND_NODE, self._h_find_node)
        self.on(Op.FIND_VALUE, self._h_find_value)

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    # -- inbound ------------------------------------------------------------

    def _observe(self, contact: Contact) -> None:
        if contact.node_id == self.node_id:
            return
        stale = self.table.add(contact)
        if stale is not None:
            self.spawn(self._evict_if_dead(stale, contact))

    async def _evict_if_dead(self, stale: Contact, fresh: Contact) -> None:
        if not await self.ping(stale):
            self.table.replace(stale, fresh)

    async def _h_ping(self, r: Reader, src) -> bytes:
        self._observe(Contact.read(r))
        return id_to_bytes(self.node_id)

    async def _h_store(self, r: Reader, src) -> bytes:
        self._observe(Contact.read(r))
        key = id_from_bytes(r.raw(ID_BYTES, "key"))
        publisher = id_from_bytes(r.raw(ID_BYTES, "publisher"))
        ttl = r.f64("ttl")
        value = r.blob("value")
        r.done()
        if len(value) > MAX_VALUE_BYTES:
            raise ZephyrError(f"value exceeds {MAX_VALUE_BYTES} bytes")
        self.local.put(key, publisher, value, self.now() + ttl)
        return b""

    def _write_contacts(self, w: Writer, contacts: list[Contact]) -> None:
        w.u16(len(contacts))
        for c in contacts:
            c.write(w)

    async def _h_find_node(self, r: Reader, src) -> bytes:
        sender = Contact.read(r)
        target = id_from_bytes(r.raw(ID_BYTES, "target"))
        r.done()
        self._observe(sender)
        w = Writer()
        self._write_contacts(w, self._closest_known(target))
        return w.getvalue()

    async def _h_find_value(self, r: Reader, src) -> bytes:
        sender = Contact.read(r)
        key = id_from_bytes(r.raw(ID_BYTES, "key"))
        r.done()
        self._observe(sender)
        values = self.local.get(key, self.now())
        w = Writer().u16(len(values))
        for v in values:
            w.raw(id_to_bytes(v.publisher)).blob(v.value)
        self._write_contacts(w, self._closest_known(key))
        return w.getvalue()

    def _closest_known(self, target: int) -> list[Contact]:
        return sorted(self.table.contacts() + [self.contact], key=lambda c: c.node_id ^ target)[: self.k]

    # -- outbound RPCs --------------------------------------------------------

    def _head(self) -> Writer:
        return self.contact.write(Writer())

    async def _rpc(self, contact: Contact, op: Op, body: bytes) -> bytes | None:
        try:
            reply = await self.call(contact.endpoint, op, body, timeout=self.rpc_timeout)
        except RpcTimeout:
            self.table.remove(contact.node_id)
            return None
        self._observe(contact)
        return reply

    async def ping(self, contact: Contact) -> bool:
        return await self._rpc(contact, Op.PING, self._head().getvalue()) is not None

    async def _query(self, contact: Contact, target: int, mode: str):
        op = Op.FIND_VALUE if mode == "value" else Op.FIND_NODE
        reply = await self._rpc(contact, op, self._head().raw(id_to_bytes(target)).getvalue())
        if reply is None:
            return None
        r = Reader(reply)
        values = []
        if mode == "value":
            for _ in range(r.u16("value count")):
                values.append(DhtValue(id_from_bytes(r.raw(ID_BYTES)), r.blob("value")))
        contacts = [Contact.read(r) for _ in range(r.u16("contact count"))]
        return contacts, values

    async def iterative_lookup(self, target: int, mode: str = "node") -> LookupResult:
        """Query the alpha closest unqueried contacts per round until the
        k closest known contacts have all answered or failed."""
        candidates: dict[int, Contact] = {c.node_id: c for c in self.table.closest(target, self.k)}
        queried: set[int] = {self.node_id}
        failed: set[int] = set()
        values: dict[tuple[int, bytes], DhtValue] = {}
        if mode == "value":
            for v in self.local.get(target, self.now()):
                values[(v.publisher, v.value)] = v
        rounds = 0
        responded = 0
        had_contacts = bool(candidates)

        def best() -> list[Contact]:
            live = [c for c in candidates.values() if c.node_id not in failed]
            live.append(self.contact)
            return sorted(live, key=lambda c: c.node_id ^ target)[: self.k]

        while True:
            pending = [c for c in best() if c.node_id not in queried][: self.alpha]
            if not pending:
                break
            rounds += 1
            for c in pending:
                queried.add(c.node_id)
            results = await asyncio.gather(*(self._query(c, target, mode) for c in pending))
            for c, res in zip(pending, results):
                if res is None:
                    failed.add(c.node_id)
                    continue
                responded += 1
                contacts, vals = res
                for nc in contacts:
                    if nc.node_id != self.node_id and nc.node_id not in candidates:
                        candidates[nc.node_id] = nc
                for v in vals:
                    values[(v.publisher, v.value)] = v
        if had_contacts and responded == 0:
            raise LookupFailed(f"no contact answered a lookup for {target:040x}")
        return LookupResult(best(), sorted(values.values()), rounds, len(queried) - 1)

    # -- public API -----------------------------------------------------------

    async def join(self, bootstrap: list[Contact]) -> None:
        for c in bootstrap:
            if c.node_id != self.node_id:
                self._observe(c)
        if len(self.table):
            try:
                await self.iterative_lookup(self.node_id)
            except LookupFailed:
                log.warning("%s: bootstrap contacts unreachable", self.endpoint)

    async def find_node(self, target: int) -> list[Contact]:
        return (await self.iterative_lookup(target, "node")).contacts

    async def store(self, key: int, value: bytes, ttl: float | None = None) -> int:
        """Replicate to the k closest nodes; returns the number of replicas."""
        if len(value) > MAX_VALUE_BYTES:
            raise ZephyrError(f"value exceeds {MAX_VALUE_BYTES} bytes")
        ttl = self.ttl if ttl is None else ttl
        try:
            targets = (await self.iterative_lookup(key, "node")).contacts
        except LookupFailed:
            targets = [self.contact]
        body = (
            self._head().raw(id_to_bytes(key)).raw(id_to_bytes(self.node_id)).f64(ttl).blob(value).getvalue()
        )

        async def put(c: Contact) -> bool:
            if c.node_id == self.node_id:
                self.local.put(key, self.node_id, value, self.now() + ttl)
                return True
            return await self._rpc(c, Op.STORE, body) is not None

        return sum(await asyncio.gather(*(put(c) for c in targets)))

    async def find_value(self, key: int) -> list[DhtValue]:
        try:
            return (await self.iterative_lookup(key, "value")).values
        except LookupFailed:
            return self.local.get(key, self.now())

    async def barrier_signal(self, round_no: int, ttl: float | None = None) -> None:
        await self.store(barrier_key(round_no), id_to_bytes(self.node_id), ttl)

    async def barrier_count(self, round_no: int) -> int:
        return len({v.value for v in await self.find_value(barrier_key(round_no))})

    def state_size(self) -> int:
        return self.local.size() + 48 * len(self.table)
