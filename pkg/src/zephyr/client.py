"""User-side library: enroll, send through a random route, fetch and trial-decrypt.

A sender needs only the recipient's email address: the recipient's mailbox
for a round is a public function of (identity, round, directory salt), so
sender and recipient compute the same column independently.
"""
from __future__ import annotations

import asyncio
import logging
import random
from dataclasses import dataclass
from typing import Callable

from .crypto import hybrid
from .crypto.ibe import IdentityPrivateKey, MasterPublicKey, canonical_identity, verify_identity_key
from .directory import Directory, DirectoryVerifier
from .envelope import (
    Address,
    Hop,
    onion_wrap,
    open_as_recipient,
    pad_message,
    padded_size,
    seal_to_recipient,
    unpad_message,
)
from .errors import (
    AuthRejected,
    IncompleteBundle,
    MalformedSerialization,
    NoMixers,
    RpcTimeout,
    UnknownRound,
    ZephyrError,
)
from .info_node import KeyBundle
from .mailbox import decode_records, encode_fetch_request
from .mixer import fisher_yates
from .net import Client, Endpoint, Op
from .pkg import KEY_DELIVERY_LABEL
from .wire import Reader, Writer

log = logging.getLogger(__name__)

MAX_ROUTE = 5
MIN_ROUTE = 2


@dataclass
class ClientSession:
    identity: str
    round: int
    own_key: IdentityPrivateKey
    bundle: KeyBundle
    directory: Directory
    mpk: MasterPublicKey
    mailbox: Address
    send_rng: random.Random
    route_rng: random.Random

    @property
    def mailbox_id(self) -> bytes:
        return self.mailbox.mailbox_id

    def to_json(self) -> dict:
        """Everything needed to resume the session later (the key is secret)."""
        return {
            "identity": self.identity,
            "round": self.round,
            "own_key": self.own_key.to_bytes().hex(),
            "bundle": self.bundle.to_bytes().hex(),
        }


@dataclass(frozen=True)
class SendReceipt:
    round: int
    route_length: int
    padded_size: int
    first_hop: int


def route_length(n_mixers: int, rng) -> int:
    if n_mixers < 1:
        raise NoMixers("bundle lists no mixers")
    lo, hi = min(MIN_ROUTE, n_mixers), min(MAX_ROUTE, n_mixers)
    return lo + rng.randrange(hi - lo + 1)


def choose_route(bundle: KeyBundle, rng) -> list[Hop]:
    """A fresh permutation of the bundle's mixers, truncated to a random length."""
    records = list(bundle.records)
    length = route_length(len(records), rng)
    perm = fisher_yates(len(records), rng)
    return [Hop(records[i].public_key, records[i].address) for i in perm[:length]]


class ZephyrClient:
    def __init__(
        self,
        transport,
        pkg: Endpoint,
        info_nodes: list[Endpoint],
        coordinator_key: bytes,
        seed: int | None = None,
        name: str = "client",
        timeout: float = 5.0,
    ):
        self.net = Client(transport, name)
        self.pkg = Endpoint(*pkg)
        self.info_nodes = [Endpoint(*e) for e in info_nodes]
        self.verifier = DirectoryVerifier(coordinator_key)
        self.rng = random.Random(seed) if seed is not None else random.SystemRandom()
        self.timeout = timeout

    async def _call(self, dst, op, body=b""):
        return await self.net.call(dst, op, body, timeout=self.timeout)

    # -- enrollment ------------------------------------------------------------

    async def enroll(self, identity: str, read_code: Callable[[str], str | None], attempts: int = 20) -> ClientSession:
        """Authenticate by emailed code, then fetch the round's bundle.

        ``read_code`` stands for the user reading their inbox.
        """
        await self._call(self.pkg, Op.BEGIN_AUTH, Writer().text(identity).getvalue())
        code = read_code(identity)
        if code is None:
            raise AuthRejected("no code arrived")
        own_key, round_no, params = await self.complete(identity, code)
        for attempt in range(attempts):
            try:
                bundle = await self.fetch_bundle(round_no)
                break
            except (UnknownRound, IncompleteBundle):
                # the PKG can rotate slightly ahead of the info nodes
                if attempt == attempts - 1:
                    raise
                await asyncio.sleep(0.2)
        return self._session(identity, own_key, bundle, params)

    async def complete(self, identity: str, code: str) -> tuple[IdentityPrivateKey, int, bytes]:
        reply_key = hybrid.generate_keypair(self.rng)
        body = Writer().text(identity).text(code).raw(reply_key.public).getvalue()
        r = Reader(await self._call(self.pkg, Op.COMPLETE_AUTH, body))
        round_no = r.u64("round")
        sealed = r.blob("key")
        params = r.blob("params")
        r.done()
        own_key = IdentityPrivateKey.from_bytes(hybrid.open_sealed(reply_key, sealed, KEY_DELIVERY_LABEL))
        mpk = MasterPublicKey.from_bytes(params)
        if own_key.identity != canonical_identity(identity) or not verify_identity_key(mpk, own_key):
            raise AuthRejected("issued key does not verify against the PKG parameters")
        return own_key, round_no, params

    async def fetch_bundle(self, round_no: int) -> KeyBundle:
        """Ask info nodes in random order until one answers."""
        order = list(self.info_nodes)
        self.rng.shuffle(order)
        last: Exception | None = None
        for node in order:
            try:
                bundle = KeyBundle.from_bytes(await self._call(node, Op.FETCH_BUNDLE, Writer().u64(round_no).getvalue()))
            except RpcTimeout as exc:
                last = exc
                continue
            self.verifier.accept(Directory.from_bytes(bundle.directory))
            return bundle
        raise last or RpcTimeout("no info node reachable")

    def restore(self, saved: dict) -> ClientSession:
        """Rebuild a session written by ``ClientSession.to_json``."""
        try:
            own_key = IdentityPrivateKey.from_bytes(bytes.fromhex(saved["own_key"]))
            bundle = KeyBundle.from_bytes(bytes.fromhex(saved["bundle"]))
            identity = saved["identity"]
        except (KeyError, ValueError) as exc:
            raise MalformedSerialization(f"bad session file: {exc!r}", 0) from None
        self.verifier.accept(Directory.from_bytes(bundle.directory))
        return self._session(identity, own_key, bundle, bundle.mpk)

    def _session(self, identity: str, own_key, bundle: KeyBundle, params: bytes) -> ClientSession:
        directory = Directory.from_bytes(bundle.directory)
        if bundle.mpk != params or directory.round != bundle.round:
            raise UnknownRound("bundle does not match the PKG's current round")
        mailbox = directory.mailbox_for(canonical_identity(identity))
        return ClientSession(
            identity=identity,
            round=bundle.round,
            own_key=own_key,
            bundle=bundle,
            directory=directory,
            mpk=MasterPublicKey.from_bytes(bundle.mpk),
            mailbox=mailbox,
            send_rng=random.Random(self.rng.getrandbits(64)),
            route_rng=random.Random(self.rng.getrandbits(64)),
        )

    # -- sending ---------------------------------------------------------------

    def build_packet(self, session: ClientSession, recipient: str, message: bytes):
        padded = pad_message(message)
        sealed = seal_to_recipient(session.mpk, recipient, padded, session.send_rng)
        route = choose_route(session.bundle, session.route_rng)
        mailbox = session.directory.mailbox_for(canonical_identity(recipient))
        packet = onion_wrap(route, mailbox, sealed.to_bytes(session.mpk.ctx), session.send_rng)
        return route, packet

    async def send(self, session: ClientSession, recipient: str, message: bytes) -> SendReceipt:
        size = padded_size(len(message))  # raises before anything touches the network
        route, packet = self.build_packet(session, recipient, message)
        body = Writer().u64(session.round).u32(1).blob(packet.to_bytes()).getvalue()
        await self._call(route[0].address.endpoint, Op.SUBMIT, body)
        first = session.directory.mixer_by_endpoint(route[0].address.endpoint)
        return SendReceipt(session.round, len(route), size, first.node_id if first else 0)

    # -- receiving ---------------------------------------------------------------

    async def fetch_round(self, session: ClientSession) -> list[tuple[bytes, int]]:
        """Download the whole mailbox column and keep what opens under our key."""
        server = Endpoint(*session.mailbox.endpoint)
        body = await self._call(server, Op.FETCH_ALL, encode_fetch_request(session.mailbox_id, session.round))
        out = []
        for rec in decode_records(body):
            try:
                opened = open_as_recipient(session.own_key, rec.blob)
            except ZephyrError:
                continue
            if opened is None:
                continue
            try:
                out.append((unpad_message(opened), rec.round))
            except MalformedSerialization:
                continue
        return out
