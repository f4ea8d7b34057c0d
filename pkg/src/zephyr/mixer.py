"""Mix node: collect onion packets, wait on the DHT barrier, peel, shuffle, route.

A round runs in hop stages.  Stage 0 is the batch submitted by clients.
After peeling and shuffling a stage, a mixer uploads packets addressed to
mailboxes and sends every other mixer exactly one stream for the next
stage, empty or not, so each peer knows when its input for that stage is
complete.  Routes never revisit a mixer, so ``min(5, mixers)`` stages
suffice.

The mixer also watches coordinator heartbeats.  When they stop, the live
mixers elect the lowest node id, and that mixer hosts a ``RoundDriver``
until the original coordinator can take the next round back.
"""
from __future__ import annotations

import asyncio
import enum
import hashlib
import logging
from dataclasses import dataclass, field

from nacl.signing import SigningKey

from .coordinator import (
    DriverSettings,
    PendingRound,
    RoundDriver,
    decode_status,
    encode_status,
    write_entries,
)
from .dht import ID_BYTES, Contact, DhtNode, id_from_bytes, id_to_bytes, node_id_from_key, round_ttl
from .directory import (
    Directory,
    DirectoryVerifier,
    RoundPhase,
    RoundReport,
    RoundState,
    elect,
    open_command,
    read_phase,
    sign_command,
)
from .envelope import Address, AddressKind, MixerKeyPair, OnionPacket, onion_peel
from .errors import (
    IllegalTransition,
    MalformedSerialization,
    NotJoined,
    OpenFailure,
    RpcTimeout,
    WrongRound,
    ZephyrError,
)
from .info_node import MixerKeyRecord
from .mailbox import encode_append
from .net import Endpoint, Op
from .wire import Reader, Writer

log = logging.getLogger(__name__)

MAX_STAGES = 5


def fisher_yates(n: int, rng) -> list[int]:
    """Uniform permutation of range(n); output[k] is the input index placed at k."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randrange(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def apply_permutation(items: list, perm: list[int]) -> list:
    return [items[i] for i in perm]


@dataclass
class MixBatch:
    round: int
    messages: list[bytes]
    permutation: list[int] = field(default_factory=list)

    def shuffled(self, rng) -> list[bytes]:
        self.permutation = fisher_yates(len(self.messages), rng)
        return apply_permutation(self.messages, self.permutation)


class MixerPhase(enum.Enum):
    COLLECTING = "collecting"
    BARRIER = "barrier"
    MIXING = "mixing"
    DONE = "done"


_NEXT = {
    MixerPhase.COLLECTING: MixerPhase.BARRIER,
    MixerPhase.BARRIER: MixerPhase.MIXING,
    MixerPhase.MIXING: MixerPhase.DONE,
}


class PhaseMachine:
    """Collecting -> Barrier -> Mixing -> Done -> Collecting(next round).

    ``abort`` is the one extra edge: any unfinished phase may drop to Done,
    which is how a barrier timeout or a missed close ends a round.
    """

    def __init__(self, round_no: int = 0) -> None:
        self.round = round_no
        self.phase = MixerPhase.DONE
        self.history: list[tuple[int, MixerPhase]] = []

    def advance(self, to: MixerPhase) -> None:
        if _NEXT.get(self.phase) is not to:
            raise IllegalTransition(f"{self.phase.value} -> {to.value}")
        self.phase = to
        self.history.append((self.round, to))

    def abort(self) -> None:
        if self.phase is not MixerPhase.DONE:
            self.phase = MixerPhase.DONE
            self.history.append((self.round, MixerPhase.DONE))

    def open(self, round_no: int) -> None:
        if round_no <= self.round:
            raise IllegalTransition(f"round {round_no} does not follow {self.round}")
        self.abort()
        self.round = round_no
        self.phase = MixerPhase.COLLECTING
        self.history.append((round_no, MixerPhase.COLLECTING))


@dataclass
class MixerSettings:
    barrier_poll: float = 0.1
    barrier_timeout: float = 30.0
    stage_timeout: float = 5.0
    failover_timeout: float = 3.0
    watchdog_interval: float = 0.5
    publish_attempts: int = 3
    rpc_timeout: float = 2.0


def _digest(packet: bytes) -> bytes:
    return hashlib.sha256(packet).digest()


class MixerNode(DhtNode):
    role = "mixer"

    def __init__(
        self,
        endpoint,
        transport,
        rng,
        signing_key: SigningKey,
        coordinator_key: bytes,
        coordinator_endpoint: Endpoint,
        info_nodes: list[Endpoint],
        settings: MixerSettings | None = None,
        driver_settings: DriverSettings | None = None,
        **dht_args,
    ):
        verify = bytes(signing_key.verify_key)
        super().__init__(endpoint, transport, rng, node_id_from_key(verify), **dht_args)
        self.signing_key = signing_key
        self.address = Address.mixer(self.endpoint.host, self.endpoint.port)
        self.settings = settings or MixerSettings()
        self.driver_settings = driver_settings
        self.verifier = DirectoryVerifier(coordinator_key)
        self.home_coordinator = Endpoint(*coordinator_endpoint)
        self.info_nodes = [Endpoint(*e) for e in info_nodes]
        self.sm = PhaseMachine()
        self.keypair: MixerKeyPair | None = None
        self.key_round = 0
        self.directory: Directory | None = None
        self.mpk: bytes = b""
        self.batch: list[bytes] = []
        self._seen: set[bytes] = set()
        self._inbox: dict[int, dict[int, list[bytes]]] = {}
        self._inbox_event = asyncio.Event()
        self._stage = 0
        self._counts = dict(received=0, peeled=0, dropped=0, forwarded=0, uploaded=0)
        self.reports: list[RoundReport] = []
        self._unacked: dict[int, RoundReport] = {}
        self.coord_endpoint = self.home_coordinator
        self.coord_phase = RoundPhase.OPEN
        self.last_heartbeat = 0.0
        self.acting: RoundDriver | None = None
        self.acted_rounds: set[int] = set()
        self.round_opened_at = 0.0
        # copied into any driver this mixer hosts after a failover
        self.driver_observers: list = []
        self.stop_after: int | None = None
        for op, h in (
            (Op.SUBMIT, self._h_submit),
            (Op.FORWARD, self._h_forward),
            (Op.CLOSE_ROUND, self._h_close),
            (Op.ROTATE_KEYS, self._h_rotate),
            (Op.OPEN_ROUND, self._h_open_round),
            (Op.HEARTBEAT, self._h_heartbeat),
            (Op.METRICS, self._h_metrics),
            (Op.STATUS, self._h_status),
            (Op.REPORT_DONE, self._h_report),
        ):
            self.on(op, h)

    @property
    def verify_key(self) -> bytes:
        return bytes(self.signing_key.verify_key)

    async def start(self) -> None:
        await super().start()
        self.last_heartbeat = self.now()
        self.spawn(self._watchdog())

    def in_directory(self) -> bool:
        return self.directory is not None and self.directory.mixer(self.node_id) is not None

    # -- ingestion --------------------------------------------------------------

    def receive_stream(self, packets: list[bytes], round_no: int) -> int:
        """Append client packets to the batch; returns how many were new."""
        if round_no != self.sm.round or self.sm.phase is not MixerPhase.COLLECTING or not self.in_directory():
            raise WrongRound(f"mixer is collecting round {self.sm.round}", self.sm.round)
        accepted = 0
        for raw in packets:
            try:
                OnionPacket.from_bytes(raw)
            except MalformedSerialization:
                self._counts["received"] += 1
                self._counts["dropped"] += 1
                self.trace("malformed", round=round_no)
                continue
            d = _digest(raw)
            if d in self._seen:
                continue
            self._seen.add(d)
            self.batch.append(raw)
            accepted += 1
        return accepted

    async def _h_submit(self, r: Reader, src) -> bytes:
        round_no = r.u64("round")
        packets = [r.blob("packet") for _ in range(r.u32("count"))]
        r.done()
        accepted = self.receive_stream(packets, round_no)
        self.trace("submit", round=round_no, client=src.host, count=accepted)
        return Writer().u32(accepted).getvalue()

    async def _h_forward(self, r: Reader, src) -> bytes:
        round_no = r.u64("round")
        stage = r.u8("stage")
        sender = id_from_bytes(r.raw(ID_BYTES, "sender"))
        packets = [r.blob("packet") for _ in range(r.u32("count"))]
        r.done()
        if round_no != self.sm.round or self.sm.phase not in (MixerPhase.BARRIER, MixerPhase.MIXING):
            raise WrongRound(f"mixer is in round {self.sm.round}", self.sm.round)
        if self.sm.phase is MixerPhase.MIXING and stage <= self._stage:
            # stage already processed: the stream arrived too late to mix
            self._counts["received"] += len(packets)
            self._counts["dropped"] += len(packets)
            self.trace("late-stream", round=round_no, stage=stage, count=len(packets))
            return b""
        self._inbox.setdefault(stage, {})[sender] = packets
        self._inbox_event.set()
        return b""

    # -- the round ----------------------------------------------------------------

    async def _h_close(self, r: Reader, src) -> bytes:
        _, body = open_command(self.verifier, b"close-round", r)
        round_no = body.u64("round")
        body.done()
        self.last_heartbeat = self.now()
        self.coord_phase = RoundPhase.MIXING
        if round_no == self.sm.round and self.sm.phase is MixerPhase.COLLECTING and self.in_directory():
            self.spawn(self.run_round())
        return b""

    async def run_round(self) -> RoundReport:
        round_no = self.sm.round
        peers = sorted(m.node_id for m in self.directory.mixers)
        self.sm.advance(MixerPhase.BARRIER)
        self.trace("barrier-signal", round=round_no)
        await self.barrier_signal(round_no, round_ttl(self.directory.round_duration))
        deadline = self.now() + self.settings.barrier_timeout
        while True:
            count = await self.barrier_count(round_no)
            if count >= len(peers):
                break
            if self.now() >= deadline:
                self.trace("barrier-timeout", round=round_no, count=count)
                self.sm.abort()
                c = self._counts
                report = RoundReport(round_no, self.node_id, c["received"] + len(self.batch), 0,
                                     c["dropped"] + len(self.batch), 0, 0, aborted=True)
                return await self._finish(report)
            await asyncio.sleep(self.settings.barrier_poll)
        barrier_at = self.now()
        self.trace("barrier-pass", round=round_no, count=count)
        self.sm.advance(MixerPhase.MIXING)

        stages = min(MAX_STAGES, len(peers))
        others = [p for p in peers if p != self.node_id]
        for stage in range(stages):
            if stage == 0:
                inputs = self.batch
            else:
                inputs = await self._gather_stage(stage, others)
            # streams for this stage that arrive from now on are late
            self._stage = stage
            self._counts["received"] += len(inputs)
            await self._mix_stage(round_no, stage, stages, inputs, others)
        c = self._counts
        report = RoundReport(round_no, self.node_id, c["received"], c["peeled"], c["dropped"],
                             c["forwarded"], c["uploaded"], barrier_at=barrier_at)
        self.sm.advance(MixerPhase.DONE)
        return await self._finish(report)

    async def _gather_stage(self, stage: int, others: list[int]) -> list[bytes]:
        deadline = self.now() + self.settings.stage_timeout
        while True:
            have = self._inbox.get(stage, {})
            if all(o in have for o in others):
                break
            remaining = deadline - self.now()
            if remaining <= 0:
                missing = [o for o in others if o not in have]
                self.trace("stage-timeout", round=self.sm.round, stage=stage, missing=len(missing))
                break
            self._inbox_event.clear()
            try:
                await asyncio.wait_for(self._inbox_event.wait(), remaining)
            except asyncio.TimeoutError:
                pass
        streams = self._inbox.pop(stage, {})
        return [p for sender in sorted(streams) for p in streams[sender]]

    async def _mix_stage(self, round_no, stage, stages, inputs, others) -> None:
        peeled: list[tuple[Address, bytes]] = []
        for raw in inputs:
            self.trace("peel", round=round_no, stage=stage)
            try:
                addr, inner = onion_peel(self.keypair, OnionPacket.from_bytes(raw))
            except (OpenFailure, MalformedSerialization):
                self._counts["dropped"] += 1
                continue
            peeled.append((addr, inner))
        self._counts["peeled"] += len(peeled)
        batch = MixBatch(round_no, peeled)
        out = batch.shuffled(self.rng)

        uploads: dict[Endpoint, list[tuple[bytes, bytes]]] = {}
        forwards: dict[int, list[bytes]] = {o: [] for o in others}
        last_stage = stage == stages - 1
        for addr, inner in out:
            if addr.kind is AddressKind.MAILBOX:
                uploads.setdefault(Endpoint(*addr.endpoint), []).append((addr.mailbox_id, inner))
                continue
            entry = self.directory.mixer_by_endpoint(addr.endpoint)
            if entry is None or entry.node_id == self.node_id or last_stage:
                self._counts["dropped"] += 1
                continue
            forwards[entry.node_id].append(OnionPacket(inner).to_bytes())

        for server in sorted(uploads):
            items = uploads[server]
            ok = await self._upload(server, round_no, items)
            self._counts["uploaded" if ok else "dropped"] += len(items)
        if last_stage:
            return
        results = await asyncio.gather(
            *(self._forward(self.directory.mixer(o).address.endpoint, round_no, stage + 1, forwards[o])
              for o in others)
        )
        for o, ok in zip(others, results):
            self._counts["forwarded" if ok else "dropped"] += len(forwards[o])

    async def _upload(self, server: Endpoint, round_no: int, items) -> bool:
        body = encode_append(round_no, items)
        for _ in range(2):
            try:
                await self.call(server, Op.APPEND, body, timeout=self.settings.rpc_timeout)
                return True
            except RpcTimeout:
                continue
            except ZephyrError as exc:
                self.trace("upload-rejected", round=round_no, error=type(exc).__name__)
                return False
        return False

    async def _forward(self, dst, round_no: int, stage: int, packets: list[bytes]) -> bool:
        w = Writer().u64(round_no).u8(stage).raw(id_to_bytes(self.node_id)).u32(len(packets))
        for p in packets:
            w.blob(p)
        try:
            await self.call(dst, Op.FORWARD, w.getvalue(), timeout=self.settings.rpc_timeout)
            return True
        except ZephyrError:
            return False

    async def _finish(self, report: RoundReport) -> RoundReport:
        self.reports.append(report)
        del self.reports[:-8]
        self.trace("round-report", round=report.round, report=report.as_text())
        self._unacked[report.round] = report
        await self._send_reports()
        return report

    async def _send_reports(self) -> None:
        for round_no in sorted(self._unacked):
            report = self._unacked[round_no]
            if self.acting is not None:
                self.acting.on_report(report)
                self._unacked.pop(round_no, None)
                continue
            try:
                await self.call(self.coord_endpoint, Op.REPORT_DONE,
                                Writer().blob(report.to_bytes()).getvalue(), timeout=self.settings.rpc_timeout)
                self._unacked.pop(round_no, None)
            except ZephyrError:
                pass

    # -- keys ---------------------------------------------------------------------

    async def rotate_keys(self, new_round: int) -> MixerKeyPair:
        """Fresh keypair for ``new_round``; the old secret is dropped."""
        if self.keypair is not None and self.key_round == new_round:
            return self.keypair
        fresh = MixerKeyPair.generate(self.node_id, self.rng)
        record = MixerKeyRecord(self.node_id, new_round, fresh.public, self.address, self.now())
        self.keypair = fresh
        self.key_round = new_round
        self.trace("keys-rotated", round=new_round)
        await self._publish(record)
        return fresh

    async def _publish(self, record: MixerKeyRecord) -> None:
        body = record.to_bytes()
        delay = 0.1
        last_error: Exception | None = None
        targets = list(self.info_nodes)
        self.rng.shuffle(targets)
        for attempt in range(self.settings.publish_attempts):
            target = targets[attempt % len(targets)]
            try:
                await self.call(target, Op.PUBLISH_KEY, body, timeout=self.settings.rpc_timeout)
                return
            except ZephyrError as exc:
                last_error = exc
                await asyncio.sleep(delay)
                delay *= 2
        self.trace("publish-failed", round=record.round)
        raise ZephyrError(f"key publication failed after {self.settings.publish_attempts} attempts: {last_error}")

    async def _h_rotate(self, r: Reader, src) -> bytes:
        _, body = open_command(self.verifier, b"rotate-keys", r)
        new_round = body.u64("round")
        body.done()
        self.last_heartbeat = self.now()
        self.coord_phase = RoundPhase.ROTATING
        if new_round <= self.sm.round and self.sm.phase is not MixerPhase.DONE:
            raise WrongRound("round still in progress", self.sm.round)
        kp = await self.rotate_keys(new_round)
        return kp.public

    async def _h_open_round(self, r: Reader, src) -> bytes:
        d = Directory.from_bytes(r.blob("directory"))
        mpk = r.blob("params")
        r.done()
        self.verifier.accept(d)
        self.open_round(d, mpk)
        return b""

    def open_round(self, d: Directory, mpk: bytes) -> None:
        if self.directory is not None and d.round <= self.directory.round:
            return
        self.directory = d
        self.mpk = mpk
        self.coord_endpoint = d.coordinator_endpoint
        self.coord_phase = RoundPhase.OPEN
        self.last_heartbeat = self.now()
        self.round_opened_at = self.now()
        if d.mixer(self.node_id) is None:
            self.sm.abort()
            return
        if self.key_round != d.round:
            # listed without a key for this round; nothing sealed to us can open
            self.trace("key-mismatch", round=d.round)
        self.sm.open(d.round)
        self.batch = []
        self._seen = set()
        self._inbox = {}
        self._stage = 0
        self._counts = dict(received=0, peeled=0, dropped=0, forwarded=0, uploaded=0)
        self.trace("round-open", round=d.round)

    # -- coordinator tracking and failover ------------------------------------------

    async def _h_heartbeat(self, r: Reader, src) -> bytes:
        signer, body = open_command(self.verifier, b"heartbeat", r)
        round_no = body.u64("round")
        phase = read_phase(body)
        body.raw(ID_BYTES, "coordinator")
        endpoint = Endpoint.read(body)
        body.done()
        if self.directory is not None and round_no < self.directory.round:
            return b""
        self.last_heartbeat = self.now()
        self.coord_phase = phase
        self.coord_endpoint = endpoint
        if self._unacked:
            self.spawn(self._send_reports())
        return b""

    async def _h_report(self, r: Reader, src) -> bytes:
        report = RoundReport.from_bytes(r.blob("report"))
        r.done()
        if self.acting is None:
            raise NotJoined("this mixer is not coordinating")
        self.acting.on_report(report)
        return b""

    async def _h_status(self, r: Reader, src) -> bytes:
        r.done()
        rnd = self.directory.round if self.directory else 0
        coord = self.acting.node_id if self.acting else (self.directory.coordinator if self.directory else 0)
        return encode_status(rnd, self.coord_phase, self.acting is not None, coord)

    async def _h_metrics(self, r: Reader, src) -> bytes:
        r.done()
        return "\n".join(rep.as_text() for rep in self.reports).encode()

    async def _watchdog(self) -> None:
        while True:
            await asyncio.sleep(self.settings.watchdog_interval)
            if self.acting is not None or not self.in_directory() or self.driver_settings is None:
                continue
            if self.now() - self.last_heartbeat <= self.settings.failover_timeout:
                continue
            await self._maybe_take_over()

    async def live_mixers(self) -> list[int]:
        live = [self.node_id]
        others = [m for m in self.directory.mixers if m.node_id != self.node_id]
        results = await asyncio.gather(*(self.ping(Contact(m.node_id, Endpoint(*m.address.endpoint)))
                                         for m in others))
        live += [m.node_id for m, ok in zip(others, results) if ok]
        return sorted(live)

    async def _maybe_take_over(self) -> None:
        live = await self.live_mixers()
        winner = elect(live)
        self.trace("election", round=self.directory.round, winner=winner, live=len(live))
        if winner != self.node_id:
            # give the winner time to start heartbeating
            self.last_heartbeat = self.now()
            return
        state = RoundState(self.directory, self.coord_phase, opened_at=self.round_opened_at)
        members = list(self.directory.mixers)
        driver = RoundDriver(self, self.signing_key, self.driver_settings, members,
                             hand_back=self._hand_back)
        driver.observers.extend(self.driver_observers)
        self.acting = driver
        self.acted_rounds.add(self.directory.round)
        self.trace("failover", round=self.directory.round, phase=self.coord_phase.name, actor=self.node_id)
        self.spawn(self._act(driver, state))

    async def _act(self, driver: RoundDriver, state: RoundState) -> None:
        try:
            await driver.resume(state, self.stop_after)
        finally:
            if self.acting is driver:
                self.acting = None
            self.last_heartbeat = self.now()

    async def _hand_back(self, driver: RoundDriver) -> bool:
        """Return the next round to the original coordinator if it is back."""
        try:
            body = await self.call(self.home_coordinator, Op.STATUS, b"", timeout=self.settings.rpc_timeout)
        except ZephyrError:
            return False
        decode_status(body)
        p: PendingRound = driver.pending
        payload = Writer().u64(p.round).blob(p.mpk).blob(driver.state.to_bytes())
        payload = write_entries(payload, p.members).getvalue()
        try:
            await self.call(self.home_coordinator, Op.HANDBACK,
                            sign_command(self.signing_key, b"handback", payload),
                            timeout=self.settings.rpc_timeout)
        except ZephyrError:
            return False
        self.trace("handback", round=p.round, actor=self.node_id)
        self.coord_endpoint = self.home_coordinator
        return True

    def state_size(self) -> int:
        inbox = sum(len(p) for st in self._inbox.values() for ps in st.values() for p in ps)
        return super().state_size() + sum(len(p) for p in self.batch) + inbox + 32 * len(self._seen)
