"""Round lifecycle: open, close, collect reports, rotate keys, hand back.

``RoundDriver`` holds the lifecycle logic and is hosted either by the
long-lived ``CoordinatorNode`` or, after a failover, by the mixer that won
the election.  Every phase a driver enters is traced as a ``coord-phase``
event carrying the actor's node id, which is what the safety checks read.
A substitute never re-enters the phase it inherited; it only continues.
"""
from __future__ import annotations

import asyncio
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

from nacl.signing import SigningKey

from .dht import ID_BYTES, DhtNode, dht_key, id_from_bytes, id_to_bytes, node_id_from_key, round_ttl
from .directory import (
    Directory,
    DirectoryVerifier,
    InfoEntry,
    MixerEntry,
    RoundPhase,
    RoundReport,
    RoundState,
    open_command,
    sign_command,
)
from .envelope import Address
from .errors import NoMixers, RpcTimeout, ZephyrError
from .net import Endpoint, Op
from .wire import Reader, Writer

log = logging.getLogger(__name__)


def round_state_key(round_no: int) -> int:
    return dht_key(b"round-state" + struct.pack("<Q", round_no))


@dataclass
class DriverSettings:
    pkg: Endpoint
    info_nodes: tuple[InfoEntry, ...]
    mailbox_servers: tuple[Endpoint, ...]
    mailbox_count: int = 16
    round_duration: float = 10.0
    report_timeout: float = 60.0
    rotation_timeout: float = 5.0
    heartbeat_interval: float = 1.0
    rpc_timeout: float = 2.0
    pkg_attempts: int = 10


@dataclass
class PendingRound:
    round: int
    members: list[MixerEntry]
    mpk: bytes


def write_entries(w: Writer, entries: list[MixerEntry]) -> Writer:
    w.u16(len(entries))
    for m in entries:
        m.address.write(w.raw(id_to_bytes(m.node_id)))
        w.raw(m.verify_key)
    return w


def read_entries(r: Reader) -> list[MixerEntry]:
    out = []
    for _ in range(r.u16("entry count")):
        nid = id_from_bytes(r.raw(ID_BYTES, "mixer id"))
        addr = Address.read(r)
        out.append(MixerEntry(nid, addr, r.raw(32, "verify key")))
    return out


def encode_open(directory: Directory, mpk: bytes) -> bytes:
    return Writer().blob(directory.to_bytes()).blob(mpk).getvalue()


@dataclass
class RoundDriver:
    host: DhtNode
    key: SigningKey
    settings: DriverSettings
    members: list[MixerEntry]
    # called before opening the next round; returning True ends this driver
    hand_back: Callable | None = None
    state: RoundState | None = None
    pending: PendingRound | None = None
    reports: dict[int, RoundReport] = field(default_factory=dict)
    observers: list[Callable] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.node_id = node_id_from_key(bytes(self.key.verify_key))
        self._report_event = asyncio.Event()
        self.active = False

    # -- bookkeeping ------------------------------------------------------------

    def _enter(self, phase: RoundPhase) -> None:
        self.state.phase = phase
        self.host.trace("coord-phase", round=self.state.round, phase=phase.name, actor=self.node_id)
        self._notify(phase.name.lower())

    def _notify(self, event: str) -> None:
        for obs in list(self.observers):
            obs(event, self)

    def _signed(self, op_name: bytes, payload: bytes) -> bytes:
        return sign_command(self.key, op_name, payload)

    async def _call(self, dst, op: Op, body: bytes, timeout: float | None = None):
        try:
            return await self.host.call(dst, op, body, timeout=timeout or self.settings.rpc_timeout)
        except (RpcTimeout, ZephyrError) as exc:
            self.host.trace("coord-rpc-failed", op=op.name, dst=str(dst), error=type(exc).__name__)
            return None

    # -- lifecycle steps --------------------------------------------------------

    async def rotate(self, next_round: int) -> PendingRound:
        if self.state is not None and self.state.phase is not RoundPhase.ROTATING:
            self._enter(RoundPhase.ROTATING)
        payload = Writer().u64(next_round).getvalue()
        mpk = None
        for attempt in range(self.settings.pkg_attempts):
            reply = await self._call(self.settings.pkg, Op.ROTATE_MASTER,
                                     self._signed(b"rotate-master", payload), self.settings.rotation_timeout)
            if reply is not None:
                r = Reader(reply)
                r.u64("round")
                mpk = r.blob("params")
                break
            await asyncio.sleep(min(2.0 ** attempt * 0.1, 2.0))
        if mpk is None:
            raise ZephyrError("PKG unreachable; cannot rotate master keys")
        cmd = self._signed(b"rotate-keys", payload)
        replies = await asyncio.gather(
            *(self._call(m.address.endpoint, Op.ROTATE_KEYS, cmd, self.settings.rotation_timeout)
              for m in self.members)
        )
        confirmed = [m for m, rep in zip(self.members, replies) if rep is not None]
        laggards = [m.node_id for m, rep in zip(self.members, replies) if rep is None]
        if laggards:
            self.host.trace("rotation-laggards", round=next_round, mixers=[f"{x:040x}" for x in laggards])
        self.pending = PendingRound(next_round, confirmed, mpk)
        return self.pending

    async def open_round(self) -> RoundState:
        p = self.pending
        if not p.members:
            raise NoMixers(f"no mixer confirmed rotation for round {p.round}")
        d = Directory(
            round=p.round,
            mixers=tuple(sorted(p.members, key=lambda m: m.node_id)),
            info_nodes=tuple(self.settings.info_nodes),
            mailbox_count=self.settings.mailbox_count,
            mailbox_servers=tuple(self.settings.mailbox_servers),
            pkg=self.settings.pkg,
            salt=self.host.rng.randbytes(16),
            round_duration=self.settings.round_duration,
            coordinator=self.node_id,
            coordinator_endpoint=self.host.endpoint,
        ).signed(self.key)
        last = p.members[-1].node_id if p.members else None
        self.state = RoundState(d, RoundPhase.OPEN, last)
        self.reports = {}
        self.pending = None
        body = encode_open(d, p.mpk)
        targets = [m.address.endpoint for m in self.members]
        targets += [i.endpoint for i in self.settings.info_nodes]
        targets += list(self.settings.mailbox_servers) + [self.settings.pkg]
        # info nodes and mailboxes must know the round before any mixer opens it
        await asyncio.gather(*(self._call(t, Op.OPEN_ROUND, body) for t in targets[len(self.members):]))
        await asyncio.gather(*(self._call(t, Op.OPEN_ROUND, body) for t in targets[: len(self.members)]))
        self.state.opened_at = self.host.now()
        self._enter(RoundPhase.OPEN)
        try:
            await self.host.store(round_state_key(d.round), self.state.to_bytes(), round_ttl(d.round_duration))
        except ZephyrError:
            self.host.trace("round-state-unpublished", round=d.round)
        return self.state

    async def close_round(self, record: bool = True) -> None:
        if record:
            self._enter(RoundPhase.MIXING)
        cmd = self._signed(b"close-round", Writer().u64(self.state.round).getvalue())
        await asyncio.gather(
            *(self._call(m.address.endpoint, Op.CLOSE_ROUND, cmd) for m in self.state.directory.mixers)
        )

    def on_report(self, report: RoundReport) -> None:
        if self.state is None or report.round != self.state.round:
            return
        if self.state.directory.mixer(report.mixer_id) is None:
            return
        self.reports[report.mixer_id] = report
        self._report_event.set()

    async def collect_reports(self) -> dict[int, RoundReport]:
        expected = {m.node_id for m in self.state.directory.mixers}
        deadline = self.host.now() + self.settings.report_timeout
        while not expected <= set(self.reports):
            remaining = deadline - self.host.now()
            if remaining <= 0:
                missing = sorted(expected - set(self.reports))
                self.host.trace("reports-missing", round=self.state.round,
                                mixers=[f"{x:040x}" for x in missing])
                break
            self._report_event.clear()
            try:
                await asyncio.wait_for(self._report_event.wait(), remaining)
            except asyncio.TimeoutError:
                pass
        self._enter(RoundPhase.CLOSING)
        return dict(self.reports)

    async def _heartbeats(self) -> None:
        while True:
            st = self.state
            if st is not None:
                payload = (
                    Writer().u64(st.round).u8(st.phase).raw(id_to_bytes(self.node_id))
                    .getvalue()
                )
                payload = self.host.endpoint.write(Writer().raw(payload)).getvalue()
                cmd = self._signed(b"heartbeat", payload)
                for m in st.directory.mixers:
                    if m.node_id != self.host.node_id:
                        self.host.spawn(self._call(m.address.endpoint, Op.HEARTBEAT, cmd))
            await asyncio.sleep(self.settings.heartbeat_interval)

    async def drive(self, stop_after: int | None = None) -> None:
        """Run rounds from whatever phase ``state`` is in."""
        self.active = True
        beat = self.host.spawn(self._heartbeats())
        try:
            while True:
                st = self.state
                if st is None:
                    if self.pending is None:
                        await self.rotate(1)
                    await self.open_round()
                elif st.phase is RoundPhase.OPEN:
                    wait = st.directory.round_duration - (self.host.now() - st.opened_at)
                    if wait > 0:
                        await asyncio.sleep(wait)
                    await self.close_round()
                elif st.phase is RoundPhase.MIXING:
                    await self.collect_reports()
                elif st.phase is RoundPhase.CLOSING:
                    if stop_after is not None and st.round >= stop_after:
                        self._notify("finished")
                        return
                    await self.rotate(st.round + 1)
                elif st.phase is RoundPhase.ROTATING:
                    if self.pending is None or self.pending.round != st.round + 1:
                        await self.rotate(st.round + 1)
                    if self.hand_back is not None and await self.hand_back(self):
                        return
                    await self.open_round()
        finally:
            beat.cancel()
            self.active = False

    async def resume(self, state: RoundState, stop_after: int | None = None) -> None:
        """Continue a round started by another coordinator."""
        self.state = replace(state)
        if not self.state.opened_at:
            self.state.opened_at = self.host.now() - state.directory.round_duration
        self.host.trace("coord-takeover", round=state.round, phase=state.phase.name, actor=self.node_id)
        if state.phase is RoundPhase.MIXING:
            # the close may not have reached every mixer before the crash
            await self.close_round(record=False)
        await self.drive(stop_after)


def encode_status(round_no: int, phase: int, acting: bool, coordinator: int) -> bytes:
    return Writer().u64(round_no).u8(phase).u8(int(acting)).raw(id_to_bytes(coordinator)).getvalue()


def decode_status(body: bytes) -> tuple[int, int, bool, int]:
    r = Reader(body)
    out = (r.u64("round"), r.u8("phase"), bool(r.u8("acting")), id_from_bytes(r.raw(ID_BYTES)))
    r.done()
    return out


class CoordinatorNode(DhtNode):
    role = "coordinator"

    def __init__(self, endpoint, transport, rng, signing_key: SigningKey, settings: DriverSettings,
                 members: list[MixerEntry], **dht_args):
        node_id = node_id_from_key(bytes(signing_key.verify_key))
        super().__init__(endpoint, transport, rng, node_id, **dht_args)
        self.verifier = DirectoryVerifier(bytes(signing_key.verify_key))
        self.driver = RoundDriver(self, signing_key, settings, list(members))
        self.standby = False
        self.stop_after: int | None = None
        self.on(Op.REPORT_DONE, self._h_report)
        self.on(Op.HANDBACK, self._h_handback)
        self.on(Op.STATUS, self._h_status)
        self.driver.observers.append(self._track_directory)

    def _track_directory(self, event: str, driver: RoundDriver) -> None:
        if event == "open":
            self.verifier.accept(driver.state.directory)

    def start_driving(self, stop_after: int | None = None) -> asyncio.Task:
        self.stop_after = stop_after
        self.standby = False
        return self.spawn(self.driver.drive(stop_after))

    async def recover(self) -> None:
        """Restart after a crash: stand by if a substitute is acting, else resume."""
        await self.start()
        self.trace("coordinator-recovered")
        st = self.driver.state
        if st is None:
            self.start_driving(self.stop_after)
            return
        for m in st.directory.mixers:
            try:
                body = await self.call(m.address.endpoint, Op.STATUS, b"", timeout=self.rpc_timeout)
            except ZephyrError:
                continue
            _, _, acting, _ = decode_status(body)
            if acting:
                self.standby = True
                self.trace("coordinator-standby", round=st.round)
                return
        self.spawn(self.driver.resume(st, self.stop_after))

    async def _h_report(self, r: Reader, src) -> bytes:
        report = RoundReport.from_bytes(r.blob("report"))
        r.done()
        self.driver.on_report(report)
        return b""

    async def _h_handback(self, r: Reader, src) -> bytes:
        _, body = open_command(self.verifier, b"handback", r)
        next_round = body.u64("round")
        mpk = body.blob("params")
        prev = RoundState.from_bytes(body.blob("state"))
        members = read_entries(body)
        body.done()
        self.driver.state = prev
        self.driver.state.phase = RoundPhase.ROTATING
        self.driver.pending = PendingRound(next_round, members, mpk)
        self.verifier.accept(prev.directory)
        self.standby = False
        self.trace("handback-received", round=next_round)
        self.spawn(self.driver.drive(self.stop_after))
        return b""

    async def _h_status(self, r: Reader, src) -> bytes:
        st = self.driver.state
        if st is None:
            return encode_status(0, 0, self.driver.active, self.node_id)
        return encode_status(st.round, st.phase, self.driver.active, st.coordinator)

    def state_size(self) -> int:
        extra = len(self.driver.state.to_bytes()) if self.driver.state else 0
        return super().state_size() + extra + 64 * len(self.driver.reports)
