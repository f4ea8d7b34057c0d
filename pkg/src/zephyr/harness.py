"""In-process network simulator and measurement rig.

``SimWorld`` builds a complete network (coordinator, PKG, info nodes,
mixers, mailbox servers and clients) on a ``SimNetwork`` and a virtual
clock, drives it for a number of rounds, applies a fault plan, and checks
the system's invariants from the trace afterwards.  Every random choice
comes from generators derived from ``SimConfig.seed``, so a seed fixes the
run down to the bytes of the metrics CSV.

CSV columns: node_role, node_id, round, bytes_received, bytes_sent,
messages_processed, resident_set_estimate.  One row per server node per
round, sorted by (round, node_role, node_id).  Traffic before round 1 opens
(bootstrap, first key generation) is not attributed to any round.
"""
from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

from nacl.signing import SigningKey

from .client import ZephyrClient
from .coordinator import CoordinatorNode, DriverSettings
from .crypto.pairing import CONTEXTS, get_context
from .dht import Contact, DhtNode, node_id_from_key
from .directory import InfoEntry, MixerEntry
from .envelope import Address
from .errors import ConfigInvalid, InvariantViolation, ZephyrError
from .info_node import InfoNode
from .mailbox import MailboxServer, MemoryMailboxStore
from .mixer import MixerNode, MixerSettings
from .net import Endpoint, Node
from .pkg import InMemoryEmailTransport, PkgNode, PrivateKeyGenerator
from .simnet import SimNetwork, run_virtual

log = logging.getLogger(__name__)

PORT = 7000
CSV_FIELDS = (
    "node_role",
    "node_id",
    "round",
    "bytes_received",
    "bytes_sent",
    "messages_processed",
    "resident_set_estimate",
)
FAULT_ACTIONS = ("crash", "recover", "drop-rate")


@dataclass
class FaultEvent:
    """``time`` is seconds after round ``round`` opens, or after start if round is 0."""

    time: float
    node: str
    action: str
    rate: float = 0.0
    round: int = 0


@dataclass
class SimConfig:
    mixers: int = 3
    info_nodes: int = 2
    pkgs: int = 1
    mailboxes: int = 4
    mailbox_servers: int = 1
    clients: int = 10
    rounds: int = 3
    seed: int = 42
    messages_per_client: int = 1
    round_duration: float = 10.0
    barrier_timeout: float = 30.0
    report_timeout: float = 60.0
    pairing: str = "ss1536"
    fetch: bool = True
    latency: float = 0.002
    jitter: float = 0.001
    fault_plan: list[FaultEvent] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("mixers", "info_nodes", "mailboxes", "mailbox_servers", "rounds"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be at least 1")
        if self.pkgs != 1:
            raise ConfigInvalid("exactly one PKG is supported")
        if self.clients < 0 or self.messages_per_client < 0:
            raise ConfigInvalid("client and message counts must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must fit in 64 bits")
        if self.pairing not in CONTEXTS:
            raise ConfigInvalid(f"unknown pairing context {self.pairing!r}")
        if self.round_duration <= 0:
            raise ConfigInvalid("round_duration must be positive")
        names = set(node_names(self))
        for f in self.fault_plan:
            if f.action not in FAULT_ACTIONS:
                raise ConfigInvalid(f"unknown fault action {f.action!r}")
            if f.node not in names:
                raise ConfigInvalid(f"fault plan names unknown node {f.node!r}")
            if f.time < 0 or not 0 <= f.rate <= 1:
                raise ConfigInvalid("fault times must be >= 0 and rates in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        try:
            data["fault_plan"] = [FaultEvent(**f) for f in data.get("fault_plan", [])]
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "SimConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def node_names(cfg: SimConfig) -> list[str]:
    names = ["coordinator", "pkg-0"]
    names += [f"mixer-{i}" for i in range(cfg.mixers)]
    names += [f"info-{i}" for i in range(cfg.info_nodes)]
    names += [f"mailbox-{i}" for i in range(cfg.mailbox_servers)]
    return names


@dataclass
class TraceEvent:
    time: float
    node: str
    event: str
    fields: dict


@dataclass
class SimResult:
    config: SimConfig
    csv: str
    report: dict
    events: list[TraceEvent]
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


class SimWorld:
    """One simulated deployment.  Build it inside a running virtual loop."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        self.ctx = get_context(cfg.pairing)
        seeds = random.Random(cfg.seed)

        def fork() -> random.Random:
            return random.Random(seeds.getrandbits(64))

        self.net = SimNetwork(fork(), cfg.latency, cfg.jitter)
        self.events: list[TraceEvent] = []
        self.names: dict[Node, str] = {}
        self.workload_rng = fork()

        coord_key = SigningKey(fork().randbytes(32))
        self.coordinator_key = bytes(coord_key.verify_key)
        coord_ep = Endpoint("coordinator", PORT)
        pkg_ep = Endpoint("pkg-0", PORT)
        mixer_keys = [SigningKey(fork().randbytes(32)) for _ in range(cfg.mixers)]
        mixer_eps = [Endpoint(f"mixer-{i}", PORT) for i in range(cfg.mixers)]
        info_eps = [Endpoint(f"info-{i}", PORT) for i in range(cfg.info_nodes)]
        info_ids = [node_id_from_key(fork().randbytes(32)) for _ in range(cfg.info_nodes)]
        box_eps = [Endpoint(f"mailbox-{i}", PORT) for i in range(cfg.mailbox_servers)]

        settings = DriverSettings(
            pkg=pkg_ep,
            info_nodes=tuple(InfoEntry(i, ep) for i, ep in zip(info_ids, info_eps)),
            mailbox_servers=tuple(box_eps),
            mailbox_count=cfg.mailboxes,
            round_duration=cfg.round_duration,
            report_timeout=cfg.report_timeout,
        )
        members = [
            MixerEntry(node_id_from_key(bytes(k.verify_key)), Address.mixer(ep.host, ep.port), bytes(k.verify_key))
            for k, ep in zip(mixer_keys, mixer_eps)
        ]
        tracer = self._trace
        self.coordinator = CoordinatorNode(coord_ep, self.net, fork(), coord_key, settings, members, tracer=tracer)
        self.email = InMemoryEmailTransport()
        self.pkg_rng = fork()
        self.pkg_core = PrivateKeyGenerator(self.pkg_rng, self.email, self.ctx,
                                            clock=lambda: asyncio.get_running_loop().time())
        self.pkg = PkgNode(pkg_ep, self.net, fork(), self.pkg_core, self.coordinator_key, tracer=tracer)
        self.info = [
            InfoNode(ep, self.net, fork(), nid, self.coordinator_key, tracer=tracer)
            for ep, nid in zip(info_eps, info_ids)
        ]
        mixer_settings = MixerSettings(barrier_timeout=cfg.barrier_timeout)
        self.mixers = [
            MixerNode(ep, self.net, fork(), k, self.coordinator_key, coord_ep, info_eps,
                      settings=mixer_settings, driver_settings=settings, tracer=tracer)
            for k, ep in zip(mixer_keys, mixer_eps)
        ]
        self.mailboxes = [
            MailboxServer(ep, self.net, fork(), MemoryMailboxStore(), self.coordinator_key, tracer=tracer)
            for ep in box_eps
        ]
        self.identities = [f"user{i}@zephyr.test" for i in range(cfg.clients)]
        self.clients = [
            ZephyrClient(self.net, pkg_ep, info_eps, self.coordinator_key, seed=fork().getrandbits(64),
                         name=f"client-{i}")
            for i in range(cfg.clients)
        ]
        self.by_name: dict[str, Node] = {}
        for node in self.servers():
            self.by_name[node.endpoint.host] = node
            self.names[node] = node.endpoint.host

        self.expected: dict[tuple[int, str], list[bytes]] = defaultdict(list)
        self.delivered: dict[tuple[int, str], list[bytes]] = {}
        self.send_failures: list[str] = []
        self.sessions: dict[tuple[int, int], object] = {}
        self.snapshots: dict[int, dict[str, tuple[int, int]]] = {}
        self.current_round = 0
        self.finished = asyncio.Event()
        self._work: list[asyncio.Task] = []
        self.crashed: set[str] = set()
        self.round_opened: dict[int, float] = {}

    # -- plumbing -----------------------------------------------------------------

    def servers(self) -> list[Node]:
        return [self.coordinator, self.pkg, *self.info, *self.mixers, *self.mailboxes]

    def dht_nodes(self) -> list[DhtNode]:
        return [self.coordinator, *self.info, *self.mixers]

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    def _trace(self, node, event: str, data: dict) -> None:
        self.events.append(TraceEvent(self.now(), self.names.get(node, str(node.endpoint)), event, data))

    def _observer(self, event: str, driver) -> None:
        if event == "open":
            r = driver.state.round
            self._snapshot(r)
            self.current_round = r
            self.net.round_label = r
            self.round_opened[r] = self.now()
            self._schedule_faults(r)
            if self.cfg.clients:
                self._work.append(asyncio.get_running_loop().create_task(self._client_round(r)))
        elif event == "closing":
            if self.cfg.fetch and self.cfg.clients:
                self._work.append(asyncio.get_running_loop().create_task(self._fetch_round(driver.state.round)))
        elif event == "finished":
            self.finished.set()

    def _snapshot(self, label: int) -> None:
        self.snapshots[label] = {
            self.names[n]: (n.messages_processed, n.state_size()) for n in self.servers()
        }

    # -- faults -------------------------------------------------------------------

    def _schedule_faults(self, round_no: int) -> None:
        for f in self.cfg.fault_plan:
            if f.round == round_no:
                asyncio.get_running_loop().call_later(
                    f.time, lambda f=f: self._work.append(asyncio.get_running_loop().create_task(self.apply_fault(f)))
                )

    async def apply_fault(self, f: FaultEvent) -> None:
        node = self.by_name[f.node]
        self._trace(node, f"fault-{f.action}", {"rate": f.rate})
        if f.action == "crash" and f.node not in self.crashed:
            self.crashed.add(f.node)
            await node.stop()
        elif f.action == "recover" and f.node in self.crashed:
            self.crashed.discard(f.node)
            if node is self.coordinator:
                await self.coordinator.recover()
            else:
                await node.start()
        elif f.action == "drop-rate":
            self.net.drop_rate[node.endpoint] = f.rate

    # -- workload -----------------------------------------------------------------

    def _message(self, round_no: int, sender: int, j: int) -> bytes:
        return f"round {round_no} message {j} from user{sender}".encode()

    async def _client_round(self, round_no: int) -> None:
        plan = []
        for i in range(self.cfg.clients):
            for j in range(self.cfg.messages_per_client):
                plan.append((i, self.workload_rng.randrange(self.cfg.clients), j))
        await asyncio.gather(*(self._enroll(i, round_no) for i in range(self.cfg.clients)))
        by_sender = defaultdict(list)
        for i, to, j in plan:
            by_sender[i].append((to, j))
        await asyncio.gather(*(self._send_all(i, round_no, by_sender[i]) for i in sorted(by_sender)))

    async def _enroll(self, i: int, round_no: int) -> None:
        try:
            s = await self.clients[i].enroll(self.identities[i], self.email.latest_code)
        except ZephyrError as exc:
            self.send_failures.append(f"round {round_no}: user{i} enroll failed: {exc!r}")
            return
        if s.round != round_no:
            self.send_failures.append(f"round {round_no}: user{i} enrolled into round {s.round}")
        self.sessions[(round_no, i)] = s

    async def _send_all(self, i: int, round_no: int, items) -> None:
        s = self.sessions.get((round_no, i))
        if s is None:
            return
        for to, j in items:
            msg = self._message(round_no, i, j)
            try:
                await self.clients[i].send(s, self.identities[to], msg)
            except ZephyrError as exc:
                self.send_failures.append(f"round {round_no}: user{i} -> user{to} failed: {exc!r}")
                continue
            self.expected[(round_no, self.identities[to])].append(msg)

    async def _fetch_round(self, round_no: int) -> None:
        async def one(i: int) -> None:
            s = self.sessions.get((round_no, i))
            if s is None:
                return
            try:
                got = await self.clients[i].fetch_round(s)
            except ZephyrError as exc:
                self.send_failures.append(f"round {round_no}: user{i} fetch failed: {exc!r}")
                return
            self.delivered[(round_no, self.identities[i])] = [m for m, _ in got]

        await asyncio.gather(*(one(i) for i in range(self.cfg.clients)))

    # -- lifecycle ----------------------------------------------------------------

    async def start(self) -> None:
        for node in self.servers():
            await node.start()
        boot = [Contact(self.info[0].node_id, self.info[0].endpoint)]
        for node in self.dht_nodes():
            await node.join(boot)
        self.coordinator.driver.observers.append(self._observer)
        for m in self.mixers:
            m.driver_observers.append(self._observer)
            m.stop_after = self.cfg.rounds
        for f in self.cfg.fault_plan:
            if f.round == 0:
                asyncio.get_running_loop().call_later(
                    f.time, lambda f=f: self._work.append(asyncio.get_running_loop().create_task(self.apply_fault(f)))
                )

    async def run(self, limit: float | None = None) -> None:
        """Drive ``cfg.rounds`` rounds, then let outstanding client work finish."""
        limit = limit or self.cfg.rounds * (self.cfg.round_duration + self.cfg.report_timeout + 60) + 60
        self.coordinator.start_driving(self.cfg.rounds)
        try:
            await asyncio.wait_for(self.finished.wait(), limit)
        except asyncio.TimeoutError:
            self.send_failures.append(f"simulation did not finish {self.cfg.rounds} rounds within {limit}s")
        while any(not t.done() for t in self._work):
            await asyncio.gather(*[t for t in self._work if not t.done()], return_exceptions=True)
        self._snapshot(self.cfg.rounds + 1)

    async def stop(self) -> None:
        for node in self.servers():
            if node.endpoint.host not in self.crashed:
                await node.stop()

    # -- results ------------------------------------------------------------------

    def rows(self) -> list[dict]:
        out = []
        for r in range(1, self.cfg.rounds + 1):
            before, after = self.snapshots.get(r), self.snapshots.get(r + 1)
            if before is None or after is None:
                continue
            for node in self.servers():
                name = self.names[node]
                t = self.net.traffic.get((node.endpoint, r))
                out.append({
                    "node_role": node.role,
                    "node_id": name,
                    "round": r,
                    "bytes_received": t.bytes_received if t else 0,
                    "bytes_sent": t.bytes_sent if t else 0,
                    "messages_processed": after[name][0] - before[name][0],
                    "resident_set_estimate": after[name][1],
                })
        out.sort(key=lambda row: (row["round"], row["node_role"], row["node_id"]))
        return out

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def connected_clients(self) -> dict[str, int]:
        """Distinct clients that contacted each server over the whole run."""
        seen: dict[str, set[str]] = defaultdict(set)
        for e in self.events:
            if e.event in ("submit", "bundle-served", "mailbox-fetch"):
                seen[e.node].add(e.fields["client"])
        counts = {name: len(seen.get(name, ())) for name in sorted(self.by_name)}
        counts["pkg-0"] = sum(1 for i in range(self.cfg.clients) if any(k[1] == i for k in self.sessions))
        return counts

    def report(self) -> dict:
        rows = self.rows()
        per_role: dict[str, dict[str, float]] = {}
        groups = defaultdict(list)
        for row in rows:
            groups[row["node_role"]].append(row)
        for role in sorted(groups):
            rs = groups[role]
            per_role[role] = {
                "avg_bytes_received": sum(x["bytes_received"] for x in rs) / len(rs),
                "avg_bytes_sent": sum(x["bytes_sent"] for x in rs) / len(rs),
                "avg_messages_processed": sum(x["messages_processed"] for x in rs) / len(rs),
                "avg_resident_set_estimate": sum(x["resident_set_estimate"] for x in rs) / len(rs),
            }
        sent = sum(len(v) for v in self.expected.values())
        delivered = sum(len(v) for v in self.delivered.values())
        return {
            "total_clients": self.cfg.clients,
            "rounds": self.cfg.rounds,
            "messages_sent": sent,
            "messages_delivered": delivered,
            "clients_per_server": self.connected_clients(),
            "per_role": per_role,
        }

    def reports_by_round(self) -> dict[int, list[str]]:
        out = defaultdict(list)
        for e in self.events:
            if e.event == "round-report":
                out[e.fields["round"]].append(e.fields["report"])
        return out

    # -- invariant checks ---------------------------------------------------------

    def check(self) -> list[str]:
        v = list(self.send_failures)
        v += self.check_delivery()
        v += self.check_barrier()
        v += self.check_conservation()
        v += self.check_coordinator_safety()
        return v

    def check_delivery(self) -> list[str]:
        out = []
        if not self.cfg.fetch:
            return out
        for key in sorted(set(self.expected) | set(self.delivered)):
            want = Counter(self.expected.get(key, []))
            got = Counter(self.delivered.get(key, []))
            if key not in self.delivered and want:
                out.append(f"round {key[0]}: {key[1]} never fetched")
                continue
            if got - want:
                out.append(f"round {key[0]}: {key[1]} decrypted {sum((got - want).values())} foreign messages")
            if want - got:
                out.append(f"round {key[0]}: {key[1]} missing {sum((want - got).values())} messages")
        return out

    def check_barrier(self) -> list[str]:
        """No mixer peels before every directory mixer has signalled the barrier."""
        out = []
        signalled: dict[int, set[str]] = defaultdict(set)
        passed: set[tuple[str, int]] = set()
        sizes = {}
        for e in self.events:
            r = e.fields.get("round")
            if e.event == "barrier-signal":
                signalled[r].add(e.node)
            elif e.event == "round-open" and e.node.startswith("mixer"):
                sizes[r] = sizes.get(r, 0) + 1
            elif e.event == "barrier-pass":
                passed.add((e.node, r))
            elif e.event == "peel":
                if (e.node, r) not in passed:
                    out.append(f"{e.node} peeled in round {r} before passing the barrier")
                elif len(signalled[r]) < sizes.get(r, 0):
                    out.append(f"{e.node} peeled in round {r} with only {len(signalled[r])} signals")
        return out

    def check_conservation(self) -> list[str]:
        out = []
        for e in self.events:
            if e.event == "round-report":
                text = e.fields["report"]
                kv = dict(part.split("=") for part in text.split())
                rec, drop, fwd, up = (int(kv[k]) for k in ("received", "dropped", "forwarded", "uploaded"))
                if rec != drop + fwd + up:
                    out.append(f"{e.node}: conservation broken: {text}")
        return out

    def check_coordinator_safety(self) -> list[str]:
        actors: dict[tuple[int, str], set[int]] = defaultdict(set)
        for e in self.events:
            if e.event == "coord-phase":
                actors[(e.fields["round"], e.fields["phase"])].add(e.fields["actor"])
        return [
            f"round {r} phase {p} had {len(a)} coordinators"
            for (r, p), a in sorted(actors.items()) if len(a) > 1
        ]

    def phase_actors(self) -> dict[tuple[int, str], int]:
        out = {}
        for e in self.events:
            if e.event == "coord-phase":
                out[(e.fields["round"], e.fields["phase"])] = e.fields["actor"]
        return out


async def simulate(cfg: SimConfig, inspect: Callable | None = None) -> SimResult:
    world = SimWorld(cfg)
    await world.start()
    await world.run()
    extra = []
    if inspect is not None:
        extra = list(await inspect(world) or [])
    await world.stop()
    violations = world.check() + extra
    return SimResult(cfg, world.csv_text(), world.report(), world.events, violations)


def run_sim(cfg: SimConfig, strict: bool = False, inspect: Callable | None = None) -> SimResult:
    """Run a whole simulation on a fresh virtual-time loop."""
    result = run_virtual(simulate(cfg, inspect))
    if strict and result.violations:
        raise InvariantViolation("; ".join(result.violations[:20]))
    return result
