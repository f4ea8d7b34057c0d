"""Scripted scenarios run by ``zephyr sim scenario <name>``.

Each scenario builds a small simulated network, injects a fault or runs a
statistical experiment, and asserts the property it targets.  A failing
scenario carries the relevant slice of the event trace.
"""
from __future__ import annotations

import itertools
import random
from collections import Counter
from dataclasses import dataclass, field

from scipy.stats import chisquare

from .dht import Contact, DhtNode, dht_key, node_id_from_key
from .envelope import open_as_recipient, seal_to_recipient
from .harness import FaultEvent, SimConfig, SimWorld, TraceEvent, run_sim
from .mixer import MixBatch, fisher_yates
from .net import Endpoint
from .simnet import SimNetwork, run_virtual

P_THRESHOLD = 0.001


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    details: list[str] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)

    def summary(self) -> str:
        head = f"scenario {self.name}: {'PASS' if self.passed else 'FAIL'}"
        return "\n".join([head, *("  " + d for d in self.details)])


def _fmt(events: list[TraceEvent], kinds: set[str]) -> list[str]:
    return [f"{e.time:9.3f} {e.node:<12} {e.event} {e.fields}" for e in events if e.event in kinds]


def barrier(seed: int = 42, pairing: str = "toy40") -> ScenarioResult:
    details, ok = [], True
    kinds = {"barrier-signal", "barrier-pass", "barrier-timeout", "peel", "fault-crash"}

    full = run_sim(SimConfig(seed=seed, pairing=pairing, clients=4, rounds=1))
    passes = [e for e in full.events if e.event == "barrier-pass"]
    ok &= full.ok and len(passes) == 3
    details.append(f"all signalling: {len(passes)}/3 mixers passed, violations={len(full.violations)}")

    cfg = SimConfig(seed=seed, pairing=pairing, clients=4, rounds=1,
                    fault_plan=[FaultEvent(5.0, "mixer-1", "crash", round=1)])
    held = run_sim(cfg)
    peels = [e for e in held.events if e.event == "peel"]
    timeouts = [e for e in held.events if e.event == "barrier-timeout"]
    signals = {e.node: e.time for e in held.events if e.event == "barrier-signal"}
    early = [t for t in timeouts if t.time < signals.get(t.node, 0) + cfg.barrier_timeout]
    ok &= not peels and len(timeouts) == 2 and not early
    details.append(f"one mixer withheld: {len(peels)} peels, {len(timeouts)}/2 mixers timed out")
    trace = _fmt(held.events, kinds) if not ok else []
    return ScenarioResult("barrier", bool(ok), details, trace)


def failover_config(seed: int = 42, pairing: str = "toy40") -> SimConfig:
    """Coordinator crashes two seconds into round 2 and is back before it ends."""
    return SimConfig(seed=seed, pairing=pairing, clients=6, rounds=3, fault_plan=[
        FaultEvent(2.0, "coordinator", "crash", round=2),
        FaultEvent(7.0, "coordinator", "recover", round=2),
    ])


def failover(seed: int = 42, pairing: str = "toy40") -> ScenarioResult:
    cfg = failover_config(seed, pairing)
    seen = {}

    async def inspect(world: SimWorld):
        seen["lowest"] = min(m.node_id for m in world.mixers)
        seen["original"] = world.coordinator.node_id
        seen["actors"] = world.phase_actors()
        return []

    res = run_sim(cfg, inspect=inspect)
    actors = seen["actors"]
    sub, orig = seen["lowest"], seen["original"]
    checks = {
        "round 2 completed under the lowest-id mixer": actors.get((2, "CLOSING")) == sub
        and actors.get((2, "ROTATING")) == sub,
        "original coordinator opened round 3": actors.get((3, "OPEN")) == orig,
        "round 3 completed": (3, "CLOSING") in actors,
        "no invariant violations": res.ok,
    }
    details = [f"{k}: {'yes' if v else 'NO'}" for k, v in checks.items()] + res.violations[:5]
    trace = _fmt(res.events, {"coord-phase", "failover", "election", "handback", "handback-received",
                              "coordinator-standby", "fault-crash", "fault-recover"})
    passed = all(checks.values())
    return ScenarioResult("failover", passed, details, [] if passed else trace)


def rotation(seed: int = 42, pairing: str = "toy40", trials: int = 20) -> ScenarioResult:
    cfg = SimConfig(seed=seed, pairing=pairing, clients=3, rounds=2)
    out = {}

    async def inspect(world: SimWorld):
        info = world.info[0]
        b1, b2 = await info.fetch_bundle(1), await info.fetch_bundle(2)
        keys1 = {r.public_key for r in b1.records}
        keys2 = {r.public_key for r in b2.records}
        out["shared"] = len(keys1 & keys2)
        out["mpk_changed"] = b1.mpk != b2.mpk
        s1, s2 = world.sessions[(1, 0)], world.sessions[(2, 0)]
        rng = random.Random(seed)
        opened = 0
        for i in range(trials):
            sealed = seal_to_recipient(s1.mpk, s1.identity, f"stale {i}".encode(), rng)
            if open_as_recipient(s2.own_key, sealed) is not None:
                opened += 1
        out["opened"] = opened
        return []

    res = run_sim(cfg, inspect=inspect)
    passed = res.ok and out["shared"] == 0 and out["mpk_changed"] and out["opened"] == 0
    details = [
        f"mixer keys shared between rounds: {out['shared']}",
        f"master public key changed: {out['mpk_changed']}",
        f"round-1 ciphertexts opened by round-2 key: {out['opened']}/{trials}",
    ] + res.violations[:5]
    return ScenarioResult("rotation", passed, details)


def permutation_counts(n: int, trials: int, seed: int) -> list[int]:
    """How often fisher_yates produced each of the n! permutations, in lexicographic order."""
    rng = random.Random(seed)
    counts = Counter(tuple(fisher_yates(n, rng)) for _ in range(trials))
    return [counts[p] for p in itertools.permutations(range(n))]


def marked_position_counts(n: int, batches: int, seed: int) -> list[int]:
    """Output position of input 0 over many independent shuffles of one batch."""
    rng = random.Random(seed)
    counts = [0] * n
    messages = [b"marked"] + [f"m{i}".encode() for i in range(1, n)]
    for _ in range(batches):
        out = MixBatch(0, messages).shuffled(rng)
        counts[out.index(b"marked")] += 1
    return counts


def unlinkability(seed: int = 42, n: int = 8, batches: int = 10_000) -> ScenarioResult:
    counts = marked_position_counts(n, batches, seed)
    p = float(chisquare(counts).pvalue)
    details = [f"marked-message positions over {batches} batches of {n}: {counts}", f"chi-square p = {p:.4f}"]
    return ScenarioResult("unlinkability", p > P_THRESHOLD, details)


async def dht_resilience(seed: int = 42, nodes: int = 20, drop_fraction: float = 0.3,
                         values: int = 100, lookups: int = 100) -> dict:
    rng = random.Random(seed)
    net = SimNetwork(random.Random(rng.getrandbits(64)))
    overlay = [
        DhtNode(Endpoint(f"dht-{i}", 7000), net, random.Random(rng.getrandbits(64)),
                node_id_from_key(rng.randbytes(32)))
        for i in range(nodes)
    ]
    for n in overlay:
        await n.start()
    for n in overlay:
        await n.join([Contact(overlay[0].node_id, overlay[0].endpoint)])
    stored = {}
    for i in range(values):
        key = dht_key(f"value-{i}".encode())
        stored[key] = f"payload-{i}".encode()
        await overlay[rng.randrange(nodes)].store(key, stored[key])
    dead = rng.sample(range(nodes), int(nodes * drop_fraction))
    for i in dead:
        await overlay[i].stop()
    alive = [n for i, n in enumerate(overlay) if i not in dead]
    keys = sorted(stored)
    hits, worst_rounds = 0, 0
    for _ in range(lookups):
        key = keys[rng.randrange(len(keys))]
        node = alive[rng.randrange(len(alive))]
        res = await node.iterative_lookup(key, "value")
        worst_rounds = max(worst_rounds, res.rounds)
        if any(v.value == stored[key] for v in res.values):
            hits += 1
    for n in alive:
        await n.stop()
    return {"hits": hits, "lookups": lookups, "dropped": len(dead), "worst_rounds": worst_rounds}


def dos_routing(seed: int = 42) -> ScenarioResult:
    out = run_virtual(dht_resilience(seed))
    passed = out["hits"] == out["lookups"]
    details = [
        f"dropped {out['dropped']} of 20 DHT nodes after storing 100 values",
        f"lookups succeeded: {out['hits']}/{out['lookups']} (worst case {out['worst_rounds']} lookup rounds)",
    ]
    return ScenarioResult("dos-routing", passed, details)


SCENARIOS = {
    "barrier": barrier,
    "failover": failover,
    "rotation": rotation,
    "unlinkability": unlinkability,
    "dos-routing": dos_routing,
}


def run_scenario(name: str, seed: int = 42) -> ScenarioResult:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return fn(seed=seed)
