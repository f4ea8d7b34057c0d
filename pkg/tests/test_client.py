"""Client routing, enrollment, sending and trial decryption."""
import random
from collections import Counter

import pytest
from scipy.stats import chisquare

from zephyr.client import choose_route, route_length
from zephyr.crypto.ibe import canonical_identity, ibe_extract, ibe_setup
from zephyr.crypto.pairing import TOY
from zephyr.envelope import PAD_BUCKETS, open_as_recipient, pad_message, seal_to_recipient
from zephyr.errors import AuthRejected, NoMixers, PayloadTooLong
from zephyr.harness import FaultEvent, SimConfig, run_sim


def test_route_length_bounds_and_distribution():
    rng = random.Random(3)
    assert route_length(1, rng) == 1
    assert {route_length(2, rng) for _ in range(50)} == {2}
    counts = Counter(route_length(10, rng) for _ in range(8000))
    assert sorted(counts) == [2, 3, 4, 5]
    assert chisquare([counts[k] for k in (2, 3, 4, 5)]).pvalue > 0.001
    with pytest.raises(NoMixers):
        route_length(0, rng)


def test_first_hop_is_uniform_over_mixers():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        rng = random.Random(21)
        firsts = Counter(choose_route(s.bundle, rng)[0].public_key for _ in range(6000))
        assert len(firsts) == 3
        assert chisquare(list(firsts.values())).pvalue > 0.001
        return []

    _run(inspect)


def test_packet_size_depends_only_on_bucket_and_route_length():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        c = world.clients[0]
        sizes = {}
        for body in (b"a", b"b" * 500, b"\xff" * 1000):
            for _ in range(20):
                route, pkt = c.build_packet(s, world.identities[1], body)
                sizes.setdefault(len(route), set()).add(len(pkt.to_bytes()))
        assert all(len(v) == 1 for v in sizes.values()), sizes
        return []

    _run(inspect)


def test_one_reachable_info_node_is_enough():
    cfg = SimConfig(pairing="toy40", clients=3, rounds=2, seed=11,
                    fault_plan=[FaultEvent(0.0, "info-1", "crash", round=1)])
    res = run_sim(cfg)
    assert res.ok, res.violations
    assert res.report["messages_delivered"] == 6


def _run(inspect, **kw):
    base = dict(pairing="toy40", clients=3, rounds=1, seed=11)
    base.update(kw)
    res = run_sim(SimConfig(**base), inspect=inspect)
    assert res.ok, res.violations
    return res


def test_routes_never_repeat_a_mixer():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        rng = random.Random(5)
        for _ in range(200):
            route = choose_route(s.bundle, rng)
            assert len({h.public_key for h in route}) == len(route)
            assert 2 <= len(route) <= 3
        return []

    _run(inspect)


def test_sender_and_recipient_agree_on_the_mailbox():
    async def inspect(world):
        bob = world.sessions[(1, 1)]
        alice = world.sessions[(1, 0)]
        assert alice.directory.mailbox_for(canonical_identity(bob.identity.upper())) == bob.mailbox
        return []

    _run(inspect)


def test_wrong_code_is_rejected():
    async def inspect(world):
        c = world.clients[0]
        with pytest.raises(AuthRejected):
            await c.enroll(world.identities[0], lambda ident: "not-the-code")
        with pytest.raises(AuthRejected):
            await c.enroll(world.identities[0], lambda ident: None)
        return []

    _run(inspect, clients=1)


def test_two_sends_of_one_message_look_unrelated():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        c = world.clients[0]
        _, a = c.build_packet(s, world.identities[1], b"same words")
        _, b = c.build_packet(s, world.identities[1], b"same words")
        assert a.layer != b.layer and len(a.layer) == len(b.layer)
        return []

    _run(inspect)


def test_oversize_message_fails_before_any_network_traffic():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        before = {k: (v.bytes_sent, v.bytes_received) for k, v in world.net.traffic.items()}
        with pytest.raises(PayloadTooLong):
            await world.clients[0].send(s, world.identities[1], b"x" * (PAD_BUCKETS[-1] + 1))
        after = {k: (v.bytes_sent, v.bytes_received) for k, v in world.net.traffic.items()}
        assert before == after
        return []

    _run(inspect)


def test_session_survives_json_round_trip():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        restored = world.clients[0].restore(s.to_json())
        assert restored.mailbox == s.mailbox and restored.round == s.round
        assert restored.own_key.to_bytes() == s.own_key.to_bytes()
        return []

    _run(inspect)


def test_no_false_accepts_over_ten_thousand_foreign_messages():
    rng = random.Random(17)
    master = ibe_setup(rng, TOY)
    bob = ibe_extract(master, "bob@example.org")
    accepted = 0
    for i in range(10_000):
        sealed = seal_to_recipient(master.mpk, f"user{i}@example.org", b"m%d" % i, rng)
        if open_as_recipient(bob, sealed) is not None:
            accepted += 1
    assert accepted == 0


def test_fetch_returns_exactly_my_records():
    async def inspect(world):
        s = world.sessions[(1, 0)]
        store = world.mailboxes[0].store
        before = await world.clients[0].fetch_round(s)
        store_rng = random.Random(4)
        for i in range(10):
            to = s.identity if i in (3, 7) else f"stranger{i}@zephyr.test"
            sealed = seal_to_recipient(s.mpk, to, pad_message(b"extra %d" % i), store_rng)
            store.append(s.mailbox_id, 1, sealed.to_bytes(s.mpk.ctx))
        after = await world.clients[0].fetch_round(s)
        assert sorted(m for m, _ in after) == sorted([m for m, _ in before] + [b"extra 3", b"extra 7"])
        return []

    _run(inspect, clients=1)
