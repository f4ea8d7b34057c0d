import asyncio
import hashlib
import math
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from zephyr.dht import (
    ID_BITS,
    MAX_VALUE_BYTES,
    Contact,
    DhtNode,
    RoutingTable,
    barrier_key,
    dht_key,
    id_from_bytes,
    id_to_bytes,
    node_id_from_key,
    round_ttl,
    xor_distance,
)
from zephyr.errors import ZephyrError
from zephyr.net import Endpoint
from zephyr.scenarios import dht_resilience
from zephyr.simnet import SimNetwork, run_virtual

ids = st.integers(min_value=0, max_value=2**ID_BITS - 1)


async def overlay(n, seed=0, **kw):
    rng = random.Random(seed)
    net = SimNetwork(random.Random(seed + 1))
    nodes = [DhtNode(Endpoint(f"n{i}", 7000), net, random.Random(rng.getrandbits(64)),
                     node_id_from_key(rng.randbytes(32)), **kw) for i in range(n)]
    for node in nodes:
        await node.start()
    for node in nodes:
        await node.join([nodes[0].contact])
    return net, nodes


async def shutdown(nodes):
    for node in nodes:
        await node.stop()


# -- ids and distance -------------------------------------------------------------------


def test_self_distance_zero():
    assert xor_distance(12345, 12345) == 0


def test_four_bit_example():
    assert xor_distance(0b1010, 0b0110) == 0b1100 == 12


@given(ids, ids, ids)
def test_xor_metric_algebra(a, b, c):
    assert xor_distance(a, b) == xor_distance(b, a)
    assert xor_distance(a, b) ^ xor_distance(b, c) == xor_distance(a, c)


def test_key_derivations_are_sha1():
    assert dht_key(b"abc") == int(hashlib.sha1(b"abc").hexdigest(), 16)
    assert node_id_from_key(b"\x01" * 32) == int(hashlib.sha1(b"\x01" * 32).hexdigest(), 16)
    expected = hashlib.sha1(b"readytomix" + struct.pack("<Q", 3)).hexdigest()
    assert barrier_key(3) == int(expected, 16)


@given(ids)
def test_id_bytes_round_trip(x):
    assert id_from_bytes(id_to_bytes(x)) == x
    assert len(id_to_bytes(x)) == 20


# -- routing table ------------------------------------------------------------------------


def test_bucket_index():
    t = RoutingTable(0)
    assert t.bucket_index(1) == 0
    assert t.bucket_index(0b1000) == 3
    assert t.bucket_index(2**159) == 159
    with pytest.raises(ValueError):
        t.bucket_index(0)


def test_full_bucket_returns_oldest():
    t = RoutingTable(0, k=2)
    ep = Endpoint("x", 1)
    assert t.add(Contact(4, ep)) is None
    assert t.add(Contact(5, ep)) is None
    assert t.add(Contact(6, ep)) == Contact(4, ep)
    # refreshing moves a contact to the tail
    assert t.add(Contact(4, ep)) is None
    assert t.add(Contact(7, ep)) == Contact(5, ep)
    t.replace(Contact(5, ep), Contact(7, ep))
    assert [c.node_id for c in t.buckets[2]] == [4, 7]


@settings(max_examples=100)
@given(own=ids, others=st.lists(ids, max_size=60), k=st.integers(1, 8))
def test_routing_table_invariants(own, others, k):
    t = RoutingTable(own, k)
    for o in others:
        if o != own:
            t.add(Contact(o, Endpoint("h", 1)))
    t.check_invariants()
    ranked = t.closest(own ^ 1)
    assert ranked == sorted(ranked, key=lambda c: c.node_id ^ (own ^ 1))


# -- network behaviour -------------------------------------------------------------------------


def test_single_node_store_and_find():
    async def go():
        net = SimNetwork(random.Random(0))
        node = DhtNode(Endpoint("solo", 1), net, random.Random(1), 42)
        await node.start()
        assert await node.store(7, b"v") == 1
        vals = await node.find_value(7)
        await node.stop()
        return vals

    vals = run_virtual(go())
    assert [v.value for v in vals] == [b"v"]


def test_twenty_nodes_store_anywhere_find_anywhere():
    async def go():
        _, nodes = await overlay(20, seed=3)
        rng = random.Random(4)
        misses = 0
        for i in range(100):
            key = rng.getrandbits(160)
            a, b = rng.sample(nodes, 2)
            await a.store(key, f"value {i}".encode())
            if f"value {i}".encode() not in [v.value for v in await b.find_value(key)]:
                misses += 1
        await shutdown(nodes)
        return misses

    assert run_virtual(go()) == 0


def test_multi_value_from_ten_publishers():
    async def go():
        _, nodes = await overlay(12, seed=5)
        key = dht_key(b"shared")
        for n in nodes[:10]:
            await n.store(key, id_to_bytes(n.node_id))
        vals = await nodes[11].find_value(key)
        await shutdown(nodes)
        return vals

    vals = run_virtual(go())
    assert len(vals) == 10
    assert len({v.publisher for v in vals}) == 10


def test_lookup_of_self_includes_self():
    async def go():
        _, nodes = await overlay(10, seed=6)
        res = await nodes[4].iterative_lookup(nodes[4].node_id)
        await shutdown(nodes)
        return res, nodes[4].node_id

    res, me = run_virtual(go())
    assert me in [c.node_id for c in res.contacts]


def test_lookup_round_bound():
    async def go():
        _, nodes = await overlay(20, seed=7)
        rng = random.Random(8)
        worst = 0
        for _ in range(50):
            res = await rng.choice(nodes).iterative_lookup(rng.getrandbits(160))
            worst = max(worst, res.rounds)
        await shutdown(nodes)
        return worst

    assert run_virtual(go()) <= math.log2(20) + 3


def test_lookup_finds_true_closest():
    async def go():
        _, nodes = await overlay(20, seed=9)
        target = random.Random(10).getrandbits(160)
        res = await nodes[3].iterative_lookup(target)
        await shutdown(nodes)
        truth = sorted((n.node_id for n in nodes), key=lambda x: x ^ target)[:8]
        return [c.node_id for c in res.contacts], truth

    got, truth = run_virtual(go())
    assert got == truth


def test_kill_thirty_percent_mid_lookup():
    async def go():
        _, nodes = await overlay(20, seed=11)
        key = dht_key(b"survivor")
        await nodes[0].store(key, b"still here")
        rng = random.Random(12)
        asker = nodes[19]
        victims = rng.sample(nodes[:19], 6)
        lookup = asyncio.ensure_future(asker.find_value(key))
        await asyncio.sleep(0.001)
        for v in victims:
            await v.stop()
        vals = await lookup
        await shutdown([n for n in nodes if n not in victims])
        return vals

    assert b"still here" in [v.value for v in run_virtual(go())]


def test_thirty_percent_dropped_after_stores():
    out = run_virtual(dht_resilience(seed=13))
    assert out["hits"] == out["lookups"] == 100
    assert out["dropped"] == 6


def test_barrier_counts():
    async def go():
        _, nodes = await overlay(3, seed=14)
        for n in nodes[:2]:
            await n.barrier_signal(5)
        two = await nodes[2].barrier_count(5)
        await nodes[0].barrier_signal(5)  # duplicate
        still_two = await nodes[2].barrier_count(5)
        await nodes[2].barrier_signal(5)
        three = await nodes[0].barrier_count(5)
        other_round = await nodes[0].barrier_count(6)
        await shutdown(nodes)
        return two, still_two, three, other_round

    assert run_virtual(go()) == (2, 2, 3, 0)


def test_values_expire():
    async def go():
        _, nodes = await overlay(4, seed=15)
        await nodes[0].store(99, b"short-lived", ttl=5.0)
        before = await nodes[1].find_value(99)
        await asyncio.sleep(6.0)
        after = await nodes[1].find_value(99)
        await shutdown(nodes)
        return before, after

    before, after = run_virtual(go())
    assert [v.value for v in before] == [b"short-lived"] and after == []


def test_barrier_signals_last_two_round_durations():
    async def go():
        _, nodes = await overlay(4, seed=17)
        for node in nodes[:3]:
            await node.barrier_signal(8, round_ttl(10.0))
        await asyncio.sleep(19.0)
        alive = await nodes[3].barrier_count(8)
        await asyncio.sleep(2.0)
        gone = await nodes[3].barrier_count(8)
        await shutdown(nodes)
        return alive, gone

    assert round_ttl(10.0) == 20.0
    assert run_virtual(go()) == (3, 0)


def test_oversized_value_rejected():
    async def go():
        _, nodes = await overlay(2, seed=16)
        try:
            await nodes[0].store(1, bytes(MAX_VALUE_BYTES + 1))
        finally:
            await shutdown(nodes)

    with pytest.raises(ZephyrError):
        run_virtual(go())


def test_dead_contacts_are_evicted():
    async def go():
        _, nodes = await overlay(6, seed=17)
        dead = nodes[5]
        await dead.stop()
        await nodes[0].iterative_lookup(dead.node_id)
        known = [c.node_id for c in nodes[0].table.contacts()]
        await shutdown(nodes[:5])
        return dead.node_id, known

    dead_id, known = run_virtual(go())
    assert dead_id not in known
