"""Mailbox stores (memory and sqlite) and the mailbox server."""
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from zephyr.errors import PayloadTooLong, UnknownRound, WrongRound
from zephyr.mailbox import MailboxServer, MemoryMailboxStore, SqliteMailboxStore, decode_records, encode_append, encode_fetch_request
from zephyr.net import Client, Endpoint, Op
from zephyr.simnet import SimNetwork, run_virtual

BOX = b"\x01" * 32
OTHER = b"\x02" * 32


@pytest.fixture(params=["memory", "sqlite"])
def store(request, tmp_path):
    s = MemoryMailboxStore() if request.param == "memory" else SqliteMailboxStore(str(tmp_path / "m.sqlite"))
    s.open_round(1)
    yield s
    s.close()


def test_first_append_is_seq_one(store):
    assert store.append(BOX, 1, b"a") == 1
    assert store.append(OTHER, 1, b"b") == 1
    assert store.append(BOX, 1, b"c") == 2


def test_concurrent_appends_are_gapless(store):
    seqs = []
    lock = threading.Lock()

    def worker(i):
        s = store.append(BOX, 1, f"m{i}".encode())
        with lock:
            seqs.append(s)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(seqs) == list(range(1, 101))
    assert [r.seq for r in store.fetch_all(BOX, 1)] == list(range(1, 101))


def test_append_to_other_round_rejected(store):
    with pytest.raises(WrongRound) as info:
        store.append(BOX, 2, b"x")
    assert info.value.current_round == 1
    store.open_round(2)
    with pytest.raises(WrongRound):
        store.append(BOX, 1, b"x")


def test_oversize_blob_rejected(store):
    with pytest.raises(PayloadTooLong):
        store.append(BOX, 1, b"x" * (store.max_blob + 1))


def test_fetch_in_order_and_repeatable(store):
    assert store.fetch_all(BOX, 1) == []
    for b in (b"one", b"two", b"three"):
        store.append(BOX, 1, b)
    first = store.fetch_all(BOX, 1)
    assert [r.blob for r in first] == [b"one", b"two", b"three"]
    assert store.fetch_all(BOX, 1) == first


def test_retention_window(store):
    store.append(BOX, 1, b"old")
    store.open_round(2)
    assert [r.blob for r in store.fetch_all(BOX, 1)] == [b"old"]
    store.open_round(3)
    with pytest.raises(UnknownRound):
        store.fetch_all(BOX, 1)
    with pytest.raises(UnknownRound):
        store.fetch_all(BOX, 4)


def test_seq_continues_across_rounds(store):
    store.append(BOX, 1, b"a")
    store.open_round(2)
    assert store.append(BOX, 2, b"b") == 2


def test_purge(store):
    for i in range(10):
        store.append(BOX, 1, bytes([i]))
    store.open_round(2)
    store.open_round(3)
    assert store.purge(2) == 0  # previous round is still readable
    assert store.purge(1) == 10
    assert store.purge(1) == 0
    assert store.size() == 0


def test_sqlite_survives_restart(tmp_path):
    path = str(tmp_path / "m.sqlite")
    s = SqliteMailboxStore(path)
    s.open_round(4)
    s.append(BOX, 4, b"kept")
    s.close()
    again = SqliteMailboxStore(path)
    assert again.current_round == 4
    assert [r.blob for r in again.fetch_all(BOX, 4)] == [b"kept"]
    assert again.append(BOX, 4, b"next") == 2
    again.close()


ops = st.lists(
    st.one_of(
        st.tuples(st.just("append"), st.sampled_from([BOX, OTHER]), st.binary(max_size=20)),
        st.tuples(st.just("open"), st.integers(0, 2)),
        st.tuples(st.just("purge"), st.integers(1, 6)),
    ),
    max_size=40,
)


def _apply(store, op):
    try:
        if op[0] == "append":
            return store.append(op[1], store.current_round, op[2])
        if op[0] == "open":
            return store.open_round(store.current_round + op[1])
        return store.purge(op[1])
    except (WrongRound, UnknownRound) as exc:
        return type(exc).__name__


@settings(max_examples=60, deadline=None)
@given(ops)
def test_backends_agree(seq):
    mem, sql = MemoryMailboxStore(), SqliteMailboxStore(":memory:")
    for s in (mem, sql):
        s.open_round(1)
    for op in seq:
        assert _apply(mem, op) == _apply(sql, op)
    for r in (sql.current_round - 1, sql.current_round):
        if r >= 1:
            for box in (BOX, OTHER):
                assert mem.fetch_all(box, r) == sql.fetch_all(box, r)
    assert mem.size() == sql.size()


def test_fetch_request_names_only_the_mailbox_and_round():
    # nothing about the requester travels with a fetch
    body = encode_fetch_request(BOX, 7)
    assert body == BOX + (7).to_bytes(8, "little")


def test_server_batch_append_and_fetch():
    async def go():
        net = SimNetwork(random.Random(1))
        ep = Endpoint("mailbox", 1)
        store = MemoryMailboxStore()
        store.open_round(3)
        server = MailboxServer(ep, net, random.Random(2), store, b"\x00" * 32)
        await server.start()
        client = Client(net, "c")
        await client.call(ep, Op.APPEND, encode_append(3, [(BOX, b"a"), (OTHER, b"b"), (BOX, b"c")]))
        with pytest.raises(WrongRound):
            await client.call(ep, Op.APPEND, encode_append(2, [(BOX, b"late")]))
        a = decode_records(await client.call(ep, Op.FETCH_ALL, encode_fetch_request(BOX, 3)))
        b = decode_records(await Client(net, "d").call(ep, Op.FETCH_ALL, encode_fetch_request(BOX, 3)))
        await server.stop()
        return a, b

    a, b = run_virtual(go())
    assert a == b and [(r.seq, r.blob) for r in a] == [(1, b"a"), (2, b"c")]
