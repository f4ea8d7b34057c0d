"""Shuffling, the mixer phase machine and a single-mixer round on the simulator."""
import random

import pytest
from hypothesis import given, strategies as st
from nacl.signing import SigningKey
from scipy.stats import chisquare

from conftest import ScriptedRng
from zephyr.directory import Directory, InfoEntry, MixerEntry
from zephyr.envelope import Address, Hop, MixerKeyPair, onion_peel, onion_wrap
from zephyr.errors import IllegalTransition, OpenFailure, WrongRound
from zephyr.mailbox import MailboxServer, MemoryMailboxStore
from zephyr.mixer import MixBatch, MixerNode, MixerPhase, MixerSettings, PhaseMachine, apply_permutation, fisher_yates
from zephyr.net import Endpoint
from zephyr.scenarios import permutation_counts
from zephyr.simnet import SimNetwork, run_virtual

COORD = SigningKey(b"\x10" * 32)
MIXER_KEY = SigningKey(b"\x11" * 32)
MB = Endpoint("mailbox", 9000)
BOX = Address.mailbox("mailbox", 9000, b"\x05" * 32)


def test_fisher_yates_single_element():
    assert fisher_yates(1, ScriptedRng([])) == [0]
    assert fisher_yates(0, random.Random(0)) == []


def test_fisher_yates_scripted_draws():
    # i=2 swaps with 0, then i=1 swaps with 0
    rng = ScriptedRng([0, 0])
    perm = fisher_yates(3, rng)
    assert rng.calls == [3, 2]
    assert apply_permutation(["A", "B", "C"], perm) == ["B", "C", "A"]


def test_fisher_yates_is_uniform_over_all_permutations():
    observed = permutation_counts(4, 24_000, seed=99)
    assert len(observed) == 24
    assert sum(observed) == 24_000
    assert chisquare(observed).pvalue > 0.001


@given(st.lists(st.binary(max_size=4), max_size=30), st.integers(0, 2**32))
def test_shuffle_is_a_permutation(items, seed):
    batch = MixBatch(1, items)
    out = batch.shuffled(random.Random(seed))
    assert sorted(out) == sorted(items)
    assert sorted(batch.permutation) == list(range(len(items)))


def test_phase_machine_happy_path_and_illegal_edges():
    sm = PhaseMachine()
    with pytest.raises(IllegalTransition):
        sm.advance(MixerPhase.MIXING)
    sm.open(1)
    with pytest.raises(IllegalTransition):
        sm.advance(MixerPhase.MIXING)
    for p in (MixerPhase.BARRIER, MixerPhase.MIXING, MixerPhase.DONE):
        sm.advance(p)
    with pytest.raises(IllegalTransition):
        sm.open(1)
    sm.open(2)
    assert sm.phase is MixerPhase.COLLECTING


@given(st.lists(st.sampled_from(["advance", "abort", "open"]), max_size=40))
def test_phase_machine_invariants(actions):
    sm = PhaseMachine()
    order = [MixerPhase.COLLECTING, MixerPhase.BARRIER, MixerPhase.MIXING, MixerPhase.DONE]
    for a in actions:
        before = (sm.round, sm.phase)
        if a == "open":
            sm.open(sm.round + 1)
            assert sm.phase is MixerPhase.COLLECTING and sm.round == before[0] + 1
        elif a == "abort":
            sm.abort()
            assert sm.phase is MixerPhase.DONE
        else:
            if sm.phase is MixerPhase.DONE:
                with pytest.raises(IllegalTransition):
                    sm.advance(MixerPhase.COLLECTING)
            else:
                sm.advance(order[order.index(sm.phase) + 1])
        assert sm.round >= before[0]


def _directory(round_no, mixer: MixerNode):
    entry = MixerEntry(mixer.node_id, mixer.address, mixer.verify_key)
    return Directory(
        round=round_no, mixers=(entry,), info_nodes=(InfoEntry(1, Endpoint("info", 1)),), mailbox_count=1,
        mailbox_servers=(MB,), pkg=Endpoint("pkg", 1), salt=b"\x00" * 16, round_duration=10.0,
        coordinator=0, coordinator_endpoint=Endpoint("coordinator", 1),
    ).signed(COORD)


class OneMixer:
    def __init__(self, round_no=1):
        self.net = SimNetwork(random.Random(3))
        self.store = MemoryMailboxStore()
        self.store.open_round(round_no)
        self.mailbox = MailboxServer(MB, self.net, random.Random(4), self.store, bytes(COORD.verify_key))
        self.mixer = MixerNode(Endpoint("mixer", 7000), self.net, random.Random(5), MIXER_KEY,
                               bytes(COORD.verify_key), Endpoint("coordinator", 1), [],
                               settings=MixerSettings(barrier_timeout=1.0, rpc_timeout=0.2))
        self.round = round_no
        self.events = []
        self.mixer.tracer = lambda node, event, fields: self.events.append(event)

    async def start(self):
        await self.mailbox.start()
        await self.mixer.start()
        self.mixer.keypair = MixerKeyPair.generate(self.mixer.node_id, random.Random(6))
        self.mixer.key_round = self.round
        self.mixer.open_round(_directory(self.round, self.mixer), b"")

    def packet(self, body: bytes) -> bytes:
        hop = Hop(self.mixer.keypair.public, self.mixer.address)
        return onion_wrap([hop], BOX, body, random.Random(body)).to_bytes()

    async def stop(self):
        await self.mixer.stop()
        await self.mailbox.stop()


def test_single_mixer_round_delivers_everything():
    async def go():
        w = OneMixer()
        await w.start()
        packets = [w.packet(f"msg {i}".encode()) for i in range(10)]
        assert w.mixer.receive_stream(packets, 1) == 10
        assert len(w.mixer.batch) == 10
        report = await w.mixer.run_round()
        blobs = [r.blob for r in w.store.fetch_all(BOX.mailbox_id, 1)]
        await w.stop()
        return report, blobs

    report, blobs = run_virtual(go())
    assert sorted(blobs) == sorted(f"msg {i}".encode() for i in range(10))
    assert (report.received, report.peeled, report.uploaded, report.dropped) == (10, 10, 10, 0)
    assert report.conserved()


def test_corrupted_packet_is_dropped_and_counted():
    async def go():
        w = OneMixer()
        await w.start()
        packets = [w.packet(f"m{i}".encode()) for i in range(10)]
        bad = bytearray(packets[3])
        bad[-1] ^= 1
        packets[3] = bytes(bad)
        w.mixer.receive_stream(packets, 1)
        report = await w.mixer.run_round()
        n = len(w.store.fetch_all(BOX.mailbox_id, 1))
        await w.stop()
        return report, n

    report, n = run_virtual(go())
    assert report.dropped == 1 and report.uploaded == 9 and n == 9
    assert report.conserved()


def test_duplicates_and_wrong_round_rejected():
    async def go():
        w = OneMixer()
        await w.start()
        p = w.packet(b"once")
        assert w.mixer.receive_stream([p, p], 1) == 1
        assert w.mixer.receive_stream([w.packet(b"twice")], 1) == 1
        assert len(w.mixer.batch) == 2
        with pytest.raises(WrongRound):
            w.mixer.receive_stream([w.packet(b"early")], 2)
        await w.stop()

    run_virtual(go())


def test_rotated_key_cannot_peel_old_packets():
    rng = random.Random(8)
    old = MixerKeyPair.generate(1, rng)
    new = MixerKeyPair.generate(1, rng)
    assert old.public != new.public
    pkt = onion_wrap([Hop(old.public, Address.mixer("m", 1))], BOX, b"stale", rng)
    with pytest.raises(OpenFailure):
        onion_peel(new, pkt)


def test_barrier_timeout_aborts_without_peeling():
    async def go():
        w = OneMixer()
        await w.start()
        w.mixer.receive_stream([w.packet(b"held")], 1)
        # pretend a second mixer is listed so the barrier can never fill
        extra = MixerEntry(w.mixer.node_id + 1, Address.mixer("ghost", 1), b"\x01" * 32)
        d = _directory(1, w.mixer)
        w.mixer.directory = Directory(**{**d.__dict__, "mixers": d.mixers + (extra,)})
        report = await w.mixer.run_round()
        peels = [e for e in w.events if e == "peel"]
        assert "barrier-timeout" in w.events
        stored = w.store.fetch_all(BOX.mailbox_id, 1)
        await w.stop()
        return report, peels, stored

    report, peels, stored = run_virtual(go())
    assert report.aborted and report.dropped == 1 and report.peeled == 0
    assert not peels and stored == []


def test_previous_round_packets_rejected_after_next_round_opens():
    async def go():
        w = OneMixer()
        await w.start()
        old = w.packet(b"round one")
        w.mixer.sm.abort()
        w.mixer.key_round = 2
        w.mixer.open_round(_directory(2, w.mixer), b"")
        with pytest.raises(WrongRound) as info:
            w.mixer.receive_stream([old], 1)
        assert info.value.current_round == 2
        await w.stop()

    run_virtual(go())
