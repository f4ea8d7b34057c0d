"""Directory signing, substitute signers, mailbox assignment and election."""
import hashlib
import random
import struct
from collections import Counter
from dataclasses import replace

import pytest
from nacl.signing import SigningKey

from conftest import COORD, MIXER_KEYS, make_directory

from zephyr.dht import node_id_from_key
from zephyr.directory import (
    Directory,
    DirectoryVerifier,
    RoundPhase,
    RoundReport,
    RoundState,
    elect,
    mailbox_index,
    open_command,
    sign_command,
)
from zephyr.errors import NoLiveCandidates, SignatureInvalid
from zephyr.wire import Reader

def test_pinned_signature_accepted_and_round_trips():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    d = make_directory()
    assert v.accept(Directory.from_bytes(d.to_bytes())) == d
    assert v.last == d


def test_tampered_directory_rejected():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    d = make_directory()
    with pytest.raises(SignatureInvalid):
        v.verify(replace(d, mailbox_count=17))


def test_unknown_signer_rejected():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    with pytest.raises(SignatureInvalid):
        v.verify(make_directory(signer=SigningKey(b"\x77" * 32)))


def test_substitute_signer_only_after_a_directory_lists_it():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    sub = MIXER_KEYS[1]
    with pytest.raises(SignatureInvalid):
        v.verify(make_directory(2, signer=sub))
    v.accept(make_directory(1))
    assert v.accept(make_directory(2, signer=sub)).round == 2


def test_substitute_must_name_itself_as_coordinator():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    v.accept(make_directory(1))
    d = replace(make_directory(2), coordinator=node_id_from_key(bytes(COORD.verify_key)))
    forged = d.signed(MIXER_KEYS[0])
    with pytest.raises(SignatureInvalid):
        v.verify(forged)


def test_verifier_keeps_only_two_rounds():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    for r in range(1, 6):
        v.accept(make_directory(r))
    assert sorted(v.history) == [4, 5]
    v.accept(make_directory(3))
    assert v.last.round == 5


def test_signed_commands():
    v = DirectoryVerifier(bytes(COORD.verify_key))
    frame = sign_command(COORD, b"rotate-master", b"\x05")
    signer, body = open_command(v, b"rotate-master", Reader(frame))
    assert signer == bytes(COORD.verify_key) and body.raw(1) == b"\x05"
    with pytest.raises(SignatureInvalid):
        open_command(v, b"purge", Reader(frame))


def test_mailbox_index_oracle():
    identity, salt = b"alice@example.org", b"s" * 16
    h = hashlib.sha256(b"zephyr-mbox" + identity + struct.pack("<Q", 9) + salt).digest()
    assert mailbox_index(identity, 9, salt, 16) == int.from_bytes(h[:8], "little") % 16


def test_mailbox_assignment_is_public_and_spreads():
    d = make_directory()
    assert d.mailbox_for(b"bob@example.org") == make_directory().mailbox_for(b"bob@example.org")
    counts = Counter(mailbox_index(f"u{i}@x.org".encode(), 1, d.salt, 16) for i in range(1600))
    assert len(counts) == 16 and max(counts.values()) < 160


def test_mailbox_servers_partition_indices():
    d = make_directory()
    assert d.mailbox_address(0).endpoint == ("mb-0", 1)
    assert d.mailbox_address(3).endpoint == ("mb-1", 1)


def test_round_state_round_trip():
    s = RoundState(make_directory(3), RoundPhase.MIXING, last_mixer=42)
    back = RoundState.from_bytes(s.to_bytes())
    assert (back.directory, back.phase, back.last_mixer) == (s.directory, s.phase, 42)


def test_round_report():
    rep = RoundReport(4, 99, received=10, peeled=9, dropped=1, forwarded=6, uploaded=3, barrier_at=2.5)
    assert RoundReport.from_bytes(rep.to_bytes()) == rep
    assert rep.conserved()
    assert not replace(rep, uploaded=2).conserved()
    assert "dropped=1" in rep.as_text()


def test_election_is_lowest_live_id():
    ids = [random.Random(i).getrandbits(160) for i in range(10)]
    assert elect(ids) == min(ids)
    assert elect(list(reversed(ids))) == min(ids)
    with pytest.raises(NoLiveCandidates):
        elect([])
