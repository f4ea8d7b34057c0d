import random

import pytest
from nacl.signing import SigningKey

from zephyr.crypto.pairing import TOY
from zephyr.dht import node_id_from_key
from zephyr.directory import Directory, InfoEntry, MixerEntry
from zephyr.envelope import Address
from zephyr.net import Endpoint
from zephyr.simnet import run_virtual


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def vrun():
    """Run a coroutine on a fresh virtual-time loop."""
    return run_virtual


class ScriptedRng:
    """Feeds fixed draws to code that calls ``randrange``."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.calls = []

    def randrange(self, n):
        self.calls.append(n)
        return self.draws.pop(0)


class FixedBytes:
    """rng stand-in whose ``randbytes`` returns queued values."""

    def __init__(self, *chunks):
        self.chunks = list(chunks)

    def randbytes(self, n):
        chunk = self.chunks.pop(0)
        assert len(chunk) == n
        return chunk


# a pinned coordinator key and three mixer keys for hand-built directories
COORD = SigningKey(bytes(32))
MIXER_KEYS = [SigningKey(bytes([i + 1]) * 32) for i in range(3)]


def make_directory(round_no=1, signer=COORD, mixer_keys=MIXER_KEYS):
    mixers = tuple(sorted(
        (MixerEntry(node_id_from_key(bytes(k.verify_key)), Address.mixer(f"mixer-{i}", 7000 + i), bytes(k.verify_key))
         for i, k in enumerate(mixer_keys)),
        key=lambda m: m.node_id,
    ))
    return Directory(
        round=round_no, mixers=mixers, info_nodes=(InfoEntry(5, Endpoint("info", 1)),), mailbox_count=16,
        mailbox_servers=(Endpoint("mb-0", 1), Endpoint("mb-1", 1)), pkg=Endpoint("pkg", 1),
        salt=bytes([round_no]) * 16, round_duration=10.0,
        coordinator=node_id_from_key(bytes(signer.verify_key)), coordinator_endpoint=Endpoint("coord", 1),
    ).signed(signer)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; printed together at the end of the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> None:
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
