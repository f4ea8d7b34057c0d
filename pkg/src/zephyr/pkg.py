"""Private-key generator: email-code authentication and identity key extraction.

``PrivateKeyGenerator`` is the transport-free core with an injectable clock
so expiry can be tested on virtual time.  ``PkgNode`` exposes it over the
framed protocol.  An extracted key never crosses the wire in the clear: the
client sends a one-time X25519 public key with its code and receives the
serialized identity key sealed to it.
"""
from __future__ import annotations

import base64
import hmac
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from .crypto import hybrid
from .crypto.ibe import (
    IdentityPrivateKey,
    MasterKeyPair,
    canonical_identity,
    ibe_extract,
    ibe_setup,
)
from .crypto.pairing import STANDARD, PairingContext
from .directory import Directory, DirectoryVerifier, open_command
from .errors import AuthRejected, InvalidEmail, RateLimited, StaleRound
from .net import Endpoint, Node, Op
from .wire import Reader, Writer

log = logging.getLogger(__name__)

EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s.]+$")
CODE_DIGITS = 6
CODE_TTL = 600.0
MAX_ATTEMPTS = 5
MAX_CHALLENGES_PER_ROUND = 3
KEY_DELIVERY_LABEL = b"zephyr-key-delivery"


class EmailTransport(Protocol):
    def send(self, address: str, body: str) -> None: ...


class InMemoryEmailTransport:
    """Test transport: records every message so tests can read the codes."""

    def __init__(self) -> None:
        self.outbox: list[tuple[str, str]] = []

    def send(self, address: str, body: str) -> None:
        self.outbox.append((address, body))

    def latest_code(self, address: str) -> str | None:
        address = address.casefold()
        for to, body in reversed(self.outbox):
            if to == address:
                m = re.search(r"\b(\d{%d})\b" % CODE_DIGITS, body)
                return m.group(1) if m else None
        return None


class MailDirTransport:
    """Writes each message to a file; stands in for a mail relay when run live."""

    def __init__(self, directory: str | os.PathLike) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._count = 0

    def send(self, address: str, body: str) -> None:
        self._count += 1
        (self.directory / f"{self._count:06d}-{address}.txt").write_text(body + "\n")

    def latest_code(self, address: str) -> str | None:
        files = sorted(self.directory.glob(f"*-{address.casefold()}.txt"))
        if not files:
            return None
        m = re.search(r"\b(\d{%d})\b" % CODE_DIGITS, files[-1].read_text())
        return m.group(1) if m else None


@dataclass
class AuthChallenge:
    identity: str
    code: str
    issued_at: float
    attempts: int = 0


class PrivateKeyGenerator:
    def __init__(
        self,
        rng,
        email: EmailTransport,
        ctx: PairingContext = STANDARD,
        clock: Callable[[], float] = time.monotonic,
        code_ttl: float = CODE_TTL,
        max_attempts: int = MAX_ATTEMPTS,
        max_challenges: int = MAX_CHALLENGES_PER_ROUND,
        round_no: int = 0,
    ):
        self.rng = rng
        self.email = email
        self.ctx = ctx
        self.clock = clock
        self.code_ttl = code_ttl
        self.max_attempts = max_attempts
        self.max_challenges = max_challenges
        self.round = round_no
        self._master: MasterKeyPair = ibe_setup(rng, ctx)
        self._params = self._master.mpk.to_bytes()
        self.challenges: dict[str, AuthChallenge] = {}
        self.issued: dict[tuple[str, int], int] = {}
        self.extracted = 0

    @property
    def mpk(self):
        return self._master.mpk

    def begin_auth(self, identity: str) -> None:
        if not isinstance(identity, str) or not EMAIL_RE.match(identity):
            raise InvalidEmail(f"not an email address: {identity!r}")
        ident = canonical_identity(identity).decode()
        key = (ident, self.round)
        if self.issued.get(key, 0) >= self.max_challenges:
            raise RateLimited(f"more than {self.max_challenges} challenges this round")
        self.issued[key] = self.issued.get(key, 0) + 1
        code = f"{self.rng.randrange(10**CODE_DIGITS):0{CODE_DIGITS}d}"
        # a reissue replaces, and so invalidates, the previous challenge
        self.challenges[ident] = AuthChallenge(ident, code, self.clock())
        self.email.send(ident, f"Your Zephyr login code is {code}. It expires in {int(self.code_ttl // 60)} minutes.")

    def complete_auth(self, identity: str, code: str) -> IdentityPrivateKey:
        """Returns the identity key; every failure raises the same AuthRejected."""
        try:
            ident = canonical_identity(identity).decode()
        except Exception:
            raise AuthRejected("authentication rejected") from None
        ch = self.challenges.get(ident)
        if ch is None:
            raise AuthRejected("authentication rejected")
        if ch.attempts >= self.max_attempts or self.clock() - ch.issued_at > self.code_ttl:
            del self.challenges[ident]
            raise AuthRejected("authentication rejected")
        ch.attempts += 1
        if not hmac.compare_digest(ch.code.encode(), str(code).encode()):
            if ch.attempts >= self.max_attempts:
                del self.challenges[ident]
            raise AuthRejected("authentication rejected")
        del self.challenges[ident]
        self.extracted += 1
        return ibe_extract(self._master, ident)

    def serve_params(self) -> bytes:
        return self._params

    def serve_params_text(self) -> str:
        return base64.b64encode(self._params).decode("ascii")

    def rotate_master(self, round_no: int) -> MasterKeyPair:
        """Fresh master keys for ``round_no``.  Idempotent for the current round."""
        if round_no == self.round:
            return self._master
        self._master = ibe_setup(self.rng, self.ctx)
        self._params = self._master.mpk.to_bytes()
        self.round = round_no
        for k in [k for k in self.issued if k[1] < round_no]:
            del self.issued[k]
        return self._master

    def state_size(self) -> int:
        return 64 * len(self.challenges) + 16 * len(self.issued) + len(self._params)


class PkgNode(Node):
    role = "pkg"

    def __init__(self, endpoint: Endpoint, transport, rng, core: PrivateKeyGenerator,
                 coordinator_key: bytes, tracer=None):
        super().__init__(endpoint, transport, rng, tracer)
        self.core = core
        self.verifier = DirectoryVerifier(coordinator_key)
        self.on(Op.BEGIN_AUTH, self._h_begin)
        self.on(Op.COMPLETE_AUTH, self._h_complete)
        self.on(Op.GET_PARAMS, self._h_params)
        self.on(Op.ROTATE_MASTER, self._h_rotate)
        self.on(Op.OPEN_ROUND, self._h_open_round)

    async def _h_begin(self, r: Reader, src) -> bytes:
        identity = r.text("identity")
        r.done()
        self.core.begin_auth(identity)
        return b""

    async def _h_complete(self, r: Reader, src) -> bytes:
        identity = r.text("identity")
        code = r.text("code")
        reply_key = r.raw(hybrid.PUBLIC_BYTES, "reply key")
        r.done()
        sk = self.core.complete_auth(identity, code)
        sealed = hybrid.seal(reply_key, sk.to_bytes(), self.rng, label=KEY_DELIVERY_LABEL)
        self.trace("key-issued", round=self.core.round)
        return Writer().u64(self.core.round).blob(sealed).blob(self.core.serve_params()).getvalue()

    async def _h_params(self, r: Reader, src) -> bytes:
        r.done()
        return Writer().u64(self.core.round).blob(self.core.serve_params()).getvalue()

    async def _h_rotate(self, r: Reader, src) -> bytes:
        _, body = open_command(self.verifier, b"rotate-master", r)
        round_no = body.u64("round")
        body.done()
        if round_no < self.core.round:
            raise StaleRound(f"already at round {self.core.round}")
        self.core.rotate_master(round_no)
        self.trace("master-rotated", round=round_no)
        return Writer().u64(round_no).blob(self.core.serve_params()).getvalue()

    async def _h_open_round(self, r: Reader, src) -> bytes:
        d = Directory.from_bytes(r.blob("directory"))
        r.blob("params")
        r.done()
        self.verifier.accept(d)
        return b""

    def state_size(self) -> int:
        return self.core.state_size()
