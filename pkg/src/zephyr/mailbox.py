"""Mailbox storage: per-mailbox columns of sealed messages.

Two interchangeable backends share one contract: an in-memory store and a
durable sqlite table ``records(mailbox_id, seq, round, blob)``.  Sequence
numbers are monotone per mailbox across rounds, so they stay gapless
within a round.  Only the current and previous round are readable.
"""
from __future__ import annotations

import sqlite3
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass

from .directory import Directory, DirectoryVerifier
from .envelope import MAILBOX_ID_BYTES, PAD_BUCKETS
from .errors import PayloadTooLong, UnknownRound, WrongRound
from .net import Endpoint, Node, Op
from .wire import Reader, Writer

# room for the sealed envelope around the largest padded message
ENVELOPE_OVERHEAD = 512
MAX_BLOB = PAD_BUCKETS[-1] + ENVELOPE_OVERHEAD


@dataclass(frozen=True)
class MailboxRecord:
    mailbox_id: bytes
    seq: int
    round: int
    blob: bytes

    def write(self, w: Writer) -> Writer:
        return w.raw(self.mailbox_id).u64(self.seq).u64(self.round).blob(self.blob)

    @classmethod
    def read(cls, r: Reader) -> "MailboxRecord":
        return cls(r.raw(MAILBOX_ID_BYTES, "mailbox id"), r.u64("seq"), r.u64("round"), r.blob("blob"))


class MailboxStore(ABC):
    def __init__(self, max_blob: int = MAX_BLOB) -> None:
        self.max_blob = max_blob
        self.current_round = 0
        self._lock = threading.Lock()

    def open_round(self, round_no: int) -> None:
        with self._lock:
            if round_no > self.current_round:
                self.current_round = round_no

    def append(self, mailbox_id: bytes, round_no: int, blob: bytes) -> int:
        if len(mailbox_id) != MAILBOX_ID_BYTES:
            raise ValueError("mailbox id must be 32 bytes")
        if len(blob) > self.max_blob:
            raise PayloadTooLong(f"blob of {len(blob)} bytes exceeds {self.max_blob}")
        with self._lock:
            if round_no != self.current_round:
                raise WrongRound(f"mailbox is at round {self.current_round}", self.current_round)
            return self._append(bytes(mailbox_id), round_no, bytes(blob))

    def fetch_all(self, mailbox_id: bytes, round_no: int) -> list[MailboxRecord]:
        with self._lock:
            if round_no > self.current_round or round_no < self.current_round - 1 or round_no < 1:
                raise UnknownRound(f"round {round_no} is not retained")
            return self._fetch(bytes(mailbox_id), round_no)

    def purge(self, round_no: int) -> int:
        with self._lock:
            if round_no >= self.current_round - 1:
                return 0
            return self._purge(round_no)

    @abstractmethod
    def _append(self, mailbox_id: bytes, round_no: int, blob: bytes) -> int: ...

    @abstractmethod
    def _fetch(self, mailbox_id: bytes, round_no: int) -> list[MailboxRecord]: ...

    @abstractmethod
    def _purge(self, round_no: int) -> int: ...

    @abstractmethod
    def size(self) -> int: ...

    def close(self) -> None:
        pass


class MemoryMailboxStore(MailboxStore):
    def __init__(self, max_blob: int = MAX_BLOB) -> None:
        super().__init__(max_blob)
        self._columns: dict[tuple[bytes, int], list[MailboxRecord]] = {}
        self._last_seq: dict[bytes, int] = {}

    def _append(self, mailbox_id, round_no, blob):
        seq = self._last_seq.get(mailbox_id, 0) + 1
        self._last_seq[mailbox_id] = seq
        self._columns.setdefault((mailbox_id, round_no), []).append(
            MailboxRecord(mailbox_id, seq, round_no, blob)
        )
        return seq

    def _fetch(self, mailbox_id, round_no):
        return list(self._columns.get((mailbox_id, round_no), ()))

    def _purge(self, round_no):
        doomed = [k for k in self._columns if k[1] == round_no]
        return sum(len(self._columns.pop(k)) for k in doomed)

    def size(self) -> int:
        return sum(len(rec.blob) + 56 for col in self._columns.values() for rec in col)


class SqliteMailboxStore(MailboxStore):
    """Durable backend.  ``path=":memory:"`` gives a throwaway database."""

    def __init__(self, path: str = ":memory:", max_blob: int = MAX_BLOB) -> None:
        super().__init__(max_blob)
        self.db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self.db.executescript(
            """
            CREATE TABLE IF NOT EXISTS records (
                mailbox_id BLOB NOT NULL,
                seq INTEGER NOT NULL,
                round INTEGER NOT NULL,
                blob BLOB NOT NULL,
                PRIMARY KEY (mailbox_id, seq)
            );
            CREATE INDEX IF NOT EXISTS records_by_round ON records (mailbox_id, round, seq);
            CREATE TABLE IF NOT EXISTS counters (mailbox_id BLOB PRIMARY KEY, last_seq INTEGER NOT NULL);
            CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value INTEGER NOT NULL);
            """
        )
        row = self.db.execute("SELECT value FROM meta WHERE key = 'round'").fetchone()
        self.current_round = row[0] if row else 0

    def open_round(self, round_no: int) -> None:
        super().open_round(round_no)
        with self._lock:
            self.db.execute(
                "INSERT OR REPLACE INTO meta (key, value) VALUES ('round', ?)", (self.current_round,)
            )

    def _append(self, mailbox_id, round_no, blob):
        cur = self.db.cursor()
        cur.execute("BEGIN IMMEDIATE")
        try:
            row = cur.execute("SELECT last_seq FROM counters WHERE mailbox_id = ?", (mailbox_id,)).fetchone()
            seq = (row[0] if row else 0) + 1
            cur.execute("INSERT OR REPLACE INTO counters (mailbox_id, last_seq) VALUES (?, ?)", (mailbox_id, seq))
            cur.execute(
                "INSERT INTO records (mailbox_id, seq, round, blob) VALUES (?, ?, ?, ?)",
                (mailbox_id, seq, round_no, blob),
            )
            cur.execute("COMMIT")
        except BaseException:
            cur.execute("ROLLBACK")
            raise
        return seq

    def _fetch(self, mailbox_id, round_no):
        rows = self.db.execute(
            "SELECT seq, blob FROM records WHERE mailbox_id = ? AND round = ? ORDER BY seq",
            (mailbox_id, round_no),
        ).fetchall()
        return [MailboxRecord(mailbox_id, seq, round_no, bytes(blob)) for seq, blob in rows]

    def _purge(self, round_no):
        return self.db.execute("DELETE FROM records WHERE round = ?", (round_no,)).rowcount

    def size(self) -> int:
        (n,) = self.db.execute("SELECT COALESCE(SUM(LENGTH(blob) + 56), 0) FROM records").fetchone()
        return int(n)

    def close(self) -> None:
        self.db.close()


class MailboxServer(Node):
    role = "mailbox"

    def __init__(self, endpoint: Endpoint, transport, rng, store: MailboxStore,
                 coordinator_key: bytes, tracer=None):
        super().__init__(endpoint, transport, rng, tracer)
        self.store = store
        self.verifier = DirectoryVerifier(coordinator_key)
        self.on(Op.APPEND, self._h_append)
        self.on(Op.FETCH_ALL, self._h_fetch)
        self.on(Op.PURGE, self._h_purge)
        self.on(Op.OPEN_ROUND, self._h_open_round)

    async def _h_append(self, r: Reader, src) -> bytes:
        round_no = r.u64("round")
        n = r.u32("count")
        items = [(r.raw(MAILBOX_ID_BYTES, "mailbox id"), r.blob("blob")) for _ in range(n)]
        r.done()
        # reject the whole batch up front rather than half-applying it
        if round_no != self.store.current_round:
            raise WrongRound(f"mailbox is at round {self.store.current_round}", self.store.current_round)
        for _, blob in items:
            if len(blob) > self.store.max_blob:
                raise PayloadTooLong(f"blob of {len(blob)} bytes exceeds {self.store.max_blob}")
        w = Writer().u32(n)
        for mailbox_id, blob in items:
            w.u64(self.store.append(mailbox_id, round_no, blob))
        self.trace("append", round=round_no, count=n)
        return w.getvalue()

    async def _h_fetch(self, r: Reader, src) -> bytes:
        mailbox_id = r.raw(MAILBOX_ID_BYTES, "mailbox id")
        round_no = r.u64("round")
        r.done()
        records = self.store.fetch_all(mailbox_id, round_no)
        self.trace("mailbox-fetch", round=round_no, client=src.host)
        w = Writer().u32(len(records))
        for rec in records:
            rec.write(w)
        return w.getvalue()

    async def _h_purge(self, r: Reader, src) -> bytes:
        round_no = r.u64("round")
        r.done()
        return Writer().u64(self.store.purge(round_no)).getvalue()

    async def _h_open_round(self, r: Reader, src) -> bytes:
        d = self.verifier.accept(Directory.from_bytes(r.blob("directory")))
        r.blob("params")
        r.done()
        previous = self.store.current_round
        self.store.open_round(d.round)
        for old in range(max(1, previous - 1), d.round - 1):
            self.store.purge(old)
        return b""

    def state_size(self) -> int:
        return self.store.size()


def encode_fetch_request(mailbox_id: bytes, round_no: int) -> bytes:
    return Writer().raw(mailbox_id).u64(round_no).getvalue()


def decode_records(body: bytes) -> list[MailboxRecord]:
    r = Reader(body)
    records = [MailboxRecord.read(r) for _ in range(r.u32("count"))]
    r.done()
    return records


def encode_append(round_no: int, items: list[tuple[bytes, bytes]]) -> bytes:
    w = Writer().u64(round_no).u32(len(items))
    for mailbox_id, blob in items:
        w.raw(mailbox_id).blob(blob)
    return w.getvalue()
