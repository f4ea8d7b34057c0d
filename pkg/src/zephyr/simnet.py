"""Deterministic virtual-time execution for node code.

``VirtualTimeLoop`` is a stock asyncio selector loop whose clock only moves
when every task is blocked: instead of sleeping until the next timer it
jumps straight to it.  ``SimNetwork`` is a ``Transport`` that delivers
frames between in-process nodes with seeded latency and loss and counts
every byte it carries.  Node code is unchanged between live and simulated
runs; only the loop and the transport differ.
"""
from __future__ import annotations

import asyncio
import selectors
from collections import defaultdict
from dataclasses import dataclass

from .errors import RpcTimeout
from .net import Endpoint, FrameHandler, Transport


class SimulationStalled(RuntimeError):
    pass


class _VirtualSelector(selectors.DefaultSelector):
    def __init__(self) -> None:
        super().__init__()
        self.loop: "VirtualTimeLoop | None" = None

    def select(self, timeout=None):
        if timeout is None:
            raise SimulationStalled("no runnable tasks and no pending timers")
        if timeout > 0:
            self.loop._now += timeout
        return super().select(0)


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self) -> None:
        self._now = 0.0
        selector = _VirtualSelector()
        super().__init__(selector)
        selector.loop = self

    def time(self) -> float:
        return self._now


def run_virtual(coro):
    """Run ``coro`` to completion on a fresh virtual-time loop."""
    loop = VirtualTimeLoop()
    try:
        return loop.run_until_complete(coro)
    finally:
        try:
            pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
            for t in pending:
                t.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        finally:
            loop.close()


@dataclass
class Traffic:
    bytes_received: int = 0
    bytes_sent: int = 0


class SimNetwork(Transport):
    def __init__(self, rng, latency: float = 0.002, jitter: float = 0.001):
        self.rng = rng
        self.latency = latency
        self.jitter = jitter
        self.handlers: dict[Endpoint, FrameHandler] = {}
        self.drop_rate: dict[Endpoint, float] = {}
        self.round_label = 0
        self.traffic: dict[tuple[Endpoint, int], Traffic] = defaultdict(Traffic)
        self._inflight: dict[Endpoint, set[asyncio.Task]] = defaultdict(set)

    def _delay(self) -> float:
        return self.latency + self.rng.random() * self.jitter

    def _lost(self, *endpoints: Endpoint) -> bool:
        for ep in endpoints:
            rate = self.drop_rate.get(ep, 0.0)
            if rate and self.rng.random() < rate:
                return True
        return False

    def _count(self, ep: Endpoint, received: int = 0, sent: int = 0) -> None:
        t = self.traffic[(ep, self.round_label)]
        t.bytes_received += received
        t.bytes_sent += sent

    async def request(self, src: Endpoint, dst: Endpoint, payload: bytes, timeout: float) -> bytes:
        try:
            return await asyncio.wait_for(self._deliver(src, dst, payload), timeout)
        except asyncio.TimeoutError:
            raise RpcTimeout(f"{src} -> {dst}: no reply within {timeout}s") from None

    async def _deliver(self, src: Endpoint, dst: Endpoint, payload: bytes) -> bytes:
        await asyncio.sleep(self._delay())
        handler = self.handlers.get(dst)
        if handler is None or self._lost(src, dst):
            await asyncio.Event().wait()
        self._count(src, sent=len(payload))
        self._count(dst, received=len(payload))
        task = asyncio.get_running_loop().create_task(handler(payload, src))
        inflight = self._inflight[dst]
        inflight.add(task)
        task.add_done_callback(inflight.discard)
        reply = await asyncio.shield(task)
        await asyncio.sleep(self._delay())
        if dst not in self.handlers or self._lost(dst, src):
            await asyncio.Event().wait()
        self._count(dst, sent=len(reply))
        self._count(src, received=len(reply))
        return reply

    async def listen(self, endpoint: Endpoint, handler: FrameHandler) -> None:
        self.handlers[endpoint] = handler

    async def unlisten(self, endpoint: Endpoint) -> None:
        self.handlers.pop(endpoint, None)
        for task in list(self._inflight.pop(endpoint, ())):
            task.cancel()
