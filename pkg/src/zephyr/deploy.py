"""Live deployment: JSON node configs, node builders and the daemon runner.

Every daemon reads one JSON file.  The shared ``network`` object (inline,
or a path to a separate file) describes the whole deployment; the rest of
the file describes the node itself::

    {
      "network": "network.json",
      "listen": "127.0.0.1:7201",
      "signing_seed": "<64 hex chars>",      # coordinator and mixers
      "node_id": "<40 hex chars>",           # info nodes
      "maildir": "mail/",                    # PKG: where auth codes go
      "db": "mailbox.sqlite",                # mailbox server (omit for memory)
      "seed": 7                              # optional, makes the node's RNG reproducible
    }

``network.json`` holds the pairing name, the coordinator endpoint and
verify key, the PKG endpoint, the info nodes (endpoint and node id), the
mixers (endpoint and verify key), the mailbox servers, and round timing.
``generate`` writes a consistent set of these files for a local test net.
"""
from __future__ import annotations

import asyncio
import json
import logging
import random
import signal
from dataclasses import dataclass, field
from pathlib import Path

from nacl.signing import SigningKey

from .coordinator import CoordinatorNode, DriverSettings
from .crypto.pairing import get_context
from .dht import Contact, node_id_from_key
from .directory import InfoEntry, MixerEntry
from .envelope import Address
from .errors import ConfigInvalid
from .info_node import InfoNode
from .mailbox import MailboxServer, MemoryMailboxStore, SqliteMailboxStore
from .mixer import MixerNode, MixerSettings
from .net import Endpoint, Node, Transport
from .pkg import MailDirTransport, PkgNode, PrivateKeyGenerator

log = logging.getLogger(__name__)

ROLES = ("coordinator", "pkg", "info", "mixer", "mailbox")


@dataclass
class NetworkConfig:
    coordinator: Endpoint
    coordinator_key: bytes
    pkg: Endpoint
    info_nodes: list[InfoEntry]
    mixers: list[MixerEntry]
    mailbox_servers: list[Endpoint]
    pairing: str = "ss1536"
    mailbox_count: int = 16
    round_duration: float = 10.0
    rounds: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            get_context(d.get("pairing", "ss1536"))
            cfg = cls(
                coordinator=Endpoint.parse(d["coordinator"]["endpoint"]),
                coordinator_key=bytes.fromhex(d["coordinator"]["verify_key"]),
                pkg=Endpoint.parse(d["pkg"]),
                info_nodes=[InfoEntry(int(e["node_id"], 16), Endpoint.parse(e["endpoint"])) for e in d["info_nodes"]],
                mixers=[
                    MixerEntry(node_id_from_key(bytes.fromhex(m["verify_key"])),
                               Address.mixer(*Endpoint.parse(m["endpoint"])), bytes.fromhex(m["verify_key"]))
                    for m in d["mixers"]
                ],
                mailbox_servers=[Endpoint.parse(e) for e in d["mailbox_servers"]],
                pairing=d.get("pairing", "ss1536"),
                mailbox_count=int(d.get("mailbox_count", 16)),
                round_duration=float(d.get("round_duration", 10.0)),
                rounds=d.get("rounds"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bad network config: {exc!r}") from None
        if len(cfg.coordinator_key) != 32 or not cfg.info_nodes or not cfg.mixers or not cfg.mailbox_servers:
            raise ConfigInvalid("network needs a 32-byte coordinator key, info nodes, mixers and mailbox servers")
        return cfg

    def driver_settings(self) -> DriverSettings:
        return DriverSettings(
            pkg=self.pkg,
            info_nodes=tuple(self.info_nodes),
            mailbox_servers=tuple(self.mailbox_servers),
            mailbox_count=self.mailbox_count,
            round_duration=self.round_duration,
        )

    def bootstrap(self) -> list[Contact]:
        return [Contact(e.node_id, e.endpoint) for e in self.info_nodes]


@dataclass
class NodeConfig:
    network: NetworkConfig
    listen: Endpoint
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read {path}: {exc}") from None
        net = d.get("network")
        if isinstance(net, str):
            net_path = (path.parent / net) if not Path(net).is_absolute() else Path(net)
            try:
                net = json.loads(net_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigInvalid(f"cannot read {net_path}: {exc}") from None
        if not isinstance(net, dict):
            raise ConfigInvalid("node config needs a network object or path")
        listen = d.get("listen")
        return cls(NetworkConfig.from_dict(net), Endpoint.parse(listen) if listen else None, d)

    def rng(self) -> random.Random:
        seed = self.raw.get("seed")
        return random.Random(seed) if seed is not None else random.SystemRandom()

    def signing_key(self) -> SigningKey:
        try:
            return SigningKey(bytes.fromhex(self.raw["signing_seed"]))
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"node needs a 32-byte hex signing_seed: {exc!r}") from None

    def require_listen(self) -> Endpoint:
        if self.listen is None:
            raise ConfigInvalid("node config needs a listen endpoint")
        return self.listen


def build_node(role: str, cfg: NodeConfig, transport: Transport, in_memory: bool = False, tracer=None) -> Node:
    """Construct (but do not start) the daemon for ``role``."""
    net = cfg.network
    ep = cfg.require_listen()
    rng = cfg.rng()
    if role == "coordinator":
        return CoordinatorNode(ep, transport, rng, cfg.signing_key(), net.driver_settings(), net.mixers, tracer=tracer)
    if role == "mixer":
        return MixerNode(ep, transport, rng, cfg.signing_key(), net.coordinator_key, net.coordinator,
                         [e.endpoint for e in net.info_nodes], settings=MixerSettings(),
                         driver_settings=net.driver_settings(), tracer=tracer)
    if role == "info":
        try:
            node_id = int(cfg.raw["node_id"], 16)
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"info node needs a hex node_id: {exc!r}") from None
        return InfoNode(ep, transport, rng, node_id, net.coordinator_key, tracer=tracer)
    if role == "pkg":
        mail = MailDirTransport(cfg.raw.get("maildir", "zephyr-mail"))
        core = PrivateKeyGenerator(rng, mail, get_context(net.pairing))
        return PkgNode(ep, transport, rng, core, net.coordinator_key, tracer=tracer)
    if role == "mailbox":
        db = cfg.raw.get("db")
        store = MemoryMailboxStore() if in_memory or not db else SqliteMailboxStore(db)
        return MailboxServer(ep, transport, rng, store, net.coordinator_key, tracer=tracer)
    raise ConfigInvalid(f"unknown role {role!r}")


async def start_node(role: str, node: Node, cfg: NodeConfig) -> None:
    await node.start()
    if hasattr(node, "join"):
        await node.join(cfg.network.bootstrap())
    if role == "coordinator":
        node.start_driving(cfg.network.rounds)


async def serve(role: str, cfg: NodeConfig, transport: Transport, in_memory: bool = False) -> None:
    """Run one daemon until SIGINT/SIGTERM."""
    node = build_node(role, cfg, transport, in_memory)
    await start_node(role, node, cfg)
    log.info("%s listening on %s", role, node.endpoint)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except NotImplementedError:  # pragma: no cover - non-unix
            pass
    await stop.wait()
    await node.stop()


def generate(directory: str | Path, mixers: int = 3, info_nodes: int = 2, mailbox_servers: int = 1,
             host: str = "127.0.0.1", base_port: int = 7200, pairing: str = "ss1536",
             mailbox_count: int = 16, round_duration: float = 10.0, seed: int | None = None) -> dict[str, Path]:
    """Write network.json plus one config per node for a local deployment."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    ports = iter(range(base_port, base_port + 1000))

    def ep() -> str:
        return f"{host}:{next(ports)}"

    nodes: dict[str, dict] = {}
    coord_seed = rng.randbytes(32)
    nodes["coordinator"] = {"listen": ep(), "signing_seed": coord_seed.hex()}
    nodes["pkg"] = {"listen": ep(), "maildir": str(out / "mail")}
    for i in range(info_nodes):
        nodes[f"info-{i}"] = {"listen": ep(), "node_id": f"{rng.getrandbits(160):040x}"}
    for i in range(mixers):
        nodes[f"mixer-{i}"] = {"listen": ep(), "signing_seed": rng.randbytes(32).hex()}
    for i in range(mailbox_servers):
        nodes[f"mailbox-{i}"] = {"listen": ep(), "db": str(out / f"mailbox-{i}.sqlite")}

    def verify(seed_hex: str) -> str:
        return bytes(SigningKey(bytes.fromhex(seed_hex)).verify_key).hex()

    network = {
        "pairing": pairing,
        "coordinator": {"endpoint": nodes["coordinator"]["listen"], "verify_key": verify(coord_seed.hex())},
        "pkg": nodes["pkg"]["listen"],
        "info_nodes": [{"endpoint": nodes[f"info-{i}"]["listen"], "node_id": nodes[f"info-{i}"]["node_id"]}
                       for i in range(info_nodes)],
        "mixers": [{"endpoint": nodes[f"mixer-{i}"]["listen"], "verify_key": verify(nodes[f"mixer-{i}"]["signing_seed"])}
                   for i in range(mixers)],
        "mailbox_servers": [nodes[f"mailbox-{i}"]["listen"] for i in range(mailbox_servers)],
        "mailbox_count": mailbox_count,
        "round_duration": round_duration,
    }
    paths = {"network": out / "network.json"}
    paths["network"].write_text(json.dumps(network, indent=2) + "\n")
    for name, body in nodes.items():
        paths[name] = out / f"{name}.json"
        paths[name].write_text(json.dumps({"network": "network.json", **body}, indent=2) + "\n")
    paths["client"] = out / "client.json"
    paths["client"].write_text(json.dumps({"network": "network.json", "maildir": str(out / "mail")}, indent=2) + "\n")
    return paths
