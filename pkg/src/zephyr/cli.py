"""``zephyr`` command line: daemons, the user client and the simulator."""
from __future__ import annotations

import asyncio
import json
import logging
import sys
from pathlib import Path

import click

from .client import ZephyrClient
from .deploy import NodeConfig, generate, serve
from .errors import ConfigInvalid, ZephyrError
from .harness import SimConfig, run_sim
from .net import TcpTransport
from .pkg import MailDirTransport
from .scenarios import SCENARIOS, run_scenario

EXIT_FAILED = 1
EXIT_CONFIG = 2


def _fail(message: str, code: int = EXIT_FAILED) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(path: str) -> NodeConfig:
    try:
        return NodeConfig.load(path)
    except ConfigInvalid as exc:
        _fail(str(exc), EXIT_CONFIG)


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(log_level: str) -> None:
    """Zephyr metadata-hiding messaging: daemons, client and simulator."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- daemons ------------------------------------------------------------------------


def _daemon(role: str, extra_help: str = ""):
    @click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False),
                  help="Node config JSON.")
    def run(config: str, **kw) -> None:
        cfg = _load(config)
        try:
            asyncio.run(serve(role, cfg, TcpTransport(), in_memory=kw.get("in_memory", False)))
        except ZephyrError as exc:
            _fail(str(exc), EXIT_CONFIG if isinstance(exc, ConfigInvalid) else EXIT_FAILED)

    run.__doc__ = f"Run {'an' if role[0] in 'aeiou' else 'a'} {role} daemon until interrupted.{extra_help}"
    return run


main.command("coordinator")(_daemon("coordinator"))
main.command("pkg")(_daemon("pkg", " Auth codes are written to the configured maildir."))
main.command("info")(_daemon("info"))
main.command("mixer")(_daemon("mixer"))
main.command("mailbox")(
    click.option("--in-memory", is_flag=True, help="Keep records in memory instead of SQLite.")(
        _daemon("mailbox")
    )
)


@main.command("init")
@click.option("--dir", "directory", required=True, type=click.Path(file_okay=False))
@click.option("--mixers", default=3, show_default=True)
@click.option("--info-nodes", default=2, show_default=True)
@click.option("--mailbox-servers", default=1, show_default=True)
@click.option("--mailboxes", default=16, show_default=True, help="Mailbox columns per round.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--base-port", default=7200, show_default=True)
@click.option("--pairing", default="ss1536", show_default=True, type=click.Choice(["ss1536", "toy40"]))
@click.option("--round-duration", default=10.0, show_default=True)
def init(directory, mixers, info_nodes, mailbox_servers, mailboxes, host, base_port, pairing, round_duration):
    """Write keys and node configs for a local deployment."""
    paths = generate(directory, mixers, info_nodes, mailbox_servers, host, base_port, pairing,
                     mailboxes, round_duration)
    for name, path in paths.items():
        click.echo(f"{name:<12} {path}")


# -- client -------------------------------------------------------------------------


@main.group()
def client() -> None:
    """Enroll, send and fetch as a user."""


def _client(cfg: NodeConfig, seed: int | None) -> ZephyrClient:
    net = cfg.network
    return ZephyrClient(TcpTransport(), net.pkg, [e.endpoint for e in net.info_nodes], net.coordinator_key, seed=seed)


def _session_path(cfg_path: str, session: str | None) -> Path:
    return Path(session) if session else Path(cfg_path).with_suffix(".session.json")


_config_opt = click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False),
                           help="Client config JSON (network plus optional maildir).")
_seed_opt = click.option("--seed", type=int, default=None, help="Seed the client's RNG (testing only).")
_session_opt = click.option("--session", type=click.Path(dir_okay=False), default=None,
                            help="Session file (default: next to the config).")


@client.command("enroll")
@_config_opt
@_seed_opt
@_session_opt
@click.option("--identity", required=True, help="Your email address.")
@click.option("--code", default=None, help="Code from the auth email; prompted for if absent.")
def client_enroll(config, seed, session, identity, code):
    """Authenticate with the PKG and save this round's key and bundle."""
    cfg = _load(config)
    maildir = cfg.raw.get("maildir")

    def read_code(ident: str) -> str | None:
        if code:
            return code
        if maildir:
            found = MailDirTransport(maildir).latest_code(ident)
            if found:
                return found
        return click.prompt(f"code sent to {ident}")

    try:
        s = asyncio.run(_client(cfg, seed).enroll(identity, read_code))
    except ZephyrError as exc:
        _fail(f"enroll failed: {exc}")
    path = _session_path(config, session)
    path.write_text(json.dumps(s.to_json()) + "\n")
    click.echo(f"enrolled {identity} for round {s.round}; session saved to {path}")


def _restore(config: str, seed, session) -> tuple[ZephyrClient, object]:
    cfg = _load(config)
    c = _client(cfg, seed)
    path = _session_path(config, session)
    try:
        return c, c.restore(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, ZephyrError) as exc:
        _fail(f"no usable session at {path} ({exc}); run `zephyr client enroll` first")


@client.command("send")
@_config_opt
@_seed_opt
@_session_opt
@click.option("--to", "recipient", required=True, help="Recipient email address.")
@click.option("--message-file", required=True, type=click.File("rb"), help="Message body ('-' for stdin).")
def client_send(config, seed, session, recipient, message_file):
    """Send one message for the session's round."""
    c, s = _restore(config, seed, session)
    try:
        receipt = asyncio.run(c.send(s, recipient, message_file.read()))
    except ZephyrError as exc:
        _fail(f"send failed: {exc}")
    click.echo(f"sent in round {receipt.round} over {receipt.route_length} mixers ({receipt.padded_size} bytes padded)")


@client.command("fetch")
@_config_opt
@_seed_opt
@_session_opt
def client_fetch(config, seed, session):
    """Download the session's mailbox column and print what decrypts."""
    c, s = _restore(config, seed, session)
    try:
        messages = asyncio.run(c.fetch_round(s))
    except ZephyrError as exc:
        _fail(f"fetch failed: {exc}")
    for body, round_no in messages:
        click.echo(f"[round {round_no}] {body.decode('utf-8', 'replace')}")
    if not messages:
        click.echo(f"no messages for round {s.round}", err=True)


# -- simulator ----------------------------------------------------------------------


@main.group(invoke_without_command=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), help="SimConfig JSON.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Write metrics CSV here (default stdout).")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), help="Write the JSON report here.")
@click.option("--seed", type=int, default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--clients", type=int, default=None)
@click.option("--pairing", type=click.Choice(["ss1536", "toy40"]), default=None)
@click.pass_context
def sim(ctx, config, csv_path, report_path, seed, rounds, clients, pairing):
    """Run a deterministic simulation; exit 0 iff every invariant holds."""
    ctx.obj = {"seed": 42 if seed is None else seed}
    if ctx.invoked_subcommand is not None:
        return
    try:
        cfg = SimConfig.from_file(config) if config else SimConfig()
        for name, value in (("seed", seed), ("rounds", rounds), ("clients", clients), ("pairing", pairing)):
            if value is not None:
                setattr(cfg, name, value)
        cfg.validate()
    except ConfigInvalid as exc:
        _fail(str(exc), EXIT_CONFIG)
    result = run_sim(cfg)
    if csv_path:
        Path(csv_path).write_text(result.csv, newline="")
    else:
        click.echo(result.csv, nl=False)
    if report_path:
        Path(report_path).write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    rep = result.report
    click.echo(f"rounds={cfg.rounds} clients={cfg.clients} sent={rep['messages_sent']} "
               f"delivered={rep['messages_delivered']} violations={len(result.violations)}", err=True)
    for v in result.violations[:50]:
        click.echo(f"violation: {v}", err=True)
    sys.exit(0 if result.ok else EXIT_FAILED)


@sim.command("scenario")
@click.argument("name", type=click.Choice(sorted(SCENARIOS)))
@click.pass_context
def sim_scenario(ctx, name):
    """Run one scripted scenario with its assertions."""
    result = run_scenario(name, seed=ctx.obj["seed"])
    click.echo(result.summary())
    if not result.passed:
        for line in result.trace:
            click.echo(line, err=True)
    sys.exit(0 if result.passed else EXIT_FAILED)


if __name__ == "__main__":  # pragma: no cover
    main()
