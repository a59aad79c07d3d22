"""Command line entry points: the forwarder daemon and its control client.

The daemon listens on --port (TCP and UDP) unless a config file takes over
listener setup entirely. The control client speaks the JSON control schema
over TCP localhost or a unix socket; METIS_LOCALPATH beats METIS_PORT when
both are set.
"""

from __future__ import annotations

import argparse
import os
import signal
import socket
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .config import (
    CommandSyntaxError,
    ControlResponse,
    Quit,
    SetDebug,
    UnsetDebug,
    decode_response,
    default_interface_provider,
    encode_request,
    parse_command,
)
from .config import ConfigFileError
from .daemon import DEFAULT_PORT, DEFAULT_STORE_CAPACITY, Forwarder
from .io import BadAddress, BindFailed
from .logs import FACILITIES, LEVELS, LogConfigError, LogManager
from .wirefmt import encode_control, parse_fixed_header, parse_message

ENV_PORT = "METIS_PORT"
ENV_LOCALPATH = "METIS_LOCALPATH"


@dataclass
class DaemonOptions:
    port: int = DEFAULT_PORT
    daemon_mode: bool = False
    capacity: int = DEFAULT_STORE_CAPACITY
    log_specs: list[tuple[str, str]] = field(default_factory=list)
    log_file: Optional[str] = None
    config_file: Optional[str] = None


@dataclass
class ControlOptions:
    keystore: Optional[str] = None  # accepted for compatibility, unused
    password: Optional[str] = None  # accepted for compatibility, unused
    commandline: list[str] = field(default_factory=list)


def _log_spec(text: str) -> tuple[str, str]:
    facility, sep, level = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected facility=level, got {text!r}")
    if facility != "all" and facility not in FACILITIES:
        raise argparse.ArgumentTypeError(f"unknown facility {facility!r}")
    if level not in LEVELS:
        raise argparse.ArgumentTypeError(f"unknown level {level!r}")
    return facility, level


def daemon_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccnfwd-daemon",
        description="Content-centric forwarder daemon.",
    )
    parser.add_argument("--port", type=int, default=DEFAULT_PORT,
                        help="TCP and UDP port for the default listeners")
    parser.add_argument("--daemon", action="store_true", dest="daemon_mode",
                        help="detach from the console (requires --log-file)")
    parser.add_argument("--capacity", type=int, default=DEFAULT_STORE_CAPACITY,
                        help="content store capacity in objects; 0 disables")
    parser.add_argument("--log", action="append", type=_log_spec, default=[],
                        metavar="FACILITY=LEVEL",
                        help="set a facility's log level (repeatable, last wins)")
    parser.add_argument("--log-file", dest="log_file", help="write log lines here")
    parser.add_argument("--config", dest="config_file",
                        help="configuration file; disables the default listeners")
    return parser


def parse_daemon_args(argv: Optional[Sequence[str]] = None) -> DaemonOptions:
    parser = daemon_parser()
    ns = parser.parse_args(argv)
    if ns.daemon_mode and not ns.log_file:
        parser.error("--daemon requires --log-file")
    if not 0 < ns.port <= 0xFFFF:
        parser.error(f"--port {ns.port} out of range")
    if ns.capacity < 0:
        parser.error("--capacity must be >= 0")
    return DaemonOptions(
        port=ns.port,
        daemon_mode=ns.daemon_mode,
        capacity=ns.capacity,
        log_specs=list(ns.log),
        log_file=ns.log_file,
        config_file=ns.config_file,
    )


def control_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccnfwd-control",
        description="Configure a running forwarder daemon.",
    )
    parser.add_argument("--keystore", help="signing keystore (accepted, ignored)")
    parser.add_argument("--password", help="keystore password (accepted, ignored)")
    parser.add_argument("commandline", nargs="*",
                        help="one command to send; omit for interactive mode")
    return parser


def parse_control_args(argv: Optional[Sequence[str]] = None) -> ControlOptions:
    ns = control_parser().parse_args(argv)
    return ControlOptions(
        keystore=ns.keystore,
        password=ns.password,
        commandline=list(ns.commandline),
    )


def _detach() -> bool:
    """Classic double fork; returns False when detaching is unsupported."""
    if not hasattr(os, "fork"):
        return False
    if os.fork() > 0:
        os._exit(0)
    os.setsid()
    if os.fork() > 0:
        os._exit(0)
    devnull = os.open(os.devnull, os.O_RDWR)
    for fd in (0, 1, 2):
        os.dup2(devnull, fd)
    os.close(devnull)
    return True


def daemon_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        opts = parse_daemon_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    if opts.daemon_mode and not _detach():
        print("warning: cannot detach on this platform; running in foreground",
              file=sys.stderr)

    logs = LogManager(path=opts.log_file)
    try:
        logs.configure(opts.log_specs)
    except LogConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    core = logs.logger("core")
    core.notice("starting forwarder")

    forwarder = Forwarder(
        capacity=opts.capacity,
        log_manager=logs,
        interface_provider=default_interface_provider,
    )
    try:
        if opts.config_file:
            # Config files own listener setup; --port has no effect here.
            count = forwarder.load_config_file(opts.config_file)
            core.info(f"applied {count} commands from {opts.config_file}")
        else:
            forwarder.start_default_listeners(opts.port)
            core.info(f"listening on port {opts.port} (tcp, udp)")
    except (ConfigFileError, BindFailed, BadAddress, OSError) as exc:
        core.critical(f"startup failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        forwarder.shutdown()
        logs.close()
        return 1

    def request_stop(signum, frame):
        forwarder.stop()

    try:
        signal.signal(signal.SIGINT, request_stop)
        signal.signal(signal.SIGTERM, request_stop)
    except ValueError:
        pass  # not on the main thread (test harness); rely on stop()

    try:
        forwarder.run()
    finally:
        forwarder.shutdown()
        core.notice("forwarder exited")
        logs.close()
    return 0


class ControlClient:
    """Blocking client for the JSON control channel."""

    def __init__(self, sock: socket.socket, trace: bool = False):
        self._sock = sock
        self.trace = trace
        self._seq = 0

    @classmethod
    def connect_from_env(cls, env=os.environ) -> "ControlClient":
        """Unix socket from METIS_LOCALPATH wins over TCP via METIS_PORT."""
        path = env.get(ENV_LOCALPATH)
        if path:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.connect(path)
            return cls(sock)
        port = int(env.get(ENV_PORT, DEFAULT_PORT))
        return cls(socket.create_connection(("127.0.0.1", port), timeout=10))

    def close(self) -> None:
        self._sock.close()

    def request(self, cmd) -> ControlResponse:
        self._seq += 1
        payload = encode_request(cmd, self._seq)
        if self.trace:
            print(f"sent: {payload.decode()}", file=sys.stderr)
        self._sock.sendall(encode_control(payload))
        reply = parse_message(self._read_packet(), 0, 0)
        if self.trace:
            print(f"recv: {reply.payload.decode()}", file=sys.stderr)
        return decode_response(reply.payload)

    def _read_packet(self) -> bytes:
        header = self._read_exact(8)
        total = parse_fixed_header(header).packet_length
        return header + self._read_exact(total - 8)

    def _read_exact(self, count: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < count:
            data = self._sock.recv(count - len(chunks))
            if not data:
                raise ConnectionError("daemon closed the control connection")
            chunks += data
        return bytes(chunks)


def _print_response(resp: ControlResponse) -> None:
    for row in resp.rows:
        print(row)
    if not resp.ok:
        print(f"NACK {resp.message}".rstrip())
    elif resp.message and not resp.rows:
        print(resp.message)


def _one_shot(client: ControlClient, line: str) -> int:
    try:
        cmd = parse_command(line)
    except CommandSyntaxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if cmd is None or isinstance(cmd, (Quit, SetDebug, UnsetDebug)):
        return 0
    resp = client.request(cmd)
    _print_response(resp)
    return 0 if resp.ok else 1


def _interactive(client: ControlClient) -> int:
    while True:
        try:
            line = input("> ")
        except (EOFError, KeyboardInterrupt):
            print()
            return 0
        try:
            cmd = parse_command(line)
        except CommandSyntaxError as exc:
            print(f"error: {exc}")
            continue
        if cmd is None:
            continue
        if isinstance(cmd, Quit):
            return 0
        if isinstance(cmd, SetDebug):
            client.trace = True
            continue
        if isinstance(cmd, UnsetDebug):
            client.trace = False
            continue
        try:
            _print_response(client.request(cmd))
        except (ConnectionError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1


def control_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        opts = parse_control_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    if opts.keystore or opts.password:
        print("note: keystore/password accepted but unused (signing not supported)",
              file=sys.stderr)

    try:
        client = ControlClient.connect_from_env(os.environ)
    except (OSError, ValueError) as exc:
        print(f"error: cannot connect to daemon: {exc}", file=sys.stderr)
        return 1
    try:
        if opts.commandline:
            return _one_shot(client, " ".join(opts.commandline))
        return _interactive(client)
    finally:
        client.close()


def daemon_entry() -> None:
    raise SystemExit(daemon_main())


def control_entry() -> None:
    raise SystemExit(control_main())
