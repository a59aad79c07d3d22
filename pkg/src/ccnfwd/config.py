"""The configuration command grammar and its JSON control encoding.

One parser serves three front ends: the daemon's config file, the control
client's command line / interactive prompt, and control packets arriving
over a connection. Commands execute against the daemon's listeners and
tables; list output rows are plain text inside the JSON response.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .wirefmt import Message, Name, TooLarge, encode_control, parse_message

NOT_IMPLEMENTED = "Not implemented"
ROUTE_NEXT_PLACEHOLDER = "---.---.---.---/...."


class CommandSyntaxError(Exception):
    def __init__(self, reason: str, token: Optional[str] = None):
        self.token = token
        super().__init__(reason)


class BadJson(Exception):
    pass


class UnknownAction(Exception):
    def __init__(self, action: str, seq: int = 0):
        self.action = action
        self.seq = seq
        super().__init__(f"unknown action {action!r}")


class ConfigFileError(Exception):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


# -- command variants --------------------------------------------------------


@dataclass(frozen=True)
class AddListener:
    kind: str  # tcp | udp | local
    symbolic: str
    address: str  # IP text, or socket path for local
    port: Optional[int] = None


@dataclass(frozen=True)
class AddListenerEther:  # parses, but the transport is unsupported
    symbolic: str
    interface: str
    ethertype: str


@dataclass(frozen=True)
class AddConnection:
    kind: str  # tcp | udp
    symbolic: str
    remote_host: str
    remote_port: int
    local_host: Optional[str] = None
    local_port: Optional[int] = None


@dataclass(frozen=True)
class AddConnectionEther:  # parses, but the transport is unsupported
    symbolic: str
    dmac: str
    interface: str


@dataclass(frozen=True)
class AddRoute:
    symbolic: str
    prefix: Name
    cost: int


@dataclass(frozen=True)
class ListConnections:
    pass


@dataclass(frozen=True)
class ListInterfaces:
    pass


@dataclass(frozen=True)
class ListRoutes:
    pass


@dataclass(frozen=True)
class RemoveConnection:
    pass


@dataclass(frozen=True)
class RemoveRoute:
    pass


@dataclass(frozen=True)
class Quit:
    pass


@dataclass(frozen=True)
class SetDebug:
    pass


@dataclass(frozen=True)
class UnsetDebug:
    pass


@dataclass(frozen=True)
class Help:
    topic: Optional[str] = None


ControlCommand = Union[
    AddListener,
    AddListenerEther,
    AddConnection,
    AddConnectionEther,
    AddRoute,
    ListConnections,
    ListInterfaces,
    ListRoutes,
    RemoveConnection,
    RemoveRoute,
    Quit,
    SetDebug,
    UnsetDebug,
    Help,
]


@dataclass
class ControlResponse:
    seq: int = 0
    status: str = "ACK"  # ACK | NACK
    message: str = ""
    rows: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ACK"


def ack(message: str = "", rows=(), seq: int = 0) -> ControlResponse:
    return ControlResponse(seq=seq, status="ACK", message=message, rows=tuple(rows))


def nack(message: str, seq: int = 0) -> ControlResponse:
    return ControlResponse(seq=seq, status="NACK", message=message)


# -- text grammar -------------------------------------------------------------

HELP_TEXT = {
    "add listener": "add listener (tcp|udp) <symbolic> <ip> <port> | add listener local <symbolic> <path>",
    "add connection": "add connection (tcp|udp) <symbolic> <remote_ip> <remote_port> [<local_ip> [<local_port>]]",
    "add route": "add route <symbolic> <prefix> <cost>",
    "list connections": "list connections",
    "list interfaces": "list interfaces",
    "list routes": "list routes",
    "remove connection": "remove connection (not implemented)",
    "remove route": "remove route (not implemented)",
    "quit": "quit (interactive mode only)",
    "set debug": "set debug",
    "unset debug": "unset debug",
    "help": "help [command]",
}


def _want(tokens: list[str], count: int, usage: str) -> None:
    if len(tokens) != count:
        raise CommandSyntaxError(f"usage: {usage}", token=" ".join(tokens))


def _int_token(text: str, what: str, lo: int = 0, hi: int = 0xFFFFFFFF) -> int:
    try:
        value = int(text)
    except ValueError:
        raise CommandSyntaxError(f"{what} must be a number, got {text!r}", token=text)
    if not lo <= value <= hi:
        raise CommandSyntaxError(f"{what} {value} out of range", token=text)
    return value


def parse_command(line: str) -> Optional[ControlCommand]:
    """Parse one grammar line; comments and blank lines return None."""
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    tokens = stripped.split()
    head = tokens[0].lower()

    if head == "add":
        return _parse_add(tokens)
    if head == "list":
        _want(tokens, 2, "list (connections|interfaces|routes)")
        what = tokens[1].lower()
        if what == "connections":
            return ListConnections()
        if what == "interfaces":
            return ListInterfaces()
        if what == "routes":
            return ListRoutes()
        raise CommandSyntaxError(f"cannot list {tokens[1]!r}", token=tokens[1])
    if head == "remove":
        if len(tokens) >= 2 and tokens[1].lower() == "connection":
            return RemoveConnection()
        if len(tokens) >= 2 and tokens[1].lower() == "route":
            return RemoveRoute()
        raise CommandSyntaxError("usage: remove (connection|route)", token=stripped)
    if head == "quit":
        return Quit()
    if head == "set" and len(tokens) == 2 and tokens[1].lower() == "debug":
        return SetDebug()
    if head == "unset" and len(tokens) == 2 and tokens[1].lower() == "debug":
        return UnsetDebug()
    if head == "help":
        topic = " ".join(tokens[1:]) if len(tokens) > 1 else None
        return Help(topic=topic)
    raise CommandSyntaxError(
        f"unknown command {tokens[0]!r} (try 'help')", token=tokens[0]
    )


def _parse_add(tokens: list[str]) -> ControlCommand:
    if len(tokens) < 2:
        raise CommandSyntaxError("usage: add (listener|connection|route) ...")
    what = tokens[1].lower()

    if what == "listener":
        if len(tokens) < 3:
            raise CommandSyntaxError(f"usage: {HELP_TEXT['add listener']}")
        kind = tokens[2].lower()
        if kind in ("tcp", "udp"):
            _want(tokens, 6, HELP_TEXT["add listener"])
            port = _int_token(tokens[5], "port", 0, 0xFFFF)
            return AddListener(kind=kind, symbolic=tokens[3], address=tokens[4], port=port)
        if kind == "local":
            _want(tokens, 5, HELP_TEXT["add listener"])
            return AddListener(kind="local", symbolic=tokens[3], address=tokens[4])
        if kind == "ether":
            _want(tokens, 6, "add listener ether <symbolic> <interface> <ethertype>")
            return AddListenerEther(symbolic=tokens[3], interface=tokens[4], ethertype=tokens[5])
        raise CommandSyntaxError(f"unknown listener kind {tokens[2]!r}", token=tokens[2])

    if what == "connection":
        if len(tokens) < 3:
            raise CommandSyntaxError(f"usage: {HELP_TEXT['add connection']}")
        kind = tokens[2].lower()
        if kind in ("tcp", "udp"):
            if not 6 <= len(tokens) <= 8:
                raise CommandSyntaxError(f"usage: {HELP_TEXT['add connection']}")
            remote_port = _int_token(tokens[5], "remote port", 0, 0xFFFF)
            local_host = tokens[6] if len(tokens) > 6 else None
            local_port = (
                _int_token(tokens[7], "local port", 0, 0xFFFF) if len(tokens) > 7 else None
            )
            return AddConnection(
                kind=kind,
                symbolic=tokens[3],
                remote_host=tokens[4],
                remote_port=remote_port,
                local_host=local_host,
                local_port=local_port,
            )
        if kind == "ether":
            _want(tokens, 6, "add connection ether <symbolic> <dmac> <interface>")
            return AddConnectionEther(symbolic=tokens[3], dmac=tokens[4], interface=tokens[5])
        raise CommandSyntaxError(f"unknown connection kind {tokens[2]!r}", token=tokens[2])

    if what == "route":
        _want(tokens, 5, HELP_TEXT["add route"])
        try:
            prefix = Name.from_uri(tokens[3])
        except ValueError as exc:
            raise CommandSyntaxError(str(exc), token=tokens[3])
        cost = _int_token(tokens[4], "cost")
        return AddRoute(symbolic=tokens[2], prefix=prefix, cost=cost)

    raise CommandSyntaxError(f"cannot add {tokens[1]!r} (try 'help')", token=tokens[1])


def render_command(cmd: ControlCommand) -> str:
    """Inverse of parse_command for every renderable variant."""
    if isinstance(cmd, AddListener):
        if cmd.kind == "local":
            return f"add listener local {cmd.symbolic} {cmd.address}"
        return f"add listener {cmd.kind} {cmd.symbolic} {cmd.address} {cmd.port}"
    if isinstance(cmd, AddListenerEther):
        return f"add listener ether {cmd.symbolic} {cmd.interface} {cmd.ethertype}"
    if isinstance(cmd, AddConnection):
        parts = [
            "add connection",
            cmd.kind,
            cmd.symbolic,
            cmd.remote_host,
            str(cmd.remote_port),
        ]
        if cmd.local_host is not None:
            parts.append(cmd.local_host)
            if cmd.local_port is not None:
                parts.append(str(cmd.local_port))
        return " ".join(parts)
    if isinstance(cmd, AddConnectionEther):
        return f"add connection ether {cmd.symbolic} {cmd.dmac} {cmd.interface}"
    if isinstance(cmd, AddRoute):
        return f"add route {cmd.symbolic} {cmd.prefix.to_uri()} {cmd.cost}"
    if isinstance(cmd, ListConnections):
        return "list connections"
    if isinstance(cmd, ListInterfaces):
        return "list interfaces"
    if isinstance(cmd, ListRoutes):
        return "list routes"
    if isinstance(cmd, RemoveConnection):
        return "remove connection"
    if isinstance(cmd, RemoveRoute):
        return "remove route"
    if isinstance(cmd, Quit):
        return "quit"
    if isinstance(cmd, SetDebug):
        return "set debug"
    if isinstance(cmd, UnsetDebug):
        return "unset debug"
    if isinstance(cmd, Help):
        return "help" if cmd.topic is None else f"help {cmd.topic}"
    raise TypeError(f"cannot render {cmd!r}")


# -- JSON control codec -------------------------------------------------------

_ACTION_OF = {
    AddListener: "add_listener",
    AddListenerEther: "add_listener_ether",
    AddConnection: "add_connection",
    AddConnectionEther: "add_connection_ether",
    AddRoute: "add_route",
    ListConnections: "list_connections",
    ListInterfaces: "list_interfaces",
    ListRoutes: "list_routes",
    RemoveConnection: "remove_connection",
    RemoveRoute: "remove_route",
    Quit: "quit",
    SetDebug: "set_debug",
    UnsetDebug: "unset_debug",
    Help: "help",
}
_COMMAND_OF = {action: cls for cls, action in _ACTION_OF.items()}


def _params_of(cmd: ControlCommand) -> dict:
    params = {}
    for f in dataclasses.fields(cmd):
        value = getattr(cmd, f.name)
        if isinstance(value, Name):
            value = value.to_uri()
        params[f.name] = value
    return params


def encode_request(cmd: ControlCommand, seq: int) -> bytes:
    doc = {"seq": seq, "action": _ACTION_OF[type(cmd)], "params": _params_of(cmd)}
    return json.dumps(doc).encode("utf-8")


def decode_request(data: bytes) -> tuple[ControlCommand, int]:
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise BadJson(f"bad control request: {exc}") from exc
    if not isinstance(doc, dict):
        raise BadJson("control request is not a JSON object")
    seq = doc.get("seq", 0)
    action = doc.get("action")
    params = doc.get("params", {})
    if not isinstance(seq, int) or not isinstance(params, dict):
        raise BadJson("bad seq or params in control request")
    cls = _COMMAND_OF.get(action)
    if cls is None:
        raise UnknownAction(str(action), seq=seq)
    if "prefix" in params:
        try:
            params = dict(params, prefix=Name.from_uri(params["prefix"]))
        except (TypeError, ValueError) as exc:
            raise BadJson(f"bad prefix: {exc}") from exc
    try:
        return cls(**params), seq
    except TypeError as exc:
        raise BadJson(f"bad params for {action}: {exc}") from exc


def encode_response(resp: ControlResponse) -> bytes:
    doc = {
        "seq": resp.seq,
        "status": resp.status,
        "message": resp.message,
        "rows": list(resp.rows),
    }
    return json.dumps(doc).encode("utf-8")


def decode_response(data: bytes) -> ControlResponse:
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise BadJson(f"bad control response: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("status") not in ("ACK", "NACK"):
        raise BadJson("bad control response document")
    return ControlResponse(
        seq=int(doc.get("seq", 0)),
        status=doc["status"],
        message=str(doc.get("message", "")),
        rows=tuple(str(r) for r in doc.get("rows", [])),
    )


# -- interface enumeration ----------------------------------------------------


@dataclass(frozen=True)
class InterfaceInfo:
    index: int
    name: str
    flags: str  # loopback/multicast letters, e.g. "lm"
    mtu: int
    addresses: tuple[str, ...]


def default_interface_provider() -> list[InterfaceInfo]:
    """Enumerate system interfaces via psutil."""
    import psutil

    infos = []
    stats = psutil.net_if_stats()
    addrs = psutil.net_if_addrs()
    for index, name in enumerate(sorted(addrs), 1):
        stat = stats.get(name)
        flag_text = getattr(stat, "flags", "") if stat else ""
        letters = ""
        if "loopback" in flag_text or name.startswith("lo"):
            letters += "l"
        if "multicast" in flag_text:
            letters += "m"
        rendered = []
        for addr in addrs[name]:
            if addr.family == 2:  # AF_INET
                rendered.append(f"inet4://{addr.address}:0")
            elif addr.family == 10:  # AF_INET6
                rendered.append(f"inet6://[{addr.address}]:0")
        infos.append(
            InterfaceInfo(
                index=index,
                name=name,
                flags=letters or "-",
                mtu=stat.mtu if stat else 0,
                addresses=tuple(rendered),
            )
        )
    return infos


# -- execution ----------------------------------------------------------------

_KIND_LABEL = {"tcp": "TCP", "udp": "UDP", "unix": "LOCAL"}


class CommandExecutor:
    """Applies parsed commands to a forwarder's listeners and tables."""

    def __init__(self, forwarder, interface_provider: Optional[Callable] = None):
        self._fwd = forwarder
        self._interfaces = interface_provider or default_interface_provider

    def execute(self, cmd: ControlCommand) -> ControlResponse:
        if isinstance(cmd, AddListener):
            return self._add_listener(cmd)
        if isinstance(cmd, (AddListenerEther, AddConnectionEther)):
            return nack("unsupported transport: ether")
        if isinstance(cmd, AddConnection):
            return self._add_connection(cmd)
        if isinstance(cmd, AddRoute):
            return self._add_route(cmd)
        if isinstance(cmd, ListConnections):
            return ack(rows=self._connection_rows())
        if isinstance(cmd, ListInterfaces):
            return ack(rows=self._interface_rows())
        if isinstance(cmd, ListRoutes):
            return ack(rows=self._route_rows())
        if isinstance(cmd, (RemoveConnection, RemoveRoute)):
            return nack(NOT_IMPLEMENTED)
        if isinstance(cmd, Quit):
            return nack("quit applies to the control client only")
        if isinstance(cmd, (SetDebug, UnsetDebug)):
            return nack("debug flag applies to the control client only")
        if isinstance(cmd, Help):
            return ack(rows=self._help_rows(cmd.topic))
        return nack(f"cannot execute {type(cmd).__name__}")

    def _add_listener(self, cmd: AddListener) -> ControlResponse:
        try:
            listener = self._fwd.add_listener(cmd.kind, cmd.symbolic, cmd.address, cmd.port)
        except Exception as exc:
            return nack(str(exc))
        return ack(f"listener {cmd.symbolic} on {listener.address.render()}")

    def _add_connection(self, cmd: AddConnection) -> ControlResponse:
        try:
            conn = self._fwd.add_tunnel(
                cmd.kind,
                cmd.symbolic,
                cmd.remote_host,
                cmd.remote_port,
                cmd.local_host,
                cmd.local_port,
            )
        except Exception as exc:
            return nack(str(exc))
        return ack(f"connection {cmd.symbolic} is {conn.id}")

    def _add_route(self, cmd: AddRoute) -> ControlResponse:
        conn = self._fwd.resolve_symbolic(cmd.symbolic)
        if conn is None:
            return nack(f"unknown connection {cmd.symbolic!r}")
        self._fwd.fib.add_route(cmd.prefix, conn.id, cmd.cost)
        return ack(f"route {cmd.prefix.to_uri()} via {cmd.symbolic}")

    def _connection_rows(self) -> list[str]:
        rows = []
        for conn in self._fwd.table.connections():
            kind = _KIND_LABEL.get(conn.kind, conn.kind.upper())
            rows.append(
                f"{conn.id} {conn.state.value} {conn.pair.local.render()}"
                f" {conn.pair.remote.render()} {kind}"
            )
        return rows

    def _interface_rows(self) -> list[str]:
        rows = []
        for info in self._interfaces():
            first = info.addresses[0] if info.addresses else ""
            rows.append(f"{info.index} {info.name} {info.flags} {info.mtu} {first}".rstrip())
            rows.extend(info.addresses[1:])
        return rows

    def _route_rows(self) -> list[str]:
        rows = []
        for entry in self._fwd.fib.list():
            for nexthop in sorted(entry.nexthops):
                rows.append(
                    f"{nexthop} STATIC LONGEST {entry.cost}"
                    f" {ROUTE_NEXT_PLACEHOLDER} {entry.prefix.to_uri()}"
                )
        return rows

    @staticmethod
    def _help_rows(topic: Optional[str]) -> list[str]:
        if topic:
            key = topic.lower()
            exact = [text for name, text in HELP_TEXT.items() if name == key]
            if exact:
                return exact
            partial = [text for name, text in HELP_TEXT.items() if name.startswith(key)]
            if partial:
                return partial
            return [f"no help for {topic!r}"]
        return list(HELP_TEXT.values())


def load_config_file(path: str, executor: CommandExecutor) -> int:
    """Execute a config file line by line; any failing line aborts startup."""
    executed = 0
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            try:
                cmd = parse_command(line)
            except CommandSyntaxError as exc:
                raise ConfigFileError(line_no, str(exc)) from exc
            if cmd is None:
                continue
            resp = executor.execute(cmd)
            if not resp.ok:
                raise ConfigFileError(line_no, resp.message)
            executed += 1
    return executed


def handle_control_packet(msg: Message, executor: CommandExecutor, table, now: int = 0) -> None:
    """Decode, execute, and answer a control packet on its ingress connection."""
    try:
        cmd, seq = decode_request(msg.payload)
    except BadJson as exc:
        resp = nack(str(exc), seq=0)
    except UnknownAction as exc:
        resp = nack(str(exc), seq=exc.seq)
    else:
        resp = executor.execute(cmd)
        resp.seq = seq

    try:
        raw = encode_control(encode_response(resp))
    except TooLarge:
        raw = encode_control(encode_response(nack("response too large", seq=resp.seq)))
    conn = table.lookup_by_id(msg.ingress_id)
    if conn is not None:
        conn.send(parse_message(raw, 0, now))
