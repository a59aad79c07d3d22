"""Listeners, per-peer connections, and the connection table.

Stream listeners (TCP, unix-domain) accept a client socket per peer and
reassemble packets from the byte stream. The UDP listener demultiplexes
datagrams to connections keyed by (local, remote) address pair and lends its
socket to those connections for sending. Connection lifecycle follows the
state machine CREATE -> UP/DOWN -> CLOSED -> DESTROYED, announced through
missives.
"""

from __future__ import annotations

import errno
import ipaddress
import itertools
import os
import socket
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .event_core import Dispatcher, Messenger, Missive, MissiveType
from .logs import NULL_LOG
from .wirefmt import Message, WireError, parse_fixed_header, parse_message

SEND_BUFFER_CAP = 1 << 20  # per-connection cap on unflushed stream bytes
RECV_CHUNK = 1 << 16


class BadAddress(Exception):
    pass


class BindFailed(Exception):
    pass


class SymbolicTaken(Exception):
    pass


class NoListener(Exception):
    """UDP tunnel creation found no listener socket to borrow."""


class TunnelError(Exception):
    pass


class IllegalTransition(Exception):
    pass


class FramingError(Exception):
    """The stream produced bytes that cannot be a fixed header."""


INET4 = "inet4"
INET6 = "inet6"
LOCAL = "local"


@dataclass(frozen=True, order=True)
class Address:
    """A listener or peer endpoint; totally ordered so it can key tables."""

    family: str  # inet4 | inet6 | local
    host: str  # IP text, or filesystem path for local
    port: int = 0

    @classmethod
    def from_ip(cls, host: str, port: int) -> "Address":
        try:
            parsed = ipaddress.ip_address(host)
        except ValueError as exc:
            raise BadAddress(f"not an IP address: {host!r}") from exc
        family = INET4 if parsed.version == 4 else INET6
        return cls(family, host, int(port))

    @classmethod
    def unix(cls, path: str) -> "Address":
        return cls(LOCAL, path, 0)

    @classmethod
    def from_sockaddr(cls, af: int, sockaddr) -> "Address":
        if af == socket.AF_INET:
            return cls(INET4, sockaddr[0], sockaddr[1])
        if af == socket.AF_INET6:
            return cls(INET6, sockaddr[0], sockaddr[1])
        return cls(LOCAL, sockaddr or "", 0)

    @property
    def af(self) -> int:
        if self.family == INET4:
            return socket.AF_INET
        if self.family == INET6:
            return socket.AF_INET6
        return socket.AF_UNIX

    def sockaddr(self):
        if self.family == LOCAL:
            return self.host
        return (self.host, self.port)

    @property
    def is_loopback(self) -> bool:
        if self.family == LOCAL:
            return False
        try:
            return ipaddress.ip_address(self.host).is_loopback
        except ValueError:
            return False

    def render(self) -> str:
        if self.family == LOCAL:
            return f"local://{self.host}"
        if self.family == INET6:
            return f"inet6://[{self.host}]:{self.port}"
        return f"inet4://{self.host}:{self.port}"


def resolve_host(host: str, port: int) -> Address:
    """Resolve a hostname or IP literal to a concrete Address."""
    try:
        infos = socket.getaddrinfo(host, port, type=socket.SOCK_DGRAM)
    except socket.gaierror as exc:
        raise BadAddress(f"cannot resolve {host!r}: {exc}") from exc
    af, _, _, _, sockaddr = infos[0]
    return Address.from_sockaddr(af, sockaddr)


@dataclass(frozen=True, order=True)
class AddressPair:
    local: Address
    remote: Address

    def __post_init__(self):
        if self.local.family != self.remote.family:
            raise BadAddress(
                f"address family mismatch: {self.local.family} vs {self.remote.family}"
            )


class ConnectionState(Enum):
    CREATE = "CREATE"
    UP = "UP"
    DOWN = "DOWN"
    CLOSED = "CLOSED"
    DESTROYED = "DESTROYED"


LEGAL_TRANSITIONS: dict[ConnectionState, frozenset[ConnectionState]] = {
    ConnectionState.CREATE: frozenset({ConnectionState.UP, ConnectionState.DOWN}),
    ConnectionState.UP: frozenset({ConnectionState.DOWN, ConnectionState.DESTROYED}),
    ConnectionState.DOWN: frozenset(
        {ConnectionState.UP, ConnectionState.CLOSED, ConnectionState.DESTROYED}
    ),
    ConnectionState.CLOSED: frozenset({ConnectionState.DESTROYED}),
    ConnectionState.DESTROYED: frozenset(),
}


@dataclass
class IoContext:
    """Everything listeners and connections need from the surrounding daemon."""

    dispatcher: Dispatcher
    messenger: Messenger
    table: "ConnectionTable"
    deliver: Callable[[Message], None]
    log: object = NULL_LOG
    _iface_indexes: itertools.count = field(default_factory=lambda: itertools.count(1))

    def next_interface_index(self) -> int:
        return next(self._iface_indexes)


class Connection:
    """A protocol endpoint identified by a never-reused connection id."""

    kind = "?"

    def __init__(self, ctx: IoContext, pair: AddressPair, symbolic: Optional[str] = None):
        self._ctx = ctx
        self.id = 0  # assigned by ConnectionTable.insert
        self.pair = pair
        self.symbolic = symbolic
        self.state = ConnectionState.CREATE
        self.last_activity = ctx.dispatcher.now()

    @property
    def is_local(self) -> bool:
        """Unix-domain peers and IP loopback peers are local to this host."""
        return self.pair.remote.family == LOCAL or self.pair.remote.is_loopback

    def set_state(self, new: ConnectionState) -> None:
        if new not in LEGAL_TRANSITIONS[self.state]:
            raise IllegalTransition(f"{self.state.name} -> {new.name} (conn {self.id})")
        self.state = new
        self._ctx.messenger.send(Missive(MissiveType[new.name], self.id))

    def send(self, msg: Message) -> bool:
        raise NotImplementedError

    def destroy(self) -> None:
        if self.state is not ConnectionState.DESTROYED:
            self.set_state(ConnectionState.DESTROYED)
        self._release()

    def _release(self) -> None:
        pass

    def _fail(self, reason: str) -> None:
        """Fatal error path: Down, then Closed, then release the transport."""
        if self.state in (ConnectionState.CLOSED, ConnectionState.DESTROYED):
            return
        self._ctx.log.info(f"connection {self.id} failed: {reason}")
        if self.state in (ConnectionState.CREATE, ConnectionState.UP):
            self.set_state(ConnectionState.DOWN)
        if self.state is ConnectionState.DOWN:
            self.set_state(ConnectionState.CLOSED)
        self._release()

    def __repr__(self) -> str:
        return (
            f"<{type(self).__name__} {self.id} {self.state.name}"
            f" {self.pair.local.render()} {self.pair.remote.render()}>"
        )


class StreamFramer:
    """Reassembles length-framed packets from arbitrarily chunked bytes."""

    def __init__(self):
        self._buf = bytearray()
        self._need: Optional[int] = None

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[bytes]:
        """Return every complete packet now available, in arrival order."""
        self._buf += data
        out: list[bytes] = []
        while True:
            if self._need is None:
                if len(self._buf) < 8:
                    break
                try:
                    header = parse_fixed_header(bytes(self._buf[:8]))
                except WireError as exc:
                    raise FramingError(str(exc)) from exc
                self._need = header.packet_length
            if len(self._buf) < self._need:
                break
            out.append(bytes(self._buf[: self._need]))
            del self._buf[: self._need]
            self._need = None
        return out


class StreamConnection(Connection):
    """A connected TCP or unix-domain socket with its framing state."""

    def __init__(
        self,
        ctx: IoContext,
        sock: socket.socket,
        pair: AddressPair,
        kind: str,
        symbolic: Optional[str] = None,
        connecting: bool = False,
    ):
        super().__init__(ctx, pair, symbolic)
        self.kind = kind
        self._sock = sock
        self._sock.setblocking(False)
        self._framer = StreamFramer()
        self._txbuf = bytearray()
        self._connecting = connecting
        self._registered = False

    def start(self) -> None:
        self._ctx.dispatcher.register_fd(
            self._sock,
            reader=self._on_readable,
            writer=self._on_writable,
            want_write=self._connecting,
        )
        self._registered = True

    def mark_up(self) -> None:
        self.set_state(ConnectionState.UP)

    # -- receive ----------------------------------------------------------

    def _on_readable(self) -> None:
        while True:
            try:
                data = self._sock.recv(RECV_CHUNK)
            except BlockingIOError:
                return
            except OSError as exc:
                self._fail(f"recv error: {exc}")
                return
            if not data:
                self._fail("peer closed")
                return
            for msg in self.feed_bytes(data):
                self._ctx.deliver(msg)
            if self.state is not ConnectionState.UP:
                return

    def feed_bytes(self, data: bytes) -> list[Message]:
        """Frame and parse; a malformed header kills the connection."""
        try:
            packets = self._framer.feed(data)
        except FramingError as exc:
            self._fail(f"framing error: {exc}")
            return []
        now = self._ctx.dispatcher.now()
        self.last_activity = now
        messages = []
        for raw in packets:
            try:
                messages.append(parse_message(raw, self.id, now))
            except WireError as exc:
                self._ctx.log.debug(f"connection {self.id} dropped bad packet: {exc}")
        return messages

    # -- send -------------------------------------------------------------

    def send(self, msg: Message) -> bool:
        if self.state is not ConnectionState.UP:
            return False
        self._txbuf += msg.raw
        self._flush()
        return self.state is ConnectionState.UP

    def _flush(self) -> None:
        while self._txbuf:
            try:
                sent = self._sock.send(self._txbuf)
            except BlockingIOError:
                break
            except OSError as exc:
                self._fail(f"send error: {exc}")
                return
            del self._txbuf[:sent]
        if len(self._txbuf) > SEND_BUFFER_CAP:
            self._fail("send buffer overflow")
            return
        if self._registered:
            self._ctx.dispatcher.set_write_interest(self._sock, bool(self._txbuf))
        self.last_activity = self._ctx.dispatcher.now()

    def _on_writable(self) -> None:
        if self._connecting:
            self._connecting = False
            err = self._sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err != 0:
                self._fail(f"connect failed: {os.strerror(err)}")
                return
            self._ctx.dispatcher.set_write_interest(self._sock, bool(self._txbuf))
            self.set_state(ConnectionState.UP)
            return
        self._flush()

    def _release(self) -> None:
        if self._registered:
            self._ctx.dispatcher.unregister_fd(self._sock)
            self._registered = False
        try:
            self._sock.close()
        except OSError:
            pass


class UdpConnection(Connection):
    """A datagram peer; sends borrow the owning listener's socket."""

    kind = "udp"

    def __init__(
        self,
        ctx: IoContext,
        sock: socket.socket,
        pair: AddressPair,
        symbolic: Optional[str] = None,
    ):
        super().__init__(ctx, pair, symbolic)
        self._sock = sock

    def send(self, msg: Message) -> bool:
        if self.state is not ConnectionState.UP:
            return False
        try:
            self._sock.sendto(msg.raw, self.pair.remote.sockaddr())
        except OSError as exc:
            self._fail(f"sendto error: {exc}")
            return False
        self.last_activity = self._ctx.dispatcher.now()
        return True


class ConnectionTable:
    """Connections indexed by id and by address pair; ids are never reused."""

    def __init__(self):
        self._by_id: dict[int, Connection] = {}
        self._by_pair: dict[AddressPair, int] = {}
        self._by_symbolic: dict[str, int] = {}
        self._next_id = 1

    def __len__(self) -> int:
        return len(self._by_id)

    def insert(self, conn: Connection) -> int:
        if conn.symbolic is not None and conn.symbolic in self._by_symbolic:
            raise SymbolicTaken(f"symbolic name {conn.symbolic!r} already in use")
        if conn.pair in self._by_pair:
            raise TunnelError(f"connection for {conn.pair} already exists")
        conn.id = self._next_id
        self._next_id += 1
        self._by_id[conn.id] = conn
        self._by_pair[conn.pair] = conn.id
        if conn.symbolic is not None:
            self._by_symbolic[conn.symbolic] = conn.id
        conn._ctx.messenger.send(Missive(MissiveType.CREATE, conn.id))
        return conn.id

    def lookup_by_id(self, conn_id: int) -> Optional[Connection]:
        return self._by_id.get(conn_id)

    def lookup_by_pair(self, pair: AddressPair) -> Optional[Connection]:
        conn_id = self._by_pair.get(pair)
        return None if conn_id is None else self._by_id.get(conn_id)

    def lookup_by_symbolic(self, symbolic: str) -> Optional[Connection]:
        conn_id = self._by_symbolic.get(symbolic)
        return None if conn_id is None else self._by_id.get(conn_id)

    def has_symbolic(self, symbolic: str) -> bool:
        return symbolic in self._by_symbolic

    def remove(self, conn_id: int) -> None:
        conn = self._by_id.pop(conn_id, None)
        if conn is None:
            return
        self._by_pair.pop(conn.pair, None)
        if conn.symbolic is not None:
            self._by_symbolic.pop(conn.symbolic, None)
        conn.destroy()

    def connections(self) -> list[Connection]:
        return [self._by_id[k] for k in sorted(self._by_id)]


# -- listeners -------------------------------------------------------------


class Listener:
    """A bound server endpoint feeding the connection table."""

    encap = "?"

    def __init__(self, ctx: IoContext, address: Address, symbolic: Optional[str] = None):
        self._ctx = ctx
        self.address = address
        self.symbolic = symbolic
        self.interface_index = ctx.next_interface_index()
        self._sock: Optional[socket.socket] = None

    @property
    def listen_address(self) -> Address:
        return self.address

    @property
    def encap_type(self) -> str:
        return self.encap

    @property
    def socket(self) -> Optional[socket.socket]:
        return self._sock

    def destroy(self) -> None:
        if self._sock is not None:
            self._ctx.dispatcher.unregister_fd(self._sock)
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _bind(self, sock_type: int) -> socket.socket:
        try:
            sock = socket.socket(self.address.af, sock_type)
        except OSError as exc:
            raise BindFailed(f"socket({self.address.render()}): {exc}") from exc
        try:
            if self.address.family != LOCAL:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(self.address.sockaddr())
        except OSError as exc:
            sock.close()
            raise BindFailed(f"bind {self.address.render()}: {exc}") from exc
        sock.setblocking(False)
        return sock


class _StreamListener(Listener):
    kind = "?"

    def __init__(self, ctx: IoContext, address: Address, symbolic: Optional[str] = None):
        super().__init__(ctx, address, symbolic)
        self._sock = self._bind(socket.SOCK_STREAM)
        try:
            self._sock.listen(64)
        except OSError as exc:
            self._sock.close()
            self._sock = None
            raise BindFailed(f"listen {address.render()}: {exc}") from exc
        ctx.dispatcher.register_fd(self._sock, reader=self._on_acceptable)

    def _on_acceptable(self) -> None:
        while True:
            try:
                client, peer = self._sock.accept()
            except BlockingIOError:
                return
            except OSError as exc:
                self._ctx.log.warning(f"accept on {self.address.render()} failed: {exc}")
                return
            try:
                self._admit(client, peer)
            except OSError as exc:
                self._ctx.log.warning(f"failed to admit peer: {exc}")
                client.close()

    def _admit(self, client: socket.socket, peer) -> None:
        pair = self._pair_for(client, peer)
        conn = StreamConnection(self._ctx, client, pair, kind=self.kind)
        self._ctx.table.insert(conn)
        conn.start()
        conn.mark_up()

    def _pair_for(self, client: socket.socket, peer) -> AddressPair:
        raise NotImplementedError


class TcpListener(_StreamListener):
    encap = "TCP"
    kind = "tcp"

    def _pair_for(self, client: socket.socket, peer) -> AddressPair:
        local = Address.from_sockaddr(client.family, client.getsockname())
        remote = Address.from_sockaddr(client.family, peer)
        return AddressPair(local, remote)


class UnixListener(_StreamListener):
    encap = "LOCAL"
    kind = "unix"

    def __init__(self, ctx: IoContext, address: Address, symbolic: Optional[str] = None):
        super().__init__(ctx, address, symbolic)
        self._anon = itertools.count(1)

    def _pair_for(self, client: socket.socket, peer) -> AddressPair:
        # Unix stream peers are usually unnamed; synthesize a unique remote.
        remote_path = peer if peer else f"@{self.address.host}#{next(self._anon)}"
        return AddressPair(self.address, Address.unix(remote_path))

    def destroy(self) -> None:
        """Remove the socket file we created along with the listener."""
        super().destroy()
        try:
            os.unlink(self.address.host)
        except OSError:
            pass


class UdpListener(Listener):
    encap = "UDP"

    def __init__(self, ctx: IoContext, address: Address, symbolic: Optional[str] = None):
        super().__init__(ctx, address, symbolic)
        self._sock = self._bind(socket.SOCK_DGRAM)
        ctx.dispatcher.register_fd(self._sock, reader=self._on_readable)

    def _on_readable(self) -> None:
        while True:
            try:
                data, src = self._sock.recvfrom(RECV_CHUNK)
            except BlockingIOError:
                return
            except OSError as exc:
                self._ctx.log.warning(f"recvfrom on {self.address.render()} failed: {exc}")
                return
            self.demux(data, Address.from_sockaddr(self._sock.family, src))

    def demux(self, datagram: bytes, src: Address) -> Optional[tuple[int, Message]]:
        """Map a datagram to its connection (creating one) and parse it.

        Parse failures drop the datagram but keep any connection that was
        just created for it.
        """
        pair = AddressPair(self.address, src)
        conn = self._ctx.table.lookup_by_pair(pair)
        if conn is None:
            conn = UdpConnection(self._ctx, self._sock, pair)
            self._ctx.table.insert(conn)
            conn.mark_up()
        now = self._ctx.dispatcher.now()
        conn.last_activity = now
        try:
            msg = parse_message(datagram, conn.id, now)
        except WireError as exc:
            self._ctx.log.debug(f"dropped bad datagram from {src.render()}: {exc}")
            return None
        self._ctx.deliver(msg)
        return conn.id, msg


def create_listener(
    ctx: IoContext, kind: str, address: Address, symbolic: Optional[str] = None
) -> Listener:
    if kind == "tcp":
        if address.family == LOCAL:
            raise BadAddress("tcp listener needs an IP address")
        return TcpListener(ctx, address, symbolic)
    if kind == "udp":
        if address.family == LOCAL:
            raise BadAddress("udp listener needs an IP address")
        return UdpListener(ctx, address, symbolic)
    if kind in ("local", "unix"):
        if address.family != LOCAL:
            raise BadAddress("unix listener needs a filesystem path")
        return UnixListener(ctx, address, symbolic)
    raise BadAddress(f"unknown listener kind {kind!r}")


# -- tunnels ----------------------------------------------------------------


def tunnel_create(
    ctx: IoContext,
    kind: str,
    symbolic: str,
    remote: Address,
    local: Optional[Address] = None,
    udp_listeners: Iterable[UdpListener] = (),
) -> Connection:
    """Open an administratively configured outbound connection.

    TCP tunnels start DOWN and come UP when the connect completes; UDP
    tunnels borrow a listener's socket and start UP immediately.
    """
    if ctx.table.has_symbolic(symbolic):
        raise SymbolicTaken(f"symbolic name {symbolic!r} already in use")
    if kind == "tcp":
        return _tcp_tunnel(ctx, symbolic, remote, local)
    if kind == "udp":
        return _udp_tunnel(ctx, symbolic, remote, local, udp_listeners)
    raise TunnelError(f"unknown tunnel kind {kind!r}")


def _tcp_tunnel(
    ctx: IoContext, symbolic: str, remote: Address, local: Optional[Address]
) -> Connection:
    try:
        sock = socket.socket(remote.af, socket.SOCK_STREAM)
    except OSError as exc:
        raise TunnelError(str(exc)) from exc
    sock.setblocking(False)
    try:
        if local is not None:
            sock.bind(local.sockaddr())
        err = sock.connect_ex(remote.sockaddr())
        if err not in (0, errno.EINPROGRESS, errno.EWOULDBLOCK):
            raise OSError(err, os.strerror(err))
        local_addr = Address.from_sockaddr(sock.family, sock.getsockname())
    except OSError as exc:
        sock.close()
        raise TunnelError(f"connect {remote.render()}: {exc}") from exc
    pair = AddressPair(local_addr, remote)
    conn = StreamConnection(ctx, sock, pair, kind="tcp", symbolic=symbolic, connecting=True)
    try:
        ctx.table.insert(conn)
    except (SymbolicTaken, TunnelError):
        sock.close()
        raise
    conn.start()
    conn.set_state(ConnectionState.DOWN)
    return conn


def _udp_tunnel(
    ctx: IoContext,
    symbolic: str,
    remote: Address,
    local: Optional[Address],
    udp_listeners: Iterable[UdpListener],
) -> Connection:
    donor = None
    for listener in udp_listeners:
        if listener.address.family != remote.family:
            continue
        if local is not None and listener.address != local:
            continue
        donor = listener
        break
    if donor is None:
        raise NoListener(f"no udp listener to reach {remote.render()}")
    pair = AddressPair(donor.address, remote)
    conn = UdpConnection(ctx, donor.socket, pair, symbolic=symbolic)
    ctx.table.insert(conn)
    conn.mark_up()
    return conn


class ConnectionManager:
    """Messenger recipient that reclaims closed connections.

    Runs in the missive drain pass: removes the connection from the table
    and purges its id from every route.
    """

    def __init__(self, table: ConnectionTable, fib, log=NULL_LOG):
        self._table = table
        self._fib = fib
        self._log = log

    def on_missive(self, missive: Missive) -> None:
        if missive.kind is not MissiveType.CLOSED:
            return
        conn_id = missive.connection_id
        if self._table.lookup_by_id(conn_id) is not None:
            self._table.remove(conn_id)
            self._log.info(f"reclaimed closed connection {conn_id}")
        self._fib.remove_nexthop_everywhere(conn_id)
