"""Wires the dispatcher, tables, processor, and configuration into one
runnable forwarder instance."""

from __future__ import annotations

from typing import Callable, Optional

from . import config as config_mod
from . import io as io_mod
from .event_core import Dispatcher, Messenger
from .forwarding import Fib, LruContentStore, MessageProcessor, StandardPit
from .forwarding import DEFAULT_PIT_LIFETIME_MS
from .logs import NULL_LOG, LogManager
from .wirefmt import Message

DEFAULT_PORT = 9695
DEFAULT_STORE_CAPACITY = 100_000


class Forwarder:
    """One forwarder: listeners feed connections, connections feed the
    message processor, control packets feed the configuration executor."""

    def __init__(
        self,
        capacity: int = DEFAULT_STORE_CAPACITY,
        log_manager: Optional[LogManager] = None,
        clock: Optional[Callable[[], int]] = None,
        pit_lifetime_ms: int = DEFAULT_PIT_LIFETIME_MS,
        interface_provider: Optional[Callable] = None,
    ):
        self.logs = log_manager
        self._log = log_manager.logger("core") if log_manager else NULL_LOG
        self.dispatcher = Dispatcher(clock) if clock is not None else Dispatcher()
        self.messenger = Messenger(self.dispatcher)
        self.table = io_mod.ConnectionTable()
        self.fib = Fib()
        self.pit = StandardPit(self.dispatcher.now, lifetime=pit_lifetime_ms)
        self.store = LruContentStore(capacity)
        self.processor = MessageProcessor(
            table=self.table,
            fib=self.fib,
            pit=self.pit,
            store=self.store,
            clock=self.dispatcher.now,
            log=log_manager.logger("processor") if log_manager else NULL_LOG,
            control_handler=self._on_control,
        )
        self.executor = config_mod.CommandExecutor(self, interface_provider)
        self.ctx = io_mod.IoContext(
            dispatcher=self.dispatcher,
            messenger=self.messenger,
            table=self.table,
            deliver=self.processor.process,
            log=log_manager.logger("io") if log_manager else NULL_LOG,
        )
        self.manager = io_mod.ConnectionManager(
            self.table, self.fib, self.ctx.log
        )
        self.messenger.register(self.manager.on_missive)
        self.listeners: list[io_mod.Listener] = []
        self._listener_symbolics: set[str] = set()
        self._udp_idle_timer = None

    # -- configuration surface ------------------------------------------

    def add_listener(
        self, kind: str, symbolic: Optional[str], address_text: str, port: Optional[int] = None
    ) -> io_mod.Listener:
        if symbolic is not None and self._symbolic_in_use(symbolic):
            raise io_mod.SymbolicTaken(f"symbolic name {symbolic!r} already in use")
        if kind in ("tcp", "udp"):
            address = io_mod.Address.from_ip(address_text, port or 0)
        elif kind in ("local", "unix"):
            address = io_mod.Address.unix(address_text)
        else:
            raise io_mod.BadAddress(f"unknown listener kind {kind!r}")
        listener = io_mod.create_listener(self.ctx, kind, address, symbolic)
        self.listeners.append(listener)
        if symbolic is not None:
            self._listener_symbolics.add(symbolic)
        self._log.info(f"listener {symbolic or '-'} on {address.render()}")
        return listener

    def add_tunnel(
        self,
        kind: str,
        symbolic: str,
        remote_host: str,
        remote_port: int,
        local_host: Optional[str] = None,
        local_port: Optional[int] = None,
    ) -> io_mod.Connection:
        if self._symbolic_in_use(symbolic):
            raise io_mod.SymbolicTaken(f"symbolic name {symbolic!r} already in use")
        remote = io_mod.resolve_host(remote_host, remote_port)
        local = None
        if local_host is not None:
            local = io_mod.Address.from_ip(local_host, local_port or 0)
        conn = io_mod.tunnel_create(
            self.ctx,
            kind,
            symbolic,
            remote,
            local,
            udp_listeners=[l for l in self.listeners if isinstance(l, io_mod.UdpListener)],
        )
        self._log.info(f"tunnel {symbolic} ({conn.id}) to {remote.render()}")
        return conn

    def start_default_listeners(self, port: int = DEFAULT_PORT) -> None:
        """TCP and UDP on every interface; used when no config file is given."""
        self.add_listener("tcp", None, "0.0.0.0", port)
        self.add_listener("udp", None, "0.0.0.0", port)

    def resolve_symbolic(self, symbolic: str) -> Optional[io_mod.Connection]:
        return self.table.lookup_by_symbolic(symbolic)

    def _symbolic_in_use(self, symbolic: str) -> bool:
        return symbolic in self._listener_symbolics or self.table.has_symbolic(symbolic)

    def udp_listeners(self) -> list[io_mod.UdpListener]:
        return [l for l in self.listeners if isinstance(l, io_mod.UdpListener)]

    # -- optional UDP idle reclamation (off by default) -------------------

    def enable_udp_idle_timeout(self, idle_ms: int) -> None:
        self._udp_idle_ms = idle_ms
        self._schedule_idle_scan()

    def _schedule_idle_scan(self) -> None:
        self._udp_idle_timer = self.dispatcher.schedule_timer(
            max(1, self._udp_idle_ms // 2), self._scan_idle_udp
        )

    def _scan_idle_udp(self) -> None:
        now = self.dispatcher.now()
        for conn in self.table.connections():
            if (
                conn.kind == "udp"
                and conn.state is io_mod.ConnectionState.UP
                and now - conn.last_activity >= self._udp_idle_ms
            ):
                conn._fail("idle timeout")
        self._schedule_idle_scan()

    # -- control plane ----------------------------------------------------

    def _on_control(self, msg: Message) -> None:
        config_mod.handle_control_packet(
            msg, self.executor, self.table, now=self.dispatcher.now()
        )

    def load_config_file(self, path: str) -> int:
        return config_mod.load_config_file(path, self.executor)

    # -- lifecycle ----------------------------------------------------------

    def run(self, stop_condition=None, max_wait_ms: int = 200) -> None:
        self.dispatcher.run_loop(stop_condition, max_wait_ms=max_wait_ms)

    def run_one_pass(self, max_wait_ms: int = 0) -> None:
        self.dispatcher.run_one_pass(max_wait_ms=max_wait_ms)

    def stop(self) -> None:
        self.dispatcher.stop()

    def shutdown(self) -> None:
        """Tear down sockets; unix listeners remove their socket files."""
        for conn in self.table.connections():
            self.table.remove(conn.id)
        for listener in self.listeners:
            listener.destroy()
        self.listeners.clear()
        self.dispatcher.close()
        self._log.info("forwarder stopped")
