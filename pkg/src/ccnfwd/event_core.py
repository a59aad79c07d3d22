"""Single-threaded, non-preemptive dispatcher plus the Missive messenger.

One pass polls socket readiness, fires due timers, then drains a snapshot of
the missive queue. Missives sent from inside a callback are therefore never
delivered before that callback returns. Ticks are milliseconds on a
monotonic clock.
"""

from __future__ import annotations

import heapq
import itertools
import selectors
import socket
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

Ticks = int


def monotonic_ticks() -> Ticks:
    return int(time.monotonic() * 1000)


class MissiveType(Enum):
    CREATE = "CREATE"
    UP = "UP"
    DOWN = "DOWN"
    CLOSED = "CLOSED"
    DESTROYED = "DESTROYED"


@dataclass(frozen=True)
class Missive:
    """A connection-lifecycle event; the only payload is the connection id."""

    kind: MissiveType
    connection_id: int


class TimerHandle:
    __slots__ = ("callback", "_cancelled")

    def __init__(self, callback: Callable[[], None]):
        self.callback = callback
        self._cancelled = False

    def cancel(self) -> None:
        self._cancelled = True

    @property
    def cancelled(self) -> bool:
        return self._cancelled


class DispatcherError(Exception):
    """The readiness backend failed in a way we cannot recover from."""


class _FdEntry:
    __slots__ = ("fileobj", "reader", "writer", "want_write", "key")

    def __init__(self, fileobj, reader, writer, want_write):
        self.fileobj = fileobj
        self.reader = reader
        self.writer = writer
        self.want_write = want_write


class Dispatcher:
    """Timers plus socket-readiness callbacks on a single thread.

    Everything the dispatcher drives must stay on this thread; the sole
    cross-thread entry point is call_soon_threadsafe().
    """

    def __init__(self, clock: Callable[[], Ticks] = monotonic_ticks):
        self._clock = clock
        self._selector = selectors.DefaultSelector()
        self._fds: dict[int, _FdEntry] = {}
        self._timers: list[tuple[Ticks, int, TimerHandle]] = []
        self._timer_seq = itertools.count()
        self._drain_hooks: list[Callable[[], None]] = []
        self._injected: deque[Callable[[], None]] = deque()
        self._stopped = False
        # Self-pipe so stop()/call_soon_threadsafe() can interrupt a poll.
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._selector.register(self._wake_r, selectors.EVENT_READ, None)

    def now(self) -> Ticks:
        return self._clock()

    # -- timers ---------------------------------------------------------

    def schedule_timer(self, delay: Ticks, callback: Callable[[], None]) -> TimerHandle:
        """Run callback once on the first pass whose now >= now()+delay.

        Never runs inline, even for delay 0.
        """
        handle = TimerHandle(callback)
        deadline = self.now() + max(0, int(delay))
        heapq.heappush(self._timers, (deadline, next(self._timer_seq), handle))
        return handle

    # -- fd registration --------------------------------------------------

    def register_fd(self, fileobj, reader=None, writer=None, want_write=False) -> None:
        if reader is None and not (writer and want_write):
            raise ValueError("register_fd needs a reader or an armed writer")
        entry = _FdEntry(fileobj, reader, writer, want_write)
        fd = fileobj.fileno()
        if fd in self._fds:
            self._selector.unregister(self._fds[fd].fileobj)
        self._fds[fd] = entry
        self._selector.register(fileobj, self._events_for(entry), entry)

    def set_write_interest(self, fileobj, enabled: bool) -> None:
        fd = fileobj.fileno()
        entry = self._fds.get(fd)
        if entry is None or entry.want_write == enabled:
            return
        entry.want_write = enabled
        self._selector.modify(fileobj, self._events_for(entry), entry)

    def unregister_fd(self, fileobj) -> None:
        try:
            fd = fileobj.fileno()
        except (OSError, ValueError):
            fd = -1
        entry = self._fds.pop(fd, None)
        if entry is not None:
            try:
                self._selector.unregister(entry.fileobj)
            except KeyError:
                pass

    @staticmethod
    def _events_for(entry: _FdEntry) -> int:
        events = 0
        if entry.reader is not None:
            events |= selectors.EVENT_READ
        if entry.writer is not None and entry.want_write:
            events |= selectors.EVENT_WRITE
        return events or selectors.EVENT_READ

    # -- deferred work ----------------------------------------------------

    def add_drain_hook(self, hook: Callable[[], None]) -> None:
        """Register a per-pass hook, run after timers (e.g. missive drains)."""
        self._drain_hooks.append(hook)

    def call_soon_threadsafe(self, fn: Callable[[], None]) -> None:
        self._injected.append(fn)
        self.wake()

    def wake(self) -> None:
        try:
            self._wake_w.send(b"\x00")
        except (BlockingIOError, OSError):
            pass

    # -- loop -------------------------------------------------------------

    def run_one_pass(self, max_wait_ms: int = 0) -> None:
        """Poll readiness, run due timers, then run the drain hooks."""
        timeout_ms = max(0, max_wait_ms)
        if self._timers:
            timeout_ms = min(timeout_ms, max(0, self._timers[0][0] - self.now()))
        if self._injected:
            timeout_ms = 0

        try:
            ready = self._selector.select(timeout_ms / 1000.0)
        except InterruptedError:
            ready = []
        except OSError as exc:
            raise DispatcherError(f"readiness poll failed: {exc}") from exc

        for key, events in ready:
            entry = key.data
            if entry is None:
                self._drain_wake_pipe()
                continue
            if events & selectors.EVENT_READ and entry.reader is not None:
                entry.reader()
            # The read handler may have unregistered the fd.
            if self._fds.get(key.fd) is not entry:
                continue
            if events & selectors.EVENT_WRITE and entry.writer is not None:
                entry.writer()

        while self._injected:
            self._injected.popleft()()

        now = self.now()
        while self._timers and self._timers[0][0] <= now:
            _, _, handle = heapq.heappop(self._timers)
            if not handle.cancelled:
                handle.callback()

        for hook in self._drain_hooks:
            hook()

    def run_loop(
        self,
        stop_condition: Optional[Callable[[], bool]] = None,
        max_wait_ms: int = 200,
    ) -> None:
        self._stopped = False
        while not self._stopped:
            if stop_condition is not None and stop_condition():
                break
            self.run_one_pass(max_wait_ms=max_wait_ms)

    def stop(self) -> None:
        self._stopped = True
        self.wake()

    def close(self) -> None:
        self._selector.close()
        self._wake_r.close()
        self._wake_w.close()

    def _drain_wake_pipe(self) -> None:
        try:
            while self._wake_r.recv(4096):
                pass
        except (BlockingIOError, OSError):
            pass


class Messenger:
    """Delivers missives to registered recipients in a later scheduling pass.

    Delivery drains a snapshot of the queue, so a missive sent during
    delivery (or anywhere inside a callback) waits for the next pass; this
    rules out pre-emption and circular callback firing. Per-recipient
    delivery order matches send order.
    """

    def __init__(self, dispatcher: Dispatcher):
        self._recipients: list[Callable[[Missive], None]] = []
        self._queue: deque[Missive] = deque()
        dispatcher.add_drain_hook(self.deliver_pending)

    def register(self, recipient: Callable[[Missive], None]) -> None:
        """Idempotent: registering the same recipient twice keeps one entry."""
        if recipient not in self._recipients:
            self._recipients.append(recipient)

    def unregister(self, recipient: Callable[[Missive], None]) -> None:
        try:
            self._recipients.remove(recipient)
        except ValueError:
            pass

    def send(self, missive: Missive) -> None:
        self._queue.append(missive)

    def deliver_pending(self) -> None:
        if not self._queue:
            return
        batch = list(self._queue)
        self._queue.clear()
        recipients = list(self._recipients)
        for missive in batch:
            for recipient in recipients:
                recipient(missive)
