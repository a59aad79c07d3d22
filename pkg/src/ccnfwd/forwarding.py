"""The message processor and its three tables.

Interests walk PIT -> content store -> FIB; content objects walk the PIT's
reverse routes. The PIT and store are pluggable: the processor only touches
the small interfaces below, so an implementation can be swapped at
construction time with no other changes.
"""

from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol

from .logs import NULL_LOG
from .wirefmt import Message, Name, with_hop_limit

DEFAULT_PIT_LIFETIME_MS = 4000


class PitVerdict(Enum):
    FORWARD = "FORWARD"
    AGGREGATE = "AGGREGATE"


@dataclass
class PitEntry:
    name: Name
    ingress_set: set[int]
    expiry: int


class PitInterface(Protocol):
    def receive_interest(self, msg: Message) -> PitVerdict: ...

    def satisfy_interest(self, msg: Message) -> set[int]: ...

    def remove_interest(self, msg: Message) -> None: ...

    def get_pit_entry(self, msg: Message) -> Optional[PitEntry]: ...


class StoreInterface(Protocol):
    def put_content(self, content: Message, now: int) -> bool: ...

    def match_interest(self, interest: Message) -> Optional[Message]: ...

    def remove_content(self, content: Message) -> bool: ...

    @property
    def object_count(self) -> int: ...

    @property
    def object_capacity(self) -> int: ...


class StandardPit:
    """Exact-name pending-interest table with per-entry expiry."""

    def __init__(self, clock: Callable[[], int], lifetime: int = DEFAULT_PIT_LIFETIME_MS):
        self._clock = clock
        self.lifetime = lifetime
        self._entries: dict[Name, PitEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def _live_entry(self, name: Name) -> Optional[PitEntry]:
        entry = self._entries.get(name)
        if entry is None:
            return None
        if self._clock() >= entry.expiry:
            del self._entries[name]
            return None
        return entry

    def receive_interest(self, msg: Message) -> PitVerdict:
        """Decide whether an interest is forwarded or aggregated.

        A repeat from the same ingress is a retransmission: refresh the
        entry and forward anyway.
        """
        now = self._clock()
        entry = self._live_entry(msg.name)
        if entry is None:
            self._entries[msg.name] = PitEntry(
                name=msg.name,
                ingress_set={msg.ingress_id},
                expiry=now + self.lifetime,
            )
            return PitVerdict.FORWARD
        if msg.ingress_id not in entry.ingress_set:
            entry.ingress_set.add(msg.ingress_id)
            return PitVerdict.AGGREGATE
        entry.expiry = now + self.lifetime
        return PitVerdict.FORWARD

    def satisfy_interest(self, msg: Message) -> set[int]:
        """Return (and consume) the reverse routes for an exact-name match."""
        entry = self._live_entry(msg.name)
        if entry is None:
            return set()
        del self._entries[msg.name]
        return set(entry.ingress_set)

    def remove_interest(self, msg: Message) -> None:
        self._entries.pop(msg.name, None)

    def get_pit_entry(self, msg: Message) -> Optional[PitEntry]:
        return self._live_entry(msg.name)

    def release(self) -> None:
        self._entries.clear()


@dataclass
class FibEntry:
    prefix: Name
    nexthops: set[int]
    cost: int = 1


class Fib:
    """Longest-prefix-match routes; one entry per distinct prefix.

    Lookup returns every nexthop of the longest matching prefix, so two
    routes added under the same prefix fan out (multicast).
    """

    def __init__(self):
        self._by_length: dict[int, dict[Name, FibEntry]] = {}

    def __len__(self) -> int:
        return sum(len(bucket) for bucket in self._by_length.values())

    def add_route(self, prefix: Name, nexthop: int, cost: int = 1) -> FibEntry:
        bucket = self._by_length.setdefault(len(prefix), {})
        entry = bucket.get(prefix)
        if entry is None:
            entry = FibEntry(prefix=prefix, nexthops=set(), cost=cost)
            bucket[prefix] = entry
        entry.nexthops.add(nexthop)
        entry.cost = cost
        return entry

    def lookup(self, name: Name) -> set[int]:
        for length in range(min(len(name), self._max_length()), -1, -1):
            bucket = self._by_length.get(length)
            if not bucket:
                continue
            entry = bucket.get(name[:length])
            if entry is not None and entry.nexthops:
                return set(entry.nexthops)
        return set()

    def remove_nexthop_everywhere(self, nexthop: int) -> None:
        for length in list(self._by_length):
            bucket = self._by_length[length]
            for prefix in list(bucket):
                entry = bucket[prefix]
                entry.nexthops.discard(nexthop)
                if not entry.nexthops:
                    del bucket[prefix]
            if not bucket:
                del self._by_length[length]

    def list(self) -> list[FibEntry]:
        entries = [e for bucket in self._by_length.values() for e in bucket.values()]
        entries.sort(key=lambda e: (len(e.prefix), e.prefix.segments))
        return entries

    def _max_length(self) -> int:
        return max(self._by_length, default=0)


class LruContentStore:
    """Exact-name cache of content objects with least-recently-used eviction.

    Capacity 0 disables the store: puts fail and matches always miss.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self._capacity = capacity
        self._entries: OrderedDict[Name, Message] = OrderedDict()

    @property
    def object_capacity(self) -> int:
        return self._capacity

    @property
    def object_count(self) -> int:
        return len(self._entries)

    def put_content(self, content: Message, now: int) -> bool:
        if self._capacity == 0:
            return False
        name = content.name
        if name in self._entries:
            del self._entries[name]
        self._entries[name] = content
        while len(self._entries) > self._capacity:
            self._entries.popitem(last=False)
        return True

    def match_interest(self, interest: Message) -> Optional[Message]:
        content = self._entries.get(interest.name)
        if content is None:
            return None
        self._entries.move_to_end(interest.name)
        return content

    def remove_content(self, content: Message) -> bool:
        return self._entries.pop(content.name, None) is not None

    def names(self) -> list[Name]:
        """Cached names, least recently used first."""
        return list(self._entries)


class MessageProcessor:
    """Routes each message down the interest or content-object path."""

    def __init__(
        self,
        table,
        fib: Optional[Fib] = None,
        pit: Optional[PitInterface] = None,
        store: Optional[StoreInterface] = None,
        clock: Callable[[], int] = lambda: 0,
        log=NULL_LOG,
        control_handler: Optional[Callable[[Message], None]] = None,
    ):
        self.table = table
        self.fib = fib if fib is not None else Fib()
        self.pit = pit if pit is not None else StandardPit(clock)
        self.store = store
        self._clock = clock
        self._log = log
        self.control_handler = control_handler
        self.counts: Counter[str] = Counter()

    def set_content_store_capacity(self, capacity: int) -> None:
        """Swap in a fresh store; all cached content is lost."""
        self.store = LruContentStore(capacity)

    def process(self, msg: Message) -> None:
        if msg.is_interest:
            self.counts["interests"] += 1
            self.process_interest(msg)
        elif msg.is_content_object:
            self.counts["objects"] += 1
            self.process_content_object(msg)
        elif msg.is_control:
            self.counts["control"] += 1
            if self.control_handler is not None:
                self.control_handler(msg)
            else:
                self.counts["dropped_control"] += 1
        else:
            self.counts["dropped_other"] += 1

    def process_interest(self, msg: Message) -> None:
        ingress = self.table.lookup_by_id(msg.ingress_id)
        is_local = ingress.is_local if ingress is not None else False

        if not is_local:
            if msg.hop_limit == 0:
                self.counts["dropped_hop_limit"] += 1
                return
            msg = with_hop_limit(msg, msg.hop_limit - 1)

        if self.pit.receive_interest(msg) is PitVerdict.AGGREGATE:
            self.counts["aggregated"] += 1
            return

        if self.store is not None:
            cached = self.store.match_interest(msg)
            if cached is not None:
                self.counts["store_hits"] += 1
                if ingress is not None:
                    ingress.send(cached)
                self.pit.remove_interest(msg)
                return

        sent = 0
        for nexthop in sorted(self.fib.lookup(msg.name) - {msg.ingress_id}):
            conn = self.table.lookup_by_id(nexthop)
            if conn is None:
                continue  # stale route; purged lazily elsewhere
            if msg.hop_limit == 0 and not conn.is_local:
                continue  # an exhausted interest may not leave the host
            if conn.send(msg):
                sent += 1
        if sent:
            self.counts["forwarded"] += 1
        else:
            self.pit.remove_interest(msg)
            self.counts["dropped_no_route"] += 1

    def process_content_object(self, msg: Message) -> None:
        ingress_ids = self.pit.satisfy_interest(msg)
        if not ingress_ids:
            self.counts["dropped_unsolicited"] += 1
            return
        if self.store is not None:
            self.store.put_content(msg, self._clock())
        for conn_id in sorted(ingress_ids):
            conn = self.table.lookup_by_id(conn_id)
            if conn is not None:
                conn.send(msg)
        self.counts["satisfied"] += 1
