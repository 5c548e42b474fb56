"""
Deterministic discrete-event core.

Time is an integer count of microseconds. Events fire in ``(fire_at, id)``
order, so simultaneous events keep their insertion order. Messages travel
over modeled links; each hop costs a fixed latency plus serialization
(size / capacity), with FIFO queuing per link direction.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from typing import Any, Callable, Optional

from .errors import NoRoute, SchedulingInPast

SimTime = int
NodeId = str

US = 1
MS = 1_000
S = 1_000_000


class LinkState(Enum):
    UP = "Up"
    DOWN = "Down"


@dataclass
class Link:
    a: NodeId
    b: NodeId
    latency: int  # microseconds
    capacity: float  # bits/second
    state: LinkState = LinkState.UP
    max_queue_us: Optional[int] = None  # None -> unbounded FIFO
    busy_until: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("link latency must be >= 0")
        if self.capacity <= 0:
            raise ValueError("link capacity must be > 0")

    @property
    def key(self) -> tuple:
        return link_key(self.a, self.b)

    @property
    def up(self) -> bool:
        return self.state is LinkState.UP

    def tx_time(self, size_bits: int) -> int:
        return math.ceil(size_bits * S / self.capacity) if size_bits > 0 else 0


def link_key(a: NodeId, b: NodeId) -> tuple:
    return (a, b) if a <= b else (b, a)


@dataclass(order=True)
class Event:
    fire_at: SimTime
    id: int
    target: NodeId = field(compare=False)
    payload: Any = field(compare=False, default=None)
    kind: str = field(compare=False, default="timer")  # timer | deliver | drop | hop
    src: Optional[NodeId] = field(compare=False, default=None)
    path: tuple = field(compare=False, default=())
    size_bits: int = field(compare=False, default=0)
    reason: str = field(compare=False, default="")


@dataclass
class RunStats:
    events_fired: int
    drops: int
    clock: SimTime
    sent: int
    delivered: int

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.drops


_PLAIN = (str, int, float, bool)
_REPR_FIELDS: dict[type, tuple] = {}


def _repr_fields(cls: type) -> tuple:
    names = _REPR_FIELDS.get(cls)
    if names is None:
        names = tuple(f.name for f in fields(cls) if f.repr)
        _REPR_FIELDS[cls] = names
    return names


def describe(obj: Any) -> str:
    """Stable one-line rendering used in the trace (no hash-ordered containers)."""
    cls = type(obj)
    if cls in _PLAIN:
        return str(obj)
    if obj is None:
        return "-"
    if isinstance(obj, Enum):
        return str(obj.value)
    if isinstance(obj, (bytes, bytearray)):
        return bytes(obj).hex()
    if isinstance(obj, (set, frozenset)):
        return "{" + ",".join(sorted(describe(x) for x in obj)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(describe(x) for x in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{describe(k)}:{describe(v)}" for k, v in obj.items()) + "}"
    if is_dataclass(cls):
        inner = " ".join(f"{name}={describe(getattr(obj, name))}"
                         for name in _repr_fields(cls))
        return f"{cls.__name__}({inner})"
    return str(obj)


class Engine:
    """Single-threaded event loop owning the clock, topology and randomness."""

    def __init__(self, seed: int = 0, record: bool = True):
        self.seed = seed
        self.record = record  # False skips trace rendering (bulk property runs)
        self.now: SimTime = 0
        self._queue: list = []
        self._next_id = 0
        self._handlers: dict[NodeId, Callable[[Event], None]] = {}
        self._transit: dict[NodeId, bool] = {}
        self._adj: dict[NodeId, set] = {}
        self.links: dict[tuple, Link] = {}
        self._routes: dict[tuple, list] = {}
        self._rngs: dict[str, random.Random] = {}
        self.trace: list[str] = []
        self.drop_listeners: list[Callable[[Event], None]] = []
        self.events_fired = 0
        self.sent = 0
        self.delivered = 0
        self.drops = 0

    # -- topology -----------------------------------------------------------
    def add_node(self, node: NodeId, handler: Optional[Callable[[Event], None]] = None,
                 transit: bool = True) -> None:
        if node in self._handlers:
            raise ValueError(f"duplicate node id {node!r}")
        self._handlers[node] = handler
        self._transit[node] = transit
        self._adj.setdefault(node, set())

    def has_node(self, node: NodeId) -> bool:
        return node in self._handlers

    def set_handler(self, node: NodeId, handler: Callable[[Event], None]) -> None:
        self._handlers[node] = handler

    def remove_node(self, node: NodeId) -> None:
        for other in list(self._adj.get(node, ())):
            self.links.pop(link_key(node, other), None)
            self._adj[other].discard(node)
        self._adj.pop(node, None)
        self._handlers.pop(node, None)
        self._transit.pop(node, None)
        self._routes.clear()

    def add_link(self, a: NodeId, b: NodeId, latency: int, capacity: float,
                 max_queue_us: Optional[int] = None) -> Link:
        for n in (a, b):
            if n not in self._handlers:
                raise ValueError(f"unknown node {n!r}")
        link = Link(a, b, latency, capacity, max_queue_us=max_queue_us)
        self.links[link.key] = link
        self._adj[a].add(b)
        self._adj[b].add(a)
        self._routes.clear()
        return link

    def remove_link(self, a: NodeId, b: NodeId) -> None:
        self.links.pop(link_key(a, b), None)
        self._adj.get(a, set()).discard(b)
        self._adj.get(b, set()).discard(a)
        self._routes.clear()

    def link(self, a: NodeId, b: NodeId) -> Link:
        return self.links[link_key(a, b)]

    def set_link_state(self, a: NodeId, b: NodeId, state: LinkState) -> None:
        self.link(a, b).state = state
        self.annotate("link-state", f"{a}-{b}", state.value)

    def route(self, src: NodeId, dst: NodeId) -> list:
        """Fewest-hop path; ties broken by node id. Only transit nodes may be interior."""
        key = (src, dst)
        cached = self._routes.get(key)
        if cached is not None:
            return cached
        if src not in self._adj or dst not in self._adj:
            raise NoRoute(f"{src} -> {dst}")
        if src == dst:
            return [src]
        prev = {src: None}
        frontier = deque([src])
        while frontier:
            node = frontier.popleft()
            if node != src and not self._transit[node]:
                continue
            for nxt in sorted(self._adj[node]):
                if nxt in prev:
                    continue
                prev[nxt] = node
                if nxt == dst:
                    frontier.clear()
                    break
                frontier.append(nxt)
        if dst not in prev:
            raise NoRoute(f"{src} -> {dst}")
        path = [dst]
        while path[-1] != src:
            path.append(prev[path[-1]])
        path.reverse()
        self._routes[key] = path
        return path

    # -- randomness ---------------------------------------------------------
    def rng(self, name: str) -> random.Random:
        """Named sub-stream; independent of which other streams exist."""
        stream = self._rngs.get(name)
        if stream is None:
            digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
            stream = random.Random(int.from_bytes(digest[:8], "big"))
            self._rngs[name] = stream
        return stream

    # -- scheduling ---------------------------------------------------------
    def _push(self, event: Event) -> int:
        heapq.heappush(self._queue, event)
        return event.id

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def schedule(self, at: SimTime, target: NodeId, payload: Any = None) -> int:
        if at < self.now:
            raise SchedulingInPast(f"at={at} < now={self.now}")
        return self._push(Event(int(at), self._new_id(), target, payload, "timer"))

    def schedule_after(self, delay: int, target: NodeId, payload: Any = None) -> int:
        return self.schedule(self.now + delay, target, payload)

    def send(self, src: NodeId, dst: NodeId, msg: Any, size_bits: int,
             path: Optional[list] = None) -> int:
        """
        Store-and-forward ``msg`` along ``path`` (default: the current route).

        Each hop is reserved when the message actually reaches it, so every
        link direction serves messages in arrival order. A down link, a
        removed link or a full queue turns the message into a drop event.
        """
        hops = tuple(path) if path is not None else tuple(self.route(src, dst))
        for a, b in zip(hops, hops[1:]):
            if link_key(a, b) not in self.links:
                raise NoRoute(f"{a} -> {b}")
        self.sent += 1
        carrier = Event(self.now, self._new_id(), dst, msg, "deliver", src, hops, size_bits)
        if len(hops) < 2:
            return self._push(carrier)
        self._forward(carrier, 0)
        return carrier.id

    def _forward(self, carrier: Event, index: int) -> None:
        """Transmit ``carrier`` over hop ``index`` starting now."""
        a, b = carrier.path[index], carrier.path[index + 1]
        link = self.links.get(link_key(a, b))
        reason = ""
        if link is None:
            reason = f"link {a}-{b} removed"
        elif not link.up:
            reason = f"link {a}-{b} down"
        else:
            start = max(self.now, link.busy_until.get(a, 0))
            if link.max_queue_us is not None and start - self.now > link.max_queue_us:
                reason = f"queue overflow {link.a}-{link.b}"
        if reason:
            self.drops += 1
            self._push(Event(self.now, self._new_id(), carrier.src, carrier.payload, "drop",
                             carrier.src, carrier.path, carrier.size_bits, reason))
            return
        done = start + link.tx_time(carrier.size_bits)
        link.busy_until[a] = done
        arrive = done + link.latency
        if index + 2 == len(carrier.path):
            self._push(Event(arrive, carrier.id, carrier.target, carrier.payload, "deliver",
                             carrier.src, carrier.path, carrier.size_bits))
        else:
            self._push(Event(arrive, self._new_id(), carrier.path[index + 1],
                             (carrier, index + 1), "hop"))

    # -- running ------------------------------------------------------------
    def annotate(self, kind: str, node: NodeId, *detail: Any) -> None:
        """Append a non-event record (state transitions, auth results) to the trace."""
        if not self.record:
            return
        text = " ".join(describe(d) for d in detail)
        self.trace.append(f"{self.now} * {kind} {node} {text}")

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[SimTime]:
        return self._queue[0].fire_at if self._queue else None

    def run_until(self, t: SimTime) -> RunStats:
        while self._queue and self._queue[0].fire_at <= t:
            event = heapq.heappop(self._queue)
            self.now = event.fire_at
            if event.kind == "hop":
                # internal store-and-forward step; not part of the visible trace
                self._forward(*event.payload)
                continue
            self.events_fired += 1
            if self.record:
                self.trace.append(
                    f"{event.fire_at} {event.id} {event.kind} {event.src or '-'}>{event.target} "
                    f"{describe(event.payload)}" + (f" !{event.reason}" if event.reason else "")
                )
            if event.kind == "drop":
                for listener in self.drop_listeners:
                    listener(event)
                continue
            handler = self._handlers.get(event.target)
            if event.kind == "deliver":
                if event.target not in self._handlers:
                    # destination vanished while the message was in flight
                    self.drops += 1
                    event.reason = "node removed"
                    for listener in self.drop_listeners:
                        listener(event)
                    continue
                self.delivered += 1
            if handler is not None:
                handler(event)
        if self._queue:
            self.now = max(self.now, t)
        return self.stats()

    def stats(self) -> RunStats:
        return RunStats(self.events_fired, self.drops, self.now, self.sent, self.delivered)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.trace:
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()
