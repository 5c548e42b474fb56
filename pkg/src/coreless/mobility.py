"""
Per-flow access binding (IFOM), local breakout (SIPTO/LIPA) through local
gateways, and a capacity-proportional multipath scheduler with subflow
failure recovery.

Handover itself is orchestrated by :class:`coreless.network.Network`, which
owns the nodes it has to touch; the pieces here are the flow-level state it
manipulates.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional

from .engine import Engine, NodeId
from .epc import Breakout, CdrLog, PgwNode
from .errors import AllPathsFailed, InterfaceNotAttached
from .userplane import CORE, LOCAL, Packet


@dataclass
class FlowBinding:
    flow_id: str
    ue: NodeId
    interface: str
    route: str = CORE
    cursor: int = 0  # receiver's in-order delivery point (bytes)


@dataclass(frozen=True)
class OffloadPolicy:
    """Which flows may break out locally. Local-network destinations are LIPA."""
    eligible_classes: tuple = ("data",)
    allow_lipa: bool = True

    def eligible(self, service_class: str, destination: str) -> bool:
        if destination == "local":
            return self.allow_lipa
        return service_class in self.eligible_classes


def sipto_breakout(service_class: str, destination: str, wap_has_lgw: bool,
                   policy: OffloadPolicy) -> str:
    """Local iff the policy allows it and the serving WAP hosts an L-GW; else Core."""
    if wap_has_lgw and policy.eligible(service_class, destination):
        return LOCAL
    return CORE


@dataclass(frozen=True)
class IfomPolicy:
    """UE-local interface preference by service class (access types, best first)."""
    preferences: tuple = (
        ("voice", ("cellular", "uav", "satellite", "wifi")),
        ("video", ("wifi", "cellular", "uav", "satellite")),
        ("data", ("wifi", "cellular", "uav", "satellite")),
    )

    def choose(self, service_class: str, attachments: Mapping[str, str]) -> Optional[str]:
        """``attachments`` maps WapId -> access type, in attach order."""
        if not attachments:
            return None
        order = dict(self.preferences).get(service_class, ())
        for access_type in order:
            for wap, kind in attachments.items():
                if kind == access_type:
                    return wap
        return next(iter(attachments))


def ifom_bind_flow(binding: FlowBinding, interface: str,
                   attached: Iterable[str]) -> FlowBinding:
    if interface not in set(attached):
        raise InterfaceNotAttached(f"{binding.ue} is not attached to {interface}")
    binding.interface = interface
    return binding


class LgwNode(PgwNode):
    """Local gateway co-located with one WAP; charges breakout traffic as Local."""

    def __init__(self, engine: Engine, cdr_log: CdrLog, node: NodeId, host_wap: str,
                 pcrf: NodeId = "pcrf", internet: NodeId = "inet", window_us: int = 100_000,
                 cdr_interval: Optional[int] = None):
        super().__init__(engine, cdr_log, node=node, sgw=host_wap, pcrf=pcrf,
                         internet=internet, window_us=window_us, cdr_interval=cdr_interval)
        self.host_wap = host_wap
        self.pcef.breakout = Breakout.LOCAL


@dataclass(frozen=True)
class LocalGateway:
    id: str
    host_wap: str
    egress: NodeId = "inet"


# ---------------------------------------------------------------------------
# multipath
# ---------------------------------------------------------------------------

class SubflowState(Enum):
    UP = "Up"
    FAILED = "Failed"


@dataclass
class Subflow:
    index: int
    interface: str
    capacity: float
    state: SubflowState = SubflowState.UP
    bytes_carried: int = 0
    unacked: dict = field(default_factory=dict)  # offset -> length

    @property
    def up(self) -> bool:
        return self.state is SubflowState.UP


@dataclass
class MultipathConnection:
    connection_id: str
    flow_id: str
    subflows: list
    next_offset: int = 0
    retransmit: deque = field(default_factory=deque)  # (offset, length)

    def up_subflows(self) -> list:
        return [s for s in self.subflows if s.up]

    def subflow_for(self, interface: str) -> Optional[Subflow]:
        for sf in self.subflows:
            if sf.interface == interface:
                return sf
        return None

    def binding_key(self, sf: Subflow) -> str:
        return f"{self.flow_id}/{sf.index}"

    def on_ack(self, index: int, offset: int) -> None:
        self.subflows[index].unacked.pop(offset, None)

    def take_segments(self, index: int, nbytes: int, limit: Optional[int], mss: int) -> list:
        """Carve ``nbytes`` for a subflow: retransmissions first, then new data up to ``limit``."""
        out = []
        while nbytes > 0 and self.retransmit:
            offset, length = self.retransmit.popleft()
            take = min(length, nbytes, mss)
            out.append((offset, take))
            if take < length:
                self.retransmit.appendleft((offset + take, length - take))
            nbytes -= take
        while nbytes > 0 and (limit is None or self.next_offset < limit):
            take = min(nbytes, mss)
            if limit is not None:
                take = min(take, limit - self.next_offset)
            out.append((self.next_offset, take))
            self.next_offset += take
            nbytes -= take
        sf = self.subflows[index]
        for offset, length in out:
            sf.unacked[offset] = length
            sf.bytes_carried += length
        return out


def mptcp_open(flow_id: str, interfaces: Iterable[str], attached: Iterable[str],
               capacities: Mapping[str, float]) -> MultipathConnection:
    chosen = sorted(set(interfaces))
    if not chosen:
        raise ValueError("multipath connection needs at least one interface")
    attached = set(attached)
    for wap in chosen:
        if wap not in attached:
            raise InterfaceNotAttached(wap)
    subflows = [Subflow(i, wap, capacities[wap]) for i, wap in enumerate(chosen)]
    return MultipathConnection(f"mp-{flow_id}", flow_id, subflows)


def mptcp_schedule(pending_bytes: int, connection: MultipathConnection) -> dict:
    """
    Split the next window's bytes across Up subflows in proportion to their
    path capacity (largest-remainder rounding, ties to the lower index).
    """
    up = connection.up_subflows()
    if not up:
        raise AllPathsFailed(connection.connection_id)
    total_cap = sum(s.capacity for s in up)
    shares = {}
    remainders = []
    assigned = 0
    for sf in up:
        exact = pending_bytes * sf.capacity / total_cap
        whole = int(exact)
        shares[sf.index] = whole
        assigned += whole
        remainders.append((-(exact - whole), sf.index))
    for _, index in sorted(remainders)[: pending_bytes - assigned]:
        shares[index] += 1
    for sf in connection.subflows:
        shares.setdefault(sf.index, 0)
    return dict(sorted(shares.items()))


def mptcp_on_path_failure(connection: MultipathConnection, index: int) -> MultipathConnection:
    """Fail a subflow and queue its unacknowledged bytes for the survivors."""
    sf = connection.subflows[index]
    if not sf.up:
        return connection
    sf.state = SubflowState.FAILED
    lost = sorted(sf.unacked.items())
    sf.unacked.clear()
    merged = sorted(list(connection.retransmit) + lost)
    connection.retransmit = deque(merged)
    if not connection.up_subflows():
        raise AllPathsFailed(connection.connection_id)
    return connection


class Reassembler:
    """Receiver-side byte-range tracking; application delivery is the in-order prefix."""

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []
        self.received_bytes = 0
        self.duplicate_bytes = 0
        self.segments = 0

    def add(self, offset: int, length: int) -> int:
        """Record a segment; return how many of its bytes were new."""
        self.segments += 1
        self.received_bytes += length
        start, end = offset, offset + length
        i = bisect.bisect_left(self._ends, start)
        overlap = 0
        j = i
        while j < len(self._starts) and self._starts[j] <= end:
            overlap += max(0, min(offset + length, self._ends[j]) - max(offset, self._starts[j]))
            start = min(start, self._starts[j])
            end = max(end, self._ends[j])
            j += 1
        self._starts[i:j] = [start]
        self._ends[i:j] = [end]
        self.duplicate_bytes += overlap
        return length - overlap

    @property
    def delivered(self) -> int:
        """Bytes handed to the application in order, without gaps."""
        if self._starts and self._starts[0] == 0:
            return self._ends[0]
        return 0

    @property
    def intervals(self) -> list:
        return list(zip(self._starts, self._ends))

    @property
    def unique_bytes(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))


def make_segment_packet(conn: MultipathConnection, sf: Subflow, offset: int, length: int,
                        ue: str, imsi: str, service_class: str, seq: int) -> Packet:
    return Packet(conn.flow_id, seq, length, ue, imsi, CORE, True, service_class,
                  binding=conn.binding_key(sf), offset=offset, length=length)
