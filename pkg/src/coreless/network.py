"""
Composition of a complete coreless network on one engine: core VNFs, WAPs
with their radio schedulers and optional local gateways, UEs, traffic
sources, and the controller. Also hosts handover, which has to touch the
radio side, the anchor and the flow bindings at once.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .controller import (
    CommandAck,
    CommandNack,
    ConfigureCommCores,
    ControllerNode,
    PushPolicy,
    QueryState,
    SodaPolicy,
    UeDemand,
    WapReport,
    WapScheduler,
)
from .discovery import (
    ALL_ELEMENTS,
    AccessType,
    AnqpElement,
    AnqpError,
    AnqpQuery,
    AnqpResponse,
    Beacon,
    Certificate,
    SelectionPolicy,
    Wap,
    anqp_query,
    make_beacon,
    make_candidate,
    select_network,
    sim_response,
    validate_certificate,
)
from .engine import MS, Engine, Event, LinkState
from .epc import (
    CTRL_BITS,
    AttachAccept,
    AttachReject,
    AttachRequest,
    BindFlow,
    CdrLog,
    CombinedGatewayNode,
    EapSimChallenge,
    EapSimResponse,
    FlowEnd,
    Hss,
    HssNode,
    MmeNode,
    Pcrf,
    PcrfNode,
    PgwNode,
    SgwNode,
    SubscriberProfile,
    TtlsAbort,
    TtlsCredentials,
    TtlsServerHello,
    UeState,
    interface_slot,
)
from .errors import (
    AlreadyAttached,
    AllPathsFailed,
    AnqpUnsupported,
    AuthenticationFailed,
    CertificateInvalid,
    CorelessError,
    HandoverRejected,
    Infeasible,
    InterfaceNotAttached,
    InvalidQuery,
    MethodUnavailable,
    NoRoute,
    NotAttached,
    NotCompleted,
    PoolExhausted,
    SubscriberUnknown,
    WapAtCapacity,
)
from .mobility import (
    FlowBinding,
    IfomPolicy,
    LgwNode,
    MultipathConnection,
    OffloadPolicy,
    Reassembler,
    make_segment_packet,
    mptcp_on_path_failure,
    mptcp_open,
    mptcp_schedule,
    sipto_breakout,
)
from .userplane import CORE, LOCAL, Packet

RESERVED = {"core", "inet", "hss", "pcrf", "mme", "sgw", "pgw", "gw", "ctrl", "scenario"}
ACK_BYTES = 40


@dataclass
class NetworkConfig:
    seed: int = 0
    trace: bool = True
    colocate_gateways: bool = False
    ip_pool: str = "10.0.0.0/24"
    core_latency: int = 200
    core_capacity: float = 100e9
    backhaul_latency: int = 1_000
    backhaul_capacity: float = 10e9
    internet_latency: int = 5_000
    tti: int = 1 * MS
    beacon_interval: Optional[int] = 100 * MS
    report_interval: Optional[int] = 100 * MS
    orchestration_interval: Optional[int] = 500 * MS
    max_report_age: int = 300 * MS
    scale_up: float = 0.8
    scale_down: float = 0.2
    mme_service_time: int = 500
    pcef_window: int = 100 * MS
    cdr_interval: Optional[int] = None
    command_timeout: int = 50 * MS
    packet_size: int = 1500
    flow_setup_delay: int = 20 * MS
    mptcp_window: int = 10 * MS
    anqp_wait: int = 20 * MS
    certificate: Certificate = Certificate("TrustedCA", "aaa.home.example")
    trusted_issuers: tuple = ("TrustedCA",)
    offload: OffloadPolicy = OffloadPolicy()
    ifom: IfomPolicy = IfomPolicy()


_ERRORS = {cls.__name__: cls for cls in (
    AuthenticationFailed, MethodUnavailable, CertificateInvalid, SubscriberUnknown,
    PoolExhausted)}


@dataclass
class Procedure:
    """Handle for an asynchronous attach; resolved by the UE when the MME answers."""
    proc: int
    ue: str
    wap: Optional[str]
    status: str = "pending"  # pending | ok | failed
    error: Optional[Exception] = None
    ip: Optional[str] = None
    method: str = ""
    parent: Optional["Procedure"] = field(default=None, repr=False)

    @property
    def done(self) -> bool:
        return self.status != "pending"

    def result(self) -> "Procedure":
        if not self.done:
            raise NotCompleted(f"attach {self.proc}")
        if self.error is not None:
            raise self.error
        return self


@dataclass
class HandoverOutcome:
    ue: str
    src: Optional[str]
    dst: str
    ok: bool
    reason: str = ""
    at: int = 0


@dataclass
class FlowState:
    flow_id: str
    ue: str
    imsi: str
    service_class: str
    rate: float
    dst: str
    total: Optional[int]
    binding: Optional[FlowBinding] = None
    conn: Optional[MultipathConnection] = None
    receiver: Reassembler = field(default_factory=Reassembler)
    sent_bytes: int = 0  # distinct application bytes handed to the network
    transmitted_bytes: int = 0  # including retransmissions
    sent_packets: int = 0
    next_seq: int = 0
    active: bool = False
    finished: bool = False
    rejected: str = ""
    started_at: int = 0
    gateways: set = field(default_factory=set)
    receipts: dict = field(default_factory=dict)  # seq -> times received
    loads: dict = field(default_factory=dict)  # WapId -> bit/s reserved
    network_drops: int = 0
    ack_bytes: int = 0
    hops: set = field(default_factory=set)  # every node a received packet crossed


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------

class WapNode:
    """Access point: radio scheduler, beacons, ANQP responder, southbound agent."""

    def __init__(self, net: "Network", wap: Wap):
        self.net = net
        self.engine = net.engine
        self.wap = wap
        self.node = wap.id
        self.attached: dict[str, bool] = {}
        self.queues: dict[str, deque] = {}
        self.credit = 0.0
        self.ticking = False
        self.forward_to: dict[str, str] = {}
        self.departed: dict[str, int] = {}  # UE -> handover seq that moved it away
        self.policy = SodaPolicy(version=1)
        self.scheduler = WapScheduler()
        self.decisions: list = []
        self.peak_load = 0.0
        self.radio_drops = 0
        cfg = net.config
        if cfg.beacon_interval:
            self.engine.schedule_after(0, self.node, ("beacon",))
        if cfg.report_interval:
            self.engine.schedule_after(cfg.report_interval, self.node, ("report",))

    # -- events -------------------------------------------------------------
    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, Packet):
            if not self.wap.up:
                self.radio_drops += 1
                self.net._count_drop(msg, f"{self.node} down")
                return
            msg.record(event.path)
            if msg.downlink:
                self._downlink(msg)
            else:
                self._uplink(msg)
        elif msg == ("tick",):
            self._tick()
        elif msg == ("beacon",):
            self.emit_beacon()
            self.engine.schedule_after(self.net.config.beacon_interval, self.node, ("beacon",))
        elif msg == ("report",):
            self._report()
            self.engine.schedule_after(self.net.config.report_interval, self.node, ("report",))
        elif isinstance(msg, AnqpQuery):
            self._anqp(msg)
        elif isinstance(msg, PushPolicy):
            self._push_policy(msg, event.src)
        elif isinstance(msg, ConfigureCommCores):
            self._configure_cores(msg, event.src)
        elif isinstance(msg, QueryState):
            self.engine.send(self.node, event.src, CommandAck(msg.cmd, self.node,
                                                              f"load={self.wap.current_load}"),
                             CTRL_BITS)

    def emit_beacon(self) -> list:
        if not self.wap.up or not self.wap.active_cores:
            return []
        out = []
        for ue in self.net.ues_in_range(self.node):
            beacon = make_beacon(self.wap, self.engine.now)
            self.engine.send(self.node, ue, beacon, 8 * 100, path=[self.node, ue])
            out.append(beacon)
        return out

    def _report(self) -> None:
        ctrl = self.net.controller_id
        if not self.wap.up or ctrl is None or not self.engine.has_node(ctrl):
            return
        report = WapReport(self.node, self.wap.current_load, self.wap.effective_capacity,
                           len(self.attached), self.engine.now)
        self.engine.send(self.node, ctrl, report, CTRL_BITS)

    def _anqp(self, query: AnqpQuery) -> None:
        try:
            reply = anqp_query(self.wap, query.tags)
        except (AnqpUnsupported, InvalidQuery) as exc:
            reply = AnqpError(self.node, f"{type(exc).__name__}: {exc}")
        self.engine.send(self.node, query.ue, reply, 8 * 400, path=[self.node, query.ue])

    # -- southbound ---------------------------------------------------------
    def _push_policy(self, msg: PushPolicy, src: str) -> None:
        if msg.policy.version <= self.policy.version:
            reply = CommandNack(msg.cmd, self.node,
                                f"StaleVersion: {msg.policy.version} <= {self.policy.version}")
        else:
            self.policy = msg.policy  # single reference swap, never partially applied
            self.engine.annotate("policy", self.node, msg.policy.version,
                                 msg.policy.scheduler_id)
            reply = CommandAck(msg.cmd, self.node)
        self.engine.send(self.node, src, reply, CTRL_BITS)

    def _configure_cores(self, msg: ConfigureCommCores, src: str) -> None:
        if not msg.active and self.attached:
            reply = CommandNack(msg.cmd, self.node, "WapBusy: drain attached UEs first")
        elif any(c >= self.wap.total_cores for c in msg.active):
            reply = CommandNack(msg.cmd, self.node, "InvalidCoreSet")
        else:
            self.wap.active_cores = tuple(msg.active)
            self.net._refresh_radio(self.node)
            self.engine.annotate("cores", self.node, msg.active, self.wap.effective_capacity)
            reply = CommandAck(msg.cmd, self.node)
        self.engine.send(self.node, src, reply, CTRL_BITS)

    # -- user plane ---------------------------------------------------------
    def _downlink(self, pkt: Packet) -> None:
        if pkt.ue in self.attached:
            self.queues.setdefault(pkt.ue, deque()).append(pkt)
            self._ensure_tick()
            return
        self._forward_departed(pkt)

    def _forward_departed(self, pkt: Packet) -> None:
        if pkt.route == LOCAL:
            target = self.forward_to.get(pkt.ue)
            if target is not None and self.net.waps[target].wap.up:
                self.engine.send(self.node, target, pkt, pkt.size * 8)
            else:
                self.net._count_drop(pkt, f"{pkt.ue} left {self.node}")
            return
        pkt.forwarded = True
        pkt.switch_seq = self.departed.get(pkt.ue, 0)
        self.engine.send(self.node, self.net.sgw_id, pkt, pkt.size * 8)

    def _uplink(self, pkt: Packet) -> None:
        if pkt.route == LOCAL and self.wap.has_lgw:
            self.engine.send(self.node, f"lgw-{self.node}", pkt, pkt.size * 8)
        else:
            self.engine.send(self.node, self.net.sgw_id, pkt, pkt.size * 8)

    def _ensure_tick(self) -> None:
        if not self.ticking:
            self.ticking = True
            self.engine.schedule_after(0, self.node, ("tick",))

    def _tick(self) -> None:
        self.ticking = False
        busy = [ue for ue, q in self.queues.items() if q]
        if not busy or not self.wap.up:
            return
        per_tick = self.wap.effective_capacity * self.net.config.tti / 8e6
        self.credit = min(self.credit + per_tick, per_tick + self.net.config.packet_size)
        policy = self.policy
        quality = {ue: self.net.link_quality(ue, self.node) for ue in busy}
        order = self.scheduler.order(policy, busy, quality)
        if len(busy) > 1:
            self.decisions.append((self.engine.now, policy.version, policy.scheduler_id,
                                   tuple(order)))
        for ue in order:
            q = self.queues[ue]
            served = 0
            while q and q[0].size <= self.credit:
                pkt = q.popleft()
                self.credit -= pkt.size
                served += pkt.size
                self.engine.send(self.node, ue, pkt, pkt.size * 8, path=[self.node, ue])
            if served:
                self.scheduler.served(ue, served, policy)
        if any(self.queues.values()):
            self.ticking = True
            self.engine.schedule_after(self.net.config.tti, self.node, ("tick",))
        else:
            self.credit = 0.0

    def release_ue(self, ue: str, new_wap: Optional[str], seq: int = 0) -> None:
        """Radio-side detach; queued downlink is forwarded rather than lost."""
        self.attached.pop(ue, None)
        self.departed[ue] = seq
        if new_wap is not None:
            self.forward_to[ue] = new_wap
        for pkt in self.queues.pop(ue, deque()):
            self._forward_departed(pkt)


class UeNode:
    def __init__(self, net: "Network", ue: str, imsi: str, sim_key: Optional[bytes],
                 password: Optional[tuple], trusted: tuple):
        self.net = net
        self.engine = net.engine
        self.node = ue
        self.imsi = imsi
        self._sim_key = sim_key
        self._password = password
        self.trusted = trusted
        self.attachments: dict[str, str] = {}  # WapId -> access type
        self.ip: Optional[str] = None
        self.beacons: dict[str, Beacon] = {}
        self.anqp: dict[str, object] = {}
        self.procs: dict[int, Procedure] = {}

    @property
    def profile(self) -> Optional[SubscriberProfile]:
        return self.net.hss.profiles.get(self.imsi)

    @property
    def sim_key(self) -> Optional[bytes]:
        if self._sim_key is not None:
            return self._sim_key
        profile = self.profile
        return profile.shared_key if profile else None

    @property
    def password(self) -> Optional[tuple]:
        if self._password is not None:
            return self._password
        profile = self.profile
        return profile.password_credential if profile else None

    def _to_mme(self, proc: int, msg) -> None:
        wap = self.procs[proc].wap
        path = [self.node] + self.engine.route(wap, self.net.mme_id)
        self.engine.send(self.node, self.net.mme_id, msg, CTRL_BITS, path=path)

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, Packet):
            self.net._on_ue_packet(self, msg, event)
        elif isinstance(msg, Beacon):
            self.beacons[msg.wap] = msg
        elif isinstance(msg, (AnqpResponse, AnqpError)):
            self.anqp[msg.wap] = msg
        elif isinstance(msg, EapSimChallenge):
            key = self.sim_key or b""
            self._to_mme(msg.proc, EapSimResponse(msg.proc, sim_response(key, msg.nonce)))
        elif isinstance(msg, TtlsServerHello):
            try:
                validate_certificate(msg.certificate, self.trusted)
            except CertificateInvalid:
                self.engine.annotate("ttls-abort", self.node, msg.proc)
                self._to_mme(msg.proc, TtlsAbort(msg.proc, "untrusted server certificate"))
                return
            self.engine.annotate("tunnel-established", self.node, msg.proc)
            user, password = self.password or ("", "")
            self._to_mme(msg.proc, TtlsCredentials(msg.proc, user, password))
        elif isinstance(msg, AttachAccept):
            self.net._on_attach_accept(self, msg)
        elif isinstance(msg, AttachReject):
            self.net._on_attach_reject(self, msg)
        elif isinstance(msg, tuple) and msg and msg[0] == "select":
            self.net._finish_discovery(self, msg[1])


class SourceNode:
    """Traffic source (Internet server or a local-network host behind an L-GW)."""

    def __init__(self, net: "Network", node: str):
        self.net = net
        self.node = node

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, tuple) and msg and msg[0] == "emit":
            self.net._emit(msg[1])
        elif isinstance(msg, tuple) and msg and msg[0] == "mp-window":
            self.net._mp_window(msg[1])
        elif isinstance(msg, Packet) and msg.is_ack:
            msg.record(event.path)
            self.net._on_ack(msg)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    def __init__(self, config: Optional[NetworkConfig] = None):
        self.config = cfg = config or NetworkConfig()
        self.engine = e = Engine(cfg.seed, record=cfg.trace)
        self.cdr_log = CdrLog()
        self.hss = Hss(e)
        self.pcrf = Pcrf()
        self.waps: dict[str, WapNode] = {}
        self.ues: dict[str, UeNode] = {}
        self.flows: dict[str, FlowState] = {}
        self.lgws: dict[str, LgwNode] = {}
        self.handovers: list[HandoverOutcome] = []
        self.procedures: list[Procedure] = []
        self._quality: dict[tuple, float] = {}
        self._reach: dict[str, Optional[set]] = {}
        self._pending_flows: dict[str, list] = {}
        self._next_proc = 0
        self.drops_by_reason: dict[str, int] = {}
        self._handover_seq: dict[str, int] = {}

        e.add_node("core")
        self.hss_node = HssNode(e, self.hss)
        self.pcrf_node = PcrfNode(e, self.pcrf)
        e.add_node("hss", self.hss_node.on_event)
        e.add_node("pcrf", self.pcrf_node.on_event)
        self.controller_id: Optional[str] = "ctrl"
        self.mme_id = "mme"
        if cfg.colocate_gateways:
            self.sgw_id = self.pgw_id = "gw"
        else:
            self.sgw_id, self.pgw_id = "sgw", "pgw"
        self.mme = MmeNode(e, self.mme_id, "hss", self.sgw_id, cfg.mme_service_time,
                           cfg.certificate, route_to_ue=self._route_to_ue,
                           report_to=self.controller_id, report_interval=cfg.report_interval)
        self.sgw = SgwNode(e, self.sgw_id, self.pgw_id)
        self.pgw = PgwNode(e, self.cdr_log, self.pgw_id, self.sgw_id, "pcrf", "inet",
                           cfg.ip_pool, cfg.pcef_window, cfg.cdr_interval)
        e.add_node(self.mme_id, self.mme.on_event)
        if cfg.colocate_gateways:
            combined = CombinedGatewayNode(self.sgw, self.pgw)
            e.add_node("gw", combined.on_event)
        else:
            e.add_node("sgw", self.sgw.on_event)
            e.add_node("pgw", self.pgw.on_event)
        self.inet = SourceNode(self, "inet")
        e.add_node("inet", self.inet.on_event, transit=False)
        self.controller = ControllerNode(
            e, "ctrl", cfg.max_report_age, cfg.command_timeout, cfg.orchestration_interval,
            cfg.scale_up, cfg.scale_down, vnf_nodes={"MME": self.mme_id})
        e.add_node("ctrl", self.controller.on_event)
        for node in ("hss", "pcrf", self.mme_id, self.sgw_id, self.pgw_id, "ctrl"):
            if not e.links.get(tuple(sorted(("core", node)))):
                e.add_link("core", node, cfg.core_latency, cfg.core_capacity)
        e.add_link(self.pgw_id, "inet", cfg.internet_latency, cfg.core_capacity)
        e.drop_listeners.append(self._on_engine_drop)

    # -- helpers ------------------------------------------------------------
    @property
    def gateway_nodes(self) -> set:
        return {self.sgw_id, self.pgw_id}

    def _route_to_ue(self, src: str, wap: str, ue: str) -> list:
        return self.engine.route(src, wap) + [ue]

    def ues_in_range(self, wap: str) -> list:
        return [ue for ue in sorted(self.ues) if self.in_range(ue, wap)]

    def in_range(self, ue: str, wap: str) -> bool:
        reach = self._reach.get(ue)
        return reach is None or wap in reach

    def link_quality(self, ue: str, wap: str) -> float:
        key = (ue, wap)
        if key not in self._quality:
            self._quality[key] = round(self.engine.rng(f"quality:{ue}:{wap}").uniform(0.5, 1.0), 6)
        return self._quality[key]

    def set_link_quality(self, ue: str, wap: str, quality: float) -> None:
        self._quality[(ue, wap)] = quality

    def _count_drop(self, pkt: Packet, reason: str) -> None:
        flow = self.flows.get(pkt.flow_id)
        if flow is not None and not pkt.is_ack:
            flow.network_drops += 1
        key = reason.split(" ")[-1] if reason else "unknown"
        self.drops_by_reason[key] = self.drops_by_reason.get(key, 0) + 1
        self.engine.annotate("packet-drop", "-", pkt.flow_id, pkt.seq, reason)

    def _on_engine_drop(self, event: Event) -> None:
        if isinstance(event.payload, Packet):
            self._count_drop(event.payload, event.reason)

    def _set_load(self, flow: FlowState, loads: dict) -> None:
        for wap, rate in flow.loads.items():
            if wap in self.waps:
                self.waps[wap].wap.current_load -= rate
        flow.loads = {w: r for w, r in loads.items() if r}
        for wap, rate in flow.loads.items():
            node = self.waps[wap]
            node.wap.current_load += rate
            node.peak_load = max(node.peak_load, node.wap.current_load)

    def _refresh_radio(self, wap_id: str) -> None:
        node = self.waps[wap_id]
        cap = node.wap.effective_capacity
        for ue in self.ues:
            link = self.engine.links.get(tuple(sorted((ue, wap_id))))
            if link is None:
                continue
            if cap > 0:
                link.capacity = cap
                if node.wap.up:
                    link.state = LinkState.UP
            else:
                link.state = LinkState.DOWN
        for conn_flow in self.flows.values():
            if conn_flow.conn is not None:
                sf = conn_flow.conn.subflow_for(wap_id)
                if sf is not None and cap > 0:
                    sf.capacity = cap

    # -- topology -----------------------------------------------------------
    def add_wap(self, wap_id: str, access_type: str, capacity: float, hs20: bool = False,
                cores: int = 1, lgw: bool = False, domain: Optional[Iterable[str]] = None,
                consortium: Iterable[str] = (), realms: Optional[Iterable] = None,
                latency: Optional[int] = None) -> WapNode:
        if wap_id in RESERVED or wap_id.startswith(("lgw-", "lan-")) or wap_id in self.waps \
                or wap_id in self.ues:
            raise ValueError(f"WAP id {wap_id!r} is reserved or already used")
        advertised = {}
        if hs20:
            domains = tuple(domain) if domain else ("operator.example",)
            advertised = {
                AnqpElement.DOMAIN_NAME: domains,
                AnqpElement.IP_AVAILABILITY: "ipv4-public",
                AnqpElement.EAP_METHODS: ("EAP-SIM", "EAP-TTLS"),
                AnqpElement.ROAMING_CONSORTIUM: tuple(consortium),
                AnqpElement.NAI_REALM_LIST: tuple(realms) if realms is not None else tuple(
                    (d, ("EAP-SIM", "EAP-TTLS")) for d in domains),
                AnqpElement.NETWORK_AUTH_TYPE: "none",
            }
        wap = Wap(wap_id, AccessType(access_type), float(capacity), hs20, advertised,
                  total_cores=cores, has_lgw=lgw, radio_latency=latency)
        node = WapNode(self, wap)
        self.waps[wap_id] = node
        e = self.engine
        e.add_node(wap_id, node.on_event)
        e.add_link(wap_id, "core", self.config.backhaul_latency, self.config.backhaul_capacity)
        if lgw:
            gw_id = f"lgw-{wap_id}"
            lgw_node = LgwNode(e, self.cdr_log, gw_id, wap_id, "pcrf", "inet",
                               self.config.pcef_window, self.config.cdr_interval)
            self.lgws[wap_id] = lgw_node
            e.add_node(gw_id, lgw_node.on_event)
            e.add_link(gw_id, wap_id, 100, self.config.backhaul_capacity)
            e.add_link(gw_id, "inet", self.config.internet_latency, self.config.backhaul_capacity)
            lan = SourceNode(self, f"lan-{wap_id}")
            e.add_node(lan.node, lan.on_event, transit=False)
            e.add_link(lan.node, gw_id, 100, self.config.backhaul_capacity)
        for ue in self.ues:
            if self.in_range(ue, wap_id):
                self._radio_link(ue, wap_id)
        self.controller.versions[wap_id] = 1
        return node

    def _radio_link(self, ue: str, wap_id: str) -> None:
        wap = self.waps[wap_id].wap
        link = self.engine.add_link(ue, wap_id, wap.radio_latency,
                                    max(wap.effective_capacity, 1.0))
        if not wap.up or wap.effective_capacity <= 0:
            link.state = LinkState.DOWN

    def add_subscriber(self, profile: SubscriberProfile) -> None:
        self.hss.register(profile)
        self.pcrf.provision(profile)

    def add_ue(self, ue: str, imsi: str, sim_key: Optional[bytes] = None,
               password: Optional[tuple] = None, trusted: Optional[tuple] = None,
               near: Optional[Iterable[str]] = None) -> UeNode:
        if ue in RESERVED or ue in self.waps or ue in self.ues:
            raise ValueError(f"UE id {ue!r} is reserved or already used")
        node = UeNode(self, ue, imsi, sim_key, password,
                      tuple(trusted) if trusted is not None else self.config.trusted_issuers)
        self.ues[ue] = node
        self._reach[ue] = set(near) if near is not None else None
        self.engine.add_node(ue, node.on_event, transit=False)
        for wap_id in self.waps:
            if self.in_range(ue, wap_id):
                self._radio_link(ue, wap_id)
        return node

    # -- attach -------------------------------------------------------------
    def attach(self, ue: str, wap: str) -> Procedure:
        node = self.ues[ue]
        if wap not in self.waps:
            raise NoRoute(f"unknown WAP {wap}")
        if not self.in_range(ue, wap):
            raise NoRoute(f"{ue} is out of range of {wap}")
        wnode = self.waps[wap]
        if wap in node.attachments:
            raise AlreadyAttached(f"{ue} already attached to {wap}")
        occupied = next((w for w, t in node.attachments.items()
                         if interface_slot(t) == interface_slot(wnode.wap.access_type.value)),
                        None)
        if occupied is not None:
            raise AlreadyAttached(f"{ue} already holds a {wnode.wap.access_type.value} "
                                  f"interface on {occupied}")
        for pending in node.procs.values():
            if pending.wap == wap and not pending.done:
                raise AlreadyAttached(f"{ue} attach to {wap} already in progress")
        if not wnode.wap.up or wnode.wap.current_load >= wnode.wap.effective_capacity:
            raise WapAtCapacity(wap)
        self._next_proc += 1
        proc = Procedure(self._next_proc, ue, wap)
        node.procs[proc.proc] = proc
        self.procedures.append(proc)
        request = AttachRequest(proc.proc, ue, node.imsi, wap, wnode.wap.access_type.value)
        node._to_mme(proc.proc, request)
        return proc

    def attach_auto(self, ue: str, tags: Iterable = ALL_ELEMENTS) -> Procedure:
        """Discover via beacons + ANQP, select a network, then attach to it."""
        node = self.ues[ue]
        self._next_proc += 1
        proc = Procedure(self._next_proc, ue, None)
        node.procs[proc.proc] = proc
        self.procedures.append(proc)
        for wap_id, beacon in sorted(node.beacons.items()):
            if beacon.interworking and wap_id not in node.attachments:
                self.engine.send(ue, wap_id, AnqpQuery(ue, wap_id, tuple(tags)), 8 * 100,
                                 path=[ue, wap_id])
        self.engine.schedule_after(self.config.anqp_wait, ue, ("select", proc.proc))
        return proc

    def _finish_discovery(self, node: UeNode, proc_id: int) -> None:
        proc = node.procs[proc_id]
        profile = node.profile
        candidates = []
        for wap_id, reply in sorted(node.anqp.items()):
            if not isinstance(reply, AnqpResponse) or wap_id in node.attachments:
                continue
            wap = self.waps[wap_id].wap
            if not wap.up:
                continue
            candidates.append(make_candidate(wap_id, reply, profile,
                                             self.link_quality(node.node, wap_id),
                                             wap.load_fraction, wap.access_type.value))
        chosen = select_network(candidates, profile, SelectionPolicy())
        self.engine.annotate("selected", node.node, proc_id, chosen)
        if chosen is None:
            self._resolve(proc, error=NoRoute(f"{node.node}: no eligible network"))
            return
        try:
            inner = self.attach(node.node, chosen)
        except CorelessError as exc:
            self._resolve(proc, error=exc)
            return
        proc.wap = chosen
        inner.parent = proc

    def _resolve(self, proc: Procedure, error: Optional[Exception] = None,
                 ip: Optional[str] = None, method: str = "") -> None:
        proc.status = "failed" if error is not None else "ok"
        proc.error, proc.ip, proc.method = error, ip, method
        if proc.parent is not None:
            self._resolve(proc.parent, error, ip, method)

    def _on_attach_accept(self, node: UeNode, msg: AttachAccept) -> None:
        wnode = self.waps[msg.wap]
        node.attachments[msg.wap] = wnode.wap.access_type.value
        node.ip = msg.ip
        wnode.attached[node.node] = True
        wnode.forward_to.pop(node.node, None)
        self._resolve(node.procs[msg.proc], ip=msg.ip, method=msg.method)
        for args in self._pending_flows.pop(node.node, []):
            self._start_flow_now(*args)

    def _on_attach_reject(self, node: UeNode, msg: AttachReject) -> None:
        name = msg.reason.split(":")[0]
        error = _ERRORS.get(name, AuthenticationFailed)(msg.reason)
        self._resolve(node.procs[msg.proc], error=error)
        if not node.attachments and not any(not p.done for p in node.procs.values()):
            for args in self._pending_flows.pop(node.node, []):
                flow = self.flows[args[0]]
                flow.rejected = "attach failed"
                self.engine.annotate("flow-rejected", "-", flow.flow_id, flow.rejected)

    # -- flows --------------------------------------------------------------
    def start_flow(self, flow_id: str, ue: str, service_class: str, rate: float,
                   dst: str = "internet", total_bytes: Optional[int] = None,
                   multipath: Optional[Iterable[str]] = None, via: Optional[str] = None) -> FlowState:
        if flow_id in self.flows:
            raise ValueError(f"duplicate flow id {flow_id!r}")
        node = self.ues[ue]
        flow = FlowState(flow_id, ue, node.imsi, service_class, float(rate), dst, total_bytes)
        self.flows[flow_id] = flow
        args = (flow_id, tuple(multipath) if multipath else None, via)
        if not node.attachments:
            if any(not p.done for p in node.procs.values()):
                self._pending_flows.setdefault(ue, []).append(args)
                return flow
            del self.flows[flow_id]
            raise NotAttached(f"{ue} has no attachment")
        self._start_flow_now(*args)
        return flow

    def _start_flow_now(self, flow_id: str, multipath, via) -> None:
        flow = self.flows[flow_id]
        node = self.ues[flow.ue]
        e = self.engine
        if multipath:
            caps = {w: self.waps[w].wap.effective_capacity for w in multipath if w in self.waps}
            try:
                conn = mptcp_open(flow_id, multipath, node.attachments, caps)
            except (InterfaceNotAttached, KeyError) as exc:
                flow.rejected = f"InterfaceNotAttached: {exc}"
                e.annotate("flow-rejected", "-", flow_id, flow.rejected)
                return
            flow.conn = conn
            total_cap = sum(sf.capacity for sf in conn.subflows)
            if not flow.rate:
                flow.rate = total_cap
            for sf in conn.subflows:
                self._send_binding(node, conn.binding_key(sf), sf.interface)
            self._set_load(flow, {sf.interface: flow.rate * sf.capacity / total_cap
                                  for sf in conn.subflows})
            flow.gateways.add(self.pgw_id)
            event = ("mp-window", flow_id)
        else:
            if via is not None:
                if via not in node.attachments:
                    flow.rejected = f"InterfaceNotAttached: {via}"
                    e.annotate("flow-rejected", "-", flow_id, flow.rejected)
                    return
                iface = via
            else:
                iface = self._ifom_policy().choose(flow.service_class, node.attachments)
            wap = self.waps[iface].wap
            if wap.current_load + flow.rate > wap.effective_capacity:
                flow.rejected = f"WapAtCapacity: {iface}"
                e.annotate("flow-rejected", "-", flow_id, flow.rejected)
                return
            route = sipto_breakout(flow.service_class, flow.dst, wap.has_lgw, self._offload())
            flow.binding = FlowBinding(flow_id, flow.ue, iface, route)
            self._send_binding(node, flow_id, iface)
            self._set_load(flow, {iface: flow.rate})
            event = ("emit", flow_id)
        flow.active = True
        flow.started_at = e.now
        self.mme.set_connected(flow.ue, True)
        e.annotate("flow-start", "-", flow_id, flow.ue, flow.binding, flow.service_class)
        e.schedule_after(self.config.flow_setup_delay, self._source_of(flow), event)

    def _ifom_policy(self) -> IfomPolicy:
        app = self.controller.app_policy if self.controller else None
        if app is not None and app.ifom_preferences is not None:
            return IfomPolicy(app.ifom_preferences)
        return self.config.ifom

    def _offload(self) -> OffloadPolicy:
        app = self.controller.app_policy if self.controller else None
        if app is not None and app.offload_classes is not None:
            return OffloadPolicy(tuple(app.offload_classes), self.config.offload.allow_lipa)
        return self.config.offload

    def _source_of(self, flow: FlowState) -> str:
        b = flow.binding
        if flow.dst == "local" and b is not None and b.route == LOCAL:
            return f"lan-{b.interface}"
        return "inet"

    def _send_binding(self, node: UeNode, binding: str, wap: str) -> None:
        path = [node.node] + self.engine.route(wap, self.sgw_id)
        self.engine.send(node.node, self.sgw_id, BindFlow(binding, node.node, wap), CTRL_BITS,
                         path=path)

    def bind_flow(self, flow_id: str, wap: str) -> FlowBinding:
        """IFOM: move a flow to another attached interface mid-stream."""
        flow = self.flows[flow_id]
        node = self.ues[flow.ue]
        if flow.binding is None:
            raise InterfaceNotAttached(f"{flow_id} has no single-path binding")
        if wap not in node.attachments:
            raise InterfaceNotAttached(f"{flow.ue} is not attached to {wap}")
        old = flow.binding.interface
        target = self.waps[wap].wap
        flow.binding.interface = wap
        flow.binding.route = sipto_breakout(flow.service_class, flow.dst, target.has_lgw,
                                            self._offload())
        if flow.binding.route == LOCAL and old != wap:
            self.waps[old].forward_to[flow.ue] = wap
        self._send_binding(node, flow_id, wap)
        self._set_load(flow, {wap: flow.rate} if flow.active else {})
        self.engine.annotate("rebind", "-", flow_id, old, wap, flow.binding.route)
        return flow.binding

    def stop_flow(self, flow_id: str) -> None:
        flow = self.flows[flow_id]
        if flow.active:
            self._finish(flow)

    def _finish(self, flow: FlowState) -> None:
        flow.active = False
        flow.finished = True
        self._set_load(flow, {})
        for gw in sorted(flow.gateways):
            self.engine.send(self._source_of(flow), gw, FlowEnd(flow.flow_id), CTRL_BITS)
        self.engine.annotate("flow-end", "-", flow.flow_id, flow.sent_bytes)
        if not any(f.active for f in self.flows.values() if f.ue == flow.ue):
            self.mme.set_connected(flow.ue, False)

    def _gateway_for(self, flow: FlowState) -> str:
        b = flow.binding
        if b is not None and b.route == LOCAL:
            return f"lgw-{b.interface}"
        return self.pgw_id

    def _emit(self, flow_id: str) -> None:
        flow = self.flows[flow_id]
        if not flow.active:
            return
        size = self.config.packet_size
        if flow.total is not None:
            size = min(size, flow.total - flow.sent_bytes)
        if size <= 0:
            self._finish(flow)
            return
        b = flow.binding
        pkt = Packet(flow_id, flow.next_seq, size, flow.ue, flow.imsi, b.route, True,
                     flow.service_class, offset=flow.sent_bytes, length=size)
        gw = self._gateway_for(flow)
        flow.gateways.add(gw)
        flow.next_seq += 1
        flow.sent_bytes += size
        flow.transmitted_bytes += size
        flow.sent_packets += 1
        self.engine.send(self._source_of(flow), gw, pkt, size * 8)
        if flow.total is not None and flow.sent_bytes >= flow.total:
            self._finish(flow)
            return
        gap = max(1, math.ceil(size * 8e6 / flow.rate))
        self.engine.schedule_after(gap, self._source_of(flow), ("emit", flow_id))

    def _mp_window(self, flow_id: str) -> None:
        flow = self.flows[flow_id]
        conn = flow.conn
        if not flow.active:
            return
        window = self.config.mptcp_window
        outstanding = sum(len(sf.unacked) for sf in conn.subflows)
        if flow.total is not None and conn.next_offset >= flow.total and not conn.retransmit:
            if not outstanding:
                self._finish(flow)
                return
            self.engine.schedule_after(window, "inet", ("mp-window", flow_id))
            return
        budget = int(flow.rate * window / 8e6)
        new_left = None if flow.total is None else flow.total - conn.next_offset
        waiting = sum(length for _, length in conn.retransmit)
        pending = budget if new_left is None else min(budget, waiting + new_left)
        try:
            shares = mptcp_schedule(pending, conn)
        except AllPathsFailed:
            self.engine.annotate("mp-stalled", "inet", flow_id)
            return
        for sf in conn.subflows:
            share = shares.get(sf.index, 0)
            if not share:
                continue
            for offset, length in conn.take_segments(sf.index, share, flow.total,
                                                      self.config.packet_size):
                pkt = make_segment_packet(conn, sf, offset, length, flow.ue, flow.imsi,
                                          flow.service_class, flow.next_seq)
                flow.next_seq += 1
                flow.sent_packets += 1
                flow.transmitted_bytes += length
                self.engine.send("inet", self.pgw_id, pkt, length * 8)
        flow.sent_bytes = conn.next_offset
        self.engine.schedule_after(window, "inet", ("mp-window", flow_id))

    def _on_ue_packet(self, node: UeNode, pkt: Packet, event: Event) -> None:
        pkt.record(event.path)
        flow = self.flows.get(pkt.flow_id)
        if flow is None or pkt.is_ack:
            return
        flow.receiver.add(pkt.offset, pkt.length)
        flow.hops.update(pkt.hops)
        flow.receipts[pkt.seq] = flow.receipts.get(pkt.seq, 0) + 1
        if flow.binding is not None:
            flow.binding.cursor = flow.receiver.delivered
        self.engine.annotate("rx", node.node, pkt.flow_id, pkt.seq, pkt.route, pkt.hops)
        if flow.conn is not None:
            index = int(pkt.binding.rsplit("/", 1)[1])
            sf = flow.conn.subflows[index]
            if sf.interface not in node.attachments:
                return
            ack = Packet(flow.flow_id, pkt.seq, ACK_BYTES, node.node, node.imsi, CORE, False,
                         flow.service_class, binding=pkt.binding, offset=pkt.offset,
                         length=pkt.length, is_ack=True)
            self.engine.send(node.node, sf.interface, ack, ACK_BYTES * 8,
                             path=[node.node, sf.interface])

    def _on_ack(self, ack: Packet) -> None:
        flow = self.flows.get(ack.flow_id)
        if flow is None or flow.conn is None:
            return
        flow.ack_bytes += ack.size
        flow.conn.on_ack(int(ack.binding.rsplit("/", 1)[1]), ack.offset)

    # -- mobility -----------------------------------------------------------
    def choose_handover_target(self, ue: str, src: Optional[str] = None) -> str:
        """Controller-decided handover: max-min placement over the global view."""
        node = self.ues[ue]
        ctrl = self._require_controller()
        if src is None:
            src = next((w for w, t in node.attachments.items() if t != "wifi"), None)
        if src is None or src not in node.attachments:
            raise NotAttached(f"{ue} has no attachment to hand over")
        slot = interface_slot(node.attachments[src])
        reachable = tuple(sorted(
            w for w, wn in self.waps.items()
            if w != src and w not in node.attachments and self.in_range(ue, w)
            and interface_slot(wn.wap.access_type.value) == slot))
        demand = sum(f.loads.get(src, 0.0) for f in self.flows.values() if f.ue == ue)
        try:
            choice = ctrl.assign([UeDemand(ue, demand, reachable)])
        except Infeasible as exc:
            raise HandoverRejected(f"controller found no target: {exc}") from None
        return choice[ue]

    def handover(self, ue: str, dst: str, src: Optional[str] = None) -> HandoverOutcome:
        """Anchored handover: IP and anchor SGW stay fixed, the downlink path switches."""
        node = self.ues[ue]
        e = self.engine
        if dst not in self.waps:
            raise HandoverRejected(f"unknown target {dst}")
        target = self.waps[dst].wap
        slot = interface_slot(target.access_type.value)
        if src is None:
            src = next((w for w, t in node.attachments.items() if interface_slot(t) == slot),
                       None)
        if src is None or src not in node.attachments:
            raise NotAttached(f"{ue} has no {slot} attachment to hand over")
        if interface_slot(node.attachments[src]) != slot:
            raise HandoverRejected(f"{src} and {dst} are different interface kinds")
        if dst == src or dst in node.attachments:
            raise HandoverRejected(f"{ue} already attached to {dst}")
        moving = {f.flow_id: r for f in self.flows.values() if f.ue == ue
                  for w, r in f.loads.items() if w == src}
        reason = ""
        if not target.up or not target.active_cores or not self.in_range(ue, dst):
            reason = f"{dst} unavailable"
        elif target.current_load + sum(moving.values()) > target.effective_capacity:
            reason = f"{dst} at capacity"
        if reason:
            outcome = HandoverOutcome(ue, src, dst, False, reason, e.now)
            self.handovers.append(outcome)
            e.annotate("handover-rejected", ue, src, dst, reason)
            raise HandoverRejected(reason)

        ctx = self.mme.context_of_ue(ue)
        anchors = tuple(b.anchor_sgw for b in ctx.bearers)
        access = node.attachments.pop(src)
        node.attachments[dst] = access
        self.waps[dst].attached[ue] = True
        self.waps[dst].forward_to.pop(ue, None)
        seq = self._handover_seq[ue] = self._handover_seq.get(ue, 0) + 1
        self.waps[src].release_ue(ue, dst, seq)
        self.mme.move_interface(ue, src, dst, access, seq)
        for flow in self.flows.values():
            if flow.ue != ue:
                continue
            if flow.binding is not None and flow.binding.interface == src:
                flow.binding.interface = dst
                flow.binding.route = sipto_breakout(flow.service_class, flow.dst,
                                                    target.has_lgw, self._offload())
            if flow.conn is not None:
                sf = flow.conn.subflow_for(src)
                if sf is not None:
                    sf.interface = dst
                    sf.capacity = target.effective_capacity or sf.capacity
            if src in flow.loads:
                loads = dict(flow.loads)
                loads[dst] = loads.pop(src)
                self._set_load(flow, loads)
        outcome = HandoverOutcome(ue, src, dst, True, "", e.now)
        self.handovers.append(outcome)
        e.annotate("handover", ue, src, dst, ctx.ip, anchors)
        return outcome

    # -- failures -----------------------------------------------------------
    def fail_wap(self, wap_id: str) -> None:
        node = self.waps[wap_id]
        node.wap.up = False
        e = self.engine
        e.annotate("wap-failed", wap_id)
        for key, link in e.links.items():
            if wap_id in key:
                link.state = LinkState.DOWN
        for ue in list(node.attached):
            for pkt in node.queues.pop(ue, deque()):
                node.radio_drops += 1
                self._count_drop(pkt, f"{wap_id} down")
            node.attached.pop(ue, None)
            self._lose_interface(ue, wap_id)

    def fail_link(self, a: str, b: str) -> None:
        self.engine.set_link_state(a, b, LinkState.DOWN)
        for flow in self.flows.values():
            if flow.conn is None or not flow.active:
                continue
            for sf in flow.conn.subflows:
                if sf.up and {a, b} in ({sf.interface, "core"}, {sf.interface, flow.ue}):
                    self._fail_subflow(flow, sf.index)

    def _fail_subflow(self, flow: FlowState, index: int) -> None:
        try:
            mptcp_on_path_failure(flow.conn, index)
        except AllPathsFailed:
            self.engine.annotate("mp-all-failed", "-", flow.flow_id)
        self.engine.annotate("subflow-failed", "-", flow.flow_id, index)
        up = flow.conn.up_subflows()
        total = sum(s.capacity for s in up)
        self._set_load(flow, {s.interface: flow.rate * s.capacity / total for s in up}
                       if up else {})

    def _lose_interface(self, ue: str, wap_id: str) -> None:
        node = self.ues[ue]
        node.attachments.pop(wap_id, None)
        self.mme.detach_interface(ue, wap_id)
        for flow in self.flows.values():
            if flow.ue != ue or not flow.active:
                continue
            if flow.conn is not None:
                sf = flow.conn.subflow_for(wap_id)
                if sf is not None and sf.up:
                    self._fail_subflow(flow, sf.index)
            elif flow.binding is not None and flow.binding.interface == wap_id:
                if node.attachments:
                    self.bind_flow(flow.flow_id, next(iter(node.attachments)))
                else:
                    self._set_load(flow, {})

    def remove_controller(self) -> None:
        """Take the controller away; forwarding state in the data plane is untouched."""
        if self.controller_id and self.engine.has_node(self.controller_id):
            self.engine.remove_node(self.controller_id)
            self.engine.annotate("controller-removed", self.controller_id)
        self.controller_id = None
        self.mme.report_to = None

    # -- controller shortcuts -----------------------------------------------
    def push_policy(self, wap: str, scheduler: str, parameters: Iterable = (),
                    phy_parameters: Iterable = ()):
        ctrl = self._require_controller()
        policy = SodaPolicy(ctrl.next_version(wap), scheduler, tuple(parameters),
                            tuple(phy_parameters))
        return ctrl.push_policy(wap, policy)

    def set_cores(self, wap: str, active: Iterable[int]):
        ctrl = self._require_controller()
        return ctrl.configure_comm_cores(wap, active, self.waps[wap].wap.total_cores)

    def _require_controller(self) -> ControllerNode:
        if self.controller_id is None:
            raise NoRoute("controller removed")
        return self.controller

    # -- running ------------------------------------------------------------
    def run_until(self, t: int):
        return self.engine.run_until(t)

    def finalize(self) -> list:
        """Close every open flow and emit the final CDRs at every gateway."""
        records = self.pgw.close_all()
        for wap_id in sorted(self.lgws):
            records += self.lgws[wap_id].close_all()
        return records
