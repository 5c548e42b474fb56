"""
Packet-core functions running as software nodes on the simulated fabric.

HSS (subscriber database + challenge nonces), PCRF (policy decisions),
PCEF (per-flow enforcement and byte accounting inside the PGW and local
gateways), IP pool, CDR log, and the MME / SGW / PGW node handlers. The
nodes only talk to each other through engine messages.
"""

from __future__ import annotations

import hashlib
import ipaddress
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from .engine import Engine, Event, NodeId, SimTime
from .errors import (
    AuthenticationFailed,
    MethodUnavailable,
    PoolExhausted,
    SubscriberUnknown,
)
from .userplane import Packet

SERVICE_CLASSES = ("voice", "video", "data")
BEST_EFFORT = "best-effort"


def keyed_digest(key: bytes, *parts: bytes) -> bytes:
    """Challenge/response stand-in for SIM algorithms: sha256(key || parts...)."""
    h = hashlib.sha256(key)
    for part in parts:
        h.update(part)
    return h.digest()


def session_key(key: bytes, nonce: bytes) -> bytes:
    return keyed_digest(key, nonce, b"session")


# ---------------------------------------------------------------------------
# subscriber data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QosSubscription:
    max_bitrate: float = 100e6
    service_classes: tuple = SERVICE_CLASSES


@dataclass(frozen=True)
class SubscriberProfile:
    imsi: str
    shared_key: Optional[bytes] = field(default=None, repr=False)
    password_credential: Optional[tuple] = field(default=None, repr=False)
    qos: QosSubscription = QosSubscription()
    roaming_consortia: tuple = ()
    home_domain: str = "home.example"

    def __post_init__(self):
        if len(self.imsi) != 15 or not self.imsi.isdigit():
            raise ValueError(f"IMSI must be 15 digits: {self.imsi!r}")
        if self.shared_key is None and self.password_credential is None:
            raise ValueError("profile needs a shared key or a password credential")
        object.__setattr__(self, "roaming_consortia", tuple(sorted(set(self.roaming_consortia))))

    @property
    def realm(self) -> str:
        return self.home_domain


class Hss:
    """Subscriber database and authentication-vector source."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.profiles: dict[str, SubscriberProfile] = {}
        self._issued: set = set()

    def register(self, profile: SubscriberProfile) -> None:
        if profile.imsi in self.profiles:
            raise ValueError(f"IMSI {profile.imsi} already registered")
        self.profiles[profile.imsi] = profile

    def lookup(self, imsi: str) -> tuple:
        profile = self.profiles.get(imsi)
        if profile is None:
            raise SubscriberUnknown(imsi)
        rng = self.engine.rng("hss.nonce")
        while True:
            nonce = rng.getrandbits(64).to_bytes(8, "big")
            if nonce not in self._issued:
                self._issued.add(nonce)
                return profile, nonce


# ---------------------------------------------------------------------------
# bearer / context state
# ---------------------------------------------------------------------------

class UeState(Enum):
    DETACHED = "Detached"
    AUTHENTICATING = "Authenticating"
    ATTACHED = "Attached"
    CONNECTED = "Connected"


@dataclass(frozen=True)
class Bearer:
    id: int
    ue: NodeId
    qos_class: str
    anchor_sgw: NodeId
    pgw: NodeId


@dataclass
class Attachment:
    wap: str
    access_type: str
    secure: bool
    method: str
    session_key: Optional[bytes] = field(default=None, repr=False)


def interface_slot(access_type: str) -> str:
    """Wi-Fi occupies the local slot; cellular, UAV and satellite share the wide-area slot."""
    return "wifi" if access_type == "wifi" else "wide-area"


@dataclass
class UeContext:
    ue: NodeId
    imsi: str
    state: UeState = UeState.DETACHED
    attachments: dict = field(default_factory=dict)  # WapId -> Attachment
    ip: Optional[str] = None
    bearers: list = field(default_factory=list)

    def check(self) -> None:
        if self.state in (UeState.ATTACHED, UeState.CONNECTED):
            assert self.ip is not None
        assert bool(self.attachments) == (self.state is not UeState.DETACHED) or \
            self.state is UeState.AUTHENTICATING
        slots = [interface_slot(a.access_type) for a in self.attachments.values()]
        assert len(slots) == len(set(slots))

    def slot_taken(self, access_type: str) -> Optional[str]:
        slot = interface_slot(access_type)
        for wap, att in self.attachments.items():
            if interface_slot(att.access_type) == slot:
                return wap
        return None


class IpPool:
    """Lowest-free allocation from a subnet; the first host address is the gateway."""

    def __init__(self, network: str = "10.0.0.0/24"):
        self.network = ipaddress.ip_network(network)
        hosts = list(self.network.hosts())
        self.gateway = hosts[0]
        self._free = hosts[1:]
        self.live: dict[str, str] = {}  # address -> owner

    def allocate(self, owner: str) -> str:
        for addr in self._free:
            text = str(addr)
            if text not in self.live:
                self.live[text] = owner
                return text
        raise PoolExhausted(str(self.network))

    def release(self, address: str) -> None:
        self.live.pop(address, None)

    def owner(self, address: str) -> Optional[str]:
        return self.live.get(address)


# ---------------------------------------------------------------------------
# policy and charging
# ---------------------------------------------------------------------------

class Action(Enum):
    FORWARD = "Forward"
    DROP = "Drop"


@dataclass(frozen=True)
class FlowDescriptor:
    flow_id: str
    imsi: str
    src: str = "internet"
    dst: str = "*"
    service_class: Optional[str] = None
    requested_bitrate: Optional[float] = None
    dst_port: Optional[int] = None


@dataclass(frozen=True)
class FlowPattern:
    src: Optional[str] = None
    dst: Optional[str] = None
    service_class: Optional[str] = None

    def matches(self, flow: FlowDescriptor, service_class: str) -> bool:
        return ((self.src is None or self.src == flow.src)
                and (self.dst is None or self.dst == flow.dst)
                and (self.service_class is None or self.service_class == service_class))

    @property
    def specificity(self) -> int:
        return sum(x is not None for x in (self.src, self.dst, self.service_class))


@dataclass(frozen=True)
class PolicyRule:
    match: FlowPattern
    qos_class: str
    max_bitrate: Optional[float]
    charging_rate_id: str
    action: Action = Action.FORWARD


DEFAULT_RULE = PolicyRule(FlowPattern(), BEST_EFFORT, None, "BE")

DEFAULT_RULES = (
    PolicyRule(FlowPattern(service_class="voice"), "voice", None, "VOICE"),
    PolicyRule(FlowPattern(service_class="video"), "video", None, "VIDEO"),
    PolicyRule(FlowPattern(service_class="data"), "data", None, "DATA"),
)

# port heuristics for descriptors that carry no explicit class
_PORT_CLASSES = {5060: "voice", 5061: "voice", 554: "video", 1935: "video"}


def classify(flow: FlowDescriptor) -> str:
    """Deterministic DPI stand-in: pattern match on the descriptor, never the payload."""
    if flow.service_class is not None:
        return flow.service_class
    return _PORT_CLASSES.get(flow.dst_port, "data")


class Pcrf:
    """Policy decision point; keeps its own copy of subscription data."""

    def __init__(self, rules=DEFAULT_RULES):
        self.rules: list[PolicyRule] = list(rules)
        self.subscriptions: dict[str, SubscriberProfile] = {}

    def provision(self, profile: SubscriberProfile) -> None:
        self.subscriptions[profile.imsi] = profile

    def add_rule(self, rule: PolicyRule) -> None:
        self.rules.append(rule)

    def select_rule(self, flow: FlowDescriptor) -> PolicyRule:
        service_class = classify(flow)
        best = None
        for rule in self.rules:
            # longest match wins; earlier rules win ties
            if rule.match.matches(flow, service_class) and (
                    best is None or rule.match.specificity > best.match.specificity):
                best = rule
        return best or DEFAULT_RULE

    def authorize(self, flow: FlowDescriptor,
                  profile: Optional[SubscriberProfile] = None) -> PolicyRule:
        if profile is None:
            profile = self.subscriptions.get(flow.imsi)
            if profile is None:
                raise SubscriberUnknown(flow.imsi)
        rule = self.select_rule(flow)
        if rule.qos_class not in profile.qos.service_classes and rule is not DEFAULT_RULE:
            rule = DEFAULT_RULE
        cap = profile.qos.max_bitrate
        for limit in (rule.max_bitrate, flow.requested_bitrate):
            if limit is not None:
                cap = min(cap, limit)
        return replace(rule, max_bitrate=cap)


class Breakout(Enum):
    CORE = "Core"
    LOCAL = "Local"


@dataclass(frozen=True)
class ChargingRecord:
    record_id: int
    imsi: str
    flow_id: str
    start: SimTime
    end: SimTime
    bytes_up: int
    bytes_down: int
    charging_rate_id: str
    breakout: Breakout

    def to_line(self) -> str:
        return ",".join(str(x) for x in (
            self.record_id, self.imsi, self.flow_id, self.start, self.end,
            self.bytes_up, self.bytes_down, self.charging_rate_id, self.breakout.value))

    @classmethod
    def from_line(cls, line: str) -> "ChargingRecord":
        rid, imsi, flow, start, end, up, down, rate, brk = line.strip().split(",")
        return cls(int(rid), imsi, flow, int(start), int(end), int(up), int(down), rate,
                   Breakout(brk))


class CdrLog:
    """Run-wide charging log shared by the PGW and all local gateways."""

    def __init__(self):
        self.records: list[ChargingRecord] = []

    def append(self, **kwargs) -> ChargingRecord:
        record = ChargingRecord(record_id=len(self.records) + 1, **kwargs)
        self.records.append(record)
        return record

    def lines(self) -> list[str]:
        return [r.to_line() for r in self.records]

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def total_bytes(self) -> int:
        return sum(r.bytes_up + r.bytes_down for r in self.records)


@dataclass
class FlowCounters:
    flow_id: str
    imsi: str
    rule: PolicyRule
    breakout: Breakout
    start: SimTime
    bytes_up: int = 0
    bytes_down: int = 0
    window_index: int = -1
    window_bytes: int = 0
    reported_up: int = 0
    reported_down: int = 0
    report_start: SimTime = 0
    closed: bool = False


class Pcef:
    """
    Enforcement point: per-flow byte accounting per reporting window.

    A flow never forwards more than ``granted_bitrate * window`` bytes in
    any one window; excess packets are dropped without touching counters.
    """

    def __init__(self, cdr_log: CdrLog, breakout: Breakout, window_us: int = 100_000):
        self.cdr_log = cdr_log
        self.breakout = breakout
        self.window_us = window_us
        self.flows: dict[str, FlowCounters] = {}
        self.forwarded_by_imsi: dict[str, int] = {}

    def install(self, flow_id: str, imsi: str, rule: PolicyRule, now: SimTime) -> FlowCounters:
        counters = FlowCounters(flow_id, imsi, rule, self.breakout, now, report_start=now)
        self.flows[flow_id] = counters
        return counters

    def enforce(self, flow_id: str, size: int, downlink: bool, now: SimTime) -> Action:
        c = self.flows[flow_id]
        if c.closed or c.rule.action is Action.DROP:
            return Action.DROP
        if c.rule.max_bitrate is not None:
            index = now // self.window_us
            if index != c.window_index:
                c.window_index, c.window_bytes = index, 0
            quota = c.rule.max_bitrate * self.window_us / 8e6
            if c.window_bytes + size > quota:
                return Action.DROP
            c.window_bytes += size
        if downlink:
            c.bytes_down += size
        else:
            c.bytes_up += size
        self.forwarded_by_imsi[c.imsi] = self.forwarded_by_imsi.get(c.imsi, 0) + size
        return Action.FORWARD

    def generate_cdr(self, flow_id: str, now: SimTime, close: bool = True) -> ChargingRecord:
        """Emit the usage since the previous record; closing stops further accounting."""
        c = self.flows[flow_id]
        record = self.cdr_log.append(
            imsi=c.imsi, flow_id=flow_id, start=c.report_start, end=now,
            bytes_up=c.bytes_up - c.reported_up, bytes_down=c.bytes_down - c.reported_down,
            charging_rate_id=c.rule.charging_rate_id, breakout=c.breakout)
        c.reported_up, c.reported_down, c.report_start = c.bytes_up, c.bytes_down, now
        if close:
            c.closed = True
        return record

    def close_all(self, now: SimTime) -> list:
        return [self.generate_cdr(fid, now) for fid, c in self.flows.items() if not c.closed]


# ---------------------------------------------------------------------------
# control-plane messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttachRequest:
    proc: int
    ue: NodeId
    imsi: str
    wap: str
    access_type: str


@dataclass(frozen=True)
class AuthInfoRequest:
    proc: int
    imsi: str


@dataclass(frozen=True)
class AuthInfoAnswer:
    proc: int
    imsi: str
    profile: Optional[SubscriberProfile]
    nonce: Optional[bytes]


@dataclass(frozen=True)
class EapSimChallenge:
    proc: int
    nonce: bytes


@dataclass(frozen=True)
class EapSimResponse:
    proc: int
    response: bytes


@dataclass(frozen=True)
class TtlsServerHello:
    proc: int
    certificate: object


@dataclass(frozen=True)
class TtlsAbort:
    proc: int
    reason: str


@dataclass(frozen=True)
class TtlsCredentials:
    """The only message that ever carries a password (inside the TLS tunnel)."""
    proc: int
    username: str
    password: str = field(repr=False)


@dataclass(frozen=True)
class CreateSessionRequest:
    proc: int
    imsi: str
    ue: NodeId
    wap: str


@dataclass(frozen=True)
class CreateSessionResponse:
    proc: int
    imsi: str
    ip: Optional[str]
    pgw: NodeId
    cause: str = "ok"


@dataclass(frozen=True)
class ModifyBearer:
    """MME -> SGW: the UE gained or lost a radio interface."""
    ue: NodeId
    add: Optional[str] = None
    remove: Optional[str] = None


@dataclass(frozen=True)
class PathSwitchRequest:
    ue: NodeId
    old_wap: str
    new_wap: str
    seq: int = 0  # per-UE handover counter


@dataclass(frozen=True)
class DeleteSession:
    ue: NodeId
    imsi: str
    ip: Optional[str]


@dataclass(frozen=True)
class VnfUtilization:
    kind: str
    instances: int
    utilization: float
    sent_at: SimTime


@dataclass(frozen=True)
class AttachAccept:
    proc: int
    wap: str
    ip: str
    method: str


@dataclass(frozen=True)
class AttachReject:
    proc: int
    wap: str
    reason: str


@dataclass(frozen=True)
class PcrfRequest:
    flow: FlowDescriptor
    reply_to: NodeId


@dataclass(frozen=True)
class PcrfAnswer:
    flow_id: str
    rule: Optional[PolicyRule]


@dataclass(frozen=True)
class ScaleCommand:
    kind: str
    target: int


CTRL_BITS = 8 * 200  # nominal size of a signalling message


# ---------------------------------------------------------------------------
# nodes
# ---------------------------------------------------------------------------

class WorkerPool:
    """
    Instances of one VNF kind. Work items are dispatched round-robin and
    processed one at a time per instance; retired instances hand their
    backlog to the survivors so nothing is lost across a scale event.
    """

    def __init__(self, engine: Engine, node: NodeId, kind: str, service_time: int,
                 process: Callable[[object], None], instances: int = 1):
        self.engine = engine
        self.node = node
        self.kind = kind
        self.service_time = service_time
        self.process = process
        self.queues: list[deque] = [deque() for _ in range(instances)]
        self.busy: list[bool] = [False] * instances
        self._started: list[int] = [0] * instances
        self.retiring: set = set()
        self.busy_us = 0  # busy time inside the current utilization window
        self._window_start = engine.now
        self._rr = 0
        self.accepted = 0
        self.completed = 0

    @property
    def instances(self) -> int:
        return len(self.queues) - len(self.retiring)

    def _active(self) -> list[int]:
        return [i for i in range(len(self.queues)) if i not in self.retiring]

    def submit(self, item) -> None:
        self.accepted += 1
        self._enqueue(item)

    def _enqueue(self, item) -> None:
        active = self._active()
        idx = active[self._rr % len(active)]
        self._rr += 1
        self.queues[idx].append(item)
        self._kick(idx)

    def _kick(self, idx: int) -> None:
        if not self.busy[idx] and self.queues[idx]:
            self.busy[idx] = True
            self._started[idx] = self.engine.now
            self.engine.schedule_after(self.service_time, self.node, ("work-done", self.kind, idx))

    def on_done(self, idx: int) -> None:
        item = self.queues[idx].popleft()
        self.busy[idx] = False
        self.busy_us += self.engine.now - max(self._started[idx], self._window_start)
        self.completed += 1
        self.process(item)
        if idx in self.retiring:
            backlog = list(self.queues[idx])
            self.queues[idx].clear()
            for queued in backlog:
                self.engine.annotate("requeue", self.node, self.kind, idx)
                self._enqueue(queued)
            self._drop_retired()
        else:
            self._kick(idx)

    def _drop_retired(self) -> None:
        while len(self.queues) > 1 and (len(self.queues) - 1) in self.retiring \
                and not self.busy[-1] and not self.queues[-1]:
            self.retiring.discard(len(self.queues) - 1)
            self.queues.pop()
            self.busy.pop()
            self._started.pop()

    def scale_to(self, target: int) -> None:
        target = max(1, target)
        while self.instances < target:
            if self.retiring:
                self.retiring.discard(min(self.retiring))
            else:
                self.queues.append(deque())
                self.busy.append(False)
                self._started.append(0)
        while self.instances > target:
            idx = max(self._active())
            self.retiring.add(idx)
            if not self.busy[idx]:
                backlog = list(self.queues[idx])
                self.queues[idx].clear()
                for queued in backlog:
                    self.engine.annotate("requeue", self.node, self.kind, idx)
                    self._enqueue(queued)
        self._drop_retired()
        self.engine.annotate("scale", self.node, self.kind, self.instances)

    def take_utilization(self, window_us: int) -> float:
        now = self.engine.now
        used = self.busy_us + sum(now - max(self._started[i], self._window_start)
                                  for i, busy in enumerate(self.busy) if busy)
        self.busy_us = 0
        self._window_start = now
        return min(1.0, used / (window_us * max(1, self.instances)))


class HssNode:
    def __init__(self, engine: Engine, hss: Hss, node: NodeId = "hss"):
        self.engine, self.hss, self.node = engine, hss, node

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, AuthInfoRequest):
            try:
                profile, nonce = self.hss.lookup(msg.imsi)
            except SubscriberUnknown:
                profile, nonce = None, None
            self.engine.send(self.node, event.src, AuthInfoAnswer(msg.proc, msg.imsi, profile,
                                                                  nonce), CTRL_BITS)


class PcrfNode:
    def __init__(self, engine: Engine, pcrf: Pcrf, node: NodeId = "pcrf"):
        self.engine, self.pcrf, self.node = engine, pcrf, node

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, PcrfRequest):
            try:
                rule = self.pcrf.authorize(msg.flow)
            except SubscriberUnknown:
                rule = None
            self.engine.send(self.node, msg.reply_to, PcrfAnswer(msg.flow.flow_id, rule),
                             CTRL_BITS)


@dataclass
class _AttachProc:
    request: AttachRequest
    profile: Optional[SubscriberProfile] = None
    nonce: Optional[bytes] = None
    method: str = ""
    route: list = field(default_factory=list)


class MmeNode:
    """
    Attach, authentication and session tracking. Signalling is processed by
    a worker pool so the orchestrator can scale the MME out and in.
    """

    def __init__(self, engine: Engine, node: NodeId = "mme", hss: NodeId = "hss",
                 sgw: NodeId = "sgw", service_time: int = 500,
                 certificate: object = None,
                 route_to_ue: Optional[Callable[[NodeId, str, NodeId], list]] = None,
                 report_to: Optional[NodeId] = None, report_interval: Optional[int] = None):
        self.engine = engine
        self.node = node
        self.hss = hss
        self.sgw = sgw
        self.certificate = certificate
        self.route_to_ue = route_to_ue
        self.contexts: dict[str, UeContext] = {}
        self.procs: dict[int, _AttachProc] = {}
        self.pool = WorkerPool(engine, node, "MME", service_time, self._process)
        self.auth_success = 0
        self.auth_failure = 0
        self.outcomes: dict[int, str] = {}
        self._creating: dict[str, list] = {}  # IMSI -> procs waiting on a session create
        self.report_to = report_to
        self.report_interval = report_interval
        if report_to and report_interval:
            engine.schedule_after(report_interval, node, ("report",))

    def context_of_ue(self, ue: NodeId) -> Optional[UeContext]:
        for ctx in self.contexts.values():
            if ctx.ue == ue:
                return ctx
        return None

    def on_event(self, event: Event) -> None:
        payload = event.payload
        if isinstance(payload, tuple) and payload and payload[0] == "work-done":
            self.pool.on_done(payload[2])
        elif isinstance(payload, ScaleCommand):
            self.pool.scale_to(payload.target)
        elif payload == ("report",):
            util = self.pool.take_utilization(self.report_interval)
            if self.engine.has_node(self.report_to):
                self.engine.send(self.node, self.report_to,
                                 VnfUtilization("MME", self.pool.instances, util,
                                                self.engine.now), CTRL_BITS)
            self.engine.schedule_after(self.report_interval, self.node, ("report",))
        elif event.kind == "deliver":
            self.pool.submit((event.src, payload))

    def _send_ue(self, proc: _AttachProc, msg) -> None:
        req = proc.request
        path = self.route_to_ue(self.node, req.wap, req.ue) if self.route_to_ue else None
        self.engine.send(self.node, req.ue, msg, CTRL_BITS, path=path)

    def _process(self, item) -> None:
        src, msg = item
        if isinstance(msg, AttachRequest):
            self._on_attach_request(msg)
        elif isinstance(msg, AuthInfoAnswer):
            self._on_auth_info(msg)
        elif isinstance(msg, EapSimResponse):
            self._on_sim_response(msg)
        elif isinstance(msg, TtlsAbort):
            self._fail(msg.proc, f"CertificateInvalid: {msg.reason}")
        elif isinstance(msg, TtlsCredentials):
            self._on_ttls_credentials(msg)
        elif isinstance(msg, CreateSessionResponse):
            self._on_session(msg)

    def _on_attach_request(self, req: AttachRequest) -> None:
        self.engine.annotate("attach-request", self.node, req.proc, req.ue, req.wap)
        ctx = self.contexts.get(req.imsi)
        if ctx is None:
            ctx = self.contexts[req.imsi] = UeContext(req.ue, req.imsi)
        if ctx.state is UeState.DETACHED:
            ctx.state = UeState.AUTHENTICATING
            self.engine.annotate("ue-state", self.node, req.ue, ctx.state)
        self.procs[req.proc] = _AttachProc(req)
        self.engine.send(self.node, self.hss, AuthInfoRequest(req.proc, req.imsi), CTRL_BITS)

    def _on_auth_info(self, ans: AuthInfoAnswer) -> None:
        proc = self.procs.get(ans.proc)
        if proc is None:
            return
        if ans.profile is None:
            self._fail(ans.proc, "SubscriberUnknown")
            return
        proc.profile, proc.nonce = ans.profile, ans.nonce
        try:
            proc.method = select_eap_method(ans.profile, proc.request.access_type)
        except MethodUnavailable as exc:
            self._fail(ans.proc, f"MethodUnavailable: {exc}")
            return
        if proc.method == "EAP-SIM":
            self._send_ue(proc, EapSimChallenge(ans.proc, ans.nonce))
        else:
            self._send_ue(proc, TtlsServerHello(ans.proc, self.certificate))

    def _on_sim_response(self, msg: EapSimResponse) -> None:
        proc = self.procs.get(msg.proc)
        if proc is None:
            return
        expected = keyed_digest(proc.profile.shared_key, proc.nonce)
        if msg.response != expected:
            self._fail(msg.proc, "AuthenticationFailed")
            return
        self.auth_success += 1
        self.engine.annotate("auth-success", self.node, msg.proc, proc.request.ue,
                             proc.request.imsi, "EAP-SIM", proc.nonce, msg.response)
        self._authenticated(proc, session_key(proc.profile.shared_key, proc.nonce))

    def _on_ttls_credentials(self, msg: TtlsCredentials) -> None:
        proc = self.procs.get(msg.proc)
        if proc is None:
            return
        if (msg.username, msg.password) != tuple(proc.profile.password_credential):
            self._fail(msg.proc, "AuthenticationFailed")
            return
        self.auth_success += 1
        self.engine.annotate("auth-success", self.node, msg.proc, proc.request.ue,
                             proc.request.imsi, "EAP-TTLS")
        self._authenticated(proc, None)

    def _authenticated(self, proc: _AttachProc, key: Optional[bytes]) -> None:
        req = proc.request
        ctx = self.contexts[req.imsi]
        ctx.attachments[req.wap] = Attachment(req.wap, req.access_type, True, proc.method, key)
        if req.imsi in self._creating:
            # a parallel attach on the other interface is already building the session
            self._creating[req.imsi].append(proc)
        elif ctx.ip is None:
            self._creating[req.imsi] = []
            self.engine.send(self.node, self.sgw,
                             CreateSessionRequest(req.proc, req.imsi, req.ue, req.wap), CTRL_BITS)
        else:
            self.engine.send(self.node, self.sgw, ModifyBearer(req.ue, add=req.wap), CTRL_BITS)
            self._accept(proc)

    def _on_session(self, msg: CreateSessionResponse) -> None:
        proc = self.procs.get(msg.proc)
        if proc is None:
            return
        ctx = self.contexts[msg.imsi]
        waiting = self._creating.pop(msg.imsi, [])
        if msg.ip is None:
            for other in [proc] + waiting:
                ctx.attachments.pop(other.request.wap, None)
                self._fail(other.request.proc, f"{msg.cause}: no address available")
            return
        ctx.ip = msg.ip
        bearer = Bearer(len(ctx.bearers) + 1, ctx.ue, "default", self.sgw, msg.pgw)
        ctx.bearers.append(bearer)
        self.engine.annotate("bearer", self.node, ctx.ue, bearer)
        self._accept(proc)
        for other in waiting:
            self.engine.send(self.node, self.sgw, ModifyBearer(ctx.ue, add=other.request.wap),
                             CTRL_BITS)
            self._accept(other)

    def _accept(self, proc: _AttachProc) -> None:
        req = proc.request
        ctx = self.contexts[req.imsi]
        if ctx.state in (UeState.DETACHED, UeState.AUTHENTICATING):
            ctx.state = UeState.ATTACHED
        self.engine.annotate("attached", self.node, req.proc, req.ue, req.wap, ctx.ip, ctx.state)
        self.outcomes[req.proc] = "ok"
        del self.procs[req.proc]
        self._send_ue(proc, AttachAccept(req.proc, req.wap, ctx.ip, proc.method))

    def _fail(self, proc_id: int, reason: str) -> None:
        proc = self.procs.pop(proc_id, None)
        if proc is None:
            return
        if reason.startswith("AuthenticationFailed"):
            self.auth_failure += 1
        req = proc.request
        ctx = self.contexts.get(req.imsi)
        if ctx is not None:
            if not ctx.attachments and ctx.state is UeState.AUTHENTICATING:
                ctx.state = UeState.DETACHED
                ctx.ip = None
        self.engine.annotate("attach-failed", self.node, proc_id, req.ue, req.wap, reason)
        self.outcomes[proc_id] = reason
        self._send_ue(proc, AttachReject(proc_id, req.wap, reason))

    # radio-level events reported by the access network
    def detach_interface(self, ue: NodeId, wap: str) -> None:
        ctx = self.context_of_ue(ue)
        if ctx is None or wap not in ctx.attachments:
            return
        del ctx.attachments[wap]
        self.engine.send(self.node, self.sgw, ModifyBearer(ue, remove=wap), CTRL_BITS)
        self.engine.annotate("detach-interface", self.node, ue, wap)
        if not ctx.attachments:
            self.engine.send(self.node, self.sgw, DeleteSession(ue, ctx.imsi, ctx.ip), CTRL_BITS)
            ctx.state, ctx.ip, ctx.bearers = UeState.DETACHED, None, []
            self.engine.annotate("ue-state", self.node, ue, ctx.state)

    def set_connected(self, ue: NodeId, connected: bool) -> None:
        ctx = self.context_of_ue(ue)
        if ctx is None or ctx.state not in (UeState.ATTACHED, UeState.CONNECTED):
            return
        new = UeState.CONNECTED if connected else UeState.ATTACHED
        if new is not ctx.state:
            ctx.state = new
            self.engine.annotate("ue-state", self.node, ue, new)

    def move_interface(self, ue: NodeId, old: str, new: str, access_type: str,
                       seq: int = 0) -> None:
        ctx = self.context_of_ue(ue)
        att = ctx.attachments.pop(old)
        ctx.attachments[new] = Attachment(new, access_type, att.secure, att.method,
                                          att.session_key)
        self.engine.send(self.node, self.sgw, PathSwitchRequest(ue, old, new, seq), CTRL_BITS)


def select_eap_method(profile: SubscriberProfile, access_type: str) -> str:
    """EAP-SIM whenever a SIM credential exists (mandatory for non-Wi-Fi access)."""
    if profile.shared_key is not None:
        return "EAP-SIM"
    if access_type == "wifi" and profile.password_credential is not None:
        return "EAP-TTLS"
    raise MethodUnavailable(f"no usable credential for {access_type} access")


def verify_sim_response(profile: SubscriberProfile, nonce: bytes, response: bytes) -> bytes:
    """Return the derived session key or raise AuthenticationFailed."""
    if profile.shared_key is None:
        raise MethodUnavailable("profile has no SIM credential")
    if keyed_digest(profile.shared_key, nonce) != response:
        raise AuthenticationFailed(profile.imsi)
    return session_key(profile.shared_key, nonce)


# ---------------------------------------------------------------------------
# user-plane gateways
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BindFlow:
    binding: str
    ue: NodeId
    wap: str


@dataclass(frozen=True)
class FlowEnd:
    flow_id: str


@dataclass
class _Session:
    imsi: str
    waps: list
    ip: Optional[str] = None


class SgwNode:
    """Mobility anchor: per-flow downlink binding to a WAP, switched on handover."""

    def __init__(self, engine: Engine, node: NodeId = "sgw", pgw: NodeId = "pgw"):
        self.engine = engine
        self.node = node
        self.pgw = pgw
        self.sessions: dict[NodeId, _Session] = {}
        self.bindings: dict[str, tuple] = {}  # binding -> (ue, wap)
        self.buffers: dict[str, list] = {}
        self.switch_seq: dict[NodeId, int] = {}  # latest path switch applied per UE
        self._creates: dict[int, NodeId] = {}
        self.unroutable = 0

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, Packet):
            msg.record(event.path)
            if msg.downlink:
                self._downlink(msg, event.src)
            else:
                self.engine.send(self.node, self.pgw, msg, msg.size * 8)
        elif isinstance(msg, CreateSessionRequest):
            self.sessions[msg.ue] = _Session(msg.imsi, [msg.wap])
            self._creates[msg.proc] = event.src
            self.engine.send(self.node, self.pgw, msg, CTRL_BITS)
        elif isinstance(msg, CreateSessionResponse):
            session = next((s for s in self.sessions.values() if s.imsi == msg.imsi), None)
            if session is not None:
                session.ip = msg.ip
            mme = self._creates.pop(msg.proc, None)
            if mme is not None:
                self.engine.send(self.node, mme, msg, CTRL_BITS)
        elif isinstance(msg, ModifyBearer):
            self._modify(msg)
        elif isinstance(msg, PathSwitchRequest):
            self._path_switch(msg)
        elif isinstance(msg, DeleteSession):
            self.sessions.pop(msg.ue, None)
            self.engine.send(self.node, self.pgw, msg, CTRL_BITS)
        elif isinstance(msg, BindFlow):
            self.bindings[msg.binding] = (msg.ue, msg.wap)
            self.engine.annotate("bind", self.node, msg.binding, msg.wap)
            self._flush(msg.binding)

    def serving_wap(self, binding: str, ue: NodeId) -> Optional[str]:
        bound = self.bindings.get(binding)
        session = self.sessions.get(ue)
        if session is None:
            return None
        if bound is not None and bound[1] in session.waps:
            return bound[1]
        return session.waps[0] if session.waps else None

    def _downlink(self, pkt, src: NodeId) -> None:
        target = self.serving_wap(pkt.binding, pkt.ue)
        if pkt.forwarded and (target is None
                              or self.switch_seq.get(pkt.ue, 0) < pkt.switch_seq):
            # the radio side moved before the path switch reached us
            self.buffers.setdefault(pkt.binding, []).append(pkt)
            self.engine.annotate("buffer", self.node, pkt.flow_id, pkt.seq)
            return
        if target is None:
            self.buffers.setdefault(pkt.binding, []).append(pkt)
            self.unroutable += 1
            return
        pkt.forwarded = False
        self.engine.send(self.node, target, pkt, pkt.size * 8)

    def _flush(self, binding: str) -> None:
        # packets still waiting on a later path switch simply re-buffer
        for pkt in self.buffers.pop(binding, []):
            self._downlink(pkt, self.node)

    def _flush_ue(self, ue: NodeId) -> None:
        for binding in [b for b, pkts in self.buffers.items() if pkts and pkts[0].ue == ue]:
            self._flush(binding)

    def _modify(self, msg: ModifyBearer) -> None:
        session = self.sessions.get(msg.ue)
        if session is None:
            return
        if msg.add and msg.add not in session.waps:
            session.waps.append(msg.add)
        if msg.remove and msg.remove in session.waps:
            session.waps.remove(msg.remove)
        self._flush_ue(msg.ue)

    def _path_switch(self, msg: PathSwitchRequest) -> None:
        session = self.sessions.get(msg.ue)
        if session is None:
            return
        self.switch_seq[msg.ue] = max(self.switch_seq.get(msg.ue, 0), msg.seq)
        session.waps = [msg.new_wap if w == msg.old_wap else w for w in session.waps]
        if msg.new_wap not in session.waps:
            session.waps.append(msg.new_wap)
        for binding, (ue, wap) in list(self.bindings.items()):
            if ue == msg.ue and wap == msg.old_wap:
                self.bindings[binding] = (ue, msg.new_wap)
        self.engine.annotate("path-switch", self.node, msg.ue, msg.old_wap, msg.new_wap)
        self._flush_ue(msg.ue)


class PgwNode:
    """IP allocation, policy enforcement (lazy PCRF authorization) and core charging."""

    def __init__(self, engine: Engine, cdr_log: CdrLog, node: NodeId = "pgw",
                 sgw: NodeId = "sgw", pcrf: NodeId = "pcrf", internet: NodeId = "inet",
                 pool: str = "10.0.0.0/24", window_us: int = 100_000,
                 cdr_interval: Optional[int] = None):
        self.engine = engine
        self.node = node
        self.sgw = sgw
        self.pcrf = pcrf
        self.internet = internet
        self.pool = IpPool(pool)
        self.pcef = Pcef(cdr_log, Breakout.CORE, window_us)
        self.pending: dict[str, list] = {}
        self._closing: set = set()
        self.policed: dict[str, int] = {}
        self.cdr_interval = cdr_interval
        if cdr_interval:
            engine.schedule_after(cdr_interval, node, ("cdr-tick",))

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, Packet):
            msg.record(event.path)
            self._packet(msg)
        elif isinstance(msg, CreateSessionRequest):
            try:
                ip, cause = self.pool.allocate(msg.imsi), "ok"
                self.engine.annotate("ip-allocated", self.node, msg.ue, ip)
            except PoolExhausted:
                ip, cause = None, "PoolExhausted"
            self.engine.send(self.node, event.src,
                             CreateSessionResponse(msg.proc, msg.imsi, ip, self.node, cause),
                             CTRL_BITS)
        elif isinstance(msg, PcrfAnswer):
            self._authorized(msg)
        elif isinstance(msg, DeleteSession):
            if msg.ip:
                self.pool.release(msg.ip)
                self.engine.annotate("ip-released", self.node, msg.ue, msg.ip)
        elif isinstance(msg, FlowEnd):
            if msg.flow_id in self.pending:
                self._closing.add(msg.flow_id)
            elif msg.flow_id in self.pcef.flows and not self.pcef.flows[msg.flow_id].closed:
                self.pcef.generate_cdr(msg.flow_id, self.engine.now)
        elif msg == ("cdr-tick",):
            for fid, c in self.pcef.flows.items():
                if not c.closed:
                    self.pcef.generate_cdr(fid, self.engine.now, close=False)
            self.engine.schedule_after(self.cdr_interval, self.node, ("cdr-tick",))

    def _packet(self, pkt) -> None:
        if pkt.flow_id not in self.pcef.flows:
            queue = self.pending.get(pkt.flow_id)
            if queue is None:
                self.pending[pkt.flow_id] = [pkt]
                descriptor = FlowDescriptor(pkt.flow_id, pkt.imsi, service_class=pkt.service_class)
                self.engine.send(self.node, self.pcrf, PcrfRequest(descriptor, self.node),
                                 CTRL_BITS)
            else:
                queue.append(pkt)
            return
        action = self.pcef.enforce(pkt.flow_id, pkt.size, pkt.downlink, self.engine.now)
        if action is Action.DROP:
            self.policed[pkt.flow_id] = self.policed.get(pkt.flow_id, 0) + 1
            self.engine.annotate("pcef-drop", self.node, pkt.flow_id, pkt.seq)
            return
        self.engine.annotate("fwd", self.node, pkt.imsi, pkt.flow_id, pkt.size)
        if pkt.downlink:
            self.engine.send(self.node, self.sgw, pkt, pkt.size * 8)
        else:
            self.engine.send(self.node, self.internet, pkt, pkt.size * 8)

    def _authorized(self, ans: PcrfAnswer) -> None:
        queue = self.pending.pop(ans.flow_id, [])
        if not queue:
            return
        rule = ans.rule or replace(DEFAULT_RULE, action=Action.DROP)
        self.pcef.install(ans.flow_id, queue[0].imsi, rule, self.engine.now)
        self.engine.annotate("rule-installed", self.node, ans.flow_id, rule)
        for pkt in queue:
            self._packet(pkt)
        if ans.flow_id in self._closing:
            self._closing.discard(ans.flow_id)
            self.pcef.generate_cdr(ans.flow_id, self.engine.now)

    def close_all(self) -> list:
        return self.pcef.close_all(self.engine.now)


class CombinedGatewayNode:
    """SGW and PGW in a single box; role chosen by message type and origin."""

    def __init__(self, sgw: SgwNode, pgw: PgwNode):
        self.sgw, self.pgw = sgw, pgw
        self.node = sgw.node

    def on_event(self, event: Event) -> None:
        msg = event.payload
        own = event.src == self.node
        if isinstance(msg, Packet):
            if msg.downlink:
                role = self.sgw if own or msg.forwarded or event.src != self.pgw.internet \
                    else self.pgw
            else:
                role = self.pgw if own else self.sgw
            role.on_event(event)
        elif isinstance(msg, (CreateSessionRequest, DeleteSession)):
            (self.pgw if own else self.sgw).on_event(event)
        elif isinstance(msg, (PcrfAnswer, FlowEnd)) or msg == ("cdr-tick",):
            self.pgw.on_event(event)
        else:
            self.sgw.on_event(event)
