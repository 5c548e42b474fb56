"""
Centralized controller for the coreless network.

Builds a global view from WAP and VNF reports, assigns UEs to WAPs with a
max-min residual-capacity objective, pushes versioned scheduler policies
and comm-core configurations southbound, and scales VNF pools.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional

from .engine import Engine, Event, NodeId, SimTime
from .errors import Infeasible, InvalidCoreSet, NotCompleted, StaleVersion, Timeout, WapBusy
from .epc import CTRL_BITS, ScaleCommand
from .epc import VnfUtilization as VnfReport


# ---------------------------------------------------------------------------
# global view
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WapReport:
    wap: str
    load: float
    capacity: float
    attached_ues: int
    sent_at: SimTime


@dataclass(frozen=True)
class WapEntry:
    wap: str
    load: float
    capacity: float
    attached_ues: int
    age: int
    stale: bool

    @property
    def residual(self) -> float:
        return self.capacity - self.load


@dataclass(frozen=True)
class VnfEntry:
    kind: str
    instances: int
    utilization: float


@dataclass(frozen=True)
class GlobalView:
    snapshot_time: SimTime
    waps: tuple = ()  # WapEntry, sorted by id
    vnfs: tuple = ()  # VnfEntry, sorted by kind

    def entry(self, wap: str) -> Optional[WapEntry]:
        for e in self.waps:
            if e.wap == wap:
                return e
        return None

    def fresh(self) -> list:
        return [e for e in self.waps if not e.stale]

    def rows(self) -> list:
        """Metrics-report rows: (group, entity, metric, value)."""
        out = []
        for e in self.waps:
            for metric in ("load", "capacity", "attached_ues", "age", "stale"):
                out.append(("view", e.wap, metric, getattr(e, metric)))
        for v in self.vnfs:
            out.append(("view", v.kind, "instances", v.instances))
            out.append(("view", v.kind, "utilization", v.utilization))
        return out


def collect_view(reports: Iterable, snapshot_time: SimTime, max_age: int,
                 vnf_reports: Iterable = ()) -> GlobalView:
    latest: dict[str, WapReport] = {}
    for r in reports:
        if r.wap not in latest or r.sent_at >= latest[r.wap].sent_at:
            latest[r.wap] = r
    entries = []
    for wap in sorted(latest):
        r = latest[wap]
        age = max(0, snapshot_time - r.sent_at)
        entries.append(WapEntry(wap, r.load, r.capacity, r.attached_ues, age, age > max_age))
    vnfs = {}
    for v in vnf_reports:
        if v.kind not in vnfs or v.sent_at >= vnfs[v.kind].sent_at:
            vnfs[v.kind] = v
    return GlobalView(snapshot_time, tuple(entries),
                      tuple(VnfEntry(k, vnfs[k].instances, vnfs[k].utilization)
                            for k in sorted(vnfs)))


# ---------------------------------------------------------------------------
# radio resource management
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UeDemand:
    ue: str
    demand: float
    reachable: tuple  # WapIds


def max_min_objective(assignment: Mapping[str, str], ues: Iterable[UeDemand],
                      residual: Mapping[str, float]) -> float:
    left = dict(residual)
    for u in ues:
        left[assignment[u.ue]] -= u.demand
    return min(left.values())


def rrm_assign(ues: Iterable[UeDemand], view: GlobalView) -> dict:
    """
    Assign each UE to one reachable, non-stale WAP maximizing the minimum
    residual capacity over all fresh WAPs. Exact branch and bound; among
    optimal assignments the lexicographically smallest (UE id, then WapId)
    is returned.
    """
    ues = sorted(ues, key=lambda u: u.ue)
    residual = {e.wap: e.residual for e in view.fresh()}
    if not ues:
        return {}
    options = []
    for u in ues:
        reach = sorted(w for w in u.reachable if w in residual)
        if not reach:
            raise Infeasible(f"{u.ue} reaches no fresh WAP")
        if all(u.demand > residual[w] for w in reach):
            raise Infeasible(f"{u.ue} demand {u.demand} exceeds every reachable residual")
        options.append(reach)

    n = len(ues)
    suffix_demand = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_demand[i] = suffix_demand[i + 1] + ues[i].demand
    n_waps = len(residual)
    best_value = [float("-inf")]
    best_choice: list = [None]
    choice = [None] * n
    left = dict(residual)

    def search(i: int) -> None:
        current_min = min(left.values())
        # assignments only shrink residuals, and the mean bounds the minimum
        bound = min(current_min, (sum(left.values()) - suffix_demand[i]) / n_waps)
        if bound <= best_value[0]:
            return
        if i == n:
            best_value[0] = current_min
            best_choice[0] = list(choice)
            return
        u = ues[i]
        for w in options[i]:
            if left[w] < u.demand:
                continue
            left[w] -= u.demand
            choice[i] = w
            search(i + 1)
            left[w] += u.demand
        choice[i] = None

    search(0)
    if best_choice[0] is None:
        raise Infeasible("no assignment respects every WAP capacity")
    return {u.ue: w for u, w in zip(ues, best_choice[0])}


def greedy_local_assign(ues: Iterable[UeDemand], view: GlobalView) -> Optional[dict]:
    """
    Distributed baseline: every UE takes its first-listed reachable WAP that
    still fits it, with no knowledge of other cells. ``None`` when it gets stuck.
    """
    left = {e.wap: e.residual for e in view.fresh()}
    out = {}
    for u in sorted(ues, key=lambda u: u.ue):
        for w in u.reachable:
            if w in left and left[w] >= u.demand:
                left[w] -= u.demand
                out[u.ue] = w
                break
        else:
            return None
    return out


# ---------------------------------------------------------------------------
# WAP scheduling policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SodaPolicy:
    version: int
    scheduler_id: str = "RoundRobin"
    parameters: tuple = ()  # ((name, value), ...)
    phy_parameters: tuple = ()

    def param(self, name: str, default=None):
        return dict(self.parameters).get(name, default)


class WapScheduler:
    """Per-TTI downlink ordering of the UEs that have queued traffic."""

    def __init__(self):
        self._rr = 0
        self.avg: dict[str, float] = {}

    def order(self, policy: SodaPolicy, ues: list, quality: Mapping[str, float]) -> list:
        ues = sorted(ues)
        fn = SCHEDULERS[policy.scheduler_id]
        return fn(self, policy, ues, quality)

    def served(self, ue: str, nbytes: int, policy: SodaPolicy) -> None:
        alpha = float(policy.param("alpha", 0.1))
        for u in list(self.avg):
            self.avg[u] *= (1 - alpha)
        self.avg[ue] = self.avg.get(ue, 0.0) + alpha * nbytes


def _round_robin(state: WapScheduler, policy, ues, quality):
    if not ues:
        return []
    start = state._rr % len(ues)
    state._rr += 1
    return ues[start:] + ues[:start]


def _proportional_fair(state: WapScheduler, policy, ues, quality):
    def metric(u):
        return quality.get(u, 1.0) / (state.avg.get(u, 0.0) + 1.0)
    return sorted(ues, key=lambda u: (-metric(u), u))


SCHEDULERS: dict[str, Callable] = {
    "RoundRobin": _round_robin,
    "ProportionalFair": _proportional_fair,
}


def register_scheduler(name: str, fn: Callable) -> None:
    SCHEDULERS[name] = fn


def validate_core_set(active: Iterable[int], total: int) -> tuple:
    cores = tuple(sorted(set(active)))
    if any(not isinstance(c, int) or c < 0 or c >= total for c in cores):
        raise InvalidCoreSet(f"{list(active)} not within 0..{total - 1}")
    return cores


# ---------------------------------------------------------------------------
# southbound / northbound messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PushPolicy:
    cmd: int
    policy: SodaPolicy


@dataclass(frozen=True)
class ConfigureCommCores:
    cmd: int
    active: tuple


@dataclass(frozen=True)
class QueryState:
    cmd: int


@dataclass(frozen=True)
class CommandAck:
    cmd: int
    wap: str
    detail: str = ""


@dataclass(frozen=True)
class CommandNack:
    cmd: int
    wap: str
    reason: str


class CommandStatus(Enum):
    PENDING = "pending"
    ACKED = "acked"
    REJECTED = "rejected"
    TIMED_OUT = "timed-out"


@dataclass
class Command:
    cmd: int
    wap: str
    request: object
    status: CommandStatus = CommandStatus.PENDING
    error: Optional[Exception] = None

    def result(self) -> "Command":
        if self.status is CommandStatus.PENDING:
            raise NotCompleted(f"command {self.cmd}")
        if self.error is not None:
            raise self.error
        return self


@dataclass(frozen=True)
class GetView:
    pass


@dataclass(frozen=True)
class InstallAppPolicy:
    """Northbound: applications adjust offload / IFOM behaviour."""
    offload_classes: Optional[tuple] = None
    ifom_preferences: Optional[tuple] = None


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

class ScaleAction(Enum):
    SCALE_UP = "ScaleUp"
    SCALE_DOWN = "ScaleDown"


@dataclass(frozen=True)
class PlanAction:
    vnf_kind: str
    action: ScaleAction
    target_count: int


@dataclass(frozen=True)
class OrchestrationPlan:
    actions: tuple = ()


def orchestrate_vnfs(view: GlobalView, scale_up: float = 0.8,
                     scale_down: float = 0.2) -> OrchestrationPlan:
    if not scale_up > scale_down:
        raise ValueError("scale_up threshold must exceed scale_down")
    actions = []
    for v in view.vnfs:
        if v.utilization > scale_up:
            actions.append(PlanAction(v.kind, ScaleAction.SCALE_UP, v.instances + 1))
        elif v.utilization < scale_down and v.instances > 1:
            actions.append(PlanAction(v.kind, ScaleAction.SCALE_DOWN, v.instances - 1))
    return OrchestrationPlan(tuple(actions))


class ControllerNode:
    """Logically centralized controller; all southbound traffic is acknowledged or times out."""

    def __init__(self, engine: Engine, node: NodeId = "ctrl", max_age: int = 300_000,
                 timeout: int = 50_000, orchestration_interval: Optional[int] = 500_000,
                 scale_up: float = 0.8, scale_down: float = 0.2,
                 vnf_nodes: Optional[Mapping[str, NodeId]] = None):
        self.engine = engine
        self.node = node
        self.max_age = max_age
        self.timeout = timeout
        self.scale_up = scale_up
        self.scale_down = scale_down
        self.vnf_nodes = dict(vnf_nodes or {})
        self.reports: dict[str, WapReport] = {}
        self.vnf_reports: dict[str, VnfReport] = {}
        self.commands: dict[int, Command] = {}
        self.versions: dict[str, int] = {}
        self.plans: list = []
        self.app_policy: Optional[InstallAppPolicy] = None
        self._next_cmd = 0
        self.orchestration_interval = orchestration_interval
        if orchestration_interval:
            engine.schedule_after(orchestration_interval, node, ("orchestrate",))

    def on_event(self, event: Event) -> None:
        msg = event.payload
        if isinstance(msg, WapReport):
            self.reports[msg.wap] = msg
        elif isinstance(msg, VnfReport):
            self.vnf_reports[msg.kind] = msg
        elif isinstance(msg, CommandAck):
            cmd = self.commands.get(msg.cmd)
            if cmd and cmd.status is CommandStatus.PENDING:
                cmd.status = CommandStatus.ACKED
        elif isinstance(msg, CommandNack):
            cmd = self.commands.get(msg.cmd)
            if cmd and cmd.status is CommandStatus.PENDING:
                cmd.status = CommandStatus.REJECTED
                cmd.error = _nack_error(msg.reason)
        elif isinstance(msg, tuple) and msg and msg[0] == "timeout":
            cmd = self.commands.get(msg[1])
            if cmd and cmd.status is CommandStatus.PENDING:
                cmd.status = CommandStatus.TIMED_OUT
                cmd.error = Timeout(f"command {cmd.cmd} to {cmd.wap}")
                self.engine.annotate("command-timeout", self.node, cmd.cmd, cmd.wap)
        elif msg == ("orchestrate",):
            self.orchestrate()
            self.engine.schedule_after(self.orchestration_interval, self.node, ("orchestrate",))

    def view(self) -> GlobalView:
        return collect_view(self.reports.values(), self.engine.now, self.max_age,
                            self.vnf_reports.values())

    def _command(self, wap: str, request_factory) -> Command:
        self._next_cmd += 1
        request = request_factory(self._next_cmd)
        cmd = Command(self._next_cmd, wap, request)
        self.commands[cmd.cmd] = cmd
        self.engine.send(self.node, wap, request, CTRL_BITS)
        self.engine.schedule_after(self.timeout, self.node, ("timeout", cmd.cmd))
        return cmd

    def push_policy(self, wap: str, policy: SodaPolicy) -> Command:
        current = self.versions.get(wap, 0)
        if policy.version <= current:
            raise StaleVersion(f"{wap}: version {policy.version} <= {current}")
        if policy.scheduler_id not in SCHEDULERS:
            raise ValueError(f"unregistered scheduler {policy.scheduler_id!r}")
        self.versions[wap] = policy.version
        return self._command(wap, lambda c: PushPolicy(c, policy))

    def next_version(self, wap: str) -> int:
        return self.versions.get(wap, 1) + 1

    def configure_comm_cores(self, wap: str, active: Iterable[int], total: int) -> Command:
        cores = validate_core_set(active, total)
        return self._command(wap, lambda c: ConfigureCommCores(c, cores))

    def orchestrate(self) -> OrchestrationPlan:
        plan = orchestrate_vnfs(self.view(), self.scale_up, self.scale_down)
        if plan.actions:
            self.plans.append((self.engine.now, plan))
        for action in plan.actions:
            node = self.vnf_nodes.get(action.vnf_kind)
            if node is not None:
                self.engine.annotate("orchestrate", self.node, action)
                self.engine.send(self.node, node, ScaleCommand(action.vnf_kind,
                                                               action.target_count), CTRL_BITS)
        return plan

    def northbound(self, request):
        if isinstance(request, GetView):
            return self.view()
        if isinstance(request, InstallAppPolicy):
            self.app_policy = request
            return True
        raise ValueError(f"unsupported northbound request {request!r}")

    def assign(self, ues: Iterable[UeDemand]) -> dict:
        return rrm_assign(ues, self.view())


def _nack_error(reason: str) -> Exception:
    for cls in (StaleVersion, WapBusy, InvalidCoreSet):
        if reason.startswith(cls.__name__):
            return cls(reason)
    return RuntimeError(reason)
