"""Executes a parsed scenario on a fresh network and collects metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .engine import S, Event
from .epc import Breakout, QosSubscription, SubscriberProfile
from .errors import CorelessError, RuntimeScenarioError, UnknownFormat
from .network import Network, NetworkConfig
from .scenario import (
    Directive,
    Scenario,
    parse_bool,
    parse_cores,
    parse_credential,
    parse_hex,
    parse_list,
    parse_rate,
    parse_size,
    parse_time,
)

# Without an explicit end, the run continues this long past the last directive.
DEFAULT_DRAIN = 5 * S
FORMATS = ("csv", "json")
CSV_HEADER = ("group", "entity", "metric", "value")


@dataclass
class MetricsReport:
    flows: dict = field(default_factory=dict)
    waps: dict = field(default_factory=dict)
    handovers: dict = field(default_factory=dict)
    auth: dict = field(default_factory=dict)
    subscribers: dict = field(default_factory=dict)
    cdr: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    GROUPS = ("flows", "waps", "handovers", "auth", "subscribers", "cdr", "run")

    def rows(self) -> list:
        """Flat (group, entity, metric, value) rows in a fixed order."""
        out = []
        for group in self.GROUPS:
            table = getattr(self, group)
            for entity in sorted(table):
                value = table[entity]
                if isinstance(value, dict):
                    for metric in sorted(value):
                        out.append((group, entity, metric, value[metric]))
                else:
                    out.append((group, "-", entity, value))
        for i, message in enumerate(self.errors, start=1):
            out.append(("errors", str(i), "message", message))
        return out

    def to_dict(self) -> dict:
        data = {g: getattr(self, g) for g in self.GROUPS}
        data["errors"] = list(self.errors)
        return data

    @property
    def digest(self) -> str:
        return self.run.get("digest", "")

    @property
    def exit_code(self) -> int:
        return int(self.run.get("exit_code", 0))


@dataclass
class RunResult:
    report: MetricsReport
    cdr_lines: list
    trace: list
    network: Optional[Network] = field(default=None, repr=False)

    @property
    def exit_code(self) -> int:
        return self.report.exit_code


class _Executor:
    """Applies directives to the network when their timer fires."""

    def __init__(self, net: Network):
        self.net = net
        self.errors: list[str] = []
        self.aborted: Optional[RuntimeScenarioError] = None

    def on_event(self, event: Event) -> None:
        d: Directive = event.payload
        try:
            getattr(self, "do_" + d.verb.replace("-", "_"))(d)
        except RuntimeScenarioError:
            raise
        except KeyError as exc:
            raise RuntimeScenarioError(
                f"line {d.line}: {d.verb} references unknown entity {exc.args[0]!r}") from None
        except (CorelessError, ValueError) as exc:
            message = f"line {d.line}: {d.verb}: {type(exc).__name__}: {exc}"
            self.errors.append(message)
            self.net.engine.annotate("scenario-error", "scenario", d.line, type(exc).__name__)

    # -- helpers ------------------------------------------------------------
    def _ue(self, ue: str) -> str:
        if ue not in self.net.ues:
            raise KeyError(ue)
        return ue

    def _wap(self, wap: str) -> str:
        if wap not in self.net.waps:
            raise KeyError(wap)
        return wap

    # -- directives ---------------------------------------------------------
    def do_add_wap(self, d: Directive) -> None:
        realms = d.opt("realms", parse_list)
        self.net.add_wap(
            d.args[0], d.opt("type"), d.opt("capacity", parse_rate),
            hs20=d.opt("hs20", parse_bool, False), cores=d.opt("cores", int, 1),
            lgw=d.opt("lgw", parse_bool, False), domain=d.opt("domain", parse_list),
            consortium=d.opt("consortium", parse_list, ()),
            realms=None if realms is None else tuple((r, ("EAP-SIM", "EAP-TTLS"))
                                                     for r in realms),
            latency=d.opt("latency", parse_time))

    def do_add_subscriber(self, d: Directive) -> None:
        imsi = d.opt("imsi")
        key = d.opt("key", parse_hex)
        password = d.opt("password", parse_credential)
        if key is None and password is None:
            key = hashlib.sha256(f"sim:{imsi}".encode()).digest()[:16]
        qos = QosSubscription()
        if d.has("maxrate"):
            qos = QosSubscription(max_bitrate=d.opt("maxrate", parse_rate))
        kwargs = {}
        if d.has("domain"):
            kwargs["home_domain"] = d.opt("domain")
        self.net.add_subscriber(SubscriberProfile(
            imsi, shared_key=key, password_credential=password, qos=qos,
            roaming_consortia=d.opt("consortium", parse_list, ()), **kwargs))

    def do_add_ue(self, d: Directive) -> None:
        near = d.opt("near", parse_list)
        if near is not None:
            for wap in near:
                self._wap(wap)
        self.net.add_ue(d.args[0], d.opt("imsi"), sim_key=d.opt("key", parse_hex),
                        password=d.opt("password", parse_credential),
                        trusted=d.opt("trusted", parse_list), near=near)

    def do_attach(self, d: Directive) -> None:
        ue = self._ue(d.args[0])
        via = d.opt("via")
        if via == "auto":
            self.net.attach_auto(ue)
        else:
            self.net.attach(ue, self._wap(via))

    def do_start_flow(self, d: Directive) -> None:
        multipath = d.opt("multipath", parse_list)
        for wap in multipath or ():
            self._wap(wap)
        via = d.opt("via")
        if via is not None:
            self._wap(via)
        self.net.start_flow(d.args[0], self._ue(d.opt("ue")), d.opt("class"),
                            d.opt("rate", parse_rate), dst=d.opt("dst", default="internet"),
                            total_bytes=d.opt("bytes", parse_size), multipath=multipath,
                            via=via)

    def do_stop_flow(self, d: Directive) -> None:
        self.net.stop_flow(d.args[0])

    def do_bind_flow(self, d: Directive) -> None:
        self.net.bind_flow(d.args[0], self._wap(d.opt("via")))

    def do_handover(self, d: Directive) -> None:
        src = d.opt("from")
        if src is not None:
            self._wap(src)
        ue = self._ue(d.args[0])
        target = d.opt("to")
        if target == "auto":
            target = self.net.choose_handover_target(ue, src)
        self.net.handover(ue, self._wap(target), src=src)

    def do_fail_link(self, d: Directive) -> None:
        token = d.args[0]
        links = self.net.engine.links
        # node ids may themselves contain '-', so try every split point
        for i, ch in enumerate(token):
            if ch != "-":
                continue
            a, b = token[:i], token[i + 1:]
            if tuple(sorted((a, b))) in links:
                self.net.fail_link(a, b)
                return
        raise KeyError(token)

    def do_fail_wap(self, d: Directive) -> None:
        self.net.fail_wap(self._wap(d.args[0]))

    def do_push_policy(self, d: Directive) -> None:
        params = []
        for key, value in d.extra_options():
            try:
                params.append((key, float(value)))
            except ValueError:
                params.append((key, value))
        self.net.push_policy(self._wap(d.args[0]), d.opt("scheduler"), params)

    def do_set_cores(self, d: Directive) -> None:
        self.net.set_cores(self._wap(d.args[0]), d.opt("active", parse_cores))

    def do_remove_controller(self, d: Directive) -> None:
        self.net.remove_controller()

    def do_end(self, d: Directive) -> None:
        pass


def _collect(net: Network, executor: _Executor, seed: int, end: int,
             completed: bool) -> MetricsReport:
    report = MetricsReport()
    for fid in sorted(net.flows):
        f = net.flows[fid]
        report.flows[fid] = {
            "ue": f.ue,
            "class": f.service_class,
            "sent_bytes": f.sent_bytes,
            "transmitted_bytes": f.transmitted_bytes,
            "delivered_bytes": f.receiver.unique_bytes,
            "in_order_bytes": f.receiver.delivered,
            "duplicate_bytes": f.receiver.duplicate_bytes,
            "dropped_packets": f.network_drops,
            "route": f.binding.route if f.binding else ("Multipath" if f.conn else "-"),
            "rejected": f.rejected or "-",
        }
    for wid in sorted(net.waps):
        node = net.waps[wid]
        report.waps[wid] = {
            "type": node.wap.access_type.value,
            "peak_load_bps": node.peak_load,
            "attached_ues": len(node.attached),
            "active_cores": len(node.wap.active_cores),
            "policy_version": node.policy.version,
            "scheduler": node.policy.scheduler_id,
            "radio_drops": node.radio_drops,
            "up": node.wap.up,
        }
    outcomes = net.handovers
    report.handovers = {
        "attempted": len(outcomes),
        "succeeded": sum(1 for o in outcomes if o.ok),
        "rejected": sum(1 for o in outcomes if not o.ok),
    }
    report.auth = {
        "success": net.mme.auth_success,
        "failure": net.mme.auth_failure,
        "attach_ok": sum(1 for p in net.procedures if p.status == "ok" and p.parent is None),
        "attach_failed": sum(1 for p in net.procedures
                             if p.status == "failed" and p.parent is None),
    }
    forwarded = dict(net.pgw.pcef.forwarded_by_imsi)
    local_forwarded: dict = {}
    for lgw in net.lgws.values():
        for imsi, n in lgw.pcef.forwarded_by_imsi.items():
            local_forwarded[imsi] = local_forwarded.get(imsi, 0) + n
    records = net.cdr_log.records
    for imsi in sorted(set(forwarded) | set(local_forwarded) | {r.imsi for r in records}):
        mine = [r for r in records if r.imsi == imsi]
        report.subscribers[imsi] = {
            "cdr_core_bytes": sum(r.bytes_up + r.bytes_down for r in mine
                                  if r.breakout is Breakout.CORE),
            "cdr_local_bytes": sum(r.bytes_up + r.bytes_down for r in mine
                                   if r.breakout is Breakout.LOCAL),
            "pgw_forwarded_bytes": forwarded.get(imsi, 0),
            "lgw_forwarded_bytes": local_forwarded.get(imsi, 0),
        }
    report.cdr = {
        "records": len(records),
        "bytes_up": sum(r.bytes_up for r in records),
        "bytes_down": sum(r.bytes_down for r in records),
        "total_bytes": net.cdr_log.total_bytes(),
    }
    stats = net.engine.stats()
    report.errors = list(executor.errors)
    if executor.aborted is not None:
        report.errors.append(str(executor.aborted))
    report.run = {
        "seed": seed,
        "end_time_us": end,
        "clock_us": stats.clock,
        "events": stats.events_fired,
        "engine_drops": stats.drops,
        "mme_instances": net.mme.pool.instances,
        "digest": net.engine.digest(),
        "completed": completed,
        "exit_code": 0 if completed and not report.errors else (2 if not completed else 1),
    }
    return report


def run_scenario(scenario: Scenario, seed: Optional[int] = None, until: Optional[int] = None,
                 config: Optional[NetworkConfig] = None) -> RunResult:
    """Run to the end time; runtime scenario errors stop the run with a nonzero exit code."""
    if seed is None:
        seed = scenario.seed if scenario.seed is not None else 0
    if until is not None:
        end = until
    elif scenario.end_time is not None:
        end = scenario.end_time
    else:
        end = scenario.last_time + DEFAULT_DRAIN if scenario.directives else 0
    cfg = config if config is not None else NetworkConfig()
    cfg.seed = seed
    net = Network(cfg)
    executor = _Executor(net)
    net.engine.add_node("scenario", executor.on_event, transit=False)
    for d in scenario.directives:
        if d.time <= end:
            net.engine.schedule(d.time, "scenario", d)
    completed = True
    try:
        net.run_until(end)
    except RuntimeScenarioError as exc:
        executor.aborted = exc
        completed = False
    net.finalize()
    report = _collect(net, executor, seed, end, completed)
    return RunResult(report, net.cdr_log.lines(), list(net.engine.trace), net)


def render_report(report: MetricsReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(report.rows())
        return buf.getvalue()
    raise UnknownFormat(fmt)


def export_report(result: RunResult, fmt: str, out_dir, write_trace: bool = False) -> list:
    """Write report.<fmt> and cdr.csv (plus trace.log) under ``out_dir``."""
    if fmt not in FORMATS:
        raise UnknownFormat(fmt)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    report_path = os.path.join(out_dir, f"report.{fmt}")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report(result.report, fmt))
    paths.append(report_path)
    cdr_path = os.path.join(out_dir, "cdr.csv")
    with open(cdr_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in result.cdr_lines)
    paths.append(cdr_path)
    if write_trace:
        trace_path = os.path.join(out_dir, "trace.log")
        with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(line + "\n" for line in result.trace)
        paths.append(trace_path)
    return paths
