"""Shared builders for the test suite."""

from __future__ import annotations

import hashlib
import random
from pathlib import Path

from coreless.engine import MS
from coreless.epc import QosSubscription, SubscriberProfile
from coreless.network import Network, NetworkConfig

SCENARIO_DIR = Path(__file__).parent / "scenarios"

# criterion number -> "PASS/FAIL" line, echoed in the terminal summary
VERDICTS: dict = {}


def verdict(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f": {detail}" if detail else "")
    VERDICTS[number] = line
    print(line)


def imsi(i: int) -> str:
    return f"00101{i:010d}"


def sim_key(i: int) -> bytes:
    return hashlib.sha256(f"key{i}".encode()).digest()[:16]


def profile(i: int, **kwargs) -> SubscriberProfile:
    kwargs.setdefault("shared_key", sim_key(i))
    return SubscriberProfile(imsi(i), **kwargs)


def quiet_config(seed: int = 0, **kwargs) -> NetworkConfig:
    """No beacons, reports or orchestration timers: keeps randomized runs small."""
    base = dict(seed=seed, trace=False, beacon_interval=None, report_interval=None,
                orchestration_interval=None)
    base.update(kwargs)
    return NetworkConfig(**base)


def attached_network(seed, waps, ues=1, config=None, maxrate=1e9):
    """``waps`` is [(id, type, capacity, kwargs)]; every UE is attached to the first WAP."""
    net = Network(config or quiet_config(seed))
    for wap_id, kind, cap, extra in waps:
        net.add_wap(wap_id, kind, cap, **extra)
    for i in range(ues):
        net.add_subscriber(profile(i, qos=QosSubscription(max_bitrate=maxrate)))
        net.add_ue(f"ue{i}", imsi(i))
    return net


def run_until_done(net, procs, step=10 * MS, limit=2_000 * MS) -> int:
    """Advance in steps until every attach procedure has resolved; returns the time."""
    t = net.engine.now
    while not all(p.done for p in procs):
        if t > limit:
            raise AssertionError("attach did not complete")
        t += step
        net.run_until(t)
    return t


def handover_run(seed: int) -> tuple:
    """
    One randomized handover schedule. Returns (violations, stats) where
    violations lists broken mobility invariants.
    """
    rng = random.Random(seed)
    n_cells = rng.randint(2, 4)
    cells = [(f"c{i}", "cellular", 100e6, {"latency": rng.choice([1000, 3000, 5000])})
             for i in range(n_cells)]
    # latency mix decides whether forwarded packets beat the path switch to the anchor
    cfg = quiet_config(seed, trace=True, core_latency=rng.choice([200, 2_000, 5_000]),
                       backhaul_latency=rng.choice([300, 1_000, 3_000]))
    net = attached_network(seed, cells, ues=1, config=cfg)
    proc = net.attach("ue0", "c0")
    start = run_until_done(net, [proc])
    ctx = net.mme.context_of_ue("ue0")
    ip = ctx.ip
    anchors = [(b.anchor_sgw, b.pgw) for b in ctx.bearers]
    total = rng.randint(20, 120) * 1500
    rate = rng.choice([2e6, 5e6, 10e6, 20e6])
    flow = net.start_flow("f", "ue0", rng.choice(["voice", "video", "data"]), rate,
                          total_bytes=total)
    t = start + net.config.flow_setup_delay
    current = "c0"
    violations = []
    for _ in range(rng.randint(1, 6)):
        t += rng.randint(200, 40_000)
        net.run_until(t)
        target = rng.choice([c[0] for c in cells if c[0] != current])
        net.handover("ue0", target)
        current = target
        ctx = net.mme.context_of_ue("ue0")
        if ctx.ip != ip or net.ues["ue0"].ip != ip:
            violations.append(f"ip changed {ip} -> {ctx.ip}")
        if [(b.anchor_sgw, b.pgw) for b in ctx.bearers] != anchors:
            violations.append("anchor changed")
    net.run_until(t + 2_000 * MS)
    if flow.sent_packets != flow.next_seq or flow.sent_bytes != total:
        violations.append("source did not finish")
    counts = flow.receipts
    missing = [s for s in range(flow.sent_packets) if counts.get(s, 0) == 0]
    repeated = [s for s, c in counts.items() if c > 1]
    if missing:
        violations.append(f"lost seqs {missing[:5]}")
    if repeated:
        violations.append(f"duplicated seqs {repeated[:5]}")
    if net.sgw.buffers and any(net.sgw.buffers.values()):
        violations.append("packets stranded in anchor buffer")
    trace = net.engine.trace
    return violations, {
        "handovers": len(net.handovers),
        "packets": flow.sent_packets,
        "forwarded": sum(" deliver " in line and "forwarded=True" in line for line in trace),
        "buffered": sum(" * buffer " in line for line in trace),
    }


def multipath_run(seed: int) -> tuple:
    """
    Two-interface multipath download with one randomized path failure; the
    survivor can carry the whole flow. Returns (violations, stats).
    """
    rng = random.Random(seed)
    caps = {"cell": rng.choice([10e6, 20e6, 40e6]), "wifi": rng.choice([10e6, 20e6, 40e6])}
    waps = [("cell", "cellular", caps["cell"], {}), ("wifi", "wifi", caps["wifi"], {"hs20": True})]
    cfg = quiet_config(seed, mptcp_window=rng.choice([5 * MS, 10 * MS, 20 * MS]))
    net = attached_network(seed, waps, ues=1, config=cfg)
    procs = [net.attach("ue0", "cell"), net.attach("ue0", "wifi")]
    start = run_until_done(net, procs)
    total = rng.randint(50, 600) * 1000 + rng.randint(0, 999)
    rate = 0.5 * min(caps.values())
    flow = net.start_flow("m", "ue0", "data", rate, total_bytes=total,
                          multipath=["cell", "wifi"])
    duration = int(total * 8e6 / rate)
    fail_at = start + net.config.flow_setup_delay + rng.randint(0, duration)
    victim = rng.choice(["cell", "wifi"])
    mode = rng.choice(["backhaul", "radio", "wap"])
    net.run_until(fail_at)
    if mode == "backhaul":
        net.fail_link(victim, "core")
    elif mode == "radio":
        net.fail_link("ue0", victim)
    else:
        net.fail_wap(victim)
    net.run_until(fail_at + 4 * duration + 2_000 * MS)
    rx = flow.receiver
    violations = []
    if rx.intervals != [(0, total)]:
        violations.append(f"received {rx.intervals[:3]} of {total}")
    if rx.unique_bytes != total or rx.delivered != total:
        violations.append(f"delivered {rx.delivered}/{rx.unique_bytes} of {total}")
    if flow.sent_bytes != total:
        violations.append(f"sent {flow.sent_bytes} of {total}")
    if not flow.finished:
        violations.append("connection never completed")
    return violations, {
        "mode": mode,
        "retransmitted": flow.transmitted_bytes - flow.sent_bytes,
        "wire_duplicates": rx.duplicate_bytes,
    }


def charging_run(seed: int) -> tuple:
    """
    Random subscribers, WAPs (some hosting a local gateway), flow mixes and
    rate caps. Returns (violations, stats) for the charging conservation checks.
    """
    rng = random.Random(seed)
    cfg = quiet_config(seed, cdr_interval=rng.choice([None, 50 * MS, 130 * MS, 400 * MS]))
    net = Network(cfg)
    wap_ids = []
    for w in range(rng.randint(1, 3)):
        kind = rng.choice(["cellular", "wifi"])
        extra = {"hs20": True} if kind == "wifi" else {}
        net.add_wap(f"w{w}", kind, rng.choice([50e6, 100e6]), lgw=rng.random() < 0.6, **extra)
        wap_ids.append(f"w{w}")
    procs, ues = [], []
    for i in range(rng.randint(1, 4)):
        maxrate = rng.choice([1e6, 4e6, 20e6, 100e6])
        net.add_subscriber(profile(i, qos=QosSubscription(max_bitrate=maxrate)))
        net.add_ue(f"ue{i}", imsi(i))
        ues.append(f"ue{i}")
        kinds_taken = set()
        for wap in rng.sample(wap_ids, rng.randint(1, len(wap_ids))):
            kind = net.waps[wap].wap.access_type.value
            if kind in kinds_taken:
                continue
            kinds_taken.add(kind)
            procs.append(net.attach(f"ue{i}", wap))
    start = run_until_done(net, procs)
    flows = []
    for ue in ues:
        for n in range(rng.randint(1, 3)):
            fid = f"{ue}-f{n}"
            cls = rng.choice(["voice", "video", "data"])
            dst = rng.choice(["internet", "local"])
            try:
                flows.append(net.start_flow(fid, ue, cls, rng.choice([0.5e6, 2e6, 8e6]), dst=dst,
                                            total_bytes=rng.randint(5, 200) * 1000))
            except Exception:  # e.g. an attach was rejected; not what is under test
                continue
    net.run_until(start + rng.randint(200, 1500) * MS)
    net.finalize()

    violations = []
    records = net.cdr_log.records
    core_fwd = net.pgw.pcef.forwarded_by_imsi
    local_fwd: dict = {}
    for lgw in net.lgws.values():
        for sub, n in lgw.pcef.forwarded_by_imsi.items():
            local_fwd[sub] = local_fwd.get(sub, 0) + n
    for sub in sorted({r.imsi for r in records} | set(core_fwd) | set(local_fwd)):
        core = sum(r.bytes_up + r.bytes_down for r in records
                   if r.imsi == sub and r.breakout.value == "Core")
        local = sum(r.bytes_up + r.bytes_down for r in records
                    if r.imsi == sub and r.breakout.value == "Local")
        if core != core_fwd.get(sub, 0):
            violations.append(f"{sub}: core CDR {core} != PGW {core_fwd.get(sub, 0)}")
        if local != local_fwd.get(sub, 0):
            violations.append(f"{sub}: local CDR {local} != L-GW {local_fwd.get(sub, 0)}")
    sipto = [f for f in flows if f.binding is not None and f.binding.route == "Local"]
    for flow in sipto:
        kinds = {r.breakout.value for r in records if r.flow_id == flow.flow_id}
        if kinds - {"Local"}:
            violations.append(f"{flow.flow_id}: breakout flow has {sorted(kinds)} records")
        bad = {h for h in flow.hops if h in ("sgw", "pgw", "gw")}
        if bad:
            violations.append(f"{flow.flow_id}: breakout path crossed {sorted(bad)}")
    return violations, {
        "sipto_flows": len(sipto),
        "sipto_delivered": sum(f.receiver.delivered for f in sipto),
        "core_bytes": sum(core_fwd.values()),
        "records": len(records),
    }


def ttls_run(seed: int) -> tuple:
    """
    Password-only subscribers attach over Wi-Fi while the server certificate,
    the trust lists and the typed passwords vary. Ordering is read back from
    the trace. Returns (violations, stats).
    """
    from coreless.discovery import Certificate

    rng = random.Random(seed)
    cert = Certificate(rng.choice(["TrustedCA", "OtherCA"]), "aaa.home.example",
                       valid=rng.random() < 0.8)
    net = Network(quiet_config(seed, trace=True, certificate=cert,
                               backhaul_latency=rng.randint(100, 3000)))
    net.add_wap("w", "wifi", 100e6, hs20=True)
    procs, expect = [], {}
    for i in range(rng.randint(1, 5)):
        net.add_subscriber(SubscriberProfile(imsi(i), password_credential=(f"user{i}", "pw")))
        trusted = rng.choice([("TrustedCA",), ("OtherCA",), ("TrustedCA", "OtherCA"), ()])
        typed = ("pw" if rng.random() < 0.8 else "wrong")
        net.add_ue(f"ue{i}", imsi(i), password=(f"user{i}", typed), trusted=trusted)
        proc = net.attach(f"ue{i}", "w")
        procs.append(proc)
        trusts = cert.valid and cert.issuer in trusted
        expect[proc.proc] = (trusts, trusts and typed == "pw")
    run_until_done(net, procs)

    tunnel_at, abort_at, creds_at = {}, {}, {}
    for n, line in enumerate(net.engine.trace):
        parts = line.split()
        if parts[1] == "*" and parts[2] in ("tunnel-established", "ttls-abort"):
            (tunnel_at if parts[2] == "tunnel-established" else abort_at)[int(parts[4])] = n
        elif len(parts) > 4 and parts[2] == "deliver" and parts[4].startswith("TtlsCredentials("):
            creds_at[int(parts[4].split("=", 1)[1])] = n

    violations = []
    for proc in procs:
        p = proc.proc
        trusts, success = expect[p]
        if p in creds_at and (p not in tunnel_at or tunnel_at[p] > creds_at[p]):
            violations.append(f"proc {p}: credentials before tunnel")
        if p in abort_at and p in creds_at:
            violations.append(f"proc {p}: credentials sent after abort")
        if trusts != (p in tunnel_at) or (not trusts) != (p in abort_at):
            violations.append(f"proc {p}: tunnel/abort disagrees with trust")
        if (proc.status == "ok") != success:
            violations.append(f"proc {p}: status {proc.status}, expected success={success}")
    return violations, {"aborted": len(abort_at), "tunnels": len(tunnel_at)}
