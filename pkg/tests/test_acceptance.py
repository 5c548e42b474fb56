"""
End-to-end acceptance checks. Each test prints one PASS/FAIL line (also
repeated in the terminal summary) and then asserts the same verdict.
"""

import itertools
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest

from coreless.cli import main
from coreless.controller import (
    GlobalView,
    UeDemand,
    WapEntry,
    greedy_local_assign,
    max_min_objective,
    rrm_assign,
)
from coreless.discovery import (
    ALL_ELEMENTS,
    AnqpElement,
    CredentialMatch,
    NetworkCandidate,
    Wap,
    anqp_query,
    select_network,
)
from coreless.errors import Infeasible
from coreless.runner import render_report, run_scenario
from coreless.scenario import load_scenario

from support import (
    SCENARIO_DIR,
    attached_network,
    charging_run,
    handover_run,
    multipath_run,
    profile,
    run_until_done,
    ttls_run,
    verdict,
)

CORPUS = sorted(SCENARIO_DIR.glob("*.scn"))


def _cli_value(capsys, argv, label):
    assert main(argv) == 0
    out = capsys.readouterr().out
    for line in out.splitlines():
        if line.startswith(label):
            return line[len(label):].strip()
    raise AssertionError(f"{label!r} not in output:\n{out}")


def _to_bps(text):
    number, unit = text.split()
    return float(number) * {"Tb/s": 1e12, "Gb/s": 1e9, "Mb/s": 1e6, "kb/s": 1e3, "b/s": 1}[unit]


def test_criterion_01_lte_fronthaul_rate(capsys):
    text = _cli_value(capsys, ["capacity", "cpri", "--bw", "20MHz", "--antennas", "2"],
                      "fronthaul rate")
    rate = _to_bps(text)
    ok = text == "2.4576 Gb/s" and 2.3e9 <= rate <= 2.6e9
    verdict(1, "LTE 20 MHz 2x2 fronthaul", ok, text)
    assert ok


def test_criterion_02_wideband_fronthaul_growth(capsys):
    lte = _to_bps(_cli_value(capsys, ["capacity", "cpri", "--bw", "20MHz", "--antennas", "2"],
                             "fronthaul rate"))
    wide = _to_bps(_cli_value(capsys, ["capacity", "cpri", "--bw", "1GHz", "--antennas", "64"],
                              "fronthaul rate"))
    ratio = wide / lte
    ok = ratio >= 100 and ratio == pytest.approx(1600)
    verdict(2, "1 GHz / 64-antenna over LTE", ok, f"ratio {ratio:.6g}")
    assert ok


def test_criterion_03_fronthaul_exceeds_backhaul(capsys):
    text = _cli_value(capsys, ["capacity", "compare", "--bw", "20MHz", "--antennas", "2",
                               "--info-rate", "150Mbps"], "fronthaul/backhaul")
    ratio = float(text)
    ok = ratio >= 10
    verdict(3, "fronthaul/backhaul at 150 Mb/s", ok, f"ratio {ratio:.6g}")
    assert ok


def test_criterion_04_traffic_projection(capsys):
    five = _cli_value(capsys, ["capacity", "omnify", "--base", "1EB", "--to", "2018"],
                      "traffic in 2018")
    fifteen = _cli_value(capsys, ["capacity", "omnify", "--base", "1EB", "--to", "2028"],
                         "traffic in 2028")
    per_user = _cli_value(capsys, ["capacity", "per-user", "--total", "1ZB", "--users", "5e9"],
                          "traffic per user")
    from coreless.capacity import TrafficProjection, omnify_projection, per_user_traffic
    exact = (omnify_projection(TrafficProjection(2013, 10**18, 2018)) == 10 * 10**18
             and omnify_projection(TrafficProjection(2013, 10**18, 2028)) == 10**21
             and per_user_traffic(10**21, 5 * 10**9) == 200 * 10**9)
    ok = exact and (five, fifteen, per_user) == ("10 EB", "1 ZB", "200 GB")
    verdict(4, "tenfold-per-five-years projection", ok, f"{five}, {fifteen}, {per_user}")
    assert ok


# -- RRM -------------------------------------------------------------------

def _random_instance(rng):
    waps = [f"w{i}" for i in range(rng.randint(1, 4))]
    entries = tuple(WapEntry(w, rng.randint(0, 20), rng.randint(20, 60), 0, 0,
                             stale=rng.random() < 0.1) for w in waps)
    ues = [UeDemand(f"u{i}", rng.randint(1, 15),
                    tuple(rng.sample(waps, rng.randint(1, len(waps)))))
           for i in range(rng.randint(1, 8))]
    return ues, GlobalView(0, entries)


def _brute_force(ues, view):
    """Every reachable assignment; best value and the lexicographically smallest optimum."""
    residual = {e.wap: e.residual for e in view.fresh()}
    ues = sorted(ues, key=lambda u: u.ue)
    options = [sorted(w for w in u.reachable if w in residual) for u in ues]
    best, best_choice = None, None
    for choice in itertools.product(*options):
        assignment = {u.ue: w for u, w in zip(ues, choice)}
        left = dict(residual)
        for u in ues:
            left[assignment[u.ue]] -= u.demand
        if min(left.values(), default=0) < 0:
            continue
        value = min(left.values())
        if best is None or value > best:
            best, best_choice = value, assignment
    return best, best_choice


def test_criterion_05_rrm_matches_brute_force():
    rng = random.Random(20240501)
    started = time.monotonic()
    mismatches, greedy_worse, greedy_runs, feasible = [], 0, 0, 0
    for n in range(1000):
        ues, view = _random_instance(rng)
        best, best_choice = _brute_force(ues, view)
        try:
            got = rrm_assign(ues, view)
        except Infeasible:
            got = None
        if best is None:
            if got is not None:
                mismatches.append((n, "assigned an infeasible instance"))
            continue
        feasible += 1
        residual = {e.wap: e.residual for e in view.fresh()}
        if got is None:
            mismatches.append((n, "missed a feasible assignment"))
            continue
        value = max_min_objective(got, ues, residual)
        if value != best or got != best_choice:
            mismatches.append((n, value, best))
        greedy = greedy_local_assign(ues, view)
        if greedy is not None and all(
                v >= 0 for v in _left_after(greedy, ues, residual).values()):
            greedy_runs += 1
            if max_min_objective(greedy, ues, residual) > value:
                greedy_worse += 1
    elapsed = time.monotonic() - started
    ok = not mismatches and greedy_worse == 0 and elapsed < 60
    verdict(5, "max-min RRM equals brute force", ok,
            f"1000 instances ({feasible} feasible), {len(mismatches)} mismatches, "
            f"never below greedy on {greedy_runs} comparable instances, {elapsed:.1f}s")
    assert ok, mismatches[:5]


def _left_after(assignment, ues, residual):
    left = dict(residual)
    for u in ues:
        left[assignment[u.ue]] -= u.demand
    return left


# -- randomized network properties -----------------------------------------

def test_criterion_06_mobility_invariants():
    started = time.monotonic()
    failures, forwarded, buffered = [], 0, 0
    for seed in range(500):
        violations, stats = handover_run(seed)
        forwarded += stats["forwarded"]
        buffered += stats["buffered"]
        if violations:
            failures.append((seed, violations))
    elapsed = time.monotonic() - started
    ok = not failures and elapsed < 60
    verdict(6, "handover invariants", ok,
            f"500 runs, {len(failures)} with violations, {forwarded} forwarded and "
            f"{buffered} anchor-buffered packets, {elapsed:.1f}s")
    assert ok, failures[:3]


def test_criterion_07_multipath_resiliency():
    started = time.monotonic()
    failures, retransmitted = [], 0
    for seed in range(500):
        violations, stats = multipath_run(seed)
        retransmitted += stats["retransmitted"]
        if violations:
            failures.append((seed, violations))
    elapsed = time.monotonic() - started

    net = attached_network(7, [("cell", "cellular", 40e6, {}),
                               ("wifi", "wifi", 20e6, {"hs20": True})])
    start = run_until_done(net, [net.attach("ue0", "cell"), net.attach("ue0", "wifi")])
    flow = net.start_flow("split", "ue0", "data", 30e6, total_bytes=3_000_000,
                          multipath=["cell", "wifi"])
    net.run_until(start + 5_000_000)
    carried = {sf.interface: sf.bytes_carried for sf in flow.conn.subflows}
    share = carried["cell"] / sum(carried.values())
    split_ok = abs(share - 2 / 3) <= 0.01 * (2 / 3) and flow.receiver.delivered == 3_000_000

    ok = not failures and split_ok and elapsed < 60
    verdict(7, "multipath survives a path failure", ok,
            f"500 runs, {len(failures)} with violations, {retransmitted} bytes re-sent, "
            f"2:1 split gives {share:.4f} on the faster path, {elapsed:.1f}s")
    assert ok, failures[:3]


def test_criterion_08_charging_conservation():
    failures, sipto, records = [], 0, 0
    for seed in range(300):
        violations, stats = charging_run(seed)
        sipto += stats["sipto_flows"]
        records += stats["records"]
        if violations:
            failures.append((seed, violations))
    for path in CORPUS:
        report = run_scenario(load_scenario(path)).report
        for sub, row in report.subscribers.items():
            if (row["cdr_core_bytes"] != row["pgw_forwarded_bytes"]
                    or row["cdr_local_bytes"] != row["lgw_forwarded_bytes"]):
                failures.append((path.name, sub, row))
    ok = not failures and sipto > 0
    verdict(8, "charging conservation", ok,
            f"300 random scenarios + {len(CORPUS)} corpus files, {records} records, "
            f"{sipto} breakout flows, {len(failures)} violations")
    assert ok, failures[:3]


def _random_wap(rng, n):
    advertised = {}
    for tag in rng.sample(ALL_ELEMENTS, rng.randint(0, len(ALL_ELEMENTS))):
        advertised[tag] = f"value-{n}-{tag.value}"
    return Wap(f"w{n}", "wifi", 10e6, hs20_capable=True, advertised=advertised)


def test_criterion_09_discovery_and_auth():
    rng = random.Random(909)
    problems = []
    for n in range(2000):
        wap = _random_wap(rng, n)
        tags = rng.sample(ALL_ELEMENTS, rng.randint(1, len(ALL_ELEMENTS)))
        response = anqp_query(wap, tags)
        expected = {t for t in tags if t in wap.advertised}
        if response.tags != expected or any(
                response.get(t) != wap.advertised[t] for t in expected):
            problems.append(("anqp", n))

    for seed in range(200):
        violations, _ = ttls_run(seed)
        problems += [("ttls", seed, v) for v in violations]

    me = profile(0)
    for n in range(2000):
        candidates = [NetworkCandidate(f"w{i}", None, rng.choice(list(CredentialMatch)),
                                       rng.choice([0.5, 0.7, 0.9]), rng.choice([0.0, 0.5]),
                                       "wifi")
                      for i in range(rng.randint(1, 6))]
        picks = set()
        for _ in range(6):
            rng.shuffle(candidates)
            picks.add(select_network(list(candidates), me))
        if len(picks) != 1:
            problems.append(("selection", n, picks))

    ok = not problems
    verdict(9, "discovery and authentication", ok,
            f"2000 ANQP queries, 200 TTLS runs, 2000 selection permutations, "
            f"{len(problems)} violations")
    assert ok, problems[:5]


def _snapshot(path):
    result = run_scenario(load_scenario(path))
    return (render_report(result.report, "json"), render_report(result.report, "csv"),
            tuple(result.cdr_lines), result.report.run["digest"])


def test_criterion_10_determinism(tmp_path):
    differing = [p.name for p in CORPUS if _snapshot(p) != _snapshot(p)]

    # separate interpreters with different hash seeds must agree byte for byte
    outputs = []
    for hash_seed in ("1", "12345"):
        out = tmp_path / f"h{hash_seed}"
        env = dict(os.environ, PYTHONHASHSEED=hash_seed)
        argv = [sys.executable, "-m", "coreless.cli", "--out", str(out), "--format", "json",
                "--verbose"]
        for p in CORPUS:
            argv += ["--scenario", str(p)]
        subprocess.run(argv, env=env, check=True, capture_output=True)
        outputs.append({f.relative_to(out): f.read_bytes()
                        for f in sorted(Path(out).rglob("*")) if f.is_file()})
    cross = outputs[0] == outputs[1] and len(outputs[0]) == 3 * len(CORPUS)

    ok = not differing and cross and len(CORPUS) >= 5
    verdict(10, "deterministic replay", ok,
            f"{len(CORPUS)} corpus scenarios, {len(differing)} differ in-process, "
            f"cross-process files identical: {cross}")
    assert ok, differing
