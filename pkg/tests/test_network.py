import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coreless.engine import MS, S
from coreless.errors import NoRoute
from coreless.network import Network

from support import attached_network, charging_run, imsi, profile, quiet_config, run_until_done


def test_reserved_and_duplicate_ids_are_refused():
    net = Network(quiet_config())
    net.add_wap("w", "wifi", 10e6)
    for bad in ("mme", "w", "lgw-x", "scenario"):
        with pytest.raises(ValueError):
            net.add_wap(bad, "wifi", 10e6)
    net.add_subscriber(profile(0))
    with pytest.raises(ValueError):
        net.add_ue("w", imsi(0))


def test_out_of_range_ue_cannot_attach():
    net = Network(quiet_config())
    net.add_wap("a", "cellular", 10e6)
    net.add_wap("b", "cellular", 10e6)
    net.add_subscriber(profile(0))
    net.add_ue("ue0", imsi(0), near=["a"])
    with pytest.raises(NoRoute):
        net.attach("ue0", "b")


def test_colocated_gateways_still_charge_every_byte():
    net = attached_network(2, [("c", "cellular", 50e6, {})],
                           config=quiet_config(2, colocate_gateways=True))
    start = run_until_done(net, [net.attach("ue0", "c")])
    flow = net.start_flow("f", "ue0", "data", 5e6, total_bytes=100_000)
    net.run_until(start + 2 * S)
    net.finalize()
    assert net.sgw_id == net.pgw_id == "gw"
    assert flow.receiver.delivered == 100_000
    assert net.cdr_log.total_bytes() == net.pgw.pcef.forwarded_by_imsi[imsi(0)]


def test_admission_refuses_flows_beyond_capacity():
    net = attached_network(3, [("c", "cellular", 10e6, {})])
    run_until_done(net, [net.attach("ue0", "c")])
    net.start_flow("a", "ue0", "data", 8e6)
    late = net.start_flow("b", "ue0", "data", 8e6)
    assert late.rejected.startswith("WapAtCapacity")


def test_radio_never_exceeds_wap_capacity():
    net = attached_network(4, [("c", "cellular", 4e6, {})], ues=2)
    start = run_until_done(net, [net.attach("ue0", "c"), net.attach("ue1", "c")])
    flows = [net.start_flow(f"f{i}", f"ue{i}", "data", 2e6, total_bytes=10**7) for i in range(2)]
    net.run_until(start + 1 * S)
    delivered = sum(f.receiver.delivered for f in flows) * 8
    assert delivered <= 4e6 * 1.0 + 8 * 1500 * 2


def test_policing_caps_the_subscriber_rate():
    net = attached_network(5, [("c", "cellular", 50e6, {})], maxrate=1e6)
    start = run_until_done(net, [net.attach("ue0", "c")])
    flow = net.start_flow("f", "ue0", "data", 4e6, total_bytes=10**6)
    net.run_until(start + 2 * S)
    assert flow.receiver.unique_bytes * 8 <= 1e6 * 2.1
    net.finalize()
    assert net.cdr_log.total_bytes() == net.pgw.pcef.forwarded_by_imsi[imsi(0)]


def test_failed_wap_frees_its_flows():
    net = attached_network(6, [("c", "cellular", 20e6, {})])
    start = run_until_done(net, [net.attach("ue0", "c")])
    net.start_flow("f", "ue0", "data", 5e6)
    net.run_until(start + 100 * MS)
    net.fail_wap("c")
    net.run_until(start + 300 * MS)
    assert net.waps["c"].wap.current_load == 0
    assert net.ues["ue0"].attachments == {}


def test_link_quality_is_seeded_and_stable():
    one = Network(quiet_config(11))
    two = Network(quiet_config(11))
    assert one.link_quality("u", "w") == two.link_quality("u", "w")
    assert 0.5 <= one.link_quality("u", "w") <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_random_charging_scenarios_conserve_bytes(seed):
    violations, _ = charging_run(seed)
    assert violations == []
