from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coreless.errors import ParseError
from coreless.scenario import (
    Directive,
    Scenario,
    format_scenario,
    format_time,
    parse_bool,
    parse_hz,
    parse_rate,
    parse_scenario,
    parse_size,
    parse_time,
)

from support import SCENARIO_DIR


@pytest.mark.parametrize("token,us", [("5ms", 5_000), ("1.5s", 1_500_000), ("250us", 250),
                                      ("0s", 0), ("2e3us", 2_000)])
def test_times(token, us):
    assert parse_time(token) == us


@pytest.mark.parametrize("token", ["5", "1.5us", "ms", "-1s", "3 ms"])
def test_bad_times(token):
    with pytest.raises(ValueError):
        parse_time(token)


def test_rates_sizes_and_frequencies():
    assert parse_rate("100Mbps") == 100e6
    assert parse_rate("2.5G") == 2.5e9
    assert parse_rate("64kb/s") == 64e3
    assert parse_size("1MB") == 10**6 and parse_size("1ZB") == 10**21
    assert parse_size("400kB") == 400_000
    assert parse_hz("20MHz") == 20 * 10**6 and parse_hz("1GHz") == Fraction(10**9)
    assert parse_bool("yes") is True and parse_bool("False") is False


@given(st.integers(0, 10**12))
def test_time_formatting_round_trips(us):
    assert parse_time(format_time(us)) == us


def test_comments_seed_and_stable_ordering():
    sc = parse_scenario("""
        # header
        seed 42
        at 20ms end
        at 10ms remove-controller   # trailing comment
        at 10ms fail-wap w1
    """)
    assert sc.seed == 42
    assert [(d.time, d.verb) for d in sc.directives] == [
        (10_000, "remove-controller"), (10_000, "fail-wap"), (20_000, "end")]
    assert sc.end_time == 20_000


@pytest.mark.parametrize("text,line,token", [
    ("at 1ms launch x", 1, "launch"),
    ("\nat soon end", 2, "soon"),
    ("at 1ms add-wap w type=wifi", 1, "add-wap"),
    ("at 1ms add-wap w type=wifi capacity=fast", 1, "capacity=fast"),
    ("at 1ms add-wap w type=laser capacity=1G", 1, "type=laser"),
    ("at 1ms end extra", 1, "extra"),
    ("at 1ms fail-link ab", 1, "ab"),
    ("at 1ms attach ue via=a via=b", 1, "via=b"),
    ("go 1ms end", 1, "go"),
    ("seed x", 1, "x"),
    ("at 1ms add-subscriber imsi=123", 1, "imsi=123"),
])
def test_errors_name_line_and_token(text, line, token):
    with pytest.raises(ParseError) as info:
        parse_scenario(text)
    assert info.value.line_no == line and info.value.token == token


def test_push_policy_accepts_free_parameters():
    d = parse_scenario("at 1s push-policy w scheduler=ProportionalFair alpha=0.3").directives[0]
    assert d.opt("scheduler") == "ProportionalFair"
    assert d.extra_options() == (("alpha", "0.3"),)


@pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.scn")), ids=lambda p: p.stem)
def test_corpus_round_trips(path):
    sc = parse_scenario(path.read_text())
    assert parse_scenario(format_scenario(sc)) == sc


names = st.from_regex(r"[a-z][a-z0-9]{0,5}", fullmatch=True)
directives = st.one_of(
    st.builds(lambda t, w, c: Directive(t, "add-wap", (w,), (("type", "wifi"),
                                                              ("capacity", f"{c}Mbps"))),
              st.integers(0, 10**7), names, st.integers(1, 999)),
    st.builds(lambda t, u, w: Directive(t, "attach", (u,), (("via", w),)),
              st.integers(0, 10**7), names, names),
    st.builds(lambda t, u, w: Directive(t, "handover", (u,), (("to", w),)),
              st.integers(0, 10**7), names, names),
    st.builds(lambda t, w: Directive(t, "fail-wap", (w,)), st.integers(0, 10**7), names),
    st.builds(lambda t: Directive(t, "end"), st.integers(0, 10**7)),
)


@settings(max_examples=100)
@given(st.lists(directives, max_size=12), st.one_of(st.none(), st.integers(0, 10**6)))
def test_format_then_parse_is_identity(ds, seed):
    sc = Scenario(tuple(sorted(ds, key=lambda d: d.time)), seed)
    assert parse_scenario(format_scenario(sc)) == sc
