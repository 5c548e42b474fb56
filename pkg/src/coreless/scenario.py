"""
Line-oriented scenario scripts.

Each non-blank line is ``at <time> <verb> [positional ...] [key=value ...]``.
``#`` starts a comment, and an optional ``seed <n>`` line fixes the default
seed. Values stay as their source tokens on the :class:`Directive`; each verb
has a schema that checks them at parse time, and the runner converts them
with the ``parse_*`` helpers below.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .errors import ParseError

_TIME_UNITS = {"us": 1, "ms": 1_000, "s": 1_000_000}
_RATE_PREFIX = {"": 1, "k": 10**3, "K": 10**3, "M": 10**6, "G": 10**9, "T": 10**12}
_SIZE_PREFIX = {"": 1, "K": 10**3, "k": 10**3, "M": 10**6, "G": 10**9, "T": 10**12,
                "E": 10**18, "Z": 10**21}
_NUMBER = r"(\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_TIME_RE = re.compile(rf"^({_NUMBER})(us|ms|s)$")
_RATE_RE = re.compile(rf"^({_NUMBER})([kKMGT]?)(bps|b/s)?$")
_SIZE_RE = re.compile(rf"^({_NUMBER})([KkMGTEZ]?)B?$")
_HZ_RE = re.compile(rf"^({_NUMBER})([kKMGT]?)Hz$")
_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _number(text: str) -> Fraction:
    return Fraction(text)


def parse_time(token: str) -> int:
    """``5ms`` -> 5000 (microseconds). Fractional microseconds are rejected."""
    m = _TIME_RE.match(token)
    if not m:
        raise ValueError(f"bad time {token!r}")
    value = _number(m.group(1)) * _TIME_UNITS[m.group(3)]
    if value.denominator != 1:
        raise ValueError(f"time {token!r} is not a whole number of microseconds")
    return int(value)


def format_time(us: int) -> str:
    for unit in ("s", "ms"):
        scale = _TIME_UNITS[unit]
        if us and us % scale == 0:
            return f"{us // scale}{unit}"
    return f"{us}us"


def parse_rate(token: str) -> float:
    """``100Mbps``, ``2.5G``, ``1e6`` -> bits per second."""
    m = _RATE_RE.match(token)
    if not m:
        raise ValueError(f"bad rate {token!r}")
    return float(_number(m.group(1)) * _RATE_PREFIX[m.group(3)])


def parse_size(token: str) -> int:
    """``1MB`` -> 1_000_000 bytes (SI prefixes)."""
    m = _SIZE_RE.match(token)
    if not m:
        raise ValueError(f"bad size {token!r}")
    value = _number(m.group(1)) * _SIZE_PREFIX[m.group(3)]
    if value.denominator != 1:
        raise ValueError(f"size {token!r} is not a whole number of bytes")
    return int(value)


def parse_hz(token: str) -> Fraction:
    m = _HZ_RE.match(token)
    if m:
        return _number(m.group(1)) * _RATE_PREFIX[m.group(3)]
    return _number(token)


def parse_bool(token: str) -> bool:
    try:
        return _BOOLS[token.lower()]
    except KeyError:
        raise ValueError(f"bad boolean {token!r}") from None


def parse_list(token: str) -> tuple:
    return tuple(x for x in token.split(",") if x)


def parse_hex(token: str) -> bytes:
    return bytes.fromhex(token)


def parse_credential(token: str) -> tuple:
    user, sep, password = token.partition(":")
    if not sep or not user:
        raise ValueError(f"expected user:password, got {token!r}")
    return user, password


def parse_imsi(token: str) -> str:
    if len(token) != 15 or not token.isdigit():
        raise ValueError("IMSI must be 15 digits")
    return token


def parse_cores(token: str) -> tuple:
    return tuple(int(x) for x in parse_list(token))


def _choice(*allowed: str) -> Callable[[str], str]:
    def check(token: str) -> str:
        if token not in allowed:
            raise ValueError(f"expected one of {'|'.join(allowed)}")
        return token
    return check


def _any(token: str) -> str:
    return token


def _positive_int(token: str) -> int:
    value = int(token)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


@dataclass(frozen=True)
class _Schema:
    positional: int
    required: tuple = ()
    optional: dict = field(default_factory=dict)
    free_keys: bool = False  # push-policy accepts arbitrary scheduler parameters


_WAP_TYPES = ("cellular", "wifi", "uav", "satellite")

SCHEMAS: dict[str, _Schema] = {
    "add-wap": _Schema(1, ("type", "capacity"), {
        "type": _choice(*_WAP_TYPES), "capacity": parse_rate, "hs20": parse_bool,
        "cores": _positive_int, "lgw": parse_bool, "domain": parse_list,
        "consortium": parse_list, "realms": parse_list, "latency": parse_time}),
    "add-subscriber": _Schema(0, ("imsi",), {
        "imsi": parse_imsi, "key": parse_hex, "password": parse_credential,
        "consortium": parse_list, "maxrate": parse_rate, "domain": _any}),
    "add-ue": _Schema(1, ("imsi",), {
        "imsi": parse_imsi, "key": parse_hex, "password": parse_credential,
        "near": parse_list, "trusted": parse_list}),
    "attach": _Schema(1, ("via",), {"via": _any}),
    "start-flow": _Schema(1, ("ue", "class", "rate"), {
        "ue": _any, "class": _choice("voice", "video", "data"), "rate": parse_rate,
        "dst": _choice("internet", "local"), "multipath": parse_list, "bytes": parse_size,
        "via": _any}),
    "stop-flow": _Schema(1),
    "bind-flow": _Schema(1, ("via",), {"via": _any}),
    "handover": _Schema(1, ("to",), {"to": _any, "from": _any}),
    "fail-link": _Schema(1),
    "fail-wap": _Schema(1),
    "push-policy": _Schema(1, ("scheduler",), {"scheduler": _any}, free_keys=True),
    "set-cores": _Schema(1, ("active",), {"active": parse_cores}),
    "remove-controller": _Schema(0),
    "end": _Schema(0),
}


@dataclass(frozen=True)
class Directive:
    time: int
    verb: str
    args: tuple = ()
    options: tuple = ()  # ((key, token), ...) in source order
    line: int = field(default=0, compare=False)

    def opt(self, key: str, convert: Callable = _any, default=None):
        for k, v in self.options:
            if k == key:
                return convert(v)
        return default

    def has(self, key: str) -> bool:
        return any(k == key for k, _ in self.options)

    def extra_options(self) -> tuple:
        known = SCHEMAS[self.verb].optional
        return tuple((k, v) for k, v in self.options if k not in known)


@dataclass(frozen=True)
class Scenario:
    directives: tuple = ()
    seed: Optional[int] = None

    @property
    def end_time(self) -> Optional[int]:
        ends = [d.time for d in self.directives if d.verb == "end"]
        return min(ends) if ends else None

    @property
    def last_time(self) -> int:
        return max((d.time for d in self.directives), default=0)


def _parse_line(line_no: int, text: str) -> Directive:
    tokens = text.split()
    if tokens[0] != "at":
        raise ParseError(line_no, tokens[0], "expected 'at'")
    if len(tokens) < 3:
        raise ParseError(line_no, tokens[-1], "expected '<time> <directive>'")
    try:
        time = parse_time(tokens[1])
    except ValueError as exc:
        raise ParseError(line_no, tokens[1], str(exc)) from None
    verb = tokens[2]
    schema = SCHEMAS.get(verb)
    if schema is None:
        raise ParseError(line_no, verb, "unknown directive")
    args, options = [], []
    for token in tokens[3:]:
        if "=" in token:
            key, _, value = token.partition("=")
            convert = schema.optional.get(key)
            if convert is None and not schema.free_keys:
                raise ParseError(line_no, token, f"unknown option for {verb}")
            if any(k == key for k, _ in options):
                raise ParseError(line_no, token, "duplicate option")
            if convert is not None:
                try:
                    convert(value)
                except ValueError as exc:
                    raise ParseError(line_no, token, str(exc)) from None
            options.append((key, value))
        else:
            if options:
                raise ParseError(line_no, token, "positional argument after options")
            args.append(token)
    if len(args) != schema.positional:
        bad = args[schema.positional] if len(args) > schema.positional else verb
        raise ParseError(line_no, bad, f"{verb} takes {schema.positional} positional argument(s)")
    keys = {k for k, _ in options}
    for key in schema.required:
        if key not in keys:
            raise ParseError(line_no, verb, f"missing {key}=")
    if verb == "fail-link" and "-" not in args[0]:
        raise ParseError(line_no, args[0], "expected <a>-<b>")
    return Directive(time, verb, tuple(args), tuple(options), line_no)


def parse_scenario(text: str) -> Scenario:
    directives = []
    seed = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "seed":
            if len(tokens) != 2 or not tokens[1].isdigit():
                raise ParseError(line_no, tokens[-1], "expected 'seed <integer>'")
            seed = int(tokens[1])
            continue
        directives.append(_parse_line(line_no, line))
    # sorted() is stable: same-time directives keep file order
    directives = sorted(directives, key=lambda d: d.time)
    return Scenario(tuple(directives), seed)


def format_directive(d: Directive) -> str:
    parts = ["at", format_time(d.time), d.verb, *d.args]
    parts += [f"{k}={v}" for k, v in d.options]
    return " ".join(parts)


def format_scenario(scenario: Scenario) -> str:
    lines = [] if scenario.seed is None else [f"seed {scenario.seed}"]
    lines += [format_directive(d) for d in scenario.directives]
    return "\n".join(lines) + "\n"


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())
