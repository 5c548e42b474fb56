"""
Closed-form capacity calculators: CPRI-style fronthaul, packet backhaul and
the traffic-growth projection.

Units are SI throughout (1 EB = 10**18 bytes, 1 ZB = 10**21 bytes).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational, Real

from .errors import InvalidParams

EB = 10**18
ZB = 10**21
GB = 10**9

# LTE 20 MHz carrier is sampled at 30.72 Msps
LTE_OVERSAMPLING = Fraction(3072, 2000)
CPRI_CONTROL_WORD_FACTOR = Fraction(16, 15)
LINE_CODING_8B10B = Fraction(10, 8)


def _exact(x):
    # keep rational inputs rational so the canonical cases come out exact
    if isinstance(x, (int, Fraction, Rational)):
        return Fraction(x)
    if isinstance(x, float) and x.is_integer():
        return Fraction(int(x))
    return x


@dataclass(frozen=True)
class FronthaulParams:
    bandwidth_hz: float
    antennas: int
    sample_width_bits: int = 15
    oversampling: float = LTE_OVERSAMPLING
    control_word_factor: float = CPRI_CONTROL_WORD_FACTOR
    line_coding_factor: float = LINE_CODING_8B10B
    compression: float = 1  # optional baseband compression factor, 1 = none

    def validate(self) -> None:
        for name in ("bandwidth_hz", "antennas", "sample_width_bits", "oversampling",
                     "control_word_factor", "line_coding_factor", "compression"):
            value = getattr(self, name)
            if not isinstance(value, Real) or not value > 0:
                raise InvalidParams(f"{name} must be > 0, got {value!r}")
        if self.antennas < 1:
            raise InvalidParams("antennas must be >= 1")


@dataclass(frozen=True)
class TrafficProjection:
    base_year: int
    base_traffic: float  # bytes/month
    target_year: int


def cpri_fronthaul_rate(p: FronthaulParams) -> float:
    """Fronthaul line rate in bit/s for I/Q baseband transport."""
    p.validate()
    rate = (
        _exact(p.bandwidth_hz)
        * _exact(p.oversampling)
        * 2  # I and Q
        * _exact(p.sample_width_bits)
        * _exact(p.antennas)
        * _exact(p.control_word_factor)
        * _exact(p.line_coding_factor)
        * _exact(p.compression)
    )
    return float(rate)


def soda_backhaul_rate(information_rate: float, control_overhead_fraction: float) -> float:
    """Packet backhaul rate: user information plus multiplicative control overhead."""
    if information_rate < 0:
        raise InvalidParams("information_rate must be >= 0")
    if not 0 <= control_overhead_fraction < 1:
        raise InvalidParams("control overhead fraction must lie in [0, 1)")
    return float(_exact(information_rate) * (1 + _exact(control_overhead_fraction)))


def fronthaul_to_backhaul_ratio(p: FronthaulParams, information_rate: float,
                                control_overhead_fraction: float = 0.02) -> float:
    backhaul = soda_backhaul_rate(information_rate, control_overhead_fraction)
    if backhaul == 0:
        raise InvalidParams("zero backhaul rate has no defined ratio")
    return cpri_fronthaul_rate(p) / backhaul


def omnify_projection(p: TrafficProjection) -> float:
    """Traffic after growing tenfold every five years."""
    if p.target_year < p.base_year:
        raise InvalidParams("target_year must be >= base_year")
    years = p.target_year - p.base_year
    if years % 5 == 0:
        return p.base_traffic * 10 ** (years // 5)
    return p.base_traffic * 10 ** (years / 5)


def per_user_traffic(total: float, users: int) -> float:
    if users < 1:
        raise InvalidParams("users must be >= 1")
    return total / users
