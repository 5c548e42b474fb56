"""
Access-point model plus Hotspot 2.0 style discovery: extended beacons,
ANQP query/response, credential matching, network selection, and the
EAP-SIM / EAP-TTLS authentication exchanges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .epc import SubscriberProfile, keyed_digest, session_key
from .errors import (
    AnqpUnsupported,
    AuthenticationFailed,
    CertificateInvalid,
    InvalidQuery,
    MethodUnavailable,
)


class AccessType(str, Enum):
    CELLULAR = "cellular"
    WIFI = "wifi"
    UAV = "uav"
    SATELLITE = "satellite"


# One-way radio latency defaults in microseconds. Chosen for plausibility only;
# scenarios override them per WAP.
DEFAULT_RADIO_LATENCY = {
    AccessType.CELLULAR: 5_000,
    AccessType.WIFI: 2_000,
    AccessType.UAV: 3_000,
    AccessType.SATELLITE: 25_000,
}


class AnqpElement(str, Enum):
    DOMAIN_NAME = "DomainName"
    IP_AVAILABILITY = "IpAvailability"
    EAP_METHODS = "EapMethods"
    ROAMING_CONSORTIUM = "RoamingConsortium"
    NAI_REALM_LIST = "NaiRealmList"
    NETWORK_AUTH_TYPE = "NetworkAuthType"


@dataclass
class Wap:
    id: str
    access_type: AccessType
    capacity: float  # nominal bits/s with every comm-core active
    hs20_capable: bool = False
    advertised: dict = field(default_factory=dict)  # AnqpElement -> value
    total_cores: int = 1
    active_cores: tuple = (0,)
    current_load: float = 0.0
    has_lgw: bool = False
    up: bool = True
    radio_latency: Optional[int] = None

    def __post_init__(self):
        self.access_type = AccessType(self.access_type)
        if self.radio_latency is None:
            self.radio_latency = DEFAULT_RADIO_LATENCY[self.access_type]
        if self.active_cores == (0,) and self.total_cores > 1:
            self.active_cores = tuple(range(self.total_cores))

    @property
    def effective_capacity(self) -> float:
        return self.capacity * len(self.active_cores) / self.total_cores

    @property
    def load_fraction(self) -> float:
        cap = self.effective_capacity
        return self.current_load / cap if cap else 1.0


@dataclass(frozen=True)
class Beacon:
    wap: str
    interworking: bool
    timestamp: int


def make_beacon(wap: Wap, now: int) -> Beacon:
    return Beacon(wap.id, wap.hs20_capable, now)


@dataclass(frozen=True)
class AnqpQuery:
    ue: str
    wap: str
    tags: tuple


@dataclass(frozen=True)
class AnqpResponse:
    wap: str
    elements: tuple  # ((AnqpElement, value), ...) in request order

    def get(self, tag: AnqpElement, default=None):
        for key, value in self.elements:
            if key == tag:
                return value
        return default

    @property
    def tags(self) -> frozenset:
        return frozenset(k for k, _ in self.elements)


@dataclass(frozen=True)
class AnqpError:
    wap: str
    reason: str


def anqp_query(wap: Wap, tags: Iterable) -> AnqpResponse:
    """Answer with exactly the requested elements that the WAP advertises."""
    if not wap.hs20_capable:
        raise AnqpUnsupported(wap.id)
    requested = []
    for tag in tags:
        tag = AnqpElement(tag)
        if tag not in requested:
            requested.append(tag)
    if not requested:
        raise InvalidQuery("empty ANQP element list")
    return AnqpResponse(wap.id, tuple((t, wap.advertised[t]) for t in requested
                                      if t in wap.advertised))


ALL_ELEMENTS = tuple(AnqpElement)


class CredentialMatch(Enum):
    NONE = 0
    NAI_REALM = 1
    ROAMING_CONSORTIUM = 2
    HOME_DOMAIN = 3


def profile_eap_methods(profile: SubscriberProfile) -> tuple:
    methods = []
    if profile.shared_key is not None:
        methods.append("EAP-SIM")
    if profile.password_credential is not None:
        methods.append("EAP-TTLS")
    return tuple(methods)


def credential_match(profile: SubscriberProfile, anqp: AnqpResponse) -> CredentialMatch:
    domains = anqp.get(AnqpElement.DOMAIN_NAME, ())
    if isinstance(domains, str):
        domains = (domains,)
    if profile.home_domain in domains:
        return CredentialMatch.HOME_DOMAIN
    consortia = anqp.get(AnqpElement.ROAMING_CONSORTIUM, ())
    if set(consortia) & set(profile.roaming_consortia):
        return CredentialMatch.ROAMING_CONSORTIUM
    usable = profile_eap_methods(profile)
    for realm, methods in anqp.get(AnqpElement.NAI_REALM_LIST, ()):
        if realm == profile.realm and set(methods) & set(usable):
            return CredentialMatch.NAI_REALM
    return CredentialMatch.NONE


@dataclass(frozen=True)
class NetworkCandidate:
    wap: str
    anqp: Optional[AnqpResponse]
    credential_match: CredentialMatch
    link_quality: float
    load: float = 0.0
    access_type: Optional[str] = None


def make_candidate(wap: str, anqp: Optional[AnqpResponse], profile: SubscriberProfile,
                   link_quality: float, load: float = 0.0,
                   access_type: Optional[str] = None) -> NetworkCandidate:
    match = credential_match(profile, anqp) if anqp is not None else CredentialMatch.NONE
    return NetworkCandidate(wap, anqp, match, link_quality, load, access_type)


@dataclass(frozen=True)
class SelectionPolicy:
    min_link_quality: float = 0.0
    allowed_types: Optional[tuple] = None


def select_network(candidates: Iterable[NetworkCandidate], profile: SubscriberProfile,
                   policy: SelectionPolicy = SelectionPolicy()) -> Optional[str]:
    """
    Pick a WAP: best credential tier, then link quality, then lower load,
    then smallest WapId. Candidates without any credential match are never chosen.
    """
    eligible = [
        c for c in candidates
        if c.credential_match is not CredentialMatch.NONE
        and c.link_quality >= policy.min_link_quality
        and (policy.allowed_types is None or c.access_type in policy.allowed_types)
    ]
    if not eligible:
        return None
    best = min(eligible, key=lambda c: (-c.credential_match.value, -c.link_quality,
                                        c.load, c.wap))
    return best.wap


# ---------------------------------------------------------------------------
# authentication
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    issuer: str
    subject: str
    valid: bool = True


def validate_certificate(cert: Optional[Certificate], trusted_issuers: Iterable[str]) -> None:
    if cert is None or not cert.valid or cert.issuer not in set(trusted_issuers):
        raise CertificateInvalid(repr(cert))


def sim_response(sim_key: bytes, nonce: bytes) -> bytes:
    return keyed_digest(sim_key, nonce)


def eap_sim_authenticate(sim_key: Optional[bytes], hss, imsi: str,
                         trace: Optional[list] = None) -> bytes:
    """
    Run an EAP-SIM challenge against the HSS in-process; return the session key.

    ``sim_key`` is the key held by the device, which may disagree with the
    HSS copy.
    """
    trace = trace if trace is not None else []
    profile, nonce = hss.lookup(imsi)
    if profile.shared_key is None or sim_key is None:
        trace.append(("eap-sim-unavailable", imsi))
        raise MethodUnavailable(imsi)
    trace.append(("eap-sim-challenge", imsi, nonce))
    response = sim_response(sim_key, nonce)
    trace.append(("eap-sim-response", imsi, response))
    if response != keyed_digest(profile.shared_key, nonce):
        trace.append(("eap-failure", imsi))
        raise AuthenticationFailed(imsi)
    key = session_key(profile.shared_key, nonce)
    trace.append(("eap-success", imsi))
    return key


def eap_ttls_authenticate(certificate: Optional[Certificate], trusted_issuers: Iterable[str],
                          username: str, password: str, profile: SubscriberProfile,
                          trace: Optional[list] = None) -> bool:
    """Tunnelled username/password check; credentials never leave before the tunnel."""
    trace = trace if trace is not None else []
    if profile.password_credential is None:
        raise MethodUnavailable(profile.imsi)
    trace.append(("ttls-server-hello", certificate))
    try:
        validate_certificate(certificate, trusted_issuers)
    except CertificateInvalid:
        trace.append(("ttls-abort", "certificate"))
        raise
    trace.append(("tunnel-established", profile.imsi))
    trace.append(("ttls-credentials", username))
    if (username, password) != tuple(profile.password_credential):
        trace.append(("eap-failure", profile.imsi))
        raise AuthenticationFailed(profile.imsi)
    trace.append(("eap-success", profile.imsi))
    return True
