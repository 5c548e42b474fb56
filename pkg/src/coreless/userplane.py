"""User-plane packet formats shared by every forwarding node."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

CORE = "Core"
LOCAL = "Local"


@dataclass
class Packet:
    flow_id: str
    seq: int
    size: int  # bytes on the wire
    ue: str
    imsi: str
    route: str = CORE  # Core | Local
    downlink: bool = True
    service_class: str = "data"
    binding: Optional[str] = None  # SGW binding key (subflow id for multipath)
    offset: int = 0  # application byte offset of the payload
    length: int = 0  # application payload bytes
    is_ack: bool = False
    forwarded: bool = False
    switch_seq: int = field(default=0, repr=False)  # handover that caused the forward
    hops: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.binding is None:
            self.binding = self.flow_id

    def record(self, path) -> None:
        # consecutive sends share the joining node
        for node in path:
            if not self.hops or self.hops[-1] != node:
                self.hops.append(node)
