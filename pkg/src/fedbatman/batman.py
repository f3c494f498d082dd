"""B.A.T.M.A.N.-style originator flooding, link quality and next-hop selection.

Each node periodically floods an originator message (OGM).  Receivers count,
per ``(originator, neighbour)`` pair, how many of the last ``window``
originator sequence numbers reached them through that neighbour; that
reception rate is the transmit-quality estimate, and the neighbour with the
best rate becomes the next hop towards the originator.

Route *selection* at a decision node is separate from the protocol
state: :func:`select_next_hop_baseline` takes the current best cost, while
:func:`select_next_hop_predictive` asks the trained LSTM which route to use
next.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .core import ParameterVector

DEFAULT_TTL = 16
OGM_WINDOW = 8
OGM_INTERVAL = 1.0
MIN_QUALITY = 0.01

BASELINE = "baseline"
PREDICTIVE = "predictive"


@dataclass(frozen=True)
class OgmPacket:
    originator: int
    seqno: int
    sender: int
    ttl: int


class NeighborTable:
    """Sliding reception windows keyed by ``(originator, neighbour)``."""

    def __init__(self, window: int = OGM_WINDOW):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._latest: dict[int, int] = {}
        self._received: dict[tuple[int, int], set[int]] = {}

    def latest(self, originator: int) -> int | None:
        return self._latest.get(originator)

    def in_window(self, originator: int, seqno: int) -> bool:
        latest = self._latest.get(originator)
        return latest is None or seqno > latest - self.window

    def record(self, originator: int, neighbor: int, seqno: int) -> None:
        latest = self._latest.get(originator)
        if latest is not None and seqno <= latest - self.window:
            return  # older than the window
        if latest is None or seqno > latest:
            self._latest[originator] = latest = seqno
        self._received.setdefault((originator, neighbor), set()).add(seqno)
        floor = latest - self.window
        for (orig, _), seqnos in self._received.items():
            if orig == originator:
                seqnos.difference_update([s for s in seqnos if s <= floor])

    def received(self, originator: int, neighbor: int) -> int:
        latest = self._latest.get(originator)
        if latest is None:
            return 0
        floor = latest - self.window
        return sum(1 for s in self._received.get((originator, neighbor), ()) if s > floor)

    def quality(self, originator: int, neighbor: int) -> float:
        return self.received(originator, neighbor) / self.window

    def neighbors(self, originator: int) -> list[int]:
        return sorted(n for (o, n) in self._received if o == originator)

    def originators(self) -> list[int]:
        return sorted(self._latest)


def link_quality(table: NeighborTable, originator: int, neighbor: int) -> float:
    """Fraction of the last ``window`` intervals with an OGM via ``neighbor``; 0 if unknown."""
    return table.quality(originator, neighbor)


def quality_to_cost(quality: float) -> float:
    return 1.0 / max(quality, MIN_QUALITY)


@dataclass(frozen=True)
class RouteEntry:
    next_hop: int
    metric: float
    time: float


class BatmanNode:
    """Protocol state of one node: own sequence numbers, dedup, neighbour and routing tables."""

    def __init__(self, node_id: int, ttl: int = DEFAULT_TTL, window: int = OGM_WINDOW):
        if ttl < 1:
            raise ValueError("initial ttl must be >= 1")
        self.node_id = node_id
        self.ttl = ttl
        self.table = NeighborTable(window)
        self.routes: dict[int, RouteEntry] = {}
        self._last_seqno: int | None = None
        self._seen: dict[int, set[int]] = {}
        self.forwarded = 0
        self.first_seen = 0

    def next_seqno(self) -> int:
        return 0 if self._last_seqno is None else self._last_seqno + 1

    def originate(self, seqno: int | None = None) -> OgmPacket:
        if seqno is None:
            seqno = self.next_seqno()
        if seqno < 0 or (self._last_seqno is not None and seqno <= self._last_seqno):
            raise ValueError(
                f"node {self.node_id}: seqno {seqno} does not advance past {self._last_seqno}"
            )
        self._last_seqno = seqno
        return OgmPacket(originator=self.node_id, seqno=seqno, sender=self.node_id, ttl=self.ttl)

    def _is_duplicate(self, packet: OgmPacket) -> bool:
        seen = self._seen.get(packet.originator, set())
        return packet.seqno in seen or not self.table.in_window(packet.originator, packet.seqno)

    def handle(self, packet: OgmPacket, now: float = 0.0) -> OgmPacket | None:
        """Process a received OGM; returns the packet to rebroadcast, or None to drop."""
        if packet.originator == self.node_id:
            return None  # own OGM echoed back
        duplicate = self._is_duplicate(packet)
        self.table.record(packet.originator, packet.sender, packet.seqno)
        self._update_route(packet.originator, now)
        if duplicate:
            return None
        seen = self._seen.setdefault(packet.originator, set())
        seen.add(packet.seqno)
        floor = packet.seqno - self.table.window
        seen.difference_update([s for s in seen if s <= floor])
        self.first_seen += 1
        if packet.ttl <= 1:
            return None
        self.forwarded += 1
        return replace(packet, ttl=packet.ttl - 1, sender=self.node_id)

    def _update_route(self, originator: int, now: float) -> None:
        best, best_q = None, -1.0
        for n in self.table.neighbors(originator):
            q = self.table.quality(originator, n)
            if q > best_q:
                best, best_q = n, q
        if best is not None:
            self.routes[originator] = RouteEntry(next_hop=best, metric=best_q, time=now)

    def next_hop(self, originator: int) -> int | None:
        entry = self.routes.get(originator)
        return None if entry is None else entry.next_hop


def originate_ogm(node: BatmanNode, seqno: int) -> OgmPacket:
    return node.originate(seqno)


def handle_ogm(node: BatmanNode, packet: OgmPacket) -> OgmPacket | None:
    return node.handle(packet)


@dataclass(frozen=True)
class SelectorMode:
    mode: str = BASELINE
    params: ParameterVector | None = None
    config: nn.LstmConfig | None = None

    def __post_init__(self):
        if self.mode not in (BASELINE, PREDICTIVE):
            raise ValueError(f"unknown selector mode {self.mode!r}")
        if self.mode == PREDICTIVE:
            if self.params is None or self.config is None:
                raise ValueError("predictive mode needs trained parameters and a model config")
            if len(self.params) != self.config.num_params:
                raise ValueError(
                    f"model has {len(self.params)} parameters, config expects {self.config.num_params}"
                )


def select_next_hop_baseline(costs: Sequence[float]) -> int:
    """Lowest current cost wins; ties go to the lowest route id."""
    costs = np.asarray(costs, dtype=np.float64).reshape(-1)
    if costs.size == 0:
        raise ValueError("no routes to choose from")
    return int(np.argmin(costs))


def select_next_hop_predictive(window, model: SelectorMode) -> int:
    if not isinstance(model, SelectorMode) or model.mode != PREDICTIVE:
        raise ValueError("predictive selection needs a trained predictive model")
    return nn.predict(model.params, window, model.config).chosen_route


def write_routing_csv(rows: Sequence[tuple], path) -> None:
    """Rows of ``(originator, next_hop, metric, time)`` as a snapshot CSV."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["originator", "next_hop", "metric", "time"])
        for originator, next_hop, metric, time in rows:
            w.writerow([originator, next_hop, repr(float(metric)), repr(float(time))])


def routing_snapshot(node: BatmanNode, now: float) -> list[tuple]:
    return [(o, e.next_hop, e.metric, now) for o, e in sorted(node.routes.items())]
