"""Link-cost traces, sliding-window samples and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import LinkCostTrace, SeededRng

MIN_COST = 0.01
TRACE_KINDS = ("constant", "linear_ramp", "piecewise")

FIG3_LENGTH = 50
FIG3_CONSTANT = 2.0
FIG3_RAMP_START = 1.0
FIG3_RAMP_SLOPE = 0.05


@dataclass(frozen=True, eq=False)
class WindowedSample:
    window: np.ndarray  # seq_len x R
    label: int

    def __post_init__(self):
        w = np.array(self.window, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("window must be a seq_len x R matrix")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("window costs must be positive and finite")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        w.flags.writeable = False
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "label", int(self.label))

    def __eq__(self, other):
        if not isinstance(other, WindowedSample):
            return NotImplemented
        return self.label == other.label and self.window.shape == other.window.shape \
            and self.window.tobytes() == other.window.tobytes()

    __hash__ = None


@dataclass(frozen=True)
class TraceSpec:
    """Recipe for one route's cost column.

    ``constant`` uses ``level``; ``linear_ramp`` uses ``intercept`` and
    ``slope``; ``piecewise`` linearly interpolates ``breakpoints`` given as
    ``(t, cost)`` pairs and holds the end values outside them.
    """

    kind: str
    length: int
    level: float = 1.0
    intercept: float = 1.0
    slope: float = 0.0
    breakpoints: tuple = ()
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {self.kind!r}; expected one of {TRACE_KINDS}")
        if self.length < 1:
            raise ValueError("trace length must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.kind == "piecewise":
            if len(self.breakpoints) == 0:
                raise ValueError("piecewise trace needs at least one breakpoint")
            ts = [float(t) for t, _ in self.breakpoints]
            if ts != sorted(ts) or len(set(ts)) != len(ts):
                raise ValueError("piecewise breakpoints must have strictly increasing t")


def generate_trace(spec: TraceSpec, rng: SeededRng | None = None, seq_len: int = 4) -> LinkCostTrace:
    """Single-column trace from ``spec``; Gaussian noise then a floor at 0.01."""
    if spec.length < seq_len + 1:
        raise ValueError("trace too short")
    t = np.arange(spec.length, dtype=np.float64)
    if spec.kind == "constant":
        costs = np.full(spec.length, float(spec.level))
    elif spec.kind == "linear_ramp":
        costs = spec.intercept + spec.slope * t
    else:
        bt = np.array([float(p[0]) for p in spec.breakpoints])
        bv = np.array([float(p[1]) for p in spec.breakpoints])
        costs = np.interp(t, bt, bv)
    if spec.noise_std > 0:
        if rng is None:
            raise ValueError("a noisy trace needs an rng")
        costs = costs + spec.noise_std * rng.normal(spec.length)
    return LinkCostTrace(np.maximum(costs, MIN_COST))


def make_trace(specs: Sequence[TraceSpec], rng: SeededRng | None = None, seq_len: int = 4) -> LinkCostTrace:
    """Stack one generated column per route; every noisy route gets its own child stream."""
    if len({s.length for s in specs}) != 1:
        raise ValueError("all route specs must share the same length")
    columns = [
        generate_trace(s, rng.spawn(r) if rng is not None else None, seq_len)
        for r, s in enumerate(specs)
    ]
    return LinkCostTrace.from_columns(columns)


def fig3_specs() -> list[TraceSpec]:
    return [
        TraceSpec(kind="constant", length=FIG3_LENGTH, level=FIG3_CONSTANT),
        TraceSpec(kind="linear_ramp", length=FIG3_LENGTH, intercept=FIG3_RAMP_START, slope=FIG3_RAMP_SLOPE),
    ]


def make_fig3_dataset() -> LinkCostTrace:
    """Canonical two-route trace: route 0 flat at 2.0, route 1 ramping 1.0 + 0.05 t."""
    return make_trace(fig3_specs())


def crossing_index(trace: LinkCostTrace, rising: int = 1, flat: int = 0) -> int | None:
    """First t at which route ``rising`` costs at least as much as route ``flat``."""
    hits = np.nonzero(trace.costs[:, rising] >= trace.costs[:, flat])[0]
    return int(hits[0]) if hits.size else None


def label_for(costs_row) -> int:
    # argmin with ties to the lowest route id
    return int(np.argmin(np.asarray(costs_row)))


def make_windows(trace: LinkCostTrace, seq_len: int) -> list[WindowedSample]:
    """One sample per t in [seq_len, T-1]: rows t-seq_len..t-1, labelled by argmin of row t."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if trace.num_steps < seq_len + 1:
        raise ValueError("trace too short")
    if trace.num_routes > 2:
        raise ValueError("binary labels need at most two routes")
    costs = trace.costs
    return [
        WindowedSample(window=costs[t - seq_len:t], label=label_for(costs[t]))
        for t in range(seq_len, trace.num_steps)
    ]


@dataclass(frozen=True)
class ClientPartition:
    assignments: dict = field(default_factory=dict)  # NodeId -> list of sample indices

    def samples_for(self, node: int, samples: Sequence[WindowedSample]) -> list[WindowedSample]:
        return [samples[k] for k in self.assignments[node]]

    def sizes(self) -> dict:
        return {node: len(idx) for node, idx in self.assignments.items()}


def partition_random(num_samples: int, client_ids: Sequence[int], rng: SeededRng) -> ClientPartition:
    """Seeded shuffle dealt round-robin to ``client_ids``.

    Each client's indices are returned in ascending order, so a single client
    sees the samples in their original order.
    """
    if len(client_ids) == 0:
        raise ValueError("no clients")
    if len(set(client_ids)) != len(client_ids):
        raise ValueError("duplicate client ids")
    if len(client_ids) > num_samples:
        raise ValueError(f"more clients ({len(client_ids)}) than samples ({num_samples})")
    order = rng.permutation(num_samples)
    buckets = {c: [] for c in client_ids}
    for pos, idx in enumerate(order):
        buckets[client_ids[pos % len(client_ids)]].append(idx)
    return ClientPartition({c: sorted(v) for c, v in buckets.items()})


# --- CSV formats ------------------------------------------------------------

def write_trace_csv(trace: LinkCostTrace, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"route{r}" for r in range(trace.num_routes)])
        for t in range(trace.num_steps):
            w.writerow([t] + [repr(float(c)) for c in trace.costs[t]])


def read_trace_csv(path) -> LinkCostTrace:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t" or any(not h.startswith("route") for h in rows[0][1:]):
        raise ValueError(f"{path}: not a trace CSV (expected header t,route0,...)")
    body = rows[1:]
    for k, row in enumerate(body):
        if len(row) != len(rows[0]) or int(row[0]) != k:
            raise ValueError(f"{path}: malformed row {k + 2}")
    return LinkCostTrace(np.array([[float(v) for v in row[1:]] for row in body]))


def dataset_header(seq_len: int, num_routes: int) -> list[str]:
    return [f"x{t}_r{r}" for t in range(seq_len) for r in range(num_routes)] + ["label"]


def write_dataset_csv(samples: Sequence[WindowedSample], path) -> None:
    if not samples:
        raise ValueError("no samples to write")
    seq_len, routes = samples[0].window.shape
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(seq_len, routes))
        for s in samples:
            w.writerow([repr(float(v)) for v in s.window.reshape(-1)] + [s.label])


def read_dataset_csv(path) -> list[WindowedSample]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise ValueError(f"{path}: not a dataset CSV (missing label column)")
    header = rows[0]
    cols = header[:-1]
    try:
        seq_len = 1 + max(int(c[1:].split("_")[0]) for c in cols)
        routes = 1 + max(int(c.split("_r")[1]) for c in cols)
    except (ValueError, IndexError):
        raise ValueError(f"{path}: malformed dataset header") from None
    if header != dataset_header(seq_len, routes):
        raise ValueError(f"{path}: malformed dataset header")
    samples = []
    for k, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ValueError(f"{path}: malformed row {k + 2}")
        window = np.array([float(v) for v in row[:-1]]).reshape(seq_len, routes)
        samples.append(WindowedSample(window=window, label=int(row[-1])))
    if not samples:
        raise ValueError(f"{path}: dataset is empty")
    return samples
