"""Deterministic discrete-event network emulator and scenario driver.

One process, simulated time.  Node 0 is the FL server, nodes ``1..M-1`` are
workers, and one node makes a route decision every cost tick.  Three things
share the event queue:

* OGM flooding between all nodes (:mod:`fedbatman.batman`)
* cost ticks at ``t = 0, 1, 2, ...`` seconds, where the decision node picks a
  route from the scripted trace (or from OGM-derived costs)
* synchronous FL rounds whose parameter messages travel over the same links
  (optionally out-of-band)

Events are ordered by ``(time, seq)`` where ``seq`` is assigned at
scheduling time, so the run is a pure function of the scenario and its seed.
"""

from __future__ import annotations

import copy
import csv
import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import batman, fl, nn
from .core import SERVER_ID, STREAM_NETWORK, LinkCostTrace, ParameterVector, SeededRng
from .dataset import WindowedSample, make_windows

log = logging.getLogger(__name__)

DELIVER = "deliver"
OGM_TIMER = "ogm_timer"
FL_ROUND_START = "fl_round_start"
COST_TICK = "cost_tick"
FL_DEADLINE = "fl_deadline"
TRAIN_DONE = "train_done"

TICK_INTERVAL = 1.0


class CausalityError(ValueError):
    def __init__(self, time: float, now: float):
        super().__init__(f"causality violation: event at {time} scheduled at {now}")


class RoundFailed(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class SimEvent:
    time: float
    seq: int
    kind: str = field(compare=False)
    data: Any = field(compare=False, default=None)


class EventQueue:
    def __init__(self):
        self.now = 0.0
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.processed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, kind: str, data: Any = None) -> SimEvent:
        if time < self.now:
            raise CausalityError(time, self.now)
        event = SimEvent(float(time), self._seq, kind, data)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> SimEvent:
        event = heapq.heappop(self._heap)
        self.now = event.time
        self.processed += 1
        return event


def schedule(queue: EventQueue, time: float, kind: str, data: Any = None) -> SimEvent:
    return queue.schedule(time, kind, data)


@dataclass(frozen=True)
class Link:
    latency_s: float = 0.01
    drop_prob: float = 0.0
    connected: bool = True

    def __post_init__(self):
        if self.latency_s < 0:
            raise ValueError("latency must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")


_DISCONNECTED = Link(connected=False)


class LinkModel:
    """Directed links between node pairs; unlisted pairs are disconnected."""

    def __init__(self, num_nodes: int, links: dict | None = None):
        self.num_nodes = num_nodes
        self._links: dict[tuple[int, int], Link] = {}
        for (a, b), link in (links or {}).items():
            self.set(a, b, link)

    def set(self, a: int, b: int, link: Link) -> None:
        if not (0 <= a < self.num_nodes and 0 <= b < self.num_nodes) or a == b:
            raise ValueError(f"invalid link ({a}, {b}) for {self.num_nodes} nodes")
        self._links[(a, b)] = link

    def link(self, a: int, b: int) -> Link:
        return self._links.get((a, b), _DISCONNECTED)

    def neighbors(self, node: int) -> list[int]:
        return sorted(b for (a, b), l in self._links.items() if a == node and l.connected)

    def edges(self) -> list[tuple[int, int, Link]]:
        return [(a, b, l) for (a, b), l in sorted(self._links.items())]

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Sequence[tuple[int, int]], latency_s: float = 0.01,
                   drop_prob: float = 0.0) -> "LinkModel":
        model = cls(num_nodes)
        link = Link(latency_s=latency_s, drop_prob=drop_prob)
        for a, b in edges:
            model.set(a, b, link)
            model.set(b, a, link)
        return model

    @classmethod
    def full_mesh(cls, num_nodes: int, latency_s: float = 0.01, drop_prob: float = 0.0) -> "LinkModel":
        edges = [(a, b) for a in range(num_nodes) for b in range(a + 1, num_nodes)]
        return cls.from_edges(num_nodes, edges, latency_s, drop_prob)


def send(link: Link, packet: Any, now: float, rng: SeededRng) -> float | None:
    """Delivery time of ``packet`` over ``link``, or None if dropped / disconnected."""
    if not link.connected:
        return None
    # one draw per send keeps the drop stream aligned across drop_prob values
    u = float(rng.random(1)[0])
    if u < link.drop_prob:
        return None
    return now + link.latency_s


@dataclass(frozen=True)
class FlSettings:
    rounds: int = 10
    batch_size: int = 5
    lr: float = 0.01
    convergence_tol: float = 0.0
    round_period: float = 5.0
    start_time: float = 0.0
    compute_time: float = 0.0
    in_band: bool = True
    parallel: bool = False
    fresh_adam: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("fl rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("fl batch_size must be >= 1")
        if self.round_period <= 0:
            raise ValueError("fl round_period must be > 0")
        if self.compute_time < 0 or self.start_time < 0:
            raise ValueError("fl times must be >= 0")


@dataclass(frozen=True)
class OgmSettings:
    enabled: bool = True
    interval: float = batman.OGM_INTERVAL
    ttl: int = batman.DEFAULT_TTL
    window: int = batman.OGM_WINDOW


@dataclass
class Scenario:
    num_nodes: int = 3
    links: LinkModel | None = None
    trace: LinkCostTrace | None = None
    decision_node: int = 1
    selector: batman.SelectorMode = field(default_factory=batman.SelectorMode)
    model_config: nn.LstmConfig = field(default_factory=nn.LstmConfig)
    fl: FlSettings | None = None
    fl_samples: Sequence[WindowedSample] | None = None
    num_workers: int | None = None
    init_params: ParameterVector | None = None
    ogm: OgmSettings = field(default_factory=OgmSettings)
    cost_source: str = "trace"
    destination: int | None = None
    route_neighbors: tuple = ()
    ticks: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValueError("a scenario needs a server and at least one worker (num_nodes >= 2)")
        if self.links is None:
            self.links = LinkModel.full_mesh(self.num_nodes)
        if self.links.num_nodes != self.num_nodes:
            raise ValueError("link model size does not match num_nodes")
        if not 0 <= self.decision_node < self.num_nodes:
            raise ValueError(f"decision_node {self.decision_node} out of range")
        workers = self.num_nodes - 1 if self.num_workers is None else self.num_workers
        if not 1 <= workers <= self.num_nodes - 1:
            raise ValueError(f"num_workers must be in [1, {self.num_nodes - 1}]")
        self.num_workers = workers
        seq_len = self.model_config.seq_len
        if self.cost_source == "trace":
            if self.trace is None:
                if self.fl is None:
                    raise ValueError("cost_source 'trace' needs a trace")
            elif self.trace.num_steps < seq_len + 1:
                raise ValueError("trace too short")
        elif self.cost_source == "ogm":
            if self.destination is None or len(self.route_neighbors) < 1:
                raise ValueError("cost_source 'ogm' needs destination and route_neighbors")
            if self.ticks is None or self.ticks < seq_len + 1:
                raise ValueError("cost_source 'ogm' needs ticks >= seq_len + 1")
            if not self.ogm.enabled:
                raise ValueError("cost_source 'ogm' needs OGM flooding enabled")
            for n in self.route_neighbors:
                if n not in self.links.neighbors(self.decision_node):
                    raise ValueError(f"route neighbour {n} is not adjacent to the decision node")
        else:
            raise ValueError(f"unknown cost_source {self.cost_source!r}")
        if self.selector.mode == batman.PREDICTIVE and self.num_routes != self.model_config.input_size:
            raise ValueError("model input_size does not match the number of routes")
        if self.selector.mode == batman.PREDICTIVE and self.selector.config.seq_len != seq_len:
            raise ValueError("model seq_len does not match the scenario")

    @property
    def num_routes(self) -> int:
        if self.cost_source == "ogm":
            return len(self.route_neighbors)
        return self.trace.num_routes if self.trace is not None else self.model_config.input_size

    @property
    def num_ticks(self) -> int:
        if self.cost_source == "ogm":
            return self.ticks
        return self.trace.num_steps if self.trace is not None else 0


@dataclass(frozen=True)
class StepRecord:
    t: int
    mode: str
    chosen_route: int
    step_cost: float
    cumulative_cost: float
    switches: int


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    counters: dict = field(default_factory=lambda: {"sent": 0, "delivered": 0, "dropped": 0})
    retries: int = 0
    routing: list = field(default_factory=list)
    # (originator, seqno) -> {"first_seen": n, "forwards": n, "reached": set of nodes}
    ogm_stats: dict = field(default_factory=dict)
    final_params: ParameterVector | None = None

    def switch_times(self) -> list[int]:
        return [b.t for a, b in zip(self.steps, self.steps[1:]) if b.chosen_route != a.chosen_route]

    def first_switch(self) -> int | None:
        times = self.switch_times()
        return times[0] if times else None

    @property
    def cumulative_cost(self) -> float:
        return self.steps[-1].cumulative_cost if self.steps else 0.0

    def global_losses(self) -> list[float]:
        return [r.global_loss for r in self.rounds]


METRICS_HEADER = ["t", "mode", "chosen_route", "step_cost", "cumulative_cost", "switches"]
SIM_ROUNDS_HEADER = ["round", "client_id", "local_loss", "global_loss"]


def write_metrics_csv(metrics: MetricsLog, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for s in metrics.steps:
            w.writerow([s.t, s.mode, s.chosen_route, repr(s.step_cost), repr(s.cumulative_cost), s.switches])


def read_metrics_csv(path) -> MetricsLog:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: expected header {','.join(METRICS_HEADER)}")
    steps = [
        StepRecord(int(r[0]), r[1], int(r[2]), float(r[3]), float(r[4]), int(r[5]))
        for r in rows[1:]
    ]
    return MetricsLog(steps=steps)


def write_sim_rounds_csv(metrics: MetricsLog, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_ROUNDS_HEADER)
        for r in metrics.rounds:
            for node in sorted(r.client_losses):
                w.writerow([r.round, node, repr(float(r.client_losses[node])), repr(float(r.global_loss))])


def read_sim_rounds_csv(path) -> list[fl.RoundReport]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SIM_ROUNDS_HEADER:
        raise ValueError(f"{path}: expected header {','.join(SIM_ROUNDS_HEADER)}")
    grouped: dict[int, tuple[dict, float]] = {}
    for r in rows[1:]:
        losses, _ = grouped.setdefault(int(r[0]), ({}, float(r[3])))
        losses[int(r[1])] = float(r[2])
    return [fl.RoundReport(round=k, client_losses=v[0], global_loss=v[1]) for k, v in sorted(grouped.items())]


@dataclass(frozen=True)
class _FlPacket:
    attempt: int
    message: fl.ParamMessage


class Simulator:
    """Event loop for one :class:`Scenario`; call :meth:`run` once."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.queue = EventQueue()
        root = SeededRng(scenario.seed)
        self.net_rng = root.spawn(STREAM_NETWORK)
        self.metrics = MetricsLog()
        self.nodes = [
            batman.BatmanNode(n, ttl=scenario.ogm.ttl, window=scenario.ogm.window)
            for n in range(scenario.num_nodes)
        ]
        self._cost_history: list[np.ndarray] = []
        self._last_route: int | None = None
        self._switches = 0
        self._cum_cost = 0.0
        self._pool: ThreadPoolExecutor | None = None
        self._setup_fl(root)

    # --- FL state -----------------------------------------------------------

    def _setup_fl(self, root: SeededRng) -> None:
        sc = self.sc
        self.fl_done = sc.fl is None
        if sc.fl is None:
            return
        cfg = sc.model_config
        samples = sc.fl_samples
        if samples is None:
            if sc.trace is None:
                raise ValueError("FL needs fl_samples or a trace")
            samples = make_windows(sc.trace, cfg.seq_len)
        init = sc.init_params if sc.init_params is not None else nn.init_params_from_seed(cfg, sc.seed)
        if len(init) != cfg.num_params:
            raise ValueError("init_params length does not match the model config")
        self.global_params = init
        self.clients = {c.node: c for c in fl.make_clients(samples, sc.num_workers, init, sc.seed, sc.fl.lr)}
        self.round = 0
        self.attempt = 0
        self.round_open = False
        self._snapshot: dict[int, fl.ClientState] = {}
        self._pending: dict[int, Any] = {}
        self._trained: dict[int, tuple] = {}
        self._uploads: dict[int, fl.ParamMessage] = {}
        self._round_start = 0.0

    # --- network ------------------------------------------------------------

    def transmit(self, src: int, dst: int, packet: Any) -> None:
        self.metrics.counters["sent"] += 1
        when = send(self.sc.links.link(src, dst), packet, self.queue.now, self.net_rng)
        if when is None:
            self.metrics.counters["dropped"] += 1
            return
        self.queue.schedule(when, DELIVER, (src, dst, packet))

    def broadcast(self, src: int, packet: Any) -> None:
        for dst in self.sc.links.neighbors(src):
            self.transmit(src, dst, packet)

    # --- main loop ----------------------------------------------------------

    @property
    def ticks_done(self) -> bool:
        return len(self._cost_history) >= self.sc.num_ticks

    def finished(self) -> bool:
        return self.ticks_done and self.fl_done

    def run(self) -> MetricsLog:
        sc = self.sc
        if sc.ogm.enabled:
            for n in range(sc.num_nodes):
                self.queue.schedule(0.0, OGM_TIMER, n)
        if sc.num_ticks > 0:
            self.queue.schedule(0.0, COST_TICK, 0)
        if sc.fl is not None:
            self.queue.schedule(sc.fl.start_time, FL_ROUND_START, 1)
        handlers = {
            DELIVER: self._on_deliver,
            OGM_TIMER: self._on_ogm_timer,
            COST_TICK: self._on_cost_tick,
            FL_ROUND_START: self._on_round_start,
            FL_DEADLINE: self._on_deadline,
            TRAIN_DONE: self._on_train_done,
        }
        if sc.fl is not None and sc.fl.parallel:
            self._pool = ThreadPoolExecutor(max_workers=sc.num_workers)
        try:
            while self.queue:
                event = self.queue.pop()
                handlers[event.kind](event)
        finally:
            if self._pool is not None:
                self._pool.shutdown(wait=True)
        now = self.queue.now
        self.metrics.routing = [row for node in self.nodes for row in
                                [(node.node_id,) + r for r in batman.routing_snapshot(node, now)]]
        if sc.fl is not None:
            self.metrics.final_params = self.global_params
        return self.metrics

    def _on_deliver(self, event: SimEvent) -> None:
        src, dst, packet = event.data
        self.metrics.counters["delivered"] += 1
        if isinstance(packet, batman.OgmPacket):
            node = self.nodes[dst]
            before = node.first_seen
            fwd = node.handle(packet, self.queue.now)
            stats = self.metrics.ogm_stats.setdefault(
                (packet.originator, packet.seqno), {"first_seen": 0, "forwards": 0, "reached": set()})
            if node.first_seen > before:
                stats["first_seen"] += 1
                stats["reached"].add(dst)
            if fwd is not None:
                stats["forwards"] += 1
                self.broadcast(dst, fwd)
        elif isinstance(packet, _FlPacket):
            if dst == SERVER_ID:
                self._on_upload(packet)
            else:
                self._on_broadcast_received(dst, packet)
        else:
            raise TypeError(f"unknown packet type {type(packet).__name__}")

    def _on_ogm_timer(self, event: SimEvent) -> None:
        if self.finished():
            return
        node = event.data
        self.broadcast(node, self.nodes[node].originate())
        self.queue.schedule(self.queue.now + self.sc.ogm.interval, OGM_TIMER, node)

    # --- route decisions ----------------------------------------------------

    def _current_costs(self, t: int) -> np.ndarray:
        sc = self.sc
        if sc.cost_source == "trace":
            return sc.trace.costs[t]
        node = self.nodes[sc.decision_node]
        return np.array([
            batman.quality_to_cost(batman.link_quality(node.table, sc.destination, n))
            for n in sc.route_neighbors
        ])

    def _on_cost_tick(self, event: SimEvent) -> None:
        sc = self.sc
        t = event.data
        costs = np.array(self._current_costs(t), dtype=np.float64)
        self._cost_history.append(costs)
        seq_len = sc.model_config.seq_len
        if t >= seq_len:
            if sc.selector.mode == batman.PREDICTIVE:
                window = np.stack(self._cost_history[t - seq_len:t])
                route = batman.select_next_hop_predictive(window, sc.selector)
            else:
                route = batman.select_next_hop_baseline(costs)
            if self._last_route is not None and route != self._last_route:
                self._switches += 1
            self._last_route = route
            step_cost = float(costs[route])
            self._cum_cost += step_cost
            self.metrics.steps.append(StepRecord(t, sc.selector.mode, route, step_cost, self._cum_cost, self._switches))
        if t + 1 < sc.num_ticks:
            self.queue.schedule((t + 1) * TICK_INTERVAL, COST_TICK, t + 1)

    # --- FL rounds ----------------------------------------------------------

    def _on_round_start(self, event: SimEvent) -> None:
        k = event.data
        cfg = self.sc.fl
        self.round = k
        self.attempt = 1
        self._snapshot = {n: self._copy_client(c) for n, c in self.clients.items()}
        if not cfg.in_band:
            clients, self.global_params, report = fl.run_round(
                list(self.clients.values()), self.global_params, cfg.batch_size, self.sc.model_config, k,
                parallel=cfg.parallel, fresh_adam=cfg.fresh_adam,
            )
            self.clients = {c.node: c for c in clients}
            self._finish_round(replace(report, elapsed_ms=0.0))
            return
        self._start_attempt()

    @staticmethod
    def _copy_client(c: fl.ClientState) -> fl.ClientState:
        return replace(c, rng=copy.deepcopy(c.rng))

    def _start_attempt(self) -> None:
        self.round_open = True
        self._round_start = self.queue.now
        self._pending.clear()
        self._trained.clear()
        self._uploads.clear()
        message = fl.ParamMessage.pack(SERVER_ID, self.round, self.global_params)
        packet = _FlPacket(self.attempt, message)
        for node in sorted(self.clients):
            self.transmit(SERVER_ID, node, packet)
        self.queue.schedule(self.queue.now + self.sc.fl.round_period, FL_DEADLINE, (self.round, self.attempt))

    def _stale(self, message: fl.ParamMessage, attempt: int) -> bool:
        return not self.round_open or message.round != self.round or attempt != self.attempt

    def _on_broadcast_received(self, node: int, packet: _FlPacket) -> None:
        if self._stale(packet.message, packet.attempt) or node in self._pending:
            return
        cfg = self.sc.fl
        params = packet.message.unpack()
        base = self._copy_client(self._snapshot[node])
        adam = nn.AdamState.fresh(len(params), lr=base.adam.lr) if cfg.fresh_adam else base.adam
        client = replace(base, params=params, adam=adam)
        if self._pool is not None:
            self._pending[node] = self._pool.submit(fl.client_local_epoch, client, cfg.batch_size, self.sc.model_config)
        else:
            self._pending[node] = fl.client_local_epoch(client, cfg.batch_size, self.sc.model_config)
        self.queue.schedule(self.queue.now + cfg.compute_time, TRAIN_DONE, (node, self.round, self.attempt))

    def _on_train_done(self, event: SimEvent) -> None:
        node, k, attempt = event.data
        if k != self.round or attempt != self.attempt or not self.round_open:
            return
        result = self._pending[node]
        if hasattr(result, "result"):
            result = result.result()
        self._trained[node] = result
        client, _ = result
        message = fl.ParamMessage.pack(node, k, client.params)
        self.transmit(node, SERVER_ID, _FlPacket(attempt, message))

    def _on_upload(self, packet: _FlPacket) -> None:
        message = packet.message
        if self._stale(message, packet.attempt):
            return
        self._uploads[message.sender] = message
        if len(self._uploads) < len(self.clients):
            return
        new_global = fl.aggregate(list(self._uploads.values()), expected=sorted(self.clients))
        self.global_params = new_global
        self.clients = {
            n: replace(self._trained[n][0], params=new_global) for n in sorted(self.clients)
        }
        losses = {n: self._trained[n][1] for n in sorted(self.clients)}
        gl = fl.global_objective(new_global, [self.clients[n].samples for n in sorted(self.clients)],
                                 self.sc.model_config)
        elapsed = (self.queue.now - self._round_start) * 1000.0
        self.round_open = False
        self._finish_round(fl.RoundReport(self.round, losses, gl, elapsed))

    def _finish_round(self, report: fl.RoundReport) -> None:
        self.metrics.rounds.append(report)
        cfg = self.sc.fl
        if report.round >= cfg.rounds or fl.converged(self.metrics.rounds, cfg.convergence_tol):
            self.fl_done = True
            return
        self.queue.schedule(self.queue.now, FL_ROUND_START, report.round + 1)

    def _on_deadline(self, event: SimEvent) -> None:
        k, attempt = event.data
        if k != self.round or attempt != self.attempt or not self.round_open:
            return
        if attempt >= 2:
            self.round_open = False
            raise RoundFailed(f"round failed: FL round {k} incomplete after retry "
                              f"({len(self._uploads)}/{len(self.clients)} uploads)")
        log.warning("FL round %d incomplete at deadline, retrying", k)
        self.metrics.retries += 1
        self.attempt = 2
        self._start_attempt()


def run_scenario(scenario: Scenario) -> MetricsLog:
    return Simulator(scenario).run()


def compare_loss_curves(a: Sequence[float], b: Sequence[float]) -> list[float]:
    if len(a) != len(b):
        raise ValueError(f"loss curves differ in length ({len(a)} vs {len(b)})")
    return [abs(x - y) for x, y in zip(a, b)]


def compare_runs(log_a: MetricsLog, log_b: MetricsLog) -> dict:
    """Paired differences ``a - b`` between two runs over the same trace."""
    if len(log_a.steps) != len(log_b.steps):
        raise ValueError(f"runs cover different trace lengths ({len(log_a.steps)} vs {len(log_b.steps)})")
    sa, sb = log_a.first_switch(), log_b.first_switch()
    summary = {
        "steps": len(log_a.steps),
        "switch_time_a": sa,
        "switch_time_b": sb,
        "switch_time_delta": None if sa is None or sb is None else sa - sb,
        "switches_a": log_a.steps[-1].switches if log_a.steps else 0,
        "switches_b": log_b.steps[-1].switches if log_b.steps else 0,
        "cumulative_cost_a": log_a.cumulative_cost,
        "cumulative_cost_b": log_b.cumulative_cost,
        "cumulative_cost_delta": log_a.cumulative_cost - log_b.cumulative_cost,
        "final_loss_a": log_a.rounds[-1].global_loss if log_a.rounds else None,
        "final_loss_b": log_b.rounds[-1].global_loss if log_b.rounds else None,
    }
    if log_a.rounds and log_b.rounds:
        summary["loss_abs_diff"] = compare_loss_curves(log_a.global_losses(), log_b.global_losses())
    return summary
