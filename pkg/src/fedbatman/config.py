"""Scenario/config documents (TOML) with strict validation.

Grammar (every key optional, defaults shown)::

    seed = 0                      # master seed, u64
    out_dir = "out"

    [model]
    hidden_size = 16
    num_layers = 2
    seq_len = 4
    input_encoding = "log_relative"   # or "raw"
    input_gain = 20.0

    [train]
    epochs = 10
    batch_size = 5
    lr = 0.01

    [data]
    source = "fig3"               # "fig3" | "routes" | "file"
    dataset = ""                  # dataset CSV, required for source = "file"
    trace = ""                    # trace CSV, overrides generated traces

    [[data.routes]]               # one table per route, for source = "routes"
    kind = "constant"             # "constant" | "linear_ramp" | "piecewise"
    length = 50
    level = 1.0
    intercept = 1.0
    slope = 0.0
    breakpoints = []              # [[t, cost], ...]
    noise_std = 0.0

    [fl]
    workers = 2
    rounds = 10
    convergence_tol = 0.0
    round_period = 5.0
    start_time = 0.0
    compute_time = 0.0
    in_band = true
    parallel = false
    fresh_adam = false

    [network]
    nodes = 0                     # 0 means workers + 1
    latency = 0.01
    drop_prob = 0.0
    edges = []                    # [[a, b], ...]; empty means full mesh

    [ogm]
    enabled = true
    interval = 1.0
    ttl = 16
    window = 8

    [sim]
    mode = "baseline"             # or "predictive"
    model = ""                    # FLP1 model file, required for predictive
    decision_node = 1
    cost_source = "trace"         # or "ogm"
    destination = 0               # ogm cost source only
    route_neighbors = []          # ogm cost source only
    ticks = 0                     # ogm cost source only
    run_fl = false

Unknown keys, wrong types and out-of-range values raise :class:`ConfigError`
naming the offending ``section.key``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

from . import batman, nn
from .dataset import TRACE_KINDS, TraceSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


_ROUTE_DEFAULTS = {
    "kind": "constant", "length": 50, "level": 1.0, "intercept": 1.0, "slope": 0.0,
    "breakpoints": [], "noise_std": 0.0,
}

DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "model": {"hidden_size": 16, "num_layers": 2, "seq_len": 4,
              "input_encoding": "log_relative", "input_gain": 20.0},
    "train": {"epochs": 10, "batch_size": 5, "lr": 0.01},
    "data": {"source": "fig3", "dataset": "", "trace": "", "routes": []},
    "fl": {"workers": 2, "rounds": 10, "convergence_tol": 0.0, "round_period": 5.0,
           "start_time": 0.0, "compute_time": 0.0, "in_band": True, "parallel": False,
           "fresh_adam": False},
    "network": {"nodes": 0, "latency": 0.01, "drop_prob": 0.0, "edges": []},
    "ogm": {"enabled": True, "interval": 1.0, "ttl": 16, "window": 8},
    "sim": {"mode": "baseline", "model": "", "decision_node": 1, "cost_source": "trace",
            "destination": 0, "route_neighbors": [], "ticks": 0, "run_fl": False},
}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        loc = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown key '{loc}'")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{loc}' must be a table")
            out[key] = _merge(default, value, loc)
        elif loc == "data.routes":
            if not isinstance(value, list) or not all(isinstance(r, dict) for r in value):
                raise ConfigError("'data.routes' must be an array of tables")
            out[key] = [_merge(_ROUTE_DEFAULTS, r, f"data.routes[{i}]") for i, r in enumerate(value)]
        else:
            if not _type_ok(value, default):
                raise ConfigError(f"'{loc}' must be of type {type(default).__name__}, got {value!r}")
            out[key] = float(value) if isinstance(default, float) else value
    return out


def _check(cond: bool, loc: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"'{loc}' {msg}")


class Config:
    """Validated, fully-defaulted configuration document."""

    def __init__(self, doc: dict | None = None, base_dir: Path | None = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.raw = _merge(DEFAULTS, doc or {}, "")
        self._validate()

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        return cls(doc, base_dir=path.parent)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "Config":
        doc = copy.deepcopy(self.raw)
        if seed is not None:
            doc["seed"] = seed
        if out_dir is not None:
            doc["out_dir"] = out_dir
        return Config(doc, self.base_dir)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def config_hash(self) -> str:
        # out_dir only decides where files land, not what they contain
        doc = {k: v for k, v in self.raw.items() if k != "out_dir"}
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # --- derived objects ---------------------------------------------------

    def lstm_config(self) -> nn.LstmConfig:
        m = self.raw["model"]
        return nn.LstmConfig(input_size=self.num_routes, hidden_size=m["hidden_size"],
                             num_layers=m["num_layers"], seq_len=m["seq_len"],
                             input_encoding=m["input_encoding"], input_gain=m["input_gain"])

    @property
    def num_routes(self) -> int:
        d = self.raw["data"]
        if self.raw["sim"]["cost_source"] == "ogm":
            return len(self.raw["sim"]["route_neighbors"])
        if d["source"] == "routes":
            return len(d["routes"])
        return 2

    def trace_specs(self) -> list[TraceSpec]:
        out = []
        for r in self.raw["data"]["routes"]:
            out.append(TraceSpec(kind=r["kind"], length=r["length"], level=r["level"],
                                 intercept=r["intercept"], slope=r["slope"],
                                 breakpoints=tuple(tuple(bp) for bp in r["breakpoints"]),
                                 noise_std=r["noise_std"]))
        return out

    @property
    def num_nodes(self) -> int:
        n = self.raw["network"]["nodes"]
        return n if n else self.raw["fl"]["workers"] + 1

    # --- validation ----------------------------------------------------------

    def _validate(self) -> None:
        r = self.raw
        _check(0 <= r["seed"] < 2 ** 64, "seed", "must be a 64-bit unsigned integer")
        m = r["model"]
        for key in ("hidden_size", "num_layers", "seq_len"):
            _check(m[key] >= 1, f"model.{key}", "must be >= 1")
        _check(m["input_encoding"] in nn.ENCODINGS, "model.input_encoding", f"must be one of {nn.ENCODINGS}")
        _check(m["input_gain"] > 0, "model.input_gain", "must be > 0")
        t = r["train"]
        _check(t["epochs"] >= 1, "train.epochs", "must be >= 1")
        _check(t["batch_size"] >= 1, "train.batch_size", "must be >= 1")
        _check(t["lr"] > 0, "train.lr", "must be > 0")

        d = r["data"]
        _check(d["source"] in ("fig3", "routes", "file"), "data.source", "must be 'fig3', 'routes' or 'file'")
        if d["source"] == "file":
            _check(bool(d["dataset"]), "data.dataset", "is required when data.source = 'file'")
        if d["source"] == "routes":
            _check(1 <= len(d["routes"]) <= 2, "data.routes", "must list one or two routes")
            lengths = {x["length"] for x in d["routes"]}
            _check(len(lengths) == 1, "data.routes", "must all share one length")
            for i, x in enumerate(d["routes"]):
                loc = f"data.routes[{i}]"
                _check(x["kind"] in TRACE_KINDS, f"{loc}.kind", f"must be one of {TRACE_KINDS}")
                _check(x["length"] >= m["seq_len"] + 1, f"{loc}.length", "trace too short (needs >= seq_len + 1)")
                _check(x["noise_std"] >= 0, f"{loc}.noise_std", "must be >= 0")
                if x["kind"] == "piecewise":
                    bps = x["breakpoints"]
                    _check(len(bps) >= 1 and all(isinstance(b, list) and len(b) == 2 for b in bps),
                           f"{loc}.breakpoints", "must be a non-empty list of [t, cost] pairs")
                try:
                    self.trace_specs()[i]
                except (ValueError, TypeError) as err:
                    raise ConfigError(f"'{loc}' {err}") from None

        f = r["fl"]
        _check(f["workers"] >= 1, "fl.workers", "must be >= 1")
        _check(f["rounds"] >= 1, "fl.rounds", "must be >= 1")
        _check(f["convergence_tol"] >= 0, "fl.convergence_tol", "must be >= 0")
        _check(f["round_period"] > 0, "fl.round_period", "must be > 0")
        _check(f["start_time"] >= 0, "fl.start_time", "must be >= 0")
        _check(f["compute_time"] >= 0, "fl.compute_time", "must be >= 0")

        n = r["network"]
        _check(n["nodes"] == 0 or n["nodes"] >= 2, "network.nodes", "must be 0 (auto) or >= 2")
        _check(self.num_nodes >= f["workers"] + 1, "network.nodes", "must be >= fl.workers + 1")
        _check(n["latency"] >= 0, "network.latency", "must be >= 0")
        _check(0 <= n["drop_prob"] <= 1, "network.drop_prob", "must be in [0, 1]")
        for e in n["edges"]:
            ok = isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)
            _check(ok and e[0] != e[1] and all(0 <= v < self.num_nodes for v in e),
                   "network.edges", f"has invalid edge {e!r}")

        o = r["ogm"]
        _check(o["interval"] > 0, "ogm.interval", "must be > 0")
        _check(o["ttl"] >= 1, "ogm.ttl", "must be >= 1")
        _check(o["window"] >= 1, "ogm.window", "must be >= 1")

        s = r["sim"]
        _check(s["mode"] in (batman.BASELINE, batman.PREDICTIVE), "sim.mode", "must be 'baseline' or 'predictive'")
        _check(0 <= s["decision_node"] < self.num_nodes, "sim.decision_node", "is not a node of the network")
        _check(s["cost_source"] in ("trace", "ogm"), "sim.cost_source", "must be 'trace' or 'ogm'")
        if s["cost_source"] == "ogm":
            _check(o["enabled"], "ogm.enabled", "must be true when sim.cost_source = 'ogm'")
            _check(0 <= s["destination"] < self.num_nodes and s["destination"] != s["decision_node"],
                   "sim.destination", "must be a node other than the decision node")
            _check(1 <= len(s["route_neighbors"]) <= 2, "sim.route_neighbors", "must list one or two neighbours")
            adjacent = self.adjacency().get(s["decision_node"], set())
            for nb in s["route_neighbors"]:
                _check(nb in adjacent, "sim.route_neighbors", f"node {nb} is not adjacent to the decision node")
            _check(s["ticks"] >= m["seq_len"] + 1, "sim.ticks", "must be >= seq_len + 1 for cost_source = 'ogm'")
        try:
            self.lstm_config()
        except ValueError as err:
            raise ConfigError(f"'model' {err}") from None

    def adjacency(self) -> dict:
        n = self.num_nodes
        edges = self.raw["network"]["edges"] or [[a, b] for a in range(n) for b in range(a + 1, n)]
        adj: dict = {}
        for a, b in edges:
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        return adj
