"""Command-line entry point: ``fedbatman <command> [--config F] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.  Diagnostics
go to stderr; results go to files in the output directory, together with a
``manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import batman, dataset, fl, netsim, nn
from .config import Config, ConfigError
from .core import STREAM_NOISE, SeededRng

log = logging.getLogger("fedbatman")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

CENTRAL_LOSS_HEADER = ["epoch", "train_loss", "eval_loss"]


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0.0.0+local"


class Run:
    """Tracks output files of one command and writes the manifest."""

    def __init__(self, cfg: Config, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["out_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = datetime.now(timezone.utc).isoformat()
        self.outputs: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.config_hash(),
            "tool_version": tool_version(),
            "seed": self.cfg.seed,
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "outputs": [
                {"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                for p in self.outputs
            ],
        }
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=".manifest.", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.out / "manifest.json")


# --- shared loaders ---------------------------------------------------------

def build_trace(cfg: Config, force_fig3: bool = False):
    d = cfg["data"]
    if d["trace"] and not force_fig3:
        return dataset.read_trace_csv(cfg.resolve(d["trace"]))
    if force_fig3 or d["source"] in ("fig3", "file"):
        return dataset.make_fig3_dataset()
    rng = SeededRng(cfg.seed).spawn(STREAM_NOISE)
    return dataset.make_trace(cfg.trace_specs(), rng, cfg["model"]["seq_len"])


def load_samples(cfg: Config, dataset_path: str | None = None) -> list:
    path = dataset_path or (cfg["data"]["dataset"] if cfg["data"]["source"] == "file" else "")
    if path:
        p = Path(dataset_path) if dataset_path else cfg.resolve(path)
        return dataset.read_dataset_csv(p)
    return dataset.make_windows(build_trace(cfg), cfg["model"]["seq_len"])


def model_config_for(cfg: Config, samples) -> nn.LstmConfig:
    mc = cfg.lstm_config()
    seq_len, routes = samples[0].window.shape
    if (seq_len, routes) != (mc.seq_len, mc.input_size):
        raise ValueError(
            f"dataset windows are {seq_len}x{routes} but the model expects {mc.seq_len}x{mc.input_size}"
        )
    return mc


def load_model(path, mc: nn.LstmConfig):
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise ValueError(f"cannot read model file {path}: {err}") from None
    params = fl.deserialize_params(data)
    if len(params) != mc.num_params:
        raise ValueError(
            f"model file has {len(params)} parameters but the configured model needs {mc.num_params}"
        )
    return params


def write_central_loss_csv(result: fl.CentralResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(CENTRAL_LOSS_HEADER) + "\n")
        for k, (tr, ev) in enumerate(zip(result.train_losses, result.eval_losses), start=1):
            fh.write(f"{k},{tr!r},{ev!r}\n")


def read_loss_curve(path) -> list[float]:
    """Loss-per-epoch from a central loss CSV or global loss per round from a rounds CSV."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if header == CENTRAL_LOSS_HEADER:
        return [float(line.split(",")[2]) for line in lines[1:]]
    if header == fl.ROUNDS_HEADER:
        return [r.global_loss for r in fl.read_rounds_csv(path)]
    if header == netsim.SIM_ROUNDS_HEADER:
        return [r.global_loss for r in netsim.read_sim_rounds_csv(path)]
    raise ValueError(f"{path}: not a loss or rounds CSV")


def fl_settings(cfg: Config) -> netsim.FlSettings:
    f, t = cfg["fl"], cfg["train"]
    return netsim.FlSettings(
        rounds=f["rounds"], batch_size=t["batch_size"], lr=t["lr"], convergence_tol=f["convergence_tol"],
        round_period=f["round_period"], start_time=f["start_time"], compute_time=f["compute_time"],
        in_band=f["in_band"], parallel=f["parallel"], fresh_adam=f["fresh_adam"],
    )


def link_model(cfg: Config) -> netsim.LinkModel:
    n = cfg["network"]
    if n["edges"]:
        return netsim.LinkModel.from_edges(cfg.num_nodes, [tuple(e) for e in n["edges"]], n["latency"], n["drop_prob"])
    return netsim.LinkModel.full_mesh(cfg.num_nodes, n["latency"], n["drop_prob"])


def ogm_settings(cfg: Config) -> netsim.OgmSettings:
    o = cfg["ogm"]
    return netsim.OgmSettings(enabled=o["enabled"], interval=o["interval"], ttl=o["ttl"], window=o["window"])


# --- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: Config, args) -> None:
    run = Run(cfg, "gen-data")
    trace = build_trace(cfg, force_fig3=args.fig3)
    samples = dataset.make_windows(trace, cfg["model"]["seq_len"])
    dataset.write_trace_csv(trace, run.path("trace.csv"))
    dataset.write_dataset_csv(samples, run.path("dataset.csv"))
    log.info("wrote %d-step trace and %d samples to %s", trace.num_steps, len(samples), run.out)
    run.finish()


def cmd_train_central(cfg: Config, args) -> None:
    samples = load_samples(cfg, args.dataset)
    mc = model_config_for(cfg, samples)
    run = Run(cfg, "train-central")
    t = cfg["train"]
    init = nn.init_params_from_seed(mc, cfg.seed)
    result = fl.train_centralized(samples, mc, init, cfg.seed, t["epochs"], t["batch_size"], t["lr"])
    run.path("central_model.flp").write_bytes(fl.serialize_params(result.params, t["epochs"], 0))
    write_central_loss_csv(result, run.path("central_loss.csv"))
    acc, loss = nn.evaluate(result.params, samples, mc)
    log.info("centralized: final loss %.6f, train accuracy %.4f", loss, acc)
    run.finish()


def cmd_train_fed(cfg: Config, args) -> None:
    samples = load_samples(cfg, args.dataset)
    mc = model_config_for(cfg, samples)
    if cfg.num_nodes < 2:
        raise ConfigError("'network.nodes' federated training needs at least 2 nodes")
    run = Run(cfg, "train-fed")
    scenario = netsim.Scenario(
        num_nodes=cfg.num_nodes, links=link_model(cfg), trace=None, model_config=mc,
        fl=fl_settings(cfg), fl_samples=samples, num_workers=cfg["fl"]["workers"],
        ogm=ogm_settings(cfg), seed=cfg.seed,
    )
    metrics = netsim.run_scenario(scenario)
    final = metrics.final_params
    run.path("fed_model.flp").write_bytes(fl.serialize_params(final, len(metrics.rounds), 0))
    fl.write_rounds_csv(metrics.rounds, run.path("fed_rounds.csv"))
    log.info("federated: %d rounds, final global loss %.6f", len(metrics.rounds), metrics.rounds[-1].global_loss)
    run.finish()


def cmd_simulate(cfg: Config, args) -> None:
    s = cfg["sim"]
    mc = cfg.lstm_config()
    mode = args.mode or s["mode"]
    selector = batman.SelectorMode()
    if mode == batman.PREDICTIVE:
        model_path = args.model or (str(cfg.resolve(s["model"])) if s["model"] else "")
        if not model_path:
            raise ConfigError("'sim.model' is required for predictive mode")
        selector = batman.SelectorMode(batman.PREDICTIVE, load_model(model_path, mc), mc)
    trace = build_trace(cfg) if s["cost_source"] == "trace" else None
    scenario = netsim.Scenario(
        num_nodes=cfg.num_nodes, links=link_model(cfg), trace=trace, decision_node=s["decision_node"],
        selector=selector, model_config=mc, fl=fl_settings(cfg) if s["run_fl"] else None,
        num_workers=cfg["fl"]["workers"], ogm=ogm_settings(cfg), cost_source=s["cost_source"],
        destination=s["destination"] if s["cost_source"] == "ogm" else None,
        route_neighbors=tuple(s["route_neighbors"]), ticks=s["ticks"] or None, seed=cfg.seed,
    )
    run = Run(cfg, "simulate")
    metrics = netsim.run_scenario(scenario)
    netsim.write_metrics_csv(metrics, run.path("metrics.csv"))
    if metrics.rounds:
        netsim.write_sim_rounds_csv(metrics, run.path("sim_rounds.csv"))
    batman.write_routing_csv([row[1:] for row in metrics.routing if row[0] == s["decision_node"]],
                             run.path("routing.csv"))
    log.info("simulate (%s): switches %s, cumulative cost %.6f, packets %s",
             mode, metrics.switch_times(), metrics.cumulative_cost, metrics.counters)
    run.finish()


def cmd_evaluate(cfg: Config, args) -> None:
    if not args.model:
        raise ConfigError("'--model' is required for evaluate")
    samples = load_samples(cfg, args.dataset)
    mc = model_config_for(cfg, samples)
    params = load_model(args.model, mc)
    acc, loss = nn.evaluate(params, samples, mc)
    run = Run(cfg, "evaluate")
    with run.path("evaluation.json").open("w") as fh:
        json.dump({"accuracy": acc, "mean_loss": loss, "samples": len(samples)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("accuracy %.4f, mean loss %.6f over %d samples", acc, loss, len(samples))
    run.finish()


def cmd_compare(cfg: Config, args) -> None:
    if not (args.a and args.b):
        raise ConfigError("'--a' and '--b' are required for compare")
    head_a = Path(args.a).read_text().split("\n", 1)[0].split(",")
    if head_a == netsim.METRICS_HEADER:
        summary = netsim.compare_runs(netsim.read_metrics_csv(args.a), netsim.read_metrics_csv(args.b))
    else:
        a, b = read_loss_curve(args.a), read_loss_curve(args.b)
        diffs = netsim.compare_loss_curves(a, b)
        summary = {"epochs": len(a), "final_loss_a": a[-1], "final_loss_b": b[-1], "loss_abs_diff": diffs}
    run = Run(cfg, "compare")
    with run.path("comparison.json").open("w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.finish()


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-central": cmd_train_central,
    "train-fed": cmd_train_fed,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def _global_flags(subcommand: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the command name
    default = {"default": argparse.SUPPRESS} if subcommand else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML scenario/config file", **default)
    common.add_argument("--seed", type=int, help="master seed (u64), overrides the config", **default)
    common.add_argument("--out", help="output directory, overrides out_dir", **default)
    common.add_argument("-v", "--verbose", action="store_true", **default)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(subcommand=True)
    parser = argparse.ArgumentParser(prog="fedbatman", parents=[_global_flags(subcommand=False)],
                                     description="Federated LSTM route prediction on a simulated mesh.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="write trace + windowed dataset CSVs")
    p.add_argument("--fig3", action="store_true", help="emit the canonical two-route reconstruction")
    for name in ("train-central", "train-fed"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--dataset", help="dataset CSV (default: generated from the config)")
    p = sub.add_parser("simulate", parents=[common], help="run the routing scenario")
    p.add_argument("--model", help="FLP1 model file for predictive mode")
    p.add_argument("--mode", choices=[batman.BASELINE, batman.PREDICTIVE])
    p = sub.add_parser("evaluate", parents=[common], help="accuracy and loss of a model on a dataset")
    p.add_argument("--model")
    p.add_argument("--dataset")
    p = sub.add_parser("compare", parents=[common], help="paired deltas between two runs")
    p.add_argument("--a")
    p.add_argument("--b")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = Config.load(args.config) if args.config else Config()
        if args.seed is not None or args.out is not None:
            cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out)
        COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
