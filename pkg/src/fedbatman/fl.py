"""Federated averaging: local epochs, parameter messages, aggregation, rounds.

Wire format of a parameter message (all integers little-endian)::

    offset  size  field
    0       4     magic b"FLP1"
    4       4     u32 round index
    8       4     u32 sender node id
    12      8     u64 number of parameters d
    20      8*d   d IEEE-754 float64 values
    20+8d   4     u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import csv
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .core import (
    SERVER_ID,
    STREAM_PARTITION,
    STREAM_SHUFFLE,
    ParameterVector,
    SeededRng,
    param_average,
)
from .dataset import WindowedSample, partition_random

MAGIC = b"FLP1"
_HEADER = struct.Struct("<4sIIQ")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size


class CorruptMessage(ValueError):
    def __init__(self, detail: str = ""):
        super().__init__("corrupt parameter message" + (f": {detail}" if detail else ""))


class RoundError(RuntimeError):
    pass


def serialize_params(w: ParameterVector, round_idx: int = 0, sender: int = 0) -> bytes:
    body = _HEADER.pack(MAGIC, round_idx, sender, len(w)) + w.values.astype("<f8").tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def decode_params(data: bytes) -> tuple[int, int, ParameterVector]:
    """``(round, sender, params)`` from an FLP1 payload."""
    data = bytes(data)
    if len(data) < HEADER_SIZE + _CRC.size:
        raise CorruptMessage("truncated")
    magic, round_idx, sender, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptMessage("bad magic")
    if len(data) != HEADER_SIZE + 8 * d + _CRC.size:
        raise CorruptMessage("length does not match header")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if crc != zlib.crc32(data[:-_CRC.size]):
        raise CorruptMessage("checksum mismatch")
    values = np.frombuffer(data, dtype="<f8", count=d, offset=HEADER_SIZE).astype(np.float64)
    try:
        params = ParameterVector(values)
    except ValueError as err:
        raise CorruptMessage(str(err)) from None
    return round_idx, sender, params


def deserialize_params(data: bytes) -> ParameterVector:
    return decode_params(data)[2]


@dataclass(frozen=True)
class ParamMessage:
    sender: int
    round: int
    payload: bytes

    @classmethod
    def pack(cls, sender: int, round_idx: int, params: ParameterVector) -> "ParamMessage":
        return cls(sender=sender, round=round_idx, payload=serialize_params(params, round_idx, sender))

    def unpack(self) -> ParameterVector:
        round_idx, sender, params = decode_params(self.payload)
        if (round_idx, sender) != (self.round, self.sender):
            raise CorruptMessage("envelope does not match payload header")
        return params


@dataclass
class ClientState:
    node: int
    params: ParameterVector
    adam: nn.AdamState
    samples: list
    rng: SeededRng = field(repr=False)

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError(f"client {self.node} has no local samples")


@dataclass(frozen=True)
class RoundReport:
    round: int
    client_losses: dict
    global_loss: float
    elapsed_ms: float = 0.0


def client_local_epoch(client: ClientState, batch_size: int, config: nn.LstmConfig) -> tuple[ClientState, float]:
    """One local epoch; Adam moments carry over, only ``params`` is overwritten by the server."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not client.samples:
        raise ValueError(f"client {client.node} has no local samples")
    params, adam, loss = nn.train_epoch(client.params, client.samples, batch_size, client.adam, client.rng, config)
    return replace(client, params=params, adam=adam), loss


def aggregate(messages: Sequence[ParamMessage], expected: Sequence[int] | None = None) -> ParameterVector:
    """Unweighted mean of the uploaded parameters, summed in ascending sender order."""
    if not messages:
        raise RoundError("round incomplete: no messages")
    rounds = {m.round for m in messages}
    if len(rounds) != 1:
        raise RoundError(f"messages from mixed rounds {sorted(rounds)}")
    senders = [m.sender for m in messages]
    if len(set(senders)) != len(senders):
        raise RoundError("duplicate sender in round")
    if expected is not None:
        missing = sorted(set(expected) - set(senders))
        extra = sorted(set(senders) - set(expected))
        if missing:
            raise RoundError(f"round incomplete: missing clients {missing}")
        if extra:
            raise RoundError(f"unexpected clients {extra}")
    ordered = sorted(messages, key=lambda m: m.sender)
    return param_average([m.unpack() for m in ordered])


def global_objective(w: ParameterVector, datasets: Sequence[Sequence[WindowedSample]], config: nn.LstmConfig) -> float:
    """Mean per-sample BCE of the single parameter vector ``w`` over every client's data."""
    samples = [s for ds in datasets for s in ds]
    if not samples:
        raise ValueError("no samples")
    windows = np.stack([s.window for s in samples])
    labels = np.array([float(s.label) for s in samples])
    losses = nn.batch_losses(w, windows, labels, config)
    return float(losses.sum() / len(samples))


def _local_epochs(clients, batch_size, config, parallel):
    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            futures = [pool.submit(client_local_epoch, c, batch_size, config) for c in clients]
            return [f.result() for f in futures]
    return [client_local_epoch(c, batch_size, config) for c in clients]


def run_round(
    clients: Sequence[ClientState],
    server_params: ParameterVector,
    batch_size: int,
    config: nn.LstmConfig,
    round_idx: int = 1,
    parallel: bool = False,
    fresh_adam: bool = False,
) -> tuple[list[ClientState], ParameterVector, RoundReport]:
    """Broadcast, one local epoch per client, upload, aggregate, install."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1: a round needs at least one local step")
    start = time.perf_counter()
    clients = sorted(clients, key=lambda c: c.node)
    broadcast = ParamMessage.pack(SERVER_ID, round_idx, server_params)
    received = broadcast.unpack()
    starting = []
    for c in clients:
        adam = nn.AdamState.fresh(len(received), lr=c.adam.lr) if fresh_adam else c.adam
        starting.append(replace(c, params=received, adam=adam))
    results = _local_epochs(starting, batch_size, config, parallel)
    uploads = [ParamMessage.pack(c.node, round_idx, c.params) for c, _ in results]
    new_global = aggregate(uploads, expected=[c.node for c in clients])
    updated = [replace(c, params=new_global) for c, _ in results]
    losses = {c.node: loss for c, loss in results}
    gl = global_objective(new_global, [c.samples for c in updated], config)
    report = RoundReport(round=round_idx, client_losses=losses, global_loss=gl,
                         elapsed_ms=(time.perf_counter() - start) * 1000.0)
    return updated, new_global, report


def converged(reports: Sequence[RoundReport], tol: float) -> bool:
    return len(reports) >= 2 and abs(reports[-1].global_loss - reports[-2].global_loss) < tol


def run_training(
    clients: Sequence[ClientState],
    global_params: ParameterVector,
    rounds: int,
    batch_size: int,
    config: nn.LstmConfig,
    convergence_tol: float = 0.0,
    parallel: bool = False,
    fresh_adam: bool = False,
) -> tuple[ParameterVector, list[RoundReport], list[ClientState]]:
    """Run up to ``rounds`` rounds, stopping early once ``|F_k - F_{k-1}| < convergence_tol``."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    reports: list[RoundReport] = []
    clients = list(clients)
    for k in range(1, rounds + 1):
        clients, global_params, report = run_round(
            clients, global_params, batch_size, config, k, parallel=parallel, fresh_adam=fresh_adam
        )
        reports.append(report)
        if converged(reports, convergence_tol):
            break
    return global_params, reports, clients


def make_clients(
    samples: Sequence[WindowedSample],
    num_workers: int,
    init: ParameterVector,
    seed: int,
    lr: float = 0.01,
) -> list[ClientState]:
    """Workers 1..num_workers with a seeded random split of ``samples``.

    Worker at position ``k`` shuffles with stream ``(seed, SHUFFLE, k)``, the
    same stream centralized training uses for ``k = 0``.
    """
    root = SeededRng(seed)
    ids = list(range(1, num_workers + 1))
    part = partition_random(len(samples), ids, root.spawn(STREAM_PARTITION))
    return [
        ClientState(
            node=node,
            params=init,
            adam=nn.AdamState.fresh(len(init), lr=lr),
            samples=part.samples_for(node, samples),
            rng=root.spawn(STREAM_SHUFFLE, k),
        )
        for k, node in enumerate(ids)
    ]


@dataclass(frozen=True)
class CentralResult:
    params: ParameterVector
    train_losses: list
    eval_losses: list


def train_centralized(
    samples: Sequence[WindowedSample],
    config: nn.LstmConfig,
    init: ParameterVector,
    seed: int,
    epochs: int = 10,
    batch_size: int = 5,
    lr: float = 0.01,
) -> CentralResult:
    """Plain single-node training; ``eval_losses[k]`` is the full-data loss after epoch k+1."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = SeededRng(seed).spawn(STREAM_SHUFFLE, 0)
    params, adam = init, nn.AdamState.fresh(len(init), lr=lr)
    train_losses, eval_losses = [], []
    for _ in range(epochs):
        params, adam, loss = nn.train_epoch(params, samples, batch_size, adam, rng, config)
        train_losses.append(loss)
        eval_losses.append(global_objective(params, [samples], config))
    return CentralResult(params=params, train_losses=train_losses, eval_losses=eval_losses)


ROUNDS_HEADER = ["round", "client_id", "local_loss", "global_loss", "elapsed_ms"]


def write_rounds_csv(reports: Sequence[RoundReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_HEADER)
        for r in reports:
            for node in sorted(r.client_losses):
                w.writerow([r.round, node, repr(float(r.client_losses[node])),
                            repr(float(r.global_loss)), repr(float(r.elapsed_ms))])


def read_rounds_csv(path) -> list[RoundReport]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ROUNDS_HEADER:
        raise ValueError(f"{path}: expected header {','.join(ROUNDS_HEADER)}")
    grouped: dict[int, dict] = {}
    for row in rows[1:]:
        k = int(row[0])
        entry = grouped.setdefault(k, {"losses": {}, "global": float(row[3]), "elapsed": float(row[4])})
        entry["losses"][int(row[1])] = float(row[2])
    return [
        RoundReport(round=k, client_losses=v["losses"], global_loss=v["global"], elapsed_ms=v["elapsed"])
        for k, v in sorted(grouped.items())
    ]
