"""Deterministic simulator of synchronous data-parallel SGD.

Workers are logical replicas inside one process with barrier semantics; the
contract is algorithmic fidelity (bit-identical replicas, fixed reduction
order), not wire fidelity. Gradients are combined with a chunked two-phase
ring all-reduce: k-1 scatter-reduce steps followed by k-1 all-gather steps
over ceil(d/k)-element chunks, chunk c owned by worker c mod k. Because the
ring fixes every summation order, concurrent and sequential execution are
bit-identical, and so are repeated runs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .imbalance import AdaptiveWeightState
from .seeds import as_generator
from .trainer import Model, OptimizerState, RunConfig, apply_update, iterate_batches, multilabel_gradients

_MOD = "distsim"


@dataclass
class WorkerGroup:
    """k model replicas in ring order 0..k-1 with disjoint row shards."""

    k: int
    replicas: list[Model]
    shards: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1 or len(self.replicas) != self.k:
            raise DataError(_MOD, "length-mismatch", f"{len(self.replicas)} replicas for k={self.k}")


def broadcast(params: np.ndarray, group: WorkerGroup) -> None:
    """Load one flat parameter vector into every replica, bit-identically."""
    for replica in group.replicas:
        replica.load_flat(params)


def _chunk_bounds(d: int, k: int) -> list[tuple[int, int]]:
    size = math.ceil(d / k) if k else d
    return [(min(d, c * size), min(d, (c + 1) * size)) for c in range(k)]


def ring_allreduce(vectors: list[np.ndarray]) -> list[np.ndarray]:
    """Elementwise sum of k equal-length vectors on every worker.

    Scatter-reduce then all-gather over ceil(d/k) chunks. At step s of
    scatter-reduce, worker w sends chunk (w - s - 1) mod k to worker w+1, so
    chunk c accumulates around the ring starting at worker c+1 and completes
    on its owner c. That fixed order makes the result reproducible
    bit-for-bit: chunk c equals the left-fold sum over workers
    c+1, c+2, ..., c+k (mod k).
    """
    k = len(vectors)
    if k == 0:
        raise DataError(_MOD, "length-mismatch", "no vectors to reduce")
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    d = vectors[0].size
    for v in vectors[1:]:
        if v.size != d:
            raise DataError(_MOD, "length-mismatch", f"vector lengths differ: {v.size} vs {d}")
    if k == 1:
        return [vectors[0].copy()]
    bounds = _chunk_bounds(d, k)
    buf = [v.copy() for v in vectors]
    # scatter-reduce: after k-1 synchronous steps worker c holds the full
    # sum of chunk c
    for s in range(k - 1):
        payloads = []
        for w in range(k):
            c = (w - s - 1) % k
            lo, hi = bounds[c]
            payloads.append((c, buf[w][lo:hi].copy()))
        for w in range(k):
            c, payload = payloads[(w - 1) % k]
            lo, hi = bounds[c]
            buf[w][lo:hi] += payload
    # all-gather: circulate each completed chunk around the ring
    for s in range(k - 1):
        payloads = []
        for w in range(k):
            c = (w - s) % k
            lo, hi = bounds[c]
            payloads.append((c, buf[w][lo:hi].copy()))
        for w in range(k):
            c, payload = payloads[(w - 1) % k]
            lo, hi = bounds[c]
            buf[w][lo:hi] = payload
    return buf


@dataclass
class ParallelRunResult:
    model: Model
    losses: list[float]
    divergence: list[float]  # max abs replica difference per step (0.0 expected)
    group: WorkerGroup


def _flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def _unflatten_grads(vec: np.ndarray, model: Model):
    grads = []
    offset = 0
    for s in model.stages:
        nw = s.W.size
        gW = vec[offset : offset + nw].reshape(s.W.shape)
        offset += nw
        gb = vec[offset : offset + s.b.size]
        offset += s.b.size
        grads.append((gW, gb))
    return grads


def parallel_train(
    k: int,
    batch_per_worker: int,
    steps: int,
    seed,
    run_cfg: RunConfig,
    data: tuple[np.ndarray, np.ndarray],
    init_model: Model,
    check_replicas: bool = True,
) -> ParallelRunResult:
    """Synchronous data-parallel SGD over k logical workers.

    Each step takes the next k*b rows of ``data`` in fixed order as the
    global batch; worker w computes raw gradient sums on rows
    [w*b, (w+1)*b), the sums are combined by ring_allreduce, divided once by
    the global active-entry count, and the identical update is applied on
    every replica. Down-sampling masks and adaptive weights are derived from
    the global batch, so a k-worker run follows the same trajectory as a
    single worker with batch k*b (up to floating-point reassociation).
    """
    if k < 1:
        raise DataError(_MOD, "length-mismatch", f"worker count {k}")
    X, Y = np.asarray(data[0], dtype=float), np.asarray(data[1], dtype=float)
    n = X.shape[0]
    rng = as_generator(seed)
    replicas = [init_model.copy() for _ in range(k)]
    group = WorkerGroup(k, replicas)
    broadcast(init_model.flatten(), group)
    opts = [
        OptimizerState.for_model(r, momentum=run_cfg.momentum, weight_decay=run_cfg.weight_decay)
        for r in replicas
    ]
    state = AdaptiveWeightState(init_model.out_dim)
    steps_per_epoch = run_cfg.steps_per_epoch or max(1, n // run_cfg.schedule.batch)
    global_batch = k * batch_per_worker
    losses: list[float] = []
    divergence: list[float] = []
    for idx, _ in iterate_batches(n, global_batch, steps):
        shard_rows = [idx[w * batch_per_worker : (w + 1) * batch_per_worker] for w in range(k)]
        sizes = {rows.size for rows in shard_rows}
        if max(sizes) - min(sizes) > 1:
            raise DataError(_MOD, "shard-imbalance", f"shard sizes {sorted(sizes)}")
        group.shards = [list(map(int, rows)) for rows in shard_rows]
        # global-batch mask, weights, and loss terms; workers slice rows
        loss_sum, grad_raw, n_active, _, _ = multilabel_gradients(
            replicas[0], X[idx], Y[idx], run_cfg.loss, state, rng
        )
        worker_grads = []
        for w in range(k):
            rows = slice(w * batch_per_worker, (w + 1) * batch_per_worker)
            _, caches = replicas[w].forward(X[idx][rows])
            worker_grads.append(_flatten_grads(replicas[w].backward(grad_raw[rows], caches)))
        reduced = ring_allreduce(worker_grads)
        loss = loss_sum / n_active if n_active else 0.0
        losses.append(loss)
        for w in range(k):
            opts[w].epoch = min(opts[w].step / steps_per_epoch, float(run_cfg.schedule.max_epochs))
            vec = reduced[w] / n_active if n_active else np.zeros_like(reduced[w])
            apply_update(replicas[w], opts[w], _unflatten_grads(vec, replicas[w]), run_cfg.schedule)
        if check_replicas:
            base = replicas[0].flatten()
            worst = 0.0
            for r in replicas[1:]:
                worst = max(worst, float(np.max(np.abs(r.flatten() - base))) if base.size else 0.0)
            divergence.append(worst)
        else:
            divergence.append(float("nan"))
    return ParallelRunResult(replicas[0], losses, divergence, group)


@dataclass(frozen=True)
class ScalingRow:
    k: int
    images_per_second: float
    efficiency: float


@dataclass(frozen=True)
class ScalingReport:
    rows: list[ScalingRow]


def scaling_report(timings: dict[int, float], per_worker_batch: int) -> ScalingReport:
    """Throughput and scaling efficiency from per-k step timings.

    ``timings[k]`` is seconds per step for a k-worker run (externally
    supplied or wall-clock). throughput(k) = k * batch / seconds;
    efficiency(k) = throughput(k) / (k * throughput(1)).
    """
    if 1 not in timings:
        raise DataError(_MOD, "missing-baseline", "timings must include k=1")
    rows = []
    base = 1 * per_worker_batch / timings[1]
    for k in sorted(timings):
        if timings[k] <= 0:
            raise DataError(_MOD, "length-mismatch", f"non-positive timing for k={k}")
        throughput = k * per_worker_batch / timings[k]
        efficiency = throughput / (k * base)
        if efficiency > 1.0:
            warnings.warn(
                f"superlinear efficiency {efficiency:.3f} at k={k}; check timings",
                UserWarning,
                stacklevel=2,
            )
        rows.append(ScalingRow(k, throughput, efficiency))
    return ScalingReport(rows)
