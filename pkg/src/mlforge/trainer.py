"""Desk-scale multi-output model, momentum SGD, and the LR schedules.

The model is a small MLP whose stages are named parameter groups (at minimum
``bottom`` and ``top``) so layer-wise adaptive learning rates and frozen-group
fine-tuning can be exercised exactly as on a large network. The final stage
feeds m independent sigmoids for multi-label training, or a softmax head in
single-label fine-tuning mode.

Schedules: linear scaling of the base rate with batch size, a geometric
per-epoch warm-up, step decay counted from the end of warm-up, and a "poly"
policy; all composed with per-group multipliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .imbalance import (
    AdaptiveWeightState,
    BatchLabels,
    LossConfig,
    assemble_weights,
    bce_terms_raw,
    downsample_batch,
)
from .seeds import as_generator

_MOD = "trainer"

_ACTIVATIONS = ("tanh", "linear", "sigmoid", "softmax")


@dataclass
class Stage:
    """One affine map plus elementwise nonlinearity, in a named group."""

    name: str
    group: str
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DataError(_MOD, "dim-mismatch", f"stage {self.name}: W {self.W.shape} b {self.b.shape}")
        if self.activation not in _ACTIVATIONS:
            raise DataError(_MOD, "dim-mismatch", f"unknown activation {self.activation}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    return z


@dataclass
class Model:
    stages: list[Stage]

    def __post_init__(self):
        for a, b in zip(self.stages, self.stages[1:]):
            if a.out_dim != b.in_dim:
                raise DataError(
                    _MOD,
                    "dim-mismatch",
                    f"stage {a.name} out {a.out_dim} != stage {b.name} in {b.in_dim}",
                )

    @property
    def in_dim(self) -> int:
        return self.stages[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.stages[-1].out_dim

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list]:
        """Return (final activation, caches). Cache holds each stage input
        and activated output for backprop."""
        A = np.asarray(X, dtype=float)
        caches = []
        for stage in self.stages:
            Z = A @ stage.W.T + stage.b
            out = _activate(Z, stage.activation)
            caches.append((A, out))
            A = out
        return A, caches

    def backward(self, grad_z_final: np.ndarray, caches: list) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients given the gradient at the final pre-activation.

        No normalization is applied: gradients are sums over the batch rows,
        so sharded computation can reduce partial sums before dividing once.
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.stages)
        grad_z = np.asarray(grad_z_final, dtype=float)
        for idx in range(len(self.stages) - 1, -1, -1):
            stage = self.stages[idx]
            A_in, A_out = caches[idx]
            grads[idx] = (grad_z.T @ A_in, grad_z.sum(axis=0))
            if idx == 0:
                break
            grad_a = grad_z @ stage.W
            prev = self.stages[idx - 1]
            _, prev_out = caches[idx - 1]
            if prev.activation == "tanh":
                grad_z = grad_a * (1.0 - prev_out**2)
            elif prev.activation == "sigmoid":
                grad_z = grad_a * prev_out * (1.0 - prev_out)
            elif prev.activation == "linear":
                grad_z = grad_a
            else:
                raise DataError(_MOD, "dim-mismatch", f"cannot backprop through {prev.activation} hidden stage")
        return grads

    def copy(self) -> "Model":
        return Model(
            [Stage(s.name, s.group, s.W.copy(), s.b.copy(), s.activation) for s in self.stages]
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([s.W.ravel(), s.b]) for s in self.stages])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        offset = 0
        for s in self.stages:
            nw = s.W.size
            s.W = vec[offset : offset + nw].reshape(s.W.shape).copy()
            offset += nw
            nb = s.b.size
            s.b = vec[offset : offset + nb].copy()
            offset += nb
        if offset != vec.size:
            raise DataError(_MOD, "dim-mismatch", f"flat vector length {vec.size}, expected {offset}")


def build_model(
    dims: list[int],
    rng,
    groups: list[str] | None = None,
    hidden_activation: str = "tanh",
    head_activation: str = "sigmoid",
) -> Model:
    """MLP with the given layer dims; last stage is the head.

    Default grouping: every hidden stage in ``bottom``, the head in ``top``.
    """
    rng = as_generator(rng)
    if len(dims) < 2:
        raise DataError(_MOD, "dim-mismatch", "need at least input and output dims")
    n_stages = len(dims) - 1
    if groups is None:
        groups = ["bottom"] * (n_stages - 1) + ["top"]
    if len(groups) != n_stages:
        raise DataError(_MOD, "dim-mismatch", f"{len(groups)} groups for {n_stages} stages")
    stages = []
    for idx in range(n_stages):
        fan_in, fan_out = dims[idx], dims[idx + 1]
        W = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in))
        act = head_activation if idx == n_stages - 1 else hidden_activation
        stages.append(Stage(f"stage{idx}", groups[idx], W, np.zeros(fan_out), act))
    return Model(stages)


@dataclass
class OptimizerState:
    """Momentum buffers plus step/epoch counters for one training run."""

    velocities: list[tuple[np.ndarray, np.ndarray]]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step: int = 0
    epoch: float = 0.0

    @classmethod
    def for_model(cls, model: Model, momentum: float = 0.9, weight_decay: float = 1e-4):
        return cls(
            [(np.zeros_like(s.W), np.zeros_like(s.b)) for s in model.stages],
            momentum=momentum,
            weight_decay=weight_decay,
        )


@dataclass(frozen=True)
class ScheduleConfig:
    ref_lr: float = 0.01
    ref_batch: int = 512
    batch: int = 512
    warmup_epochs: int = 8
    warmup_start: float = 0.01
    warmup_factor: float = 1.297
    decay_factor: float = 0.1
    decay_every_epochs: int = 25
    max_epochs: int = 60
    policy: str = "step"
    poly_power: float = 0.9
    group_multipliers: dict[str, float] = field(
        default_factory=lambda: {"bottom": 1.0, "top": 1.0}
    )

    def __post_init__(self):
        if self.policy not in ("step", "poly"):
            raise DataError(_MOD, "config-key", f"unknown policy {self.policy}")
        for name in ("ref_lr", "ref_batch", "batch", "warmup_factor", "decay_factor"):
            if getattr(self, name) <= 0:
                raise DataError(_MOD, "config-key", f"{name} must be positive")
        for group, mult in self.group_multipliers.items():
            if mult < 0:
                raise DataError(_MOD, "config-key", f"multiplier for {group} must be >= 0")


def base_lr(config: ScheduleConfig) -> float:
    """Linear scaling: the reference rate scaled by batch / ref_batch."""
    return config.ref_lr * (config.batch / config.ref_batch)


def warmup_end(config: ScheduleConfig) -> float:
    """Learning rate the geometric warm-up reaches after its last epoch."""
    return config.warmup_start * config.warmup_factor**config.warmup_epochs


def lr_at(epoch: float, config: ScheduleConfig) -> float:
    """Learning rate at a (possibly fractional) epoch.

    Warm-up applies its factor stepwise at epoch boundaries; afterwards the
    step policy decays by decay_factor every decay_every_epochs epochs
    counted from the END of warm-up, and the poly policy anneals
    base_lr * (1 - progress)^power to zero at max_epochs.
    """
    if epoch < 0 or epoch > config.max_epochs:
        raise DataError(_MOD, "epoch-range", f"epoch {epoch} outside [0, {config.max_epochs}]")
    if epoch < config.warmup_epochs:
        return config.warmup_start * config.warmup_factor ** math.floor(epoch)
    if config.policy == "step":
        decays = math.floor((epoch - config.warmup_epochs) / config.decay_every_epochs)
        return base_lr(config) * config.decay_factor**decays
    span = config.max_epochs - config.warmup_epochs
    progress = (epoch - config.warmup_epochs) / span if span > 0 else 1.0
    return base_lr(config) * (1.0 - progress) ** config.poly_power


def group_lr(group: str, lr: float, config: ScheduleConfig) -> float:
    if group not in config.group_multipliers:
        raise DataError(_MOD, "unknown-group", f"no multiplier for group {group}")
    return lr * config.group_multipliers[group]


def apply_update(
    model: Model,
    opt: OptimizerState,
    grads: list[tuple[np.ndarray, np.ndarray]],
    sched_cfg: ScheduleConfig,
) -> None:
    """Momentum step: v <- mu v + (g + wd w); w <- w - group_lr v."""
    lr = lr_at(min(opt.epoch, float(sched_cfg.max_epochs)), sched_cfg)
    for stage, (vW, vb), (gW, gb) in zip(model.stages, opt.velocities, grads):
        step_lr = group_lr(stage.group, lr, sched_cfg)
        vW *= opt.momentum
        vW += gW + opt.weight_decay * stage.W
        vb *= opt.momentum
        vb += gb + opt.weight_decay * stage.b
        stage.W -= step_lr * vW
        stage.b -= step_lr * vb
    opt.step += 1


def multilabel_gradients(
    model: Model,
    X: np.ndarray,
    Y: np.ndarray,
    loss_cfg: LossConfig,
    adaptive_state: AdaptiveWeightState,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, int, np.ndarray, list]:
    """Shared core of single- and multi-worker training steps.

    Draws the down-sampling mask, advances the adaptive-weight status
    machine on the raw labels, and returns
    (raw loss sum, per-entry raw logit gradient, active count, mask, caches)
    with NO normalization applied, so shards can be reduced before the
    single division.
    """
    Y = np.asarray(Y, dtype=float)
    mask = downsample_batch(Y, loss_cfg.neg_ratio, loss_cfg.skip_prob, rng)
    has_pos = Y.any(axis=0)
    r_pos, r_neg = adaptive_state.update_batch(has_pos)
    weights = assemble_weights(Y, r_pos, r_neg)
    P, caches = model.forward(X)
    batch = BatchLabels(Y, P, loss_cfg.clamp_eps)
    loss_sum, grad_raw, n_active = bce_terms_raw(batch.Y, batch.P, weights, loss_cfg.eta, mask)
    return loss_sum, grad_raw, n_active, mask, caches


def train_step(
    model: Model,
    batch: tuple[np.ndarray, np.ndarray],
    opt: OptimizerState,
    loss_cfg: LossConfig,
    sched_cfg: ScheduleConfig,
    adaptive_state: AdaptiveWeightState,
    rng: np.random.Generator,
) -> float:
    """One synchronous SGD step on a mini-batch; returns the loss."""
    X, Y = batch
    loss_sum, grad_raw, n_active, _, caches = multilabel_gradients(
        model, X, Y, loss_cfg, adaptive_state, rng
    )
    if n_active == 0:
        grads = [(np.zeros_like(s.W), np.zeros_like(s.b)) for s in model.stages]
        loss = 0.0
    else:
        raw = model.backward(grad_raw, caches)
        grads = [(gW / n_active, gb / n_active) for gW, gb in raw]
        loss = loss_sum / n_active
    if not math.isfinite(loss) or any(
        not (np.isfinite(gW).all() and np.isfinite(gb).all()) for gW, gb in grads
    ):
        raise NumericalError(
            _MOD,
            "non-finite",
            f"non-finite loss/gradient at step {opt.step} (loss={loss});"
            " check learning rate and input scaling",
        )
    apply_update(model, opt, grads, sched_cfg)
    return loss


def iterate_batches(n: int, batch_size: int, steps: int):
    """Deterministic contiguous batch indices, cycling over the dataset."""
    for s in range(steps):
        start = (s * batch_size) % n
        yield (np.arange(start, start + batch_size) % n, s)


def train_run(
    model: Model,
    X: np.ndarray,
    Y: np.ndarray,
    steps: int,
    opt: OptimizerState,
    loss_cfg: LossConfig,
    sched_cfg: ScheduleConfig,
    adaptive_state: AdaptiveWeightState,
    rng: np.random.Generator,
    steps_per_epoch: int | None = None,
) -> list[float]:
    """Fixed-order training loop; epoch advances every steps_per_epoch."""
    n = X.shape[0]
    if steps_per_epoch is None:
        steps_per_epoch = max(1, n // sched_cfg.batch)
    losses = []
    for idx, _ in iterate_batches(n, sched_cfg.batch, steps):
        opt.epoch = min(opt.step / steps_per_epoch, float(sched_cfg.max_epochs))
        losses.append(
            train_step(model, (X[idx], Y[idx]), opt, loss_cfg, sched_cfg, adaptive_state, rng)
        )
    return losses


def softmax_step(
    model: Model,
    X: np.ndarray,
    labels: np.ndarray,
    opt: OptimizerState,
    sched_cfg: ScheduleConfig,
) -> float:
    """One step of plain softmax cross entropy (single-label fine-tuning)."""
    P, caches = model.forward(X)
    n = X.shape[0]
    onehot = np.zeros_like(P)
    onehot[np.arange(n), labels] = 1.0
    eps = 1e-12
    loss = float(-np.log(np.maximum(P[np.arange(n), labels], eps)).mean())
    grad_z = (P - onehot) / n
    grads = model.backward(grad_z, caches)
    if not math.isfinite(loss):
        raise NumericalError(_MOD, "non-finite", f"non-finite loss at step {opt.step}")
    apply_update(model, opt, grads, sched_cfg)
    return loss


def replace_head(model: Model, new_head_dim: int, head_activation: str, rng) -> Model:
    """Fresh output stage of the requested width; other stages are copied."""
    if new_head_dim < 1:
        raise DataError(_MOD, "dim-mismatch", f"new head dim {new_head_dim}")
    rng = as_generator(rng)
    out = model.copy()
    old = out.stages[-1]
    W = rng.normal(0.0, 1.0 / math.sqrt(old.in_dim), size=(new_head_dim, old.in_dim))
    out.stages[-1] = Stage(old.name, old.group, W, np.zeros(new_head_dim), head_activation)
    return out


def fine_tune(
    pretrained: Model,
    new_head_dim: int,
    sched_cfg: ScheduleConfig,
    data: tuple[np.ndarray, np.ndarray],
    mode: str = "single",
    loss_cfg: LossConfig | None = None,
    steps: int = 100,
    seed=0,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    steps_per_epoch: int | None = None,
) -> Model:
    """Re-head a pretrained model and train it under group multipliers.

    ``mode`` selects the head: "single" trains a softmax head with plain
    cross entropy on integer labels; "multi" trains a sigmoid head with the
    weighted multi-label loss. Groups with multiplier 0 stay bit-identical.
    """
    if mode not in ("single", "multi"):
        raise DataError(_MOD, "config-key", f"unknown fine-tune mode {mode}")
    rng = as_generator(seed)
    head_act = "softmax" if mode == "single" else "sigmoid"
    model = replace_head(pretrained, new_head_dim, head_act, rng)
    opt = OptimizerState.for_model(model, momentum=momentum, weight_decay=weight_decay)
    X, labels = data
    n = X.shape[0]
    if steps_per_epoch is None:
        steps_per_epoch = max(1, n // sched_cfg.batch)
    if mode == "multi":
        loss_cfg = loss_cfg or LossConfig()
        state = AdaptiveWeightState(new_head_dim)
        train_run(
            model, X, labels, steps, opt, loss_cfg, sched_cfg, state, rng,
            steps_per_epoch=steps_per_epoch,
        )
        return model
    for idx, _ in iterate_batches(n, sched_cfg.batch, steps):
        opt.epoch = min(opt.step / steps_per_epoch, float(sched_cfg.max_epochs))
        softmax_step(model, X[idx], labels[idx], opt, sched_cfg)
    return model


# ---------------------------------------------------------------------------
# Checkpoint and run-config files
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "mlforge-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(model: Model, path, opt: OptimizerState | None = None) -> None:
    """Versioned text checkpoint; values round-trip exactly via repr."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION}\n")
        fh.write(f"stages {len(model.stages)}\n")
        for idx, s in enumerate(model.stages):
            for token in (s.name, s.group):
                if any(ch.isspace() for ch in token):
                    raise DataError(_MOD, "checkpoint-parse", f"name/group may not contain spaces: {token!r}")
            fh.write(f"stage {idx} {s.name} {s.group} {s.activation} {s.in_dim} {s.out_dim}\n")
            fh.write("W " + " ".join(repr(float(v)) for v in s.W.ravel()) + "\n")
            fh.write("b " + " ".join(repr(float(v)) for v in s.b) + "\n")
        if opt is not None:
            fh.write(
                f"optimizer {repr(opt.momentum)} {repr(opt.weight_decay)} {opt.step} {repr(opt.epoch)}\n"
            )
            for idx, (vW, vb) in enumerate(opt.velocities):
                fh.write(f"vW {idx} " + " ".join(repr(float(v)) for v in vW.ravel()) + "\n")
                fh.write(f"vb {idx} " + " ".join(repr(float(v)) for v in vb) + "\n")


def load_checkpoint(path) -> tuple[Model, OptimizerState | None]:
    def err(msg):
        return DataError(_MOD, "checkpoint-parse", msg)

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise err("empty checkpoint")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != _CKPT_MAGIC or int(magic[1]) != _CKPT_VERSION:
        raise err(f"bad header {lines[0]!r}")
    pos = 1
    head = lines[pos].split()
    if head[0] != "stages":
        raise err("missing stages count")
    n_stages = int(head[1])
    pos += 1
    stages: list[Stage] = []
    for _ in range(n_stages):
        meta = lines[pos].split()
        if meta[0] != "stage" or len(meta) != 7:
            raise err(f"bad stage line {lines[pos]!r}")
        _, _, name, group, act, in_dim, out_dim = meta
        in_dim, out_dim = int(in_dim), int(out_dim)
        w_line = lines[pos + 1].split()
        b_line = lines[pos + 2].split()
        if w_line[0] != "W" or b_line[0] != "b":
            raise err("stage missing W/b lines")
        W = np.array([float(v) for v in w_line[1:]]).reshape(out_dim, in_dim)
        b = np.array([float(v) for v in b_line[1:]])
        stages.append(Stage(name, group, W, b, act))
        pos += 3
    model = Model(stages)
    opt = None
    if pos < len(lines) and lines[pos].startswith("optimizer"):
        parts = lines[pos].split()
        opt = OptimizerState(
            velocities=[(np.zeros_like(s.W), np.zeros_like(s.b)) for s in stages],
            momentum=float(parts[1]),
            weight_decay=float(parts[2]),
            step=int(parts[3]),
            epoch=float(parts[4]),
        )
        pos += 1
        while pos < len(lines) and lines[pos]:
            parts = lines[pos].split()
            kind, idx = parts[0], int(parts[1])
            values = np.array([float(v) for v in parts[2:]])
            vW, vb = opt.velocities[idx]
            if kind == "vW":
                opt.velocities[idx] = (values.reshape(vW.shape), vb)
            elif kind == "vb":
                opt.velocities[idx] = (vW, values)
            else:
                raise err(f"unknown checkpoint line {parts[0]!r}")
            pos += 1
    return model, opt


@dataclass
class RunConfig:
    """Everything a training run needs, loadable from key=value text."""

    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    model_dims: list[int] | None = None
    model_groups: list[str] | None = None
    hidden_activation: str = "tanh"
    head_activation: str = "sigmoid"
    steps_per_epoch: int | None = None


_SCHED_KEYS = {
    "ref_lr": float,
    "ref_batch": int,
    "batch": int,
    "warmup_epochs": int,
    "warmup_start": float,
    "warmup_factor": float,
    "decay_factor": float,
    "decay_every_epochs": int,
    "max_epochs": int,
    "policy": str,
    "poly_power": float,
}
_LOSS_KEYS = {"eta": float, "neg_ratio": int, "skip_prob": float, "clamp_eps": float}


def load_run_config(path) -> RunConfig:
    """Parse a flat ``key=value`` run-config file (# comments allowed)."""
    sched: dict = {}
    loss: dict = {}
    multipliers: dict[str, float] = {}
    extras: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(_MOD, "config-key", f"line {lineno}: expected key=value")
            key, value = key.strip(), value.strip()
            try:
                if key in _SCHED_KEYS:
                    sched[key] = _SCHED_KEYS[key](value)
                elif key in _LOSS_KEYS:
                    loss[key] = _LOSS_KEYS[key](value)
                elif key.startswith("group_mult."):
                    multipliers[key[len("group_mult.") :]] = float(value)
                elif key == "momentum":
                    extras["momentum"] = float(value)
                elif key == "weight_decay":
                    extras["weight_decay"] = float(value)
                elif key == "model.dims":
                    extras["model_dims"] = [int(v) for v in value.split(",")]
                elif key == "model.groups":
                    extras["model_groups"] = value.split(",")
                elif key == "model.hidden_activation":
                    extras["hidden_activation"] = value
                elif key == "model.head_activation":
                    extras["head_activation"] = value
                elif key == "steps_per_epoch":
                    extras["steps_per_epoch"] = int(value)
                else:
                    raise DataError(_MOD, "config-key", f"line {lineno}: unknown key {key!r}")
            except ValueError:
                raise DataError(
                    _MOD, "config-key", f"line {lineno}: bad value for {key!r}: {value!r}"
                ) from None
    if multipliers:
        sched["group_multipliers"] = multipliers
    return RunConfig(loss=LossConfig(**loss), schedule=ScheduleConfig(**sched), **extras)


def save_run_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in _LOSS_KEYS:
            fh.write(f"{key}={getattr(config.loss, key)}\n")
        for key in _SCHED_KEYS:
            fh.write(f"{key}={getattr(config.schedule, key)}\n")
        for group, mult in sorted(config.schedule.group_multipliers.items()):
            fh.write(f"group_mult.{group}={mult}\n")
        fh.write(f"momentum={config.momentum}\n")
        fh.write(f"weight_decay={config.weight_decay}\n")
        if config.model_dims:
            fh.write("model.dims=" + ",".join(str(d) for d in config.model_dims) + "\n")
        if config.model_groups:
            fh.write("model.groups=" + ",".join(config.model_groups) + "\n")
        fh.write(f"model.hidden_activation={config.hidden_activation}\n")
        fh.write(f"model.head_activation={config.head_activation}\n")
        if config.steps_per_epoch is not None:
            fh.write(f"steps_per_epoch={config.steps_per_epoch}\n")
