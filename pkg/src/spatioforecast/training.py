"""Warmup-scheduled training with seed control, model selection, checkpoints.

One call to :func:`train` is one experiment leg: deterministic given
(seed, config, data), single-threaded, and selected by minimum validation
MAE on the incidence channel. The optimizer is Adam (0.9 / 0.999 / 1e-8);
the schedule is linear warmup to the peak rate followed by inverse-sqrt
decay, continuous at the warmup boundary.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph
from . import model as model_mod
from . import numcore as nc
from .data import FoldSplit, WindowSample, stack_windows
from .numcore import Tensor

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    """Train loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int
    peak_lr: float = 0.001
    warmup_steps: int = 20000
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    patience: int | None = None        # steps without val improvement before stopping
    loss_kind: str = "MSE"
    eval_every: int = 100

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.loss_kind not in ("MSE", "MAE"):
            raise ValueError(f"loss_kind must be MSE or MAE, got {self.loss_kind!r}")


@dataclass
class HistoryRow:
    step: int
    lr: float
    train_loss: float
    val_mae: float | None = None
    val_rmse: float | None = None


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    best_step: int = 0
    best_val_mae: float = math.inf

    def write_csv(self, path: str | Path) -> None:
        lines = ["step,lr,train_loss,val_mae,val_rmse"]
        for r in self.rows:
            vm = "" if r.val_mae is None else repr(r.val_mae)
            vr = "" if r.val_rmse is None else repr(r.val_rmse)
            lines.append(f"{r.step},{r.lr!r},{r.train_loss!r},{vm},{vr}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def warmup_schedule(step: int, config: TrainConfig) -> float:
    """lr = peak * min(step/warmup, sqrt(warmup/step)); peak exactly at warmup."""
    if step < 1:
        raise ValueError("steps are 1-based")
    w = config.warmup_steps
    return config.peak_lr * min(step / w, math.sqrt(w / step))


def loss(pred: Tensor, target: np.ndarray, kind: str = "MSE") -> Tensor:
    """Mean absolute or mean squared error over every scalar element."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nc.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    diff = nc.sub(pred, nc.constant(target))
    if kind == "MAE":
        return nc.mean_all(nc.abs_(diff))
    if kind == "MSE":
        return nc.mean_all(nc.square(diff))
    raise ValueError(f"unknown loss kind {kind!r}")


class Adam:
    """First/second-moment adaptive optimizer with bias correction."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _target_for(variant: str, y: np.ndarray) -> np.ndarray:
    # DLinear predicts the incidence channel only; the rest train multi-task
    return y[..., :1] if variant == "DLinear" else y


def evaluate_incidence(config: model_mod.ModelConfig, params: dict[str, Tensor],
                       X: np.ndarray, Y: np.ndarray,
                       geo: graph.GeoAdjacency | None = None,
                       adjacency_options: graph.AdjacencyOptions | None = None,
                       batch_size: int = 256) -> tuple[float, float]:
    """(MAE, RMSE) on the incidence channel, tape-free."""
    errs = []
    for lo in range(0, X.shape[0], batch_size):
        pred, _ = model_mod.forward_batch(config, params, X[lo:lo + batch_size], geo,
                                          adjacency_options=adjacency_options)
        errs.append(pred.data[..., 0] - Y[lo:lo + batch_size][..., 0])
    err = np.concatenate(errs, axis=0)
    return float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean()))


def _batch_plan(n_train: int, batch_size: int) -> list[range]:
    """Contiguous chronological chunks; their order is reshuffled per epoch."""
    return [range(lo, min(lo + batch_size, n_train)) for lo in range(0, n_train, batch_size)]


def train(train_config: TrainConfig, model_config: model_mod.ModelConfig,
          fold: FoldSplit, samples: list[WindowSample],
          geo: graph.GeoAdjacency | None = None, *, seed: int = 0,
          adjacency_options: graph.AdjacencyOptions | None = None
          ) -> tuple[dict[str, Tensor], TrainHistory]:
    """Train one variant on one fold with one seed.

    Returns the checkpoint with the minimum recorded validation MAE and the
    full history. Identical inputs reproduce bit-identical results.
    """
    X_train, Y_train = stack_windows(samples, fold.train)
    X_val, Y_val = stack_windows(samples, fold.val)
    rng = np.random.default_rng(seed)
    params = model_mod.init_params(model_config, seed)
    opt = Adam(params)
    history = TrainHistory()
    best = model_mod.clone_params(params)
    chunks = _batch_plan(X_train.shape[0], train_config.batch_size)
    order: list[range] = []
    step = 0
    while step < train_config.max_steps:
        if not order:
            order = [chunks[i] for i in rng.permutation(len(chunks))]
        batch = order.pop(0)
        idx = list(batch)
        step += 1
        lr = warmup_schedule(step, train_config)
        opt.zero_grad()
        with nc.Tape() as tape:
            pred, _ = model_mod.forward_batch(model_config, params, X_train[idx], geo,
                                              adjacency_options=adjacency_options)
            step_loss = loss(pred, _target_for(model_config.variant, Y_train[idx]),
                             train_config.loss_kind)
        if not np.isfinite(step_loss.item()):
            raise TrainingDiverged(f"non-finite train loss at step {step}")
        nc.backward(tape, step_loss)
        opt.step(lr)
        row = HistoryRow(step=step, lr=lr, train_loss=step_loss.item())
        if step % train_config.eval_every == 0 or step == train_config.max_steps:
            val_mae, val_rmse = evaluate_incidence(model_config, params, X_val, Y_val,
                                                   geo, adjacency_options)
            row.val_mae, row.val_rmse = val_mae, val_rmse
            if val_mae < history.best_val_mae:
                history.best_val_mae = val_mae
                history.best_step = step
                best = model_mod.clone_params(params)
        history.rows.append(row)
        if (train_config.patience is not None and history.best_step
                and step - history.best_step >= train_config.patience):
            break
    return best, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    meta: dict | None = None) -> None:
    """Single-file npz bundle with an embedded manifest; bit-exact round trip."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in params.items()],
        "meta": meta or {},
    }
    arrays = {f"t/{k}": t.data for k, t in params.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"),
                                       dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with np.load(path) as bundle:
        manifest = json.loads(bundle["manifest"].tobytes().decode("utf-8"))
        if manifest["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {manifest['format']}")
        params = {}
        for entry in manifest["tensors"]:
            name = entry["name"]
            arr = bundle[f"t/{name}"]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"{path}: tensor {name} shape {arr.shape} vs manifest {entry['shape']}")
            params[name] = nc.tensor(arr, requires_grad=True)
    return params, manifest["meta"]


def params_digest(params: dict[str, Tensor]) -> str:
    """SHA-256 over names and raw float bytes, for reproducibility checks."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
