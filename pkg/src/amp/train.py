"""Adam, early stopping, the training loop and evaluation metrics."""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter
from .graphs import Graph, GraphBatch
from .model import AdaptiveModel, NonFiniteLossError, as_batch, encode_array


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.parameter = name


class Adam:
    """Adam with decoupled weight decay; moments and step counts per parameter."""

    def __init__(self, lr: float = 0.003, weight_decay: float = 1e-6, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(p.name)
        for p in params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.moments.get(p.name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            t = self.steps.get(p.name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.moments[p.name] = (m, v)
            self.steps[p.name] = t
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            name: {"step": self.steps[name], "m": encode_array(m), "v": encode_array(v)}
            for name, (m, v) in sorted(self.moments.items())
        }


class EarlyStopper:
    def __init__(self, patience: int = 300):
        if patience < 0:
            raise ContractError("patience must be nonnegative")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.counter = 0

    def update(self, value: float, epoch: int) -> tuple[bool, bool]:
        """Return ``(improved, should_stop)``."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
            return True, False
        self.counter += 1
        return False, self.counter > self.patience


@dataclass
class TrainConfig:
    epochs: int = 300
    patience: int = 300
    lr: float = 0.003
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int | None = None
    seed: int = 0


@dataclass
class FitResult:
    history: list[dict]
    best_checkpoint: dict
    best_epoch: int
    best_val_mse: float
    stopped_early: bool = False
    aborted: str | None = None
    depth_reports: list = field(default_factory=list)


def mse_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    if target.size == 0:
        raise ContractError("cannot evaluate on an empty set")
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - target) ** 2))
    return {"mse": mse, "log10_mse": math.log10(mse) if mse > 0 else -math.inf}


def evaluate(model: AdaptiveModel, graphs) -> dict[str, float]:
    """Pooled MSE over every target entry and its base-10 logarithm.

    A perfect fit reports ``log10_mse = -inf``.
    """
    if isinstance(graphs, (list, tuple)) and not graphs:
        raise ContractError("cannot evaluate on an empty set")
    batch = as_batch(graphs)
    if batch.targets is None:
        raise ContractError("evaluation needs targets")
    pred, _ = model.predict(batch)
    return mse_metrics(pred, batch.targets)


def _batches(graphs: list[Graph], size: int | None, rng: np.random.Generator, full: GraphBatch):
    if size is None or size >= len(graphs):
        yield full, 1.0
        return
    order = rng.permutation(len(graphs))
    for start in range(0, len(graphs), size):
        chunk = [graphs[i] for i in order[start:start + size]]
        yield GraphBatch.from_graphs(chunk), len(graphs) / len(chunk)


def _snapshot(model: AdaptiveModel, epoch: int, val_mse: float, adam: Adam, rng: np.random.Generator) -> dict:
    return model.to_dict({
        "epoch": epoch,
        "val_mse": val_mse,
        "optimizer": adam.state_dict(),
        "rng_state": copy.deepcopy(rng.bit_generator.state),
    })


def fit(model: AdaptiveModel, train: list[Graph], val: list[Graph], config: TrainConfig | None = None,
        log=None) -> FitResult:
    """Maximize the ELBO with Adam; depth is re-truncated once per epoch.

    Early stopping monitors validation MSE and the returned checkpoint is
    the best validation epoch.
    """
    config = config or TrainConfig()
    if not train or not val:
        raise ContractError("training and validation sets must be nonempty")
    adam = Adam(config.lr, config.weight_decay, config.betas, config.adam_eps)
    stopper = EarlyStopper(config.patience)
    rng = np.random.default_rng([config.seed, 1])
    full = GraphBatch.from_graphs(train)
    val_batch = GraphBatch.from_graphs(val)
    history: list[dict] = []
    reports = []
    best = _snapshot(model, 0, math.inf, adam, rng)
    result = FitResult(history, best, 0, math.inf)
    for epoch in range(1, config.epochs + 1):
        try:
            parts = {"elbo": 0.0, "data": 0.0, "depth_entropy": 0.0, "depth_prior": 0.0, "weight_prior": 0.0}
            for batch, scale in _batches(train, config.batch_size, rng, full):
                ad.reset_tape()
                params = model.active_parameters()
                for p in params:
                    p.zero_grad()
                elbo = model.elbo(batch, data_scale=scale)
                ad.backward(-elbo.total)
                adam.step(params)
                for k, v in elbo.values().items():
                    parts[k] += v
            n_batches = 1 if config.batch_size is None else math.ceil(len(train) / config.batch_size)
            parts = {k: v / n_batches for k, v in parts.items()}
            report = model.update_depth()
            if report.changed:
                reports.append((epoch, report))
            metrics = evaluate(model, val_batch)
        except (NonFiniteLossError, NonFiniteGradientError, FloatingPointError) as exc:
            result.aborted = f"epoch {epoch}: {exc}"
            if log:
                log(f"aborting: {result.aborted}")
            break
        finally:
            ad.reset_tape()
        if not math.isfinite(metrics["mse"]):
            result.aborted = f"epoch {epoch}: non-finite validation MSE"
            break
        row = {"epoch": epoch, **parts, "val_mse": metrics["mse"], "L_hat": model.support}
        row.update({f"depth_{k}": v for k, v in model.depth.describe().items()})
        history.append(row)
        improved, stop = stopper.update(metrics["mse"], epoch)
        if improved:
            result.best_checkpoint = _snapshot(model, epoch, metrics["mse"], adam, rng)
            result.best_epoch = epoch
            result.best_val_mse = metrics["mse"]
        if log:
            log(f"epoch {epoch:4d} elbo {parts['elbo']:.4f} val_mse {metrics['mse']:.5f} L_hat {model.support}")
        if stop:
            result.stopped_early = True
            break
    result.depth_reports = reports
    return result


HISTORY_BASE = ["epoch", "elbo", "data", "depth_entropy", "depth_prior", "weight_prior", "val_mse", "test_mse", "L_hat"]


def history_csv(history: list[dict], test_mse: float | None = None) -> str:
    extra = sorted({k for row in history for k in row if k not in HISTORY_BASE})
    columns = HISTORY_BASE + extra
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for i, row in enumerate(history):
        row = dict(row)
        row["test_mse"] = test_mse if (test_mse is not None and i == len(history) - 1) else ""
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
