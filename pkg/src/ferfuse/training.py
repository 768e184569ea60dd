"""Label-smoothing cross-entropy, Adam, and the seeded train/eval loops.

Everything downstream of the seed is deterministic: the per-step rng is
derived from (seed, step) alone, so two runs with the same config and data
produce identical parameters, losses, and reports. Wall-clock seconds in
the training log are the only nondeterministic output column.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .data import FeatureDataset
from .model import ModelConfig, ModelParams, build_params, forward
from .tensor import (
    NonFiniteError,
    Tensor,
    backward,
    log_softmax_rows,
    mul_const,
    scale,
    sum_all,
    zero_grads,
)


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 4e-5
    steps: int = 500
    label_smoothing: float | None = None  # None: use the model config's value
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.label_smoothing is not None and not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "label_smoothing": self.label_smoothing,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }


def label_smoothing_ce(logits: Tensor, labels, smoothing: float) -> Tensor:
    """Mean over the batch of -sum_c q_c * log softmax(logits)_c with the
    smoothed target q = (1 - eps) * onehot + eps / N."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if len(labels) == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels out of range [0, {n})")
    q = np.full((b, n), smoothing / n)
    q[np.arange(b), labels] += 1.0 - smoothing
    logp = log_softmax_rows(logits)
    return scale(sum_all(mul_const(logp, q)), -1.0 / b)


@dataclass
class OptimizerState:
    """Adam moment accumulators, mirroring the parameter shapes."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam_state(named) -> OptimizerState:
    state = OptimizerState()
    for name, t in named.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(
    named,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in named.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {name!r} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainResult:
    params: ModelParams
    log: list  # rows of (step, loss, lr, seconds)
    checkpoint_path: Path | None = None


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 101, step])


def _batch_tensors(dataset: FeatureDataset, idx):
    return (
        Tensor(dataset.x_img[idx]),
        Tensor(dataset.x_lm[idx]),
        dataset.labels[idx],
    )


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: FeatureDataset,
    out_dir=None,
    params: ModelParams | None = None,
    clock=time.perf_counter,
) -> TrainResult:
    """Train ``model_cfg`` on ``dataset`` and return the final parameters.

    When ``out_dir`` is given, writes train_log.csv (step,loss,lr,seconds),
    periodic checkpoints per ``checkpoint_every``, and checkpoint_final.pckpt.
    A non-finite loss aborts with a diagnostic naming the step.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    if params is None:
        params = build_params(model_cfg)
    smoothing = (
        model_cfg.label_smoothing if train_cfg.label_smoothing is None else train_cfg.label_smoothing
    )
    state = init_adam_state(params.named)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log = []
    start = clock()
    batch = min(train_cfg.batch_size, len(dataset))
    for step in range(1, train_cfg.steps + 1):
        rng = _step_rng(train_cfg.seed, step)
        idx = rng.choice(len(dataset), size=batch, replace=False)
        x_img, x_lm, labels = _batch_tensors(dataset, idx)
        try:
            logits = forward(x_img, x_lm, params, model_cfg, training=True, rng=rng)
            loss = label_smoothing_ce(logits, labels, smoothing)
        except NonFiniteError as e:
            raise NonFiniteError(f"non-finite loss at step {step}: {e}") from e
        zero_grads(params.named)
        backward(loss)
        adam_step(
            params.named,
            state,
            train_cfg.learning_rate,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.adam_eps,
        )
        log.append((step, loss.item(), train_cfg.learning_rate, clock() - start))
        if out_path is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_path / f"checkpoint_{step:06d}.pckpt", params.named)
    ckpt = None
    if out_path is not None:
        ckpt = out_path / "checkpoint_final.pckpt"
        save_checkpoint(ckpt, params.named)
        with open(out_path / "train_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr", "seconds"])
            for step, loss, lr, seconds in log:
                writer.writerow([step, repr(loss), repr(lr), f"{seconds:.3f}"])
    return TrainResult(params=params, log=log, checkpoint_path=ckpt)


def predict(
    params: ModelParams,
    cfg: ModelConfig,
    dataset: FeatureDataset,
    batch_size: int = 256,
) -> np.ndarray:
    """Argmax class predictions in dataset order, eval mode."""
    preds = []
    for lo in range(0, len(dataset), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(dataset)))
        x_img, x_lm, _ = _batch_tensors(dataset, idx)
        logits = forward(x_img, x_lm, params, cfg, training=False)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    dataset: FeatureDataset,
    batch_size: int = 256,
    class_names=None,
) -> metrics.EvalReport:
    """Eval-mode predictions scored into an EvalReport."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")
    preds = predict(params, cfg, dataset, batch_size)
    return metrics.build_report(dataset.labels, preds, cfg.num_classes, class_names)
