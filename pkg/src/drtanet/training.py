"""Loss, Adam, the training loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ParamStore, Tensor, backward, no_grad, save_checkpoint
from .core.tensor import make_result
from .data import ImagePair
from .metrics import CSV_HEADER, MetricAccumulator, MetricsReport, binarize
from .network import ChangeNet, images_to_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 0  # 0: 16, or 8 when any level uses a 7x7 scope
    epochs: int = 150
    seed: int = 0
    eval_every: int = 1
    pos_weight: float = 1.0
    augment: bool = False  # random dihedral transforms and t0/t1 swaps of training pairs
    prior_bias: bool = False  # start the classifier bias at the logit of the training change fraction

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if self.batch_size < 0 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and epochs must be >= 0 and eval_every >= 1")

    def effective_batch_size(self, scopes: Sequence[int]) -> int:
        if self.batch_size:
            return self.batch_size
        return 8 if 7 in scopes else 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


def bce_loss(logits: Tensor, target, pos_weight: float = 1.0) -> Tensor:
    """Mean per-pixel binary cross-entropy of sigmoid(logits) against a {0,1} target.

    Evaluated as ``max(z, 0) - z*t + log(1 + exp(-|z|))``.
    """
    t = np.asarray(target)
    if t.shape != logits.shape:
        raise ValueError(f"bce_loss: logits {logits.shape} and target {t.shape} differ in shape")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("bce_loss: targets must be binary (0 or 1)")
    z = logits.data
    t = t.astype(z.dtype)
    w = 1.0 + (pos_weight - 1.0) * t
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    loss = np.asarray((w * per).sum() / n, dtype=z.dtype)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * w * (sig - t) / n,)

    return make_result(loss, (logits,), bw, "bce")


def adam_step(params: ParamStore, state: dict, config: TrainConfig) -> dict:
    """One bias-corrected Adam update in place; returns the updated state."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    if not state:
        state.update(step=0, m={}, v={})
    state["step"] += 1
    t = state["step"]
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state["m"].get(name)
        if m is None:
            m = state["m"][name] = np.zeros_like(p.data)
            state["v"][name] = np.zeros_like(p.data)
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
    return state


def augment_pair(pair: ImagePair, code: int) -> ImagePair:
    """One of 16 label-preserving variants: bits 0-1 rotate, bit 2 flips, bit 3 swaps t0 and t1.

    The swap is valid because the change mask is symmetric in time.
    """
    out = pair.rotated(code & 3) if code & 3 else pair
    if code & 4:
        out = out.transformed(lambda a: a[:, ::-1])
    if code & 8:
        out = ImagePair(out.t1, out.t0, out.mask, name=out.name)
    return out


def _batch_arrays(pairs: Sequence[ImagePair], dtype, codes=None):
    if codes is not None:
        pairs = [augment_pair(p, int(c)) for p, c in zip(pairs, codes)]
    t0 = images_to_tensor(np.stack([p.t0 for p in pairs]), dtype)
    t1 = images_to_tensor(np.stack([p.t1 for p in pairs]), dtype)
    masks = np.stack([p.mask for p in pairs])[:, None] if pairs[0].mask is not None else None
    return t0, t1, masks


def predict_logits(model: ChangeNet, pairs: Sequence[ImagePair], batch_size: int = 16) -> np.ndarray:
    """Logits (N, H, W) in evaluation mode."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(pairs), batch_size):
                t0, t1, _ = _batch_arrays(pairs[i : i + batch_size], model.dtype)
                out.append(model(t0, t1).data[:, 0])
    finally:
        model.training = was_training
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate(model: ChangeNet, pairs: Sequence[ImagePair], batch_size: int = 16) -> tuple[MetricsReport, MetricsReport]:
    """(aggregate, per-image-mean) metrics of the model on labelled pairs."""
    acc = MetricAccumulator()
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        logits = predict_logits(model, chunk, batch_size)
        acc.update(binarize(logits), np.stack([p.mask for p in chunk]))
    return acc.aggregate(), acc.per_image_mean()


def set_prior_bias(model: ChangeNet, pairs: Sequence[ImagePair]) -> float:
    """Set the classifier bias so the initial prediction matches the mean change fraction."""
    frac = float(np.mean([p.mask.mean() for p in pairs]))
    frac = min(max(frac, 1e-4), 1 - 1e-4)
    bias = np.log(frac / (1 - frac))
    model.params["decoder.classifier.bias"].data[...] = bias
    return bias


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # mean training loss per epoch
    metrics: list = field(default_factory=list)  # (epoch, aggregate report, per-image report)
    best_f1: float = -1.0
    best_epoch: int = -1
    best_state: "OrderedDict | None" = None
    seconds: float = 0.0


def train(
    model: ChangeNet,
    train_pairs: Sequence[ImagePair],
    config: TrainConfig,
    val_pairs: Sequence[ImagePair] | None = None,
    out_dir=None,
    time_budget: float | None = None,
) -> TrainResult:
    """Train with Adam on per-pixel BCE, evaluating aggregate F1 every ``eval_every`` epochs.

    Validation uses ``val_pairs`` (training pairs when omitted). The best-F1
    parameters are kept in ``TrainResult.best_state`` and, with ``out_dir``,
    written to ``best.ckpt``; the metric log goes to ``metrics.csv`` and the
    loss curve to ``losses.json``.
    """
    if not train_pairs:
        raise ValueError("train: empty training set")
    bs = config.effective_batch_size(model.config.scopes())
    rng = np.random.default_rng(config.seed)
    val = list(val_pairs) if val_pairs is not None else list(train_pairs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(CSV_HEADER + "\n")

    if config.prior_bias:
        set_prior_bias(model, train_pairs)

    result = TrainResult()
    state: dict = {}
    start = time.perf_counter()
    n = len(train_pairs)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(n)
        codes = rng.integers(0, 16, size=n) if config.augment else None
        total, batches = 0.0, 0
        for bi, i in enumerate(range(0, n, bs)):
            idx = order[i : i + bs]
            batch = [train_pairs[j] for j in idx]
            t0, t1, masks = _batch_arrays(batch, model.dtype, None if codes is None else codes[idx])
            model.params.zero_grad()
            logits = model(t0, t1)
            loss = bce_loss(logits, masks, config.pos_weight)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(loss, model.params)
            adam_step(model.params, state, config)
            total += value
            batches += 1
        result.losses.append(total / batches)

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            agg, per = evaluate(model, val, bs)
            result.metrics.append((epoch, agg, per))
            if out is not None:
                with open(out / "metrics.csv", "a") as fh:
                    fh.write(agg.csv_row(epoch) + "\n" + per.csv_row(epoch) + "\n")
            if agg.f1 > result.best_f1:
                result.best_f1 = agg.f1
                result.best_epoch = epoch
                result.best_state = OrderedDict((k, v.copy()) for k, v in model.state_dict().items())
                if out is not None:
                    save_checkpoint(out / "best.ckpt", result.best_state)
            log.info("epoch %d loss %.4f val f1 %.4f", epoch, result.losses[-1], agg.f1)
        else:
            log.info("epoch %d loss %.4f", epoch, result.losses[-1])
        if time_budget is not None and time.perf_counter() - start > time_budget:
            log.warning("time budget of %.0f s exhausted after epoch %d", time_budget, epoch)
            break

    result.seconds = time.perf_counter() - start
    if out is not None:
        (out / "losses.json").write_text(json.dumps(result.losses) + "\n")
        if result.best_state is None:
            save_checkpoint(out / "best.ckpt", model.state_dict())
    return result
