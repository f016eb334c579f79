"""Losses, the ADAM optimiser and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from . import metrics
from .net import NetworkConfig, UNet3D, init_weights, save_weights
from .volume import Volume3D

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")


def loss_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (zero where pred == target)."""
    _check(pred, target)
    diff = pred - target
    n = diff.size
    value = float(np.abs(diff).sum(dtype=np.float64) / n)
    return value, (np.sign(diff) / n).astype(pred.dtype, copy=False)


def loss_l2(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _check(pred, target)
    diff = pred - target
    n = diff.size
    value = float(np.square(diff, dtype=np.float64).sum() / n)
    return value, (2.0 * diff / n).astype(pred.dtype, copy=False)


LOSSES = {"l1": loss_l1, "l2": loss_l2}


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> dict:
    """One in-place ADAM update of ``params``; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingAborted(f"non-finite gradient in {name!r} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "l1"
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid training config {self}")


def load_config(path) -> tuple[NetworkConfig, TrainConfig, dict]:
    """Read a flat key/value TOML file into network and training configs.

    Keys that belong to neither dataclass are returned untouched for the caller.
    """
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"{path}: config must be flat, found tables {nested}")
    net_keys = {f.name for f in fields(NetworkConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    net = NetworkConfig(**{k: v for k, v in raw.items() if k in net_keys})
    tr = TrainConfig(**{k: v for k, v in raw.items() if k in train_keys})
    rest = {k: v for k, v in raw.items() if k not in net_keys | train_keys}
    return net, tr, rest


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # (step, epoch, batch_loss, epoch_mean_or_None)

    @property
    def epoch_losses(self) -> list[float]:
        return [row[3] for row in self.history if row[3] is not None]


def stack(volumes) -> np.ndarray:
    return np.stack([np.asarray(v.data, dtype=np.float32)[None] for v in volumes])


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "batch_loss", "epoch_mean_loss"])
        for step, epoch, loss, mean in history:
            w.writerow([step, epoch, repr(loss), "" if mean is None else repr(mean)])


def train(
    pairs,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    checkpoint: Optional[Path] = None,
    params: Optional[dict] = None,
) -> TrainResult:
    """Fit the network to ``(input, target)`` volume pairs.

    Each epoch visits the pairs in a seeded random order in batches of
    ``cfg.batch_size`` (the last batch may be short). ``checkpoint`` receives
    the weights every ``cfg.checkpoint_every`` epochs and at the end.
    """
    if not pairs:
        raise ValueError("empty training corpus")
    shapes = {p[0].shape for p in pairs} | {p[1].shape for p in pairs}
    if len(shapes) != 1:
        raise ValueError(f"all training volumes must share one shape, got {sorted(shapes)}")
    net_cfg.check_dims(shapes.pop())
    inputs = stack([p[0] for p in pairs])
    targets = stack([p[1] for p in pairs])
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_weights(net_cfg, seed=cfg.seed)
    net = UNet3D(net_cfg, params)
    loss_fn = LOSSES[cfg.loss]
    state = OptimizerState()
    result = TrainResult(params)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = net.forward(inputs[idx])
            loss, dpred = loss_fn(pred, targets[idx])
            if not np.isfinite(loss):
                _abort(checkpoint, net_cfg, params, f"non-finite loss at step {step + 1}")
            grads = net.backward(dpred)
            try:
                # adam_step validates every gradient before touching params
                adam_step(params, grads, state, cfg.lr)
            except TrainingAborted as exc:
                _abort(checkpoint, net_cfg, params, str(exc))
            step += 1
            batch_losses.append(loss)
            result.history.append([step, epoch, loss, None])
        mean = float(np.mean(batch_losses))
        result.history[-1][3] = mean
        log.info("epoch %d/%d  loss %.6g", epoch, cfg.epochs, mean)
        if checkpoint and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_weights(checkpoint, net_cfg, params)
    if checkpoint:
        save_weights(checkpoint, net_cfg, params)
    result.history = [tuple(r) for r in result.history]
    return result


def _abort(checkpoint, net_cfg, params, reason):
    if checkpoint:
        save_weights(checkpoint, net_cfg, params)
        reason += f"; last good weights saved to {checkpoint}"
    raise TrainingAborted(reason)


# ---------------------------------------------------------------- evaluation helpers


def super_resolve(net_cfg: NetworkConfig, params: dict, volumes) -> list[Volume3D]:
    net = UNet3D(net_cfg, params)
    out = []
    for v in volumes:
        y = net.forward(np.asarray(v.data, dtype=np.float32)[None, None])
        out.append(v.with_data(y[0, 0].astype(np.float64)))
    return out


def score(predictions, targets, ssim_cfg: metrics.SsimConfig = metrics.SsimConfig()) -> dict:
    s = np.array([metrics.ssim(p, t, ssim_cfg) for p, t in zip(predictions, targets)])
    e = np.array([metrics.mse(p, t) for p, t in zip(predictions, targets)])
    ddof = 1 if len(s) > 1 else 0
    return {"ssim_mean": float(s.mean()), "ssim_sd": float(s.std(ddof=ddof)),
            "mse_mean": float(e.mean()), "mse_sd": float(e.std(ddof=ddof))}


ABLATION_FIELDS = ["architecture", "loss", "ssim_mean", "ssim_sd", "mse_mean", "mse_sd"]


@dataclass
class AblationReport:
    rows: list  # dicts keyed by ABLATION_FIELDS
    baseline: dict  # low-res input scored against the targets

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def ablation(train_pairs, test_pairs, net_cfg: NetworkConfig, cfg: TrainConfig) -> AblationReport:
    """Train {residual, plain} x {l1, l2} with a shared seed and score each on the test pairs."""
    test_in = [p[0] for p in test_pairs]
    test_tgt = [p[1] for p in test_pairs]
    rows = []
    for residual in (True, False):
        for loss in ("l1", "l2"):
            ncfg = NetworkConfig(**{**asdict(net_cfg), "residual": residual})
            tcfg = TrainConfig(**{**asdict(cfg), "loss": loss})
            res = train(train_pairs, ncfg, tcfg)
            scores = score(super_resolve(ncfg, res.params, test_in), test_tgt)
            rows.append({"architecture": "residual_unet" if residual else "unet", "loss": loss, **scores})
            log.info("ablation %s/%s: %s", rows[-1]["architecture"], loss, scores)
    return AblationReport(rows, score(test_in, test_tgt))
