"""Masked training loop: random coalition masks, MSE, Adam/AdamW, early stop.

The masked flavor ("shapformer") draws a fresh random mask per example per
epoch, so the network learns to forecast from arbitrary feature subsets; the
unmasked flavor ("transformer") always trains on the full mask and serves as
the plain baseline. Validation loss is always measured under the full mask
so both flavors are comparable on it.

Runs are bit-reproducible for a fixed seed on one platform: all randomness
flows from numpy SeedSequence spawns, and parameter updates are computed in
float64 before being cast back to the parameter dtype.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from .model import (
    ModelConfig,
    ModelParams,
    example_arrays,
    forward_arrays,
    init_params,
)
from .numkernel import mse_loss
from .schema import FeatureSchema, ForecastExample, GroupMask

FLAVORS = ("shapformer", "transformer")

__all__ = [
    "TrainConfig",
    "AdamOptimizer",
    "sample_mask",
    "train",
    "full_mask_mse",
    "masked_mse",
    "clip_global_norm",
    "FLAVORS",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``decay_rate`` is multiplicative per epoch: lr_epoch = lr * decay^epoch.
    ``mask_probability`` is the chance a block is ABSENT in a sampled mask.
    ``weight_decay`` only applies to the adamw optimizer (decoupled decay).
    """

    optimizer: str = "adam"
    learning_rate: float = 1e-4
    decay_rate: float = 1.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    mask_probability: float = 0.5
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be adam or adamw, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay rate must be in (0, 1]")
        if not 0 <= self.mask_probability <= 1:
            raise ValueError("mask probability must be in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch size, max epochs, and patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer, "learning_rate": self.learning_rate,
            "decay_rate": self.decay_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "patience": self.patience,
            "mask_probability": self.mask_probability, "seed": self.seed,
            "weight_decay": self.weight_decay, "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def sample_mask(rng: np.random.Generator, schema: FeatureSchema,
                p: float) -> GroupMask:
    """Draw a mask where each block is independently absent with probability p."""
    if not 0 <= p <= 1:
        raise ValueError("p must be in [0, 1]")
    return GroupMask(tuple(rng.random(schema.n_groups) >= p))


class AdamOptimizer:
    """Adam / AdamW with bias correction and float64 internal state.

    The update is computed in float64 and cast back to each parameter's own
    dtype, so float64 parameters follow the textbook trajectory exactly.
    AdamW applies decoupled weight decay (decay added to the step, not the
    gradient).
    """

    def __init__(self, decoupled_weight_decay: bool = False,
                 weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled_weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        """Update params in place from grads at learning rate lr."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if g is None:
                continue
            theta = params[name]
            g64 = g.astype(np.float64)
            if self.weight_decay and not self.decoupled:
                g64 = g64 + self.weight_decay * theta.astype(np.float64)
            if name not in self._m:
                self._m[name] = np.zeros(theta.shape, dtype=np.float64)
                self._v[name] = np.zeros(theta.shape, dtype=np.float64)
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g64
            v *= self.beta2
            v += (1.0 - self.beta2) * g64 * g64
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * theta.astype(np.float64)
            theta -= (lr * update).astype(theta.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. Raises FloatingPointError on non-finite
    gradients, which the training loop treats as divergence.
    """
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            if g is not None:
                g *= scale
    return norm


def _mask_bits(rng: np.random.Generator | None, b: int, schema: FeatureSchema,
               p: float) -> tuple[np.ndarray, np.ndarray]:
    if rng is None:
        bits = np.ones((b, schema.n_groups), dtype=bool)
    else:
        bits = rng.random((b, schema.n_groups)) >= p
    return bits[:, :schema.day_groups], bits[:, schema.day_groups:]


def full_mask_mse(params: ModelParams, examples: Sequence[ForecastExample],
                  chunk: int = 256) -> float:
    """Mean squared error over the horizon under the full mask."""
    past, covs, future = example_arrays(examples)
    total, count = 0.0, 0
    with nk.no_grad():
        for lo in range(0, len(examples), chunk):
            hi = min(lo + chunk, len(examples))
            day_bits, cov_bits = _mask_bits(None, hi - lo, params.schema, 0.0)
            out = forward_arrays(past[lo:hi], covs[lo:hi], day_bits, cov_bits, params)
            diff = out.data.astype(np.float64) - future[lo:hi].astype(np.float64)
            total += float((diff ** 2).sum())
            count += diff.size
    return total / count


def masked_mse(params: ModelParams, examples: Sequence[ForecastExample],
               p: float, seed: int, chunk: int = 256) -> float:
    """MSE under fresh random masks (absence probability p), for robustness checks."""
    rng = np.random.default_rng(seed)
    past, covs, future = example_arrays(examples)
    total, count = 0.0, 0
    with nk.no_grad():
        for lo in range(0, len(examples), chunk):
            hi = min(lo + chunk, len(examples))
            day_bits, cov_bits = _mask_bits(rng, hi - lo, params.schema, p)
            out = forward_arrays(past[lo:hi], covs[lo:hi], day_bits, cov_bits, params)
            diff = out.data.astype(np.float64) - future[lo:hi].astype(np.float64)
            total += float((diff ** 2).sum())
            count += diff.size
    return total / count


def train(train_examples: Sequence[ForecastExample],
          val_examples: Sequence[ForecastExample],
          model_config: ModelConfig,
          config: TrainConfig,
          flavor: str = "shapformer",
          initial_params: ModelParams | None = None,
          log_path: str | None = None,
          progress: Callable[[dict], None] | None = None,
          ) -> tuple[ModelParams, list[dict]]:
    """Train a model, returning the best-validation-loss parameters and the
    per-epoch log.

    The masked flavor draws a fresh mask per example per epoch; validation is
    always full-mask. Early stopping waits ``config.patience`` epochs without
    a new best. If the loss or gradients go non-finite the run aborts and the
    best finite parameters seen so far are returned, with the final log entry
    marked ``diverged``.
    """
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    if not train_examples or not val_examples:
        raise ValueError("train and validation splits must be non-empty")
    schema = train_examples[0].schema
    masked = flavor == "shapformer"

    ss = np.random.SeedSequence(config.seed)
    init_seed, mask_seed, drop_seed = ss.spawn(3)
    if initial_params is not None:
        params = initial_params.copy()
    else:
        params = init_params(schema, model_config, np.random.default_rng(init_seed))
    rng_masks = np.random.default_rng(mask_seed)
    rng_drop = np.random.default_rng(drop_seed)

    optimizer = AdamOptimizer(
        decoupled_weight_decay=config.optimizer == "adamw",
        weight_decay=config.weight_decay if config.optimizer == "adamw" else 0.0)

    past, covs, future = example_arrays(train_examples)
    n = len(train_examples)
    trainable = set(params.trainable_names())

    logs: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    since_best = 0
    log_file = open(log_path, "w") if log_path else None

    try:
        for epoch in range(config.max_epochs):
            t0 = time.perf_counter()
            lr = config.learning_rate * config.decay_rate ** epoch
            order = rng_masks.permutation(n)
            epoch_loss, seen = 0.0, 0
            masked_groups = 0
            diverged = False
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                b = len(idx)
                day_bits, cov_bits = _mask_bits(
                    rng_masks if masked else None, b, schema,
                    config.mask_probability)
                masked_groups += int(day_bits.size - day_bits.sum()
                                     + cov_bits.size - cov_bits.sum())
                try:
                    tensors = params.as_tensors(trainable=True)
                    out = forward_arrays(
                        past[idx], covs[idx], day_bits, cov_bits, params,
                        tensors=tensors,
                        dropout_rng=rng_drop if model_config.dropout > 0 else None)
                    loss = mse_loss(out, future[idx])
                    loss.backward()
                    grads = {name: tensors[name].grad for name in trainable}
                    clip_global_norm(grads, config.grad_clip)
                except FloatingPointError:
                    diverged = True
                    break
                optimizer.step(params.tensors, grads, lr)
                epoch_loss += float(loss.data) * b
                seen += b

            entry = {
                "epoch": epoch,
                "train_loss": epoch_loss / max(seen, 1),
                "val_loss": None,
                "lr": lr,
                "masked_groups": masked_groups,
                "seconds": None,
            }
            if diverged:
                entry["diverged"] = True
                entry["seconds"] = time.perf_counter() - t0
                logs.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                if progress:
                    progress(entry)
                break

            try:
                val = full_mask_mse(params, val_examples,
                                    chunk=max(config.batch_size, 64))
            except FloatingPointError:
                entry["diverged"] = True
                entry["seconds"] = time.perf_counter() - t0
                logs.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                if progress:
                    progress(entry)
                break
            entry["val_loss"] = val
            entry["seconds"] = time.perf_counter() - t0
            logs.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if progress:
                progress(entry)

            if val < best_val:
                best_val = val
                best_params = params.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    finally:
        if log_file:
            log_file.close()
    return best_params, logs
