"""Masked-attention forecaster: predict from any subset of feature groups.

The network embeds each time step with a feature-attention mechanism whose
query is the sum of the present variables' embeddings (absent variables get
query weight zero and are masked out of the softmax), runs a masked encoder
over the 168 past steps, and decodes 168 future steps with self-attention
plus cross-attention that excludes past steps whose day group is absent.
Because absent inputs receive exactly-zero attention weight everywhere, the
model provably cannot use them: a forward pass under mask m is equivalent to
a forward pass on inputs with the absent pieces physically deleted.

Defined semantics for degenerate masks:
- A step where every variable is absent embeds to a learned null-step vector.
- When no day group is present, cross-attention contributes an exactly-zero
  context (the add-and-norm still runs), so the empty-coalition forecast is
  the model's learned base behavior.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor
from .schema import (
    FeatureSchema,
    ForecastExample,
    GroupMask,
    Standardizer,
    schema_fingerprint,
    schema_from_dict,
    schema_to_dict,
)
from .shapley import CoalitionTable

CHECKPOINT_VERSION = 1

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Checkpoint",
    "init_params",
    "embed_timestep",
    "forward",
    "forward_arrays",
    "batched_forward",
    "example_arrays",
    "mask_bit_arrays",
    "sinusoidal_encoding",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    layers: int = 2
    d_model: int = 128
    heads: int = 2
    dropout: float = 0.0
    normalize_query: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "d_model": self.d_model, "heads": self.heads,
                "dropout": self.dropout, "normalize_query": self.normalize_query}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(d["layers"], d["d_model"], d["heads"], d.get("dropout", 0.0),
                   d.get("normalize_query", False))


def sinusoidal_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos positional table, shape (n_positions, d_model)."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    half = (d_model + 1) // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half, dtype=np.float64) / d_model)
    angles = pos * freqs[None, :]
    table = np.zeros((n_positions, 2 * half), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table[:, :d_model].astype(np.float32)


@dataclass(eq=False)
class ModelParams:
    """All weight tensors, keyed by dotted names, plus config and schema.

    The positional encoding table is stored but fixed; every other tensor is
    trainable. The per-variable query weights of feature attention are the
    0/1 presence indicators derived from the mask, not stored parameters.
    """

    config: ModelConfig
    schema: FeatureSchema
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    NON_TRAINABLE = ("pos_encoding",)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite weights in {name!r}")

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.NON_TRAINABLE]

    def as_tensors(self, trainable: bool = False) -> dict[str, Tensor]:
        out = {}
        for name, arr in self.tensors.items():
            req = trainable and name not in self.NON_TRAINABLE
            out[name] = Tensor(arr, requires_grad=req)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.schema,
                           {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(schema: FeatureSchema, config: ModelConfig,
                rng: np.random.Generator) -> ModelParams:
    """Fresh weights: uniform Xavier for linear maps, small normal for
    embedding tables and the null-step vector, identity-like layer norms."""
    d = config.d_model
    ff = 4 * d
    t: dict[str, np.ndarray] = {}

    t["embed.load.w"] = _glorot(rng, 1, d, (d,))
    t["embed.load.b"] = np.zeros(d, dtype=np.float32)
    for c in schema.covariates:
        if c.kind == "categorical":
            t[f"embed.{c.name}.table"] = (rng.normal(0.0, 0.1, size=(c.cardinality, d))
                                          .astype(np.float32))
        else:
            t[f"embed.{c.name}.w"] = _glorot(rng, 1, d, (d,))
            t[f"embed.{c.name}.b"] = np.zeros(d, dtype=np.float32)
    t["null_step"] = rng.normal(0.0, 0.1, size=(d,)).astype(np.float32)
    t["pos_encoding"] = sinusoidal_encoding(schema.window, d)

    def attn_block(prefix: str):
        for w in ("wq", "wk", "wv", "wo"):
            t[f"{prefix}.{w}"] = _glorot(rng, d, d, (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            t[f"{prefix}.{b}"] = np.zeros(d, dtype=np.float32)

    def ln_block(prefix: str):
        t[f"{prefix}.g"] = np.ones(d, dtype=np.float32)
        t[f"{prefix}.b"] = np.zeros(d, dtype=np.float32)

    def ff_block(prefix: str):
        t[f"{prefix}.w1"] = _glorot(rng, d, ff, (d, ff))
        t[f"{prefix}.b1"] = np.zeros(ff, dtype=np.float32)
        t[f"{prefix}.w2"] = _glorot(rng, ff, d, (ff, d))
        t[f"{prefix}.b2"] = np.zeros(d, dtype=np.float32)

    for layer in range(config.layers):
        attn_block(f"enc{layer}.attn")
        ln_block(f"enc{layer}.ln1")
        ff_block(f"enc{layer}.ff")
        ln_block(f"enc{layer}.ln2")
        attn_block(f"dec{layer}.self")
        ln_block(f"dec{layer}.ln1")
        attn_block(f"dec{layer}.cross")
        ln_block(f"dec{layer}.ln2")
        ff_block(f"dec{layer}.ff")
        ln_block(f"dec{layer}.ln3")

    t["head.w"] = _glorot(rng, d, 1, (d, 1))
    t["head.b"] = np.zeros(1, dtype=np.float32)
    return ModelParams(config, schema, t)


# ---------------------------------------------------------------------------
# forward pass


def mask_bit_arrays(masks: Sequence[GroupMask],
                    schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    """Split masks into (day_bits (B, day_groups), cov_bits (B, n_covariates))."""
    bits = np.array([m.bits for m in masks], dtype=bool)
    if bits.shape[1] != schema.n_groups:
        raise ValueError(
            f"masks have {bits.shape[1]} blocks, schema declares {schema.n_groups}")
    return bits[:, :schema.day_groups], bits[:, schema.day_groups:]


def example_arrays(examples: Sequence[ForecastExample]
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack examples into (past (B, L), covs (B, C, W), future (B, H))."""
    past = np.stack([e.past_target for e in examples])
    covs = np.stack([e.covariate_values for e in examples])
    future = np.stack([e.future_target for e in examples])
    return past, covs, future


def _embed_channel(values: np.ndarray, cov, tensors: dict[str, Tensor],
                   name: str) -> Tensor:
    """Embed one channel's (B, T) values to (B, T, d)."""
    if cov is None or cov.kind == "continuous":
        v = Tensor(values[..., None])
        return v * tensors[f"embed.{name}.w"] + tensors[f"embed.{name}.b"]
    codes = np.rint(values).astype(np.int64)
    return nk.gather(tensors[f"embed.{name}.table"], codes)


def _feature_attention(embeds: Tensor, present: np.ndarray,
                       tensors: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Per-step variable mixing. embeds (B, T, V, d); present (B, T, V) bool.

    Query = sum of present variable embeddings (0/1 weights). Steps with no
    present variable get the learned null-step vector; their softmax runs
    over a pretend-allow mask purely to stay defined, and the result is
    discarded by the final select.
    """
    b, tsteps, nvar, d = embeds.data.shape
    any_present = present.any(axis=-1)
    p32 = present.astype(np.float32)[..., None]
    q = (embeds * Tensor(p32)).sum(axis=2)
    if config.normalize_query:
        counts = np.maximum(present.sum(axis=-1, keepdims=True), 1).astype(np.float32)
        q = q * Tensor(1.0 / counts)
    allow = np.where(any_present[..., None], present, True)
    out = nk.attention(q.reshape(b, tsteps, 1, d), embeds, embeds,
                       allow[:, :, None, :])
    out = out.reshape(b, tsteps, d)
    return nk.where(any_present[..., None], out, tensors["null_step"])


def _multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor,
                          key_allow: np.ndarray, prefix: str,
                          tensors: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Standard projected multi-head attention with an allow-mask over keys.

    key_allow has shape (B, Tk) and must leave every row at least one key.
    """
    b, tq, d = queries.data.shape
    tk = keys.data.shape[1]
    h = config.heads
    dk = d // h

    def split(x: Tensor, t: int) -> Tensor:
        return x.reshape(b, t, h, dk).transpose((0, 2, 1, 3))

    q = split(nk.matmul(queries, tensors[f"{prefix}.wq"]) + tensors[f"{prefix}.bq"], tq)
    k = split(nk.matmul(keys, tensors[f"{prefix}.wk"]) + tensors[f"{prefix}.bk"], tk)
    v = split(nk.matmul(values, tensors[f"{prefix}.wv"]) + tensors[f"{prefix}.bv"], tk)
    ctx = nk.attention(q, k, v, key_allow[:, None, None, :])
    ctx = ctx.transpose((0, 2, 1, 3)).reshape(b, tq, d)
    return nk.matmul(ctx, tensors[f"{prefix}.wo"]) + tensors[f"{prefix}.bo"]


def _add_norm(x: Tensor, sub: Tensor, prefix: str, tensors: dict[str, Tensor]) -> Tensor:
    return nk.layer_norm(x + sub, tensors[f"{prefix}.g"], tensors[f"{prefix}.b"])


def _feed_forward(x: Tensor, prefix: str, tensors: dict[str, Tensor]) -> Tensor:
    hidden = (nk.matmul(x, tensors[f"{prefix}.w1"]) + tensors[f"{prefix}.b1"]).relu()
    return nk.matmul(hidden, tensors[f"{prefix}.w2"]) + tensors[f"{prefix}.b2"]


def forward_arrays(past: np.ndarray, covs: np.ndarray, day_bits: np.ndarray,
                   cov_bits: np.ndarray, params: ModelParams, *,
                   tensors: dict[str, Tensor] | None = None,
                   dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Batched forward pass on raw arrays.

    past (B, L) float32, covs (B, C, W) float32, day_bits (B, day_groups)
    bool, cov_bits (B, C) bool. Each row carries its own mask, so one batch
    can mix examples and coalitions freely. Returns a (B, horizon) tensor.
    Gradients flow when ``tensors`` was built with trainable=True; dropout is
    active only when a generator is passed and config.dropout > 0.
    """
    schema, config = params.schema, params.config
    t = tensors if tensors is not None else params.as_tensors()
    b = past.shape[0]
    lb, hz = schema.lookback, schema.horizon
    rate = config.dropout if dropout_rng is not None else 0.0

    def drop(x: Tensor) -> Tensor:
        return nk.dropout(x, rate, dropout_rng) if rate > 0 else x

    # per-step presence of the load variable in the encoder
    step_has_load = np.repeat(day_bits, lb // day_bits.shape[1], axis=1)
    has_any_day = day_bits.any(axis=1)

    enc_embeds = [_embed_channel(past, None, t, "load")]
    enc_present = [step_has_load]
    dec_embeds = []
    dec_present = []
    for j, c in enumerate(schema.covariates):
        enc_embeds.append(_embed_channel(covs[:, j, :lb], c, t, c.name))
        enc_present.append(np.broadcast_to(cov_bits[:, j, None], (b, lb)))
        dec_embeds.append(_embed_channel(covs[:, j, lb:], c, t, c.name))
        dec_present.append(np.broadcast_to(cov_bits[:, j, None], (b, hz)))

    enc_x = _feature_attention(nk.stack(enc_embeds, axis=2),
                               np.stack(enc_present, axis=2), t, config)
    dec_x = _feature_attention(nk.stack(dec_embeds, axis=2),
                               np.stack(dec_present, axis=2), t, config)

    pos = t["pos_encoding"]
    enc_x = drop(enc_x + pos.data[None, :lb, :])
    dec_x = drop(dec_x + Tensor(pos.data[None, lb:, :]))

    # encoder self-attention may only read steps whose day group is present;
    # rows with no day at all run on a pretend-allow mask and their encoder
    # output is cut off at cross-attention below.
    enc_allow = np.where(has_any_day[:, None], step_has_load, True)
    for layer in range(config.layers):
        attn = _multi_head_attention(enc_x, enc_x, enc_x, enc_allow,
                                     f"enc{layer}.attn", t, config)
        enc_x = _add_norm(enc_x, drop(attn), f"enc{layer}.ln1", t)
        enc_x = _add_norm(enc_x, drop(_feed_forward(enc_x, f"enc{layer}.ff", t)),
                          f"enc{layer}.ln2", t)

    dec_allow = np.ones((b, hz), dtype=bool)
    zero_ctx = ~has_any_day[:, None, None]
    for layer in range(config.layers):
        self_attn = _multi_head_attention(dec_x, dec_x, dec_x, dec_allow,
                                          f"dec{layer}.self", t, config)
        dec_x = _add_norm(dec_x, drop(self_attn), f"dec{layer}.ln1", t)
        cross = _multi_head_attention(dec_x, enc_x, enc_x, enc_allow,
                                      f"dec{layer}.cross", t, config)
        cross = nk.where(zero_ctx, Tensor(np.zeros(1, dtype=np.float32)), cross)
        dec_x = _add_norm(dec_x, drop(cross), f"dec{layer}.ln2", t)
        dec_x = _add_norm(dec_x, drop(_feed_forward(dec_x, f"dec{layer}.ff", t)),
                          f"dec{layer}.ln3", t)

    out = nk.matmul(dec_x, t["head.w"]) + t["head.b"]
    return out.reshape(b, hz)


def forward(example: ForecastExample, mask: GroupMask,
            params: ModelParams) -> np.ndarray:
    """Predict the 168-step horizon for one example under one mask."""
    if len(mask) != example.schema.n_groups:
        raise ValueError("mask does not match schema block count")
    day_bits, cov_bits = mask_bit_arrays([mask], example.schema)
    with nk.no_grad():
        out = forward_arrays(example.past_target[None, :],
                             example.covariate_values[None, :, :],
                             day_bits, cov_bits, params)
    return out.data[0].copy()


def batched_forward(example: ForecastExample, masks: Sequence[GroupMask],
                    params: ModelParams, chunk: int = 256) -> CoalitionTable:
    """Evaluate one example under many masks, chunked for memory.

    Equivalent to looping ``forward`` over the masks; chunking is purely an
    optimization. Duplicate masks are rejected since the result is keyed by
    mask.
    """
    if not masks:
        raise ValueError("masks must be non-empty")
    keys = [m.to_int() for m in masks]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate masks in batched_forward")
    schema = example.schema
    table = CoalitionTable(schema.n_groups, schema.horizon)
    day_bits, cov_bits = mask_bit_arrays(masks, schema)
    n = len(masks)
    with nk.no_grad():
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            b = hi - lo
            past = np.broadcast_to(example.past_target, (b, schema.lookback))
            covs = np.broadcast_to(example.covariate_values,
                                   (b,) + example.covariate_values.shape)
            out = forward_arrays(np.ascontiguousarray(past),
                                 np.ascontiguousarray(covs),
                                 day_bits[lo:hi], cov_bits[lo:hi], params)
            for i in range(b):
                table.set(keys[lo + i], out.data[i].astype(np.float64))
    return table


def embed_timestep(values: dict[str, float], present: dict[str, bool],
                   params: ModelParams) -> Tensor:
    """Embed a single time step from named channel values.

    Channels are "load" plus covariate names; ``present`` flags which of them
    participate. At least one channel must be present: the null-step fallback
    belongs to ``forward``, not to this public op.
    """
    schema = params.schema
    names = list(values.keys())
    for name in names:
        if name != "load" and name not in [c.name for c in schema.covariates]:
            raise ValueError(f"unknown channel {name!r}")
    flags = np.array([[ [bool(present.get(n, False)) for n in names] ]])
    if not flags.any():
        raise ValueError("embed_timestep requires at least one present variable")
    t = params.as_tensors()
    embeds = []
    for n in names:
        cov = None if n == "load" else schema.covariate(n)
        v = np.full((1, 1), values[n], dtype=np.float32)
        embeds.append(_embed_channel(v, cov, t, n))
    stacked = nk.stack(embeds, axis=2)
    out = _feature_attention(stacked, flags, t, params.config)
    return out.reshape(params.config.d_model)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    standardizer: Standardizer | None
    flavor: str
    meta: dict


def save_checkpoint(path: str, params: ModelParams,
                    standardizer: Standardizer | None, flavor: str,
                    extra: dict | None = None) -> None:
    """Write a versioned npz container; the write is atomic (temp + rename)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "flavor": flavor,
        "config": params.config.to_dict(),
        "schema": schema_to_dict(params.schema),
        "schema_fingerprint": schema_fingerprint(params.schema),
        "standardizer": standardizer.to_dict() if standardizer is not None else None,
        "extra": extra or {},
    }
    arrays = {f"t::{k}": v for k, v in params.tensors.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        tensors = {k[len("t::"):]: z[k].copy() for k in z.files if k.startswith("t::")}
    schema = schema_from_dict(meta["schema"])
    if schema_fingerprint(schema) != meta["schema_fingerprint"]:
        raise ValueError("checkpoint schema fingerprint does not match its schema")
    params = ModelParams(ModelConfig.from_dict(meta["config"]), schema, tensors)
    std = (Standardizer.from_dict(meta["standardizer"])
           if meta.get("standardizer") is not None else None)
    return Checkpoint(params, std, meta.get("flavor", "unknown"), meta)
