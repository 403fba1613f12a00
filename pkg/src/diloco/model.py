"""Byte-level fixed-context MLP language model.

    x      = concat(E[ctx_1], ..., E[ctx_C])          (B, C*D)
    h      = tanh(x @ W1.T + b1)                       (B, Hd)
    logits = h @ W2.T + b2                             (B, V)
    loss   = mean cross-entropy(logits, target)

All parameters live in one flat float64 vector, laid out as
``E (V, D) | W1 (Hd, C*D) | b1 (Hd) | W2 (V, Hd) | b2 (V)``. Weight matrices
are stored one output unit per row so a neuron's weights are contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .numerics import DimensionError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_len: int = 16
    embed_dim: int = 32
    hidden_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "embed_dim", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def num_params(self) -> int:
        v, c, d, h = self.vocab_size, self.context_len, self.embed_dim, self.hidden_dim
        return v * d + c * d * h + h + h * v + v

    @cached_property
    def layout(self) -> "ParamLayout":
        return ParamLayout(self)


class ParamLayout:
    """Named slices into the flat parameter vector."""

    def __init__(self, cfg: ModelConfig):
        v, c, d, h = cfg.vocab_size, cfg.context_len, cfg.embed_dim, cfg.hidden_dim
        shapes = {
            "embed": (v, d),
            "w1": (h, c * d),
            "b1": (h,),
            "w2": (v, h),
            "b2": (v,),
        }
        self.shapes = shapes
        self.slices = {}
        start = 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            self.slices[name] = slice(start, start + n)
            start += n
        self.size = start

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        return flat[self.slices[name]].reshape(self.shapes[name])

    def views(self, flat: np.ndarray):
        return tuple(self.view(flat, name) for name in self.shapes)

    @property
    def output_slice(self) -> slice:
        return slice(self.slices["w2"].start, self.slices["b2"].stop)


@dataclass(frozen=True)
class Batch:
    contexts: np.ndarray  # (B, C) token ids
    targets: np.ndarray  # (B,) token ids

    def __post_init__(self):
        ctx = np.asarray(self.contexts)
        tgt = np.asarray(self.targets)
        if ctx.ndim != 2 or tgt.ndim != 1 or ctx.shape[0] != tgt.shape[0]:
            raise DimensionError(f"bad batch shapes {ctx.shape} / {tgt.shape}")
        if ctx.shape[0] < 1:
            raise ValueError("empty batch")
        object.__setattr__(self, "contexts", ctx)
        object.__setattr__(self, "targets", tgt)

    def __len__(self) -> int:
        return self.targets.shape[0]


def _check(params: np.ndarray, cfg: ModelConfig, batch: Batch) -> None:
    if params.shape != (cfg.num_params,):
        raise DimensionError(f"expected {cfg.num_params} parameters, got {params.shape}")
    if batch.contexts.shape[1] != cfg.context_len:
        raise DimensionError(
            f"context length {batch.contexts.shape[1]} != {cfg.context_len}")
    hi = max(int(batch.contexts.max()), int(batch.targets.max()))
    lo = min(int(batch.contexts.min()), int(batch.targets.min()))
    if lo < 0 or hi >= cfg.vocab_size:
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")


def init_params(cfg: ModelConfig, seed: int | None = None) -> np.ndarray:
    """Scaled-uniform embedding and hidden weights; zero output layer and biases.

    Embedding rows are a one-hot lookup, so their fan-in is 1.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lay = cfg.layout
    params = np.zeros(lay.size)
    emb = lay.view(params, "embed")
    emb[:] = rng.uniform(-1.0, 1.0, size=emb.shape)
    w1 = lay.view(params, "w1")
    bound = 1.0 / np.sqrt(w1.shape[1])
    w1[:] = rng.uniform(-bound, bound, size=w1.shape)
    return params


def _forward(params, cfg, batch):
    emb, w1, b1, w2, b2 = cfg.layout.views(params)
    x = emb[batch.contexts].reshape(len(batch), -1)
    h = np.tanh(x @ w1.T + b1)
    logits = h @ w2.T + b2
    return x, h, logits


def forward_loss(params: np.ndarray, cfg: ModelConfig, batch: Batch) -> float:
    """Mean next-token cross-entropy (nats)."""
    _check(params, cfg, batch)
    _, _, logits = _forward(params, cfg, batch)
    return float(kernels.row_nll(logits, batch.targets).mean())


def row_losses(params: np.ndarray, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    """Per-row negative log-likelihood."""
    _check(params, cfg, batch)
    _, _, logits = _forward(params, cfg, batch)
    return kernels.row_nll(logits, batch.targets)


def loss_and_grad(params: np.ndarray, cfg: ModelConfig, batch: Batch):
    _check(params, cfg, batch)
    lay = cfg.layout
    _, w1, _, w2, _ = lay.views(params)
    x, h, logits = _forward(params, cfg, batch)
    loss, dlogits = kernels.softmax_xent(logits, batch.targets)

    grad = np.zeros_like(params)
    g_emb, g_w1, g_b1, g_w2, g_b2 = lay.views(grad)
    g_w2[:] = dlogits.T @ h
    g_b2[:] = dlogits.sum(axis=0)
    dpre = (dlogits @ w2) * (1.0 - h * h)
    g_w1[:] = dpre.T @ x
    g_b1[:] = dpre.sum(axis=0)
    kernels.embed_scatter_add(g_emb, batch.contexts, dpre @ w1)
    return loss, grad


def backward(params: np.ndarray, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    """Analytic gradient of ``forward_loss`` w.r.t. the flat parameter vector."""
    return loss_and_grad(params, cfg, batch)[1]
