"""Per-neuron sign pruning of outer gradients.

A neuron group is one output unit's weight row plus its bias (each embedding
row is a group on its own, with no bias). Inside a group:

1. the sign carrying more total magnitude wins (ties go to positive) and
   every element of the other sign is zeroed;
2. if fewer than ``ceil(frac * group_size)`` elements are now zero, the
   smallest-magnitude survivors are zeroed until that count is reached
   (equal magnitudes: lower index first).

Surviving values are never changed, so the output's support is a subset of
the input's and pruning twice at the same fraction is a no-op.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .model import ModelConfig, ParamLayout

PRUNE_FRACTIONS = (0.0, 0.25, 0.5, 0.75)


def _zero_quota(frac: float, width: int) -> int:
    # guard against 0.75 * 4 landing a hair above 3
    return min(width, int(math.ceil(frac * width - 1e-9)))


# (weight block, bias block) pairs; each weight row plus its bias is one group
_GROUPS = (("embed", None), ("w1", "b1"), ("w2", "b2"))


def prune_groups(groups, frac: float) -> np.ndarray:
    """Prune each row of a 2-D array as an independent group; returns a copy."""
    if not 0 <= frac < 1:
        raise ValueError(f"prune fraction must be in [0, 1), got {frac}")
    rows = np.array(groups, dtype=np.float64, ndmin=2, order="C")
    kernels.prune_rows(rows, _zero_quota(frac, rows.shape[1]))
    return rows


def prune_outer_gradient(delta: np.ndarray, frac: float,
                         layout: ParamLayout | ModelConfig) -> np.ndarray:
    if not 0 <= frac < 1:
        raise ValueError(f"prune fraction must be in [0, 1), got {frac}")
    if isinstance(layout, ModelConfig):
        layout = layout.layout
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (layout.size,):
        raise ValueError(f"delta has {delta.shape} entries, layout expects {layout.size}")
    out = delta.copy()
    for wname, bname in _GROUPS:
        w = layout.view(out, wname)
        if bname is None:
            rows = np.ascontiguousarray(w)
        else:
            rows = np.concatenate([w, layout.view(out, bname)[:, None]], axis=1)
        kernels.prune_rows(rows, _zero_quota(frac, rows.shape[1]))
        if bname is None:
            w[:] = rows
        else:
            w[:] = rows[:, :-1]
            layout.view(out, bname)[:] = rows[:, -1]
    return out
