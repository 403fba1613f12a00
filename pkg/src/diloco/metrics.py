"""Validation perplexity, outer-gradient statistics and CSV run logs."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch, ModelConfig, row_losses
from .numerics import cosine_similarity, l2_norm

COLUMNS = (
    "run_id", "outer_step", "inner_step", "k_t", "val_ppl", "train_loss",
    "mean_cos_sim", "std_cos_sim", "mean_delta_norm", "agg_delta_norm",
    "dropped_count", "bytes_communicated",
)
INT_COLUMNS = ("outer_step", "inner_step", "k_t", "dropped_count", "bytes_communicated")


@dataclass
class EvalSet:
    """A fixed set of validation positions, drawn once from its own seed."""

    batches: list[Batch]

    @classmethod
    def build(cls, val, context_len: int, n_batches: int, batch_size: int,
              seed: int) -> "EvalSet":
        from .data import BatchSampler, full_shard

        if val is None or len(val) == 0:
            raise ValueError("validation set is empty")
        sampler = BatchSampler(val, full_shard(val), context_len)
        rng = np.random.default_rng(seed)
        return cls([sampler.sample(batch_size, rng) for _ in range(n_batches)])

    def __len__(self) -> int:
        return sum(len(b) for b in self.batches)


def evaluate_perplexity(params: np.ndarray, cfg: ModelConfig, eval_set) -> float:
    """exp(mean per-position NLL) over every position of ``eval_set``."""
    batches = eval_set.batches if isinstance(eval_set, EvalSet) else list(eval_set)
    if not batches:
        raise ValueError("validation set is empty")
    total, count = 0.0, 0
    for b in batches:
        total += float(row_losses(params, cfg, b).sum())
        count += len(b)
    return math.exp(total / count)


def outer_grad_stats(grads, aggregated: np.ndarray | None = None) -> dict:
    """Pairwise cosine similarity (mean, population std) and delta norms.

    Pairs involving an all-zero delta have no similarity and are skipped;
    with fewer than two usable deltas the similarity fields are NaN.
    """
    deltas = [g.delta if hasattr(g, "delta") else np.asarray(g) for g in grads]
    sims = []
    for a, b in itertools.combinations(deltas, 2):
        try:
            sims.append(cosine_similarity(a, b))
        except ValueError:
            continue
    if aggregated is None and deltas:
        aggregated = np.mean(deltas, axis=0)
    return dict(
        mean_cos_sim=float(np.mean(sims)) if sims else math.nan,
        std_cos_sim=float(np.std(sims)) if sims else math.nan,
        mean_delta_norm=float(np.mean([l2_norm(d) for d in deltas])) if deltas else math.nan,
        agg_delta_norm=l2_norm(aggregated) if aggregated is not None else math.nan,
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest string that parses back to the same double
    return str(value)


class MetricsLog:
    """Append-only CSV with a single header line."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = open(self.path, "a", newline="")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {self.path}: {exc}") from exc
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(COLUMNS)
            self._fh.flush()

    def write(self, record: dict) -> None:
        self._w.writerow([_fmt(record[c]) for c in COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_record(sink, record: dict) -> None:
    if isinstance(sink, (str, Path)):
        with MetricsLog(sink) as m:
            m.write(record)
    else:
        sink.write(record)


def read_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out = {}
            for key, text in row.items():
                if key == "run_id":
                    out[key] = text
                elif key in INT_COLUMNS:
                    out[key] = int(text)
                else:
                    out[key] = float(text)
            rows.append(out)
    return rows


def write_sidecar(path, config: dict, summary: dict | None = None, **extra) -> None:
    data = {"config": config, "summary": summary or {}, **extra}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
