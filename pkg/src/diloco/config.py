"""Run configuration: defaults, presets, TOML loading and key=value overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import ModelConfig
from .optimizers import DEFAULT_OUTER_LR, OUTER_KINDS, InnerHyper, OuterHyper, with_total


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    corpus: str = "data/shakespeare.txt"
    val_frac: float = 0.1
    data_regime: str = "noniid"
    kmeans_iters: int = 50
    batch_size: int = 32
    # model
    vocab_size: int = 256
    context_len: int = 16
    embed_dim: int = 32
    hidden_dim: int = 128
    # protocol
    k: int = 4
    H: int = 50
    T: int = 40
    pretrain_steps: int = 500
    drop_prob: float = 0.0
    prune_frac: float = 0.0
    replica_schedule: list = field(default_factory=list)  # [[outer_step, k_t], ...]
    # inner optimizer
    inner_opt: str = "adamw"
    inner_lr: float = 1e-3
    warmup_steps: int = 100
    restart_warmup: bool = True
    lr_schedule: str = "cosine"
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    # outer optimizer
    outer_opt: str = "nesterov"
    outer_lr: float | None = None  # None: the kind's default
    outer_momentum: float = 0.9
    outer_adam_beta1: float = 0.9
    outer_adam_beta2: float = 0.95
    outer_adam_eps: float = 0.1
    # evaluation
    eval_batches: int = 50
    eval_every: int = 1
    pretrain_eval_every: int = 0
    # bookkeeping
    seed: int = 0
    run_id: str = ""
    # transport
    transport: str = "sim"
    wire_f32: bool = False
    barrier_timeout: float = 0.0  # 0: 10x the median phase time so far, at least 1 s
    initial_barrier_timeout: float = 600.0
    join_timeout: float = 60.0
    connect_retry_window: float = 30.0

    # -- derived -----------------------------------------------------------

    @property
    def total_inner_steps(self) -> int:
        return self.T * self.H

    @property
    def max_k(self) -> int:
        return max([self.k] + [int(kt) for _, kt in self.replica_schedule])

    def k_at(self, outer_step: int) -> int:
        """Replica count in effect at ``outer_step`` (1-based)."""
        k = self.k
        for start, kt in sorted((int(s), int(kt)) for s, kt in self.replica_schedule):
            if start <= outer_step:
                k = kt
        return k

    def corpus_path(self) -> Path:
        """The corpus path; a relative path missing from the working directory
        is looked up next to the package checkout instead."""
        path = Path(self.corpus)
        if not path.is_absolute() and not path.exists():
            alt = Path(__file__).resolve().parents[2] / path
            if alt.exists():
                return alt
        return path

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.context_len, self.embed_dim,
                           self.hidden_dim, self.seed)

    def _inner_base(self) -> InnerHyper:
        return InnerHyper(base_lr=self.inner_lr, warmup_steps=self.warmup_steps,
                          total_steps=max(self.warmup_steps, 1),
                          weight_decay=self.weight_decay, beta1=self.beta1,
                          beta2=self.beta2, eps=self.eps, schedule=self.lr_schedule)

    def pretrain_hyper(self) -> InnerHyper:
        return with_total(self._inner_base(), max(self.pretrain_steps, 0))

    def inner_hyper(self) -> InnerHyper:
        h = with_total(self._inner_base(), self.total_inner_steps)
        if not self.restart_warmup and self.pretrain_steps > 0:
            h = dataclasses.replace(h, warmup_steps=0)
        return h

    def outer_hyper(self) -> OuterHyper:
        return OuterHyper(kind=self.outer_opt, lr=self.outer_lr,
                          momentum=self.outer_momentum,
                          adam_beta1=self.outer_adam_beta1,
                          adam_beta2=self.outer_adam_beta2,
                          adam_eps=self.outer_adam_eps)

    # -- validation / serialisation -----------------------------------------

    def validate(self) -> "RunConfig":
        def bad(key, why):
            raise ConfigError(f"{key}: {why}")

        for key in ("k", "H", "T", "batch_size", "vocab_size", "context_len",
                    "embed_dim", "hidden_dim", "eval_batches", "kmeans_iters", "eval_every"):
            if int(getattr(self, key)) < 1:
                bad(key, "must be >= 1")
        for key in ("pretrain_steps", "warmup_steps", "pretrain_eval_every"):
            if int(getattr(self, key)) < 0:
                bad(key, "must be >= 0")
        if self.data_regime not in ("iid", "noniid"):
            bad("data_regime", "must be 'iid' or 'noniid'")
        if self.inner_opt not in ("adamw", "sgd"):
            bad("inner_opt", "must be 'adamw' or 'sgd'")
        if self.outer_opt not in OUTER_KINDS:
            bad("outer_opt", f"must be one of {OUTER_KINDS}")
        if self.lr_schedule not in ("cosine", "constant"):
            bad("lr_schedule", "must be 'cosine' or 'constant'")
        if self.transport not in ("sim", "tcp"):
            bad("transport", "must be 'sim' or 'tcp'")
        if not 0 <= self.drop_prob <= 1:
            bad("drop_prob", "must be in [0, 1]")
        if not 0 <= self.prune_frac < 1:
            bad("prune_frac", "must be in [0, 1)")
        if not 0 <= self.val_frac < 1:
            bad("val_frac", "must be in [0, 1)")
        if not self.inner_lr > 0:
            bad("inner_lr", "must be > 0")
        if self.outer_lr is not None and not self.outer_lr > 0:
            bad("outer_lr", "must be > 0")
        if not 0 <= self.outer_momentum < 1:
            bad("outer_momentum", "must be in [0, 1)")
        for entry in self.replica_schedule:
            if len(entry) != 2 or int(entry[0]) < 1 or int(entry[1]) < 1:
                bad("replica_schedule", f"entries are [outer_step >= 1, k_t >= 1], got {entry}")
        return self

    def resolved(self) -> "RunConfig":
        """Copy with every implicit default made explicit."""
        out = dataclasses.replace(self, replica_schedule=[list(map(int, e))
                                                          for e in self.replica_schedule])
        if out.outer_lr is None:
            out.outer_lr = DEFAULT_OUTER_LR[out.outer_opt]
        return out.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> int:
        """64-bit digest of everything both coordinator and workers must agree on."""
        d = self.resolved().to_dict()
        for key in _LOCAL_KEYS:
            d.pop(key, None)
        h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
        return int.from_bytes(h.digest()[:8], "little")


# Keys that may legitimately differ between processes of one run.
_LOCAL_KEYS = ("run_id", "transport", "barrier_timeout", "initial_barrier_timeout",
               "join_timeout", "connect_retry_window", "corpus", "eval_batches",
               "eval_every", "pretrain_eval_every")

FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    default = FIELDS[key].default
    if key == "outer_lr":
        if value is None or value in ("auto", "default", ""):
            return None
        default = 0.0
    if key == "replica_schedule":
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list of [outer_step, k_t] pairs")
        return [list(e) for e in value]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(value)
            return v
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r}") from None


def _apply(cfg: RunConfig, values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    changes = {k: _coerce(k, v) for k, v in values.items()}
    return dataclasses.replace(cfg, **changes)


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        out[key.strip()] = _parse_value(text.strip())
    return out


def read_config_file(path) -> dict:
    """Flat TOML file, or a run sidecar JSON (its ``config`` object)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        data = json.loads(text)
        return dict(data.get("config", data))
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; tables not allowed: {', '.join(nested)}")
    return data


def _baseline(cfg: RunConfig) -> dict:
    return dict(k=1, T=1, H=cfg.total_inner_steps, outer_opt="sgd", outer_lr=1.0,
                drop_prob=0.0, prune_frac=0.0, replica_schedule=[])


# Baseline comparison rows at desk scale. Each preset only
# touches the keys it returns.
PRESETS = {
    "baseline": _baseline,
    "baseline-8x-batch": lambda c: {**_baseline(c), "batch_size": 8 * c.batch_size},
    "baseline-8x-updates": lambda c: {**_baseline(c), "H": 8 * c.total_inner_steps},
    "diloco-default": lambda c: dict(k=8, H=50, T=max(1, c.total_inner_steps // 50),
                                     outer_opt="nesterov", outer_lr=None,
                                     data_regime="noniid"),
}


def load_config(path=None, preset: str | None = None, overrides=None,
                seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = _apply(cfg, read_config_file(path))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg = _apply(cfg, PRESETS[preset](cfg))
    if overrides:
        cfg = _apply(cfg, overrides if isinstance(overrides, dict) else parse_overrides(overrides))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg.validate()


def dump_toml(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
