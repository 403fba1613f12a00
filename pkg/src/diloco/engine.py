"""The DiLoCo training protocol.

One outer step: every active worker starts from the shared parameters (or
from its own, after a dropped round), runs ``H`` inner steps on its shard,
and reports ``delta = start - end``. The coordinator averages the surviving
deltas and feeds the average to the outer optimizer as a gradient.

The protocol is split into a transport-agnostic coordinator side
(:class:`OuterLoop`) and worker side (:class:`WorkerNode`). The simulated
transport in :func:`run_diloco` and the TCP transport in
:mod:`diloco.transport` drive the same two objects, which is what makes the
two transports numerically identical.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .compression import prune_outer_gradient
from .config import RunConfig
from .data import BatchSampler, Corpus, Shard, full_shard, shard_iid, shard_noniid, train_val_split
from .metrics import EvalSet, MetricsLog, evaluate_perplexity, outer_grad_stats
from .model import ModelConfig, init_params, loss_and_grad
from .numerics import all_finite, weighted_mean
from .optimizers import AdamWState, InnerHyper, adamw_step, init_outer_state, lr_schedule, outer_step, sgd_step
from .wire import Message, MsgType, decode_message, encode_message

log = logging.getLogger(__name__)


@dataclass
class OuterGradient:
    worker_id: int
    outer_step: int
    delta: np.ndarray
    shard_tokens: int


@dataclass
class WorkerState:
    worker_id: int
    local_params: np.ndarray
    inner_opt: AdamWState | None
    phase_start: np.ndarray
    shard: Shard
    sampler: BatchSampler
    inner_steps: int = 0
    last_loss: float = math.nan


@dataclass
class TrainContext:
    """Everything a worker needs besides its own state."""

    model: ModelConfig
    hyper: InnerHyper
    inner_opt: str
    batch_size: int
    seed: int
    H: int
    prune_frac: float = 0.0


# ---------------------------------------------------------------------------
# shared setup
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    cfg: RunConfig
    train: Corpus
    val: Corpus
    shards: list[Shard]  # one per worker id, up to cfg.max_k
    corpus_digest: bytes

    @property
    def config_hash(self) -> int:
        h = hashlib.sha256(self.cfg.config_hash().to_bytes(8, "little") + self.corpus_digest)
        return int.from_bytes(h.digest()[:8], "little")


def make_shards(cfg: RunConfig, train: Corpus, k: int) -> list[Shard]:
    seed = streams.seed_for(cfg.seed, "shard")
    if cfg.data_regime == "iid":
        return shard_iid(train, k, seed)
    return shard_noniid(train, k, seed, iters=cfg.kmeans_iters, min_len=cfg.context_len + 1)


def prepare(cfg: RunConfig, corpus: Corpus) -> Prepared:
    cfg = cfg.resolved()
    train, val = train_val_split(corpus, cfg.val_frac)
    shards = make_shards(cfg, train, cfg.max_k)
    digest = hashlib.sha256(corpus.buffer.tobytes()).digest()
    return Prepared(cfg, train, val, shards, digest)


def make_context(cfg: RunConfig) -> TrainContext:
    return TrainContext(cfg.model_config(), cfg.inner_hyper(), cfg.inner_opt,
                        cfg.batch_size, cfg.seed, cfg.H, cfg.prune_frac)


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------


def _inner_update(params, grad, opt_state, ctx: TrainContext, lr: float, hyper: InnerHyper):
    if ctx.inner_opt == "sgd":
        sgd_step(params, grad, lr)
    else:
        adamw_step(opt_state, params, grad, hyper, lr)


def pretrain(cfg: RunConfig, train: Corpus, log_fn=None) -> np.ndarray:
    """Single-worker training on the whole training set; 0 steps returns the init."""
    cfg = cfg.resolved()
    mcfg = cfg.model_config()
    params = init_params(mcfg, streams.seed_for(cfg.seed, "init"))
    if cfg.pretrain_steps == 0:
        return params
    hyper = cfg.pretrain_hyper()
    ctx = TrainContext(mcfg, hyper, cfg.inner_opt, cfg.batch_size, cfg.seed, cfg.pretrain_steps)
    sampler = BatchSampler(train, full_shard(train), mcfg.context_len)
    rng = streams.stream(cfg.seed, "pretrain")
    state = AdamWState.zeros(params.size) if cfg.inner_opt == "adamw" else None
    for step in range(1, cfg.pretrain_steps + 1):
        batch = sampler.sample(cfg.batch_size, rng)
        loss, grad = loss_and_grad(params, mcfg, batch)
        _inner_update(params, grad, state, ctx, lr_schedule(step, hyper), hyper)
        if log_fn is not None:
            log_fn(step, loss, params)
    return params


def new_worker(worker_id: int, shard: Shard, corpus: Corpus, ctx: TrainContext,
               params: np.ndarray) -> WorkerState:
    n = params.size
    opt = AdamWState.zeros(n) if ctx.inner_opt == "adamw" else None
    return WorkerState(worker_id, params.copy(), opt, params.copy(), shard,
                       BatchSampler(corpus, shard, ctx.model.context_len))


def inner_phase(w: WorkerState, start: np.ndarray, H: int, ctx: TrainContext,
                outer_step_: int, lr_override: float | None = None) -> WorkerState:
    """Run ``H`` inner steps from ``start`` on the worker's shard.

    Batches come from the worker's own stream for this outer step, and the
    schedule position is ``(outer_step - 1) * H + h`` so every worker sees the
    same learning rate at the same point of training.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    w.local_params = np.array(start, dtype=np.float64, copy=True)
    w.phase_start = np.array(start, dtype=np.float64, copy=True)
    rng = streams.stream(ctx.seed, "data", w.worker_id, outer_step_)
    base = (outer_step_ - 1) * H
    total = 0.0
    for h in range(1, H + 1):
        batch = w.sampler.sample(ctx.batch_size, rng)
        loss, grad = loss_and_grad(w.local_params, ctx.model, batch)
        lr = lr_schedule(base + h, ctx.hyper) if lr_override is None else lr_override
        _inner_update(w.local_params, grad, w.inner_opt, ctx, lr, ctx.hyper)
        total += loss
    w.inner_steps += H
    w.last_loss = total / H
    return w


def compute_outer_gradient(w: WorkerState, outer_step_: int = 0) -> OuterGradient:
    return OuterGradient(w.worker_id, outer_step_, w.phase_start - w.local_params,
                         w.shard.num_tokens)


# ---------------------------------------------------------------------------
# coordinator side
# ---------------------------------------------------------------------------


def sample_drop_mask(k: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= p <= 1:
        raise ValueError("drop probability must be in [0, 1]")
    return rng.random(k) < p


def round_drop_mask(cfg: RunConfig, t: int) -> np.ndarray:
    """The sampled drops of outer step ``t``; both ends can compute it."""
    return sample_drop_mask(cfg.k_at(t), cfg.drop_prob, streams.stream(cfg.seed, "drop", 0, t))


def aggregate(grads: list[OuterGradient], regime: str, drop_mask=None) -> np.ndarray | None:
    """Weighted mean of the surviving outer gradients, or None if none survive.

    Weights are 1 in the iid regime and the shard's token count otherwise;
    ``drop_mask[i]`` refers to ``grads[i]``.
    """
    if drop_mask is None:
        drop_mask = [False] * len(grads)
    kept = [g for g, d in zip(grads, drop_mask) if not d]
    if not kept:
        return None
    kept.sort(key=lambda g: g.worker_id)
    weights = [1.0 if regime == "iid" else float(g.shard_tokens) for g in kept]
    return weighted_mean([g.delta for g in kept], weights)


@dataclass
class RoundRecord:
    outer_step: int
    k_t: int
    received: list[int]
    dropped: list[int]
    train_loss: float
    stats: dict
    bytes: int
    skipped: bool


class OuterLoop:
    """Coordinator state: global parameters, outer optimizer, who is in sync."""

    def __init__(self, cfg: RunConfig, theta0: np.ndarray):
        self.cfg = cfg.resolved()
        self.theta = np.array(theta0, dtype=np.float64, copy=True)
        self.hyper = self.cfg.outer_hyper()
        self.state = init_outer_state(self.hyper, self.theta.size)
        self.out_of_sync: set[int] = set()
        self.prev_active: set[int] = set()
        self.broadcasts: dict[int, int] = {}
        self.gathers: dict[int, int] = {}
        self.bytes_per_worker: dict[int, int] = {}
        self.compute_steps = 0

    def plan(self, t: int) -> dict[int, np.ndarray | None]:
        """Parameters to send each active worker: the global vector, or None
        (keep your own) for workers whose last round was dropped."""
        active = range(self.cfg.k_at(t))
        sends = {}
        for wid in active:
            if wid in self.prev_active and wid in self.out_of_sync:
                sends[wid] = None
            else:
                sends[wid] = self.theta
        return sends

    def note_sent(self, wid: int, nbytes: int, full: bool) -> None:
        self.bytes_per_worker[wid] = self.bytes_per_worker.get(wid, 0) + nbytes
        if full:
            self.broadcasts[wid] = self.broadcasts.get(wid, 0) + 1

    def note_received(self, wid: int, nbytes: int) -> None:
        self.bytes_per_worker[wid] = self.bytes_per_worker.get(wid, 0) + nbytes
        self.gathers[wid] = self.gathers.get(wid, 0) + 1

    def rejoined(self, wid: int) -> None:
        """A reconnected worker restarts from the global parameters."""
        self.prev_active.discard(wid)
        self.out_of_sync.discard(wid)

    def complete(self, t: int, grads: dict[int, OuterGradient], losses: dict[int, float],
                 nbytes: int) -> RoundRecord:
        k_t = self.cfg.k_at(t)
        active = list(range(k_t))
        received = sorted(grads)
        dropped = [w for w in active if w not in grads]
        ordered = [grads[w] for w in received]
        delta = aggregate(ordered, self.cfg.data_regime)
        if delta is None:
            log.info("outer step %d: every outer gradient dropped, step skipped", t)
        else:
            self.theta, self.state = outer_step(self.state, self.theta, delta, self.hyper)
            if not all_finite(self.theta):
                raise FloatingPointError(f"non-finite parameters after outer step {t}")
        self.out_of_sync = set(dropped)
        self.prev_active = set(active)
        self.compute_steps += k_t * self.cfg.H
        stats = outer_grad_stats(ordered, delta)
        loss_vals = [losses[w] for w in sorted(losses)]
        train_loss = float(np.mean(loss_vals)) if loss_vals else math.nan
        return RoundRecord(t, k_t, received, dropped, train_loss, stats, nbytes, delta is None)


# ---------------------------------------------------------------------------
# worker side
# ---------------------------------------------------------------------------


class WorkerNode:
    """One replica: its shard, parameters and private inner-optimizer state."""

    def __init__(self, worker_id: int, cfg: RunConfig, train: Corpus, shard: Shard):
        self.cfg = cfg.resolved()
        self.worker_id = worker_id
        self.train = train
        self.shard = shard
        self.ctx = make_context(self.cfg)
        self.state: WorkerState | None = None
        self.last_round = 0

    def reset(self) -> None:
        self.state = None
        self.last_round = -1

    def run_round(self, t: int, params: np.ndarray | None) -> OuterGradient | None:
        """Train one phase; returns the outer gradient, or None if this round's
        upload is dropped."""
        fresh = self.state is None or self.last_round != t - 1
        if params is None:
            if fresh:
                raise RuntimeError(
                    f"worker {self.worker_id} told to keep its parameters at step {t} "
                    "but has none in sync")
            start = self.state.local_params
        else:
            start = params
        if fresh:
            self.state = new_worker(self.worker_id, self.shard, self.train, self.ctx, start)
        inner_phase(self.state, start, self.ctx.H, self.ctx, t)
        self.last_round = t
        g = compute_outer_gradient(self.state, t)
        if self.ctx.prune_frac > 0:
            g.delta = prune_outer_gradient(g.delta, self.ctx.prune_frac, self.ctx.model)
        if round_drop_mask(self.cfg, t)[self.worker_id]:
            return None
        return g


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    theta: np.ndarray
    records: list[dict]
    rounds: list[RoundRecord]
    summary: dict = field(default_factory=dict)


class Recorder:
    """Turns round results into metric rows and evaluates perplexity."""

    def __init__(self, cfg: RunConfig, val: Corpus, sink: MetricsLog | None = None):
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        self.eval_set = EvalSet.build(val, cfg.context_len, cfg.eval_batches, cfg.batch_size,
                                      streams.seed_for(cfg.seed, "eval"))
        self.sink = sink
        self.records: list[dict] = []

    def ppl(self, params) -> float:
        return evaluate_perplexity(params, self.mcfg, self.eval_set)

    def _emit(self, row: dict) -> None:
        self.records.append(row)
        if self.sink is not None:
            self.sink.write(row)

    def pretrain_row(self, step: int, params, loss: float) -> None:
        self._emit(dict(run_id=self.cfg.run_id, outer_step=0, inner_step=step, k_t=1,
                        val_ppl=self.ppl(params), train_loss=loss, mean_cos_sim=math.nan,
                        std_cos_sim=math.nan, mean_delta_norm=math.nan,
                        agg_delta_norm=math.nan, dropped_count=0, bytes_communicated=0))

    def round_row(self, rec: RoundRecord, theta) -> None:
        t = rec.outer_step
        last = t == self.cfg.T
        ppl = self.ppl(theta) if (last or t % self.cfg.eval_every == 0) else math.nan
        s = rec.stats
        self._emit(dict(run_id=self.cfg.run_id, outer_step=t,
                        inner_step=self.cfg.pretrain_steps + t * self.cfg.H, k_t=rec.k_t,
                        val_ppl=ppl, train_loss=rec.train_loss,
                        mean_cos_sim=s["mean_cos_sim"], std_cos_sim=s["std_cos_sim"],
                        mean_delta_norm=s["mean_delta_norm"],
                        agg_delta_norm=s["agg_delta_norm"],
                        dropped_count=len(rec.dropped), bytes_communicated=rec.bytes))


def run_pretrain_stage(prep: Prepared, recorder: Recorder) -> np.ndarray:
    cfg = prep.cfg
    every = cfg.pretrain_eval_every
    state = {"loss": math.nan}

    def on_step(step, loss, params):
        state["loss"] = loss
        if every and step % every == 0 and step != cfg.pretrain_steps:
            recorder.pretrain_row(step, params, loss)

    theta0 = pretrain(cfg, prep.train, on_step)
    recorder.pretrain_row(cfg.pretrain_steps, theta0, state["loss"])
    return theta0


def summarize(cfg: RunConfig, loop: OuterLoop, rounds: list[RoundRecord], records) -> dict:
    final = [r["val_ppl"] for r in records if r["outer_step"] == cfg.T]
    return dict(
        run_id=cfg.run_id,
        final_val_ppl=final[-1] if final else math.nan,
        outer_steps=cfg.T,
        inner_steps_per_round=cfg.H,
        sequential_inner_steps=cfg.pretrain_steps + cfg.total_inner_steps,
        compute_inner_steps=loop.compute_steps,
        gather_rounds=dict(sorted(loop.gathers.items())),
        broadcast_rounds=dict(sorted(loop.broadcasts.items())),
        bytes_per_worker=dict(sorted(loop.bytes_per_worker.items())),
        dropped_total=sum(len(r.dropped) for r in rounds),
        skipped_steps=[r.outer_step for r in rounds if r.skipped],
        per_step_baseline_rounds=cfg.total_inner_steps,
    )


def _through_wire(msg: Message) -> tuple[Message, int]:
    frame = encode_message(msg)
    return decode_message(frame), len(frame)


def run_diloco(cfg: RunConfig, corpus: Corpus, transport: str | None = None,
               sink: MetricsLog | None = None) -> RunResult:
    """Pretrain, then ``T`` outer steps. ``transport`` overrides ``cfg.transport``."""
    cfg = cfg.resolved()
    transport = transport or cfg.transport
    if transport == "tcp":
        from .transport import run_tcp_local
        return run_tcp_local(cfg, corpus, sink=sink)
    prep = prepare(cfg, corpus)
    recorder = Recorder(cfg, prep.val, sink)
    theta0 = run_pretrain_stage(prep, recorder)
    loop = OuterLoop(cfg, theta0)
    nodes: dict[int, WorkerNode] = {}
    rounds = []
    f32 = cfg.wire_f32
    for t in range(1, cfg.T + 1):
        sends = loop.plan(t)
        for wid in [w for w in nodes if w not in sends]:
            del nodes[wid]  # removed replicas are discarded with their state
        grads, losses, nbytes = {}, {}, 0
        for wid, params in sends.items():
            node = nodes.get(wid)
            if node is None:
                node = nodes[wid] = WorkerNode(wid, cfg, prep.train, prep.shards[wid])
            msg, n = _through_wire(Message.vector(MsgType.PARAMS, wid, t, params, f32))
            loop.note_sent(wid, n, params is not None)
            nbytes += n
            g = node.run_round(t, msg.values())
            if g is None:
                continue  # a dropped worker reports nothing, not even its loss
            losses[wid] = node.state.last_loss
            msg, n = _through_wire(Message.vector(MsgType.OUTER_GRAD, wid, t, g.delta, f32))
            loop.note_received(wid, n)
            nbytes += n
            grads[wid] = OuterGradient(wid, t, msg.values(), prep.shards[wid].num_tokens)
        rec = loop.complete(t, grads, losses, nbytes)
        rounds.append(rec)
        recorder.round_row(rec, loop.theta)
    return RunResult(loop.theta, recorder.records, rounds,
                     summarize(cfg, loop, rounds, recorder.records))
