"""Corpus ingestion, train/validation split, sharding and batch sampling."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .model import Batch

_DOC_SPLIT = re.compile(rb"\n(?:[ \t\r]*\n)+")


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    documents: list[bytes]

    def __post_init__(self):
        if any(len(d) == 0 for d in self.documents):
            raise CorpusError("documents must be non-empty")

    @property
    def total_tokens(self) -> int:
        return int(sum(len(d) for d in self.documents))

    def __len__(self) -> int:
        return len(self.documents)

    @cached_property
    def buffer(self) -> np.ndarray:
        """All documents back to back as one uint8 array."""
        return np.frombuffer(b"".join(self.documents), dtype=np.uint8)

    @cached_property
    def offsets(self) -> np.ndarray:
        lens = np.array([len(d) for d in self.documents], dtype=np.int64)
        return np.concatenate([[0], np.cumsum(lens)])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass(frozen=True)
class Shard:
    doc_indices: tuple[int, ...]
    num_tokens: int


def split_documents(raw: bytes) -> list[bytes]:
    """Documents are separated by one or more blank (whitespace-only) lines."""
    raw = raw.replace(b"\r\n", b"\n")
    docs = (d.strip(b"\r\n") for d in _DOC_SPLIT.split(raw))
    return [d for d in docs if d.strip()]


def load_corpus(path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file())
    else:
        files = [path]
    if not files:
        raise CorpusError(f"no files under {path}")
    docs: list[bytes] = []
    for f in files:
        try:
            docs.extend(split_documents(f.read_bytes()))
        except OSError as exc:
            raise CorpusError(f"cannot read {f}: {exc}") from exc
    if not docs:
        raise CorpusError(f"corpus at {path} is empty")
    return Corpus(docs)


def train_val_split(corpus: Corpus, val_frac: float = 0.1) -> tuple[Corpus, Corpus]:
    """Last ``val_frac`` of documents (by position) become the validation set."""
    if not 0 <= val_frac < 1:
        raise ValueError("val_frac must be in [0, 1)")
    n_val = int(round(len(corpus) * val_frac))
    if val_frac > 0:
        n_val = max(1, n_val)
    if n_val >= len(corpus):
        raise CorpusError("validation split leaves no training documents")
    cut = len(corpus) - n_val
    return Corpus(corpus.documents[:cut]), Corpus(corpus.documents[cut:])


def _make_shard(corpus: Corpus, idx) -> Shard:
    idx = tuple(sorted(int(i) for i in idx))
    lens = corpus.lengths
    return Shard(idx, int(sum(int(lens[i]) for i in idx)))


def _check_k(corpus: Corpus, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(corpus) < k:
        raise CorpusError(f"{len(corpus)} documents cannot fill {k} shards")


def shard_iid(corpus: Corpus, k: int, seed: int) -> list[Shard]:
    """Random permutation of documents dealt round-robin into ``k`` shards."""
    _check_k(corpus, k)
    perm = np.random.default_rng(seed).permutation(len(corpus))
    return [_make_shard(corpus, perm[j::k]) for j in range(k)]


def byte_histograms(corpus: Corpus) -> np.ndarray:
    """L2-normalised 256-bin byte histogram per document."""
    doc_ids = np.repeat(np.arange(len(corpus)), corpus.lengths)
    flat = doc_ids * 256 + corpus.buffer.astype(np.int64)
    hist = np.bincount(flat, minlength=len(corpus) * 256).reshape(len(corpus), 256)
    hist = hist.astype(np.float64)
    return hist / np.linalg.norm(hist, axis=1, keepdims=True)


def shard_noniid(corpus: Corpus, k: int, seed: int, iters: int = 50,
                 min_len: int = 1) -> list[Shard]:
    """One shard per k-means cluster of the documents' byte histograms.

    Only documents of at least ``min_len`` bytes are clustered, so every
    shard holds at least one of them; shorter documents join the shard with
    the nearest centroid.
    """
    _check_k(corpus, k)
    feats = byte_histograms(corpus)
    long_docs = np.nonzero(corpus.lengths >= min_len)[0]
    if len(long_docs) < k:
        raise CorpusError(f"only {len(long_docs)} documents of >= {min_len} bytes for {k} shards")
    fit = kmeans_fit(feats[long_docs], k, iters=iters, seed=seed)
    assign = np.argmin(_sq_dists(feats, fit.centroids), axis=1)
    assign[long_docs] = fit.assignments
    return [_make_shard(corpus, np.nonzero(assign == j)[0]) for j in range(k)]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    best = _sq_dists(x, x[chosen[-1]][None, :])[:, 0]
    for _ in range(1, k):
        total = best.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=best / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        best = np.minimum(best, _sq_dists(x, x[nxt][None, :])[:, 0])
    return x[chosen].copy()


def _repair_empty(x, assign, centroids, k):
    counts = np.bincount(assign, minlength=k)
    while (counts == 0).any():
        empty = int(np.argmin(counts))
        big = int(np.argmax(counts))
        members = np.nonzero(assign == big)[0]
        d = ((x[members] - centroids[big]) ** 2).sum(axis=1)
        far = members[int(np.argmax(d))]
        assign[far] = empty
        centroids[empty] = x[far]
        counts[big] -= 1
        counts[empty] += 1
    return assign


def _inertia(x, assign, centroids) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


def kmeans_fit(features, k: int, iters: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ seeding.

    Stops after ``iters`` rounds or when no assignment changes. Empty clusters
    take the point farthest from the centroid of the largest cluster.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least k={k} feature rows, got shape {x.shape}")
    if k < 1 or iters < 1:
        raise ValueError("k and iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = np.argmin(_sq_dists(x, centroids), axis=1)
    assign = _repair_empty(x, assign, centroids, k)
    result = KMeansResult(assign, centroids)
    for it in range(iters):
        for j in range(k):
            centroids[j] = x[assign == j].mean(axis=0)
        result.inertia.append(_inertia(x, assign, centroids))
        d = _sq_dists(x, centroids)
        new = np.argmin(d, axis=1)
        # keep the current label on exact distance ties so the loop terminates
        rows = np.arange(x.shape[0])
        new = np.where(d[rows, assign] <= d[rows, new], assign, new)
        new = _repair_empty(x, new, centroids, k)
        result.iterations = it + 1
        if np.array_equal(new, assign):
            break
        assign = new
    result.assignments = assign
    result.centroids = centroids
    return result


def kmeans(features, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    return kmeans_fit(features, k, iters=iters, seed=seed).assignments


class BatchSampler:
    """Uniform draws over every eligible (document, offset) position in a shard.

    A position is eligible when a full context of ``context_len`` bytes and
    its next byte fit inside one document, so picking a position uniformly is
    the same as picking a document weighted by its eligible positions and
    then an offset uniformly within it.
    """

    def __init__(self, corpus: Corpus, shard: Shard, context_len: int):
        self.context_len = context_len
        idx = np.asarray(shard.doc_indices, dtype=np.int64)
        lens = corpus.lengths[idx] if len(idx) else np.zeros(0, dtype=np.int64)
        counts = np.maximum(lens - context_len, 0)
        keep = counts > 0
        if not keep.any():
            raise CorpusError(f"shard has no document with >= {context_len + 1} tokens")
        self.doc_ids = idx[keep]
        self.starts = corpus.offsets[self.doc_ids]
        self.cum = np.cumsum(counts[keep])
        self.total = int(self.cum[-1])
        self.buffer = corpus.buffer
        self._window = np.arange(context_len)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        pos = rng.integers(0, self.total, size=batch_size)
        doc = np.searchsorted(self.cum, pos, side="right")
        before = np.where(doc > 0, self.cum[doc - 1], 0)
        begin = self.starts[doc] + (pos - before)
        contexts = self.buffer[begin[:, None] + self._window]
        targets = self.buffer[begin + self.context_len]
        return Batch(contexts, targets)


def sample_batch(corpus: Corpus, shard: Shard, batch_size: int, context_len: int,
                 rng: np.random.Generator) -> Batch:
    return BatchSampler(corpus, shard, context_len).sample(batch_size, rng)


def full_shard(corpus: Corpus) -> Shard:
    return _make_shard(corpus, range(len(corpus)))
