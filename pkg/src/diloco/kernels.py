"""Hot inner loops, each in two flavours: a numba ``@njit`` kernel and a
pure-numpy fallback.

The numba path is used when numba imports cleanly and ``DILOCO_DISABLE_NUMBA``
is unset (or ``0``). ``set_backend`` switches at runtime, which the tests and
``benchmarks/bench_kernels.py`` use to exercise both paths.

Both paths do the same float64 operations in the same order wherever the
result is elementwise, so they agree bit-for-bit there. Reductions (softmax
normaliser, dot) may differ in the last ulp between paths; each path on its
own is deterministic.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

_OFF = {"1", "true", "yes", "on"}


def _env_disabled() -> bool:
    return os.environ.get("DILOCO_DISABLE_NUMBA", "").strip().lower() in _OFF


_backend = "numba" if HAVE_NUMBA and not _env_disabled() else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _adamw_update_np(params, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    m[:] = beta1 * m + (1.0 - beta1) * grad
    v[:] = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / bc1
    vhat = v / bc2
    params[:] = params - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * params)


def _softmax_xent_np(logits, targets):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1)
    rows = np.arange(n)
    nll = np.log(s) - z[rows, targets]
    dlogits = ez / s[:, None]
    dlogits[rows, targets] -= 1.0
    dlogits /= n
    return nll.sum() / n, dlogits


def _row_nll_np(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(logits.shape[0]), targets]


def _embed_scatter_add_np(grad_table, ids, grad_rows):
    # np.add.at applies updates in index order, like the loop kernel
    np.add.at(grad_table, ids.ravel(), grad_rows.reshape(-1, grad_table.shape[1]))


def _prune_rows_np(rows, keep_zero):
    """Sign election then magnitude cut, one group per row, in place."""
    if rows.size == 0:
        return
    pos = np.where(rows > 0, rows, 0.0).sum(axis=1)
    neg = np.where(rows < 0, -rows, 0.0).sum(axis=1)
    keep_positive = pos >= neg
    minority = np.where(keep_positive[:, None], rows < 0, rows > 0)
    rows[minority] = 0.0
    zeros = (rows == 0.0).sum(axis=1)
    short = keep_zero - zeros
    for r in np.nonzero(short > 0)[0]:
        row = rows[r]
        alive = np.nonzero(row)[0]
        order = np.argsort(np.abs(row[alive]), kind="mergesort")
        row[alive[order[: short[r]]]] = 0.0


def _dot_np(x, y):
    return float(np.dot(x, y))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _adamw_update_nb(params, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
        c1 = 1.0 - beta1
        c2 = 1.0 - beta2
        for i in range(params.shape[0]):
            g = grad[i]
            mi = beta1 * m[i] + c1 * g
            vi = beta2 * v[i] + c2 * g * g
            m[i] = mi
            v[i] = vi
            p = params[i]
            params[i] = p - lr * ((mi / bc1) / (np.sqrt(vi / bc2) + eps) + weight_decay * p)

    @numba.njit(cache=True)
    def _softmax_xent_nb(logits, targets):
        n, vocab = logits.shape
        dlogits = np.empty_like(logits)
        total = 0.0
        for r in range(n):
            mx = logits[r, 0]
            for j in range(1, vocab):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            s = 0.0
            for j in range(vocab):
                e = np.exp(logits[r, j] - mx)
                dlogits[r, j] = e
                s += e
            t = targets[r]
            total += np.log(s) - (logits[r, t] - mx)
            for j in range(vocab):
                p = dlogits[r, j] / s
                if j == t:
                    p -= 1.0
                dlogits[r, j] = p / n
        return total / n, dlogits

    @numba.njit(cache=True)
    def _row_nll_nb(logits, targets):
        n, vocab = logits.shape
        out = np.empty(n)
        for r in range(n):
            mx = logits[r, 0]
            for j in range(1, vocab):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            s = 0.0
            for j in range(vocab):
                s += np.exp(logits[r, j] - mx)
            out[r] = np.log(s) - (logits[r, targets[r]] - mx)
        return out

    @numba.njit(cache=True)
    def _embed_scatter_add_nb(grad_table, ids, grad_rows):
        b, c = ids.shape
        d = grad_table.shape[1]
        for i in range(b):
            for j in range(c):
                t = ids[i, j]
                for e in range(d):
                    grad_table[t, e] += grad_rows[i, j * d + e]

    @numba.njit(cache=True)
    def _prune_rows_nb(rows, keep_zero):
        n, width = rows.shape
        for r in range(n):
            pos = 0.0
            neg = 0.0
            for j in range(width):
                x = rows[r, j]
                if x > 0:
                    pos += x
                elif x < 0:
                    neg -= x
            keep_positive = pos >= neg
            zeros = 0
            for j in range(width):
                x = rows[r, j]
                if (keep_positive and x < 0) or (not keep_positive and x > 0):
                    rows[r, j] = 0.0
                if rows[r, j] == 0.0:
                    zeros += 1
            short = keep_zero - zeros
            if short <= 0:
                continue
            alive = np.empty(width - zeros, dtype=np.int64)
            mags = np.empty(width - zeros)
            a = 0
            for j in range(width):
                if rows[r, j] != 0.0:
                    alive[a] = j
                    mags[a] = abs(rows[r, j])
                    a += 1
            order = np.argsort(mags, kind="mergesort")
            for q in range(short):
                rows[r, alive[order[q]]] = 0.0

    @numba.njit(cache=True)
    def _dot_nb(x, y):
        s = 0.0
        for i in range(x.shape[0]):
            s += x[i] * y[i]
        return s


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def adamw_update(params, grad, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2) -> None:
    """In-place AdamW update of ``params``, ``m`` and ``v``.

    ``bc1``/``bc2`` are the bias-correction denominators ``1 - beta**step``.
    """
    fn = _adamw_update_nb if _backend == "numba" else _adamw_update_np
    fn(params, grad, m, v, float(lr), float(beta1), float(beta2), float(eps),
       float(weight_decay), float(bc1), float(bc2))


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if _backend == "numba":
        loss, d = _softmax_xent_nb(np.ascontiguousarray(logits), targets)
        return float(loss), d
    loss, d = _softmax_xent_np(logits, targets)
    return float(loss), d


def row_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if _backend == "numba":
        return _row_nll_nb(np.ascontiguousarray(logits), targets)
    return _row_nll_np(logits, targets)


def embed_scatter_add(grad_table: np.ndarray, ids: np.ndarray, grad_rows: np.ndarray) -> None:
    """``grad_table[ids[i, j]] += grad_rows[i, j*D:(j+1)*D]`` for every (i, j)."""
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    grad_rows = np.ascontiguousarray(grad_rows)
    if _backend == "numba":
        _embed_scatter_add_nb(grad_table, ids, grad_rows)
    else:
        _embed_scatter_add_np(grad_table, ids, grad_rows)


def prune_rows(rows: np.ndarray, keep_zero: int) -> None:
    """Prune every row of a C-contiguous 2-D array in place (see compression)."""
    if _backend == "numba":
        _prune_rows_nb(rows, int(keep_zero))
    else:
        _prune_rows_np(rows, int(keep_zero))


def dot(x: np.ndarray, y: np.ndarray) -> float:
    if _backend == "numba":
        return float(_dot_nb(x, y))
    return _dot_np(x, y)
