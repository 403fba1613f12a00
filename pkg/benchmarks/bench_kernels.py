"""Time each hot kernel, and one full inner step, under both backends.

    python benchmarks/bench_kernels.py [--repeat 200]

Prints a table of median microseconds per call and the numba speedup.
"""

import argparse
import statistics
import time

import numpy as np

from diloco import kernels
from diloco.model import Batch, ModelConfig, init_params, loss_and_grad
from diloco.optimizers import AdamWState, InnerHyper, adamw_step


def _cases(rng):
    cfg = ModelConfig()
    n = cfg.num_params
    params = init_params(cfg, 0)
    grad = rng.standard_normal(n)
    m, v = np.zeros(n), np.zeros(n)
    logits = rng.standard_normal((32, 256))
    targets = rng.integers(0, 256, 32)
    table = np.zeros((256, 32))
    ids = rng.integers(0, 256, (32, cfg.context_len))
    rows = rng.standard_normal((32, cfg.context_len * 32))
    prune = rng.standard_normal((128, 512))
    batch = Batch(rng.integers(0, 256, (32, cfg.context_len)), rng.integers(0, 256, 32))
    state = AdamWState.zeros(n)
    hyper = InnerHyper()

    def step():
        _, g = loss_and_grad(params, cfg, batch)
        adamw_step(state, params, g, hyper, 1e-4)

    return {
        "adamw_update": lambda: kernels.adamw_update(params, grad, m, v, 1e-3, 0.9, 0.99,
                                                     1e-8, 0.1, 0.5, 0.5),
        "softmax_xent": lambda: kernels.softmax_xent(logits, targets),
        "row_nll": lambda: kernels.row_nll(logits, targets),
        "embed_scatter_add": lambda: kernels.embed_scatter_add(table, ids, rows),
        "prune_rows": lambda: kernels.prune_rows(prune.copy(), 256),
        "dot": lambda: kernels.dot(grad, grad),
        "inner_step": step,
    }


def _time(fn, repeat: int) -> float:
    fn()  # warm up (and compile)
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    results = {}
    prev = kernels.get_backend()
    try:
        for b in backends:
            kernels.set_backend(b)
            cases = _cases(np.random.default_rng(0))
            results[b] = {name: _time(fn, args.repeat) for name, fn in cases.items()}
    finally:
        kernels.set_backend(prev)
    names = list(results["numpy"])
    print(f"{'kernel':<20}" + "".join(f"{b + ' us':>14}" for b in backends) + f"{'speedup':>10}")
    for name in names:
        line = f"{name:<20}" + "".join(f"{results[b][name]:>14.1f}" for b in backends)
        if "numba" in results:
            line += f"{results['numpy'][name] / results['numba'][name]:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
