from pathlib import Path

import numpy as np
import pytest

from diloco import kernels
from diloco.data import Corpus

ROOT = Path(__file__).resolve().parents[1]
CORPUS_PATH = ROOT / "data" / "shakespeare.txt"


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    if request.param == "numba" and not kernels.HAVE_NUMBA:
        pytest.skip("numba not importable")
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def synthetic_corpus(n_docs=24, seed=0, min_len=40, max_len=200) -> Corpus:
    """Documents from a few distinct byte alphabets, so clustering has structure."""
    rng = np.random.default_rng(seed)
    alphabets = [b"abcdefgh ", b"0123456789", b"XYZ.,;!? ", b"mnopqrstu"]
    docs = []
    for i in range(n_docs):
        alpha = np.frombuffer(alphabets[i % len(alphabets)], dtype=np.uint8)
        n = int(rng.integers(min_len, max_len))
        docs.append(bytes(rng.choice(alpha, n)))
    return Corpus(docs)


@pytest.fixture
def small_corpus():
    return synthetic_corpus()


@pytest.fixture(scope="session")
def shakespeare():
    from diloco import load_corpus
    return load_corpus(CORPUS_PATH)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for report in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        for key, value in getattr(report, "user_properties", []):
            if key == "acceptance":
                lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
