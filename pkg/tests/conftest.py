import numpy as np
import pytest

from dimmix.tensor import make_rng


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def write_fake_cifar10(root, records_per_file: int = 20, seed: int = 0) -> np.ndarray:
    """Write random CIFAR-10 binary batches under ``root``; returns the test batch bytes as [n, 3073]."""
    gen = np.random.default_rng(seed)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    last = None
    for name in names:
        rec = gen.integers(0, 256, (records_per_file, 3073), dtype=np.uint8)
        rec[:, 0] = gen.integers(0, 10, records_per_file)
        (root / name).write_bytes(rec.tobytes())
        last = rec
    return last


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
