import numpy as np
import pytest

from smartnet.data import Dataset


def loop_conv2d(x, w, stride, padding):
    """Direct loop-nest cross-correlation used as a reference."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """Two well separated classes of 8x8 single-channel images."""
    r = np.random.default_rng(7)
    n = 64
    labels = np.arange(n) % 2
    images = r.uniform(0.0, 0.3, (n, 1, 8, 8))
    images[labels == 1, :, :4, :] += 0.6
    return Dataset(images.astype(np.float32), labels, num_classes=2)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line; returns the verdict so tests can assert on it."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
