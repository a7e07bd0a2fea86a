import numpy as np
import pytest

# name -> (passed, detail) for every acceptance criterion that ran
ACCEPTANCE_RESULTS = {}


def disc(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def disc_mask(size=32, r=8, id=1):
    c = (size - 1) / 2.0
    return disc(size, size, c, c, r).astype(np.uint32) * id


def random_blob(rng, max_h=15, max_w=15):
    """Random 4-connected blob grown from one pixel inside a max_h x max_w box."""
    h, w = int(rng.integers(1, max_h + 1)), int(rng.integers(1, max_w + 1))
    m = np.zeros((h, w), dtype=bool)
    y, x = int(rng.integers(h)), int(rng.integers(w))
    m[y, x] = True
    for _ in range(int(rng.integers(0, h * w))):
        ys, xs = np.nonzero(m)
        j = int(rng.integers(ys.size))
        dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][int(rng.integers(4))]
        ny, nx = ys[j] + dy, xs[j] + dx
        if 0 <= ny < h and 0 <= nx < w:
            m[ny, nx] = True
    return m


def random_mask(rng, h, w, n_max):
    """Mask of up to n_max random axis-aligned rectangles and discs (later ones on top)."""
    m = np.zeros((h, w), dtype=np.uint32)
    for i in range(1, int(rng.integers(0, n_max + 1)) + 1):
        if rng.random() < 0.5:
            r0, c0 = int(rng.integers(h)), int(rng.integers(w))
            m[r0 : r0 + int(rng.integers(1, h // 2 + 2)), c0 : c0 + int(rng.integers(1, w // 2 + 2))] = i
        else:
            m[disc(h, w, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(1, max(h, w) / 3))] = i
    return m


def record(name, passed, detail=""):
    ACCEPTANCE_RESULTS[name] = (bool(passed), detail)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
