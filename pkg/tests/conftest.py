import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_mlp(layers, x):
    """Row-by-row reference MLP: relu on hidden layers, linear last layer.

    Returns (outputs, pre-activation signs of hidden layers).
    """
    outs, signs = [], []
    for row in np.asarray(x, dtype=np.float64):
        h = row
        row_signs = []
        for i, (w, b) in enumerate(layers):
            z = np.array([sum(float(w[r, c]) * h[c] for c in range(len(h))) + float(b[r])
                          for r in range(len(b))])
            if i < len(layers) - 1:
                row_signs.append(tuple(z > 0))
                h = np.maximum(z, 0.0)
            else:
                h = z
        outs.append(h)
        signs.append(tuple(row_signs))
    return np.array(outs), signs


def scalar_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def random_boxes(rng, n, size=100.0, min_wh=2.0, max_wh=40.0):
    xy = rng.uniform(0, size - max_wh, (n, 2))
    wh = rng.uniform(min_wh, max_wh, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cosine(a, b):
    a, b = [float(v) for v in a], [float(v) for v in b]
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


# acceptance criteria register here; the summary hook prints one line each
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
