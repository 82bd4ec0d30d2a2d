"""Independent oracles shared by the test modules.

These deliberately avoid the library's code paths: loops instead of
reshapes, bounds checks instead of padded arrays.
"""
import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unfold_loops(w):
    f1, f2, i, o = w.shape
    m = np.empty((f1 * i, f2 * o), dtype=w.dtype)
    for a in range(f1):
        for b in range(f2):
            for c in range(i):
                for d in range(o):
                    m[a * i + c, b * o + d] = w[a, b, c, d]
    return m


def conv_loops(x, w, sh, sw):
    """Quadruple-loop SAME correlation; out-of-range taps contribute zero."""
    h, wd, _ = x.shape
    f1, f2, ci, co = w.shape
    ho, wo = math.ceil(h / sh), math.ceil(wd / sw)
    top = max((ho - 1) * sh + f1 - h, 0) // 2
    left = max((wo - 1) * sw + f2 - wd, 0) // 2
    y = np.zeros((ho, wo, co))
    for r in range(ho):
        for c in range(wo):
            for a in range(f1):
                xr = r * sh + a - top
                if not 0 <= xr < h:
                    continue
                for b in range(f2):
                    xc = c * sw + b - left
                    if not 0 <= xc < wd:
                        continue
                    y[r, c, :] += x[xr, xc, :].astype(np.float64) @ w[a, b].astype(np.float64)
    return y


def spectrum_matrix(rng, m, n, singulars):
    """Matrix with the prescribed singular values (random orthonormal bases)."""
    k = len(singulars)
    q1, _ = np.linalg.qr(rng.standard_normal((m, k)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return (q1 * np.asarray(singulars, dtype=float)) @ q2.T


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
