"""Both kernel backends must agree; the fallback must match plain loops."""
import importlib
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfiad import _fallback, kernels

try:
    _compiled = importlib.import_module("rfiad._kernels")
except ImportError:  # extension not built in this environment
    _compiled = None

needs_ext = pytest.mark.skipif(_compiled is None, reason="compiled extension not built")
seeds = st.integers(0, 2**20)


def loop_kcenter(points, history, k):
    n = len(points)

    def d2(a, b):
        return sum((x - y) ** 2 for x, y in zip(a, b))

    if len(history):
        mind = [min(d2(p, h) for h in history) for p in points]
    else:
        c = [sum(col) / n for col in zip(*points)]
        mind = [d2(p, c) for p in points]
    picks, taken = [], set()
    for step in range(k):
        best = max((i for i in range(n) if i not in taken), key=lambda i: (mind[i], -i))
        picks.append(best)
        taken.add(best)
        dist = [d2(p, points[best]) for p in points]
        mind = dist if (step == 0 and not len(history)) else [min(a, b) for a, b in zip(mind, dist)]
    return picks


@given(seeds, st.integers(1, 15), st.integers(0, 4))
def test_fallback_matches_loops(seed, n_sel, n_hist):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(15, 3))
    hist = rng.normal(size=(n_hist, 3))
    picks, _ = _fallback.kcenter_greedy(pts, hist, n_sel)
    assert picks.tolist() == loop_kcenter(pts.tolist(), hist.tolist(), n_sel)


@needs_ext
@given(seeds, st.integers(1, 40), st.integers(0, 5), st.integers(1, 8))
def test_backends_agree_on_kcenter(seed, n_sel, n_hist, d):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, d))
    hist = rng.normal(size=(n_hist, d))
    pa, ca = _fallback.kcenter_greedy(pts, hist, n_sel)
    pb, cb = _compiled.kcenter_greedy(pts, hist, n_sel)
    assert pa.tolist() == pb.tolist()
    np.testing.assert_allclose(ca, cb, rtol=1e-12, atol=1e-12)


@needs_ext
@given(seeds, st.integers(1, 20), st.integers(1, 30))
def test_backends_agree_on_max_cosine(seed, nq, nb):
    rng = np.random.default_rng(seed)
    q, b = rng.normal(size=(nq, 6)), rng.normal(size=(nb, 6))
    va, ia = _fallback.max_cosine(q, b)
    vb, ib = _compiled.max_cosine(q, b)
    np.testing.assert_allclose(va, vb, rtol=0, atol=1e-12)
    assert ia.tolist() == ib.tolist()


@needs_ext
def test_compiled_max_cosine_large_query_opposite_bank():
    # a long query pointing away from the only bank row must still report its cosine
    q = np.array([[-30.0, 0.0, 1.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    best, arg = _compiled.max_cosine(q, b)
    assert best[0] == pytest.approx(-30.0 / np.sqrt(901.0), abs=1e-15) and arg[0] == 0


def test_max_cosine_matches_loops():
    rng = np.random.default_rng(0)
    q, b = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    best, arg = kernels.max_cosine(q, b)
    for i, row in enumerate(q):
        cos = [row @ r / np.linalg.norm(row) / np.linalg.norm(r) for r in b]
        assert best[i] == pytest.approx(max(cos), abs=1e-14)
        assert arg[i] == int(np.argmax(cos))


def test_wrapper_validation():
    with pytest.raises(ValueError):
        kernels.max_cosine(np.ones((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        kernels.max_cosine(np.zeros((1, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        kernels.kcenter_greedy(np.ones((2, 3)), None, 3)
    with pytest.raises(ValueError):
        kernels.kcenter_greedy(np.ones((2, 3)), np.ones((1, 2)), 1)


def test_large_lookups_use_blas_fallback(monkeypatch):
    calls = []
    real = _fallback.max_cosine
    monkeypatch.setattr(_fallback, "max_cosine", lambda q, b: calls.append(q.shape) or real(q, b))
    rng = np.random.default_rng(1)
    kernels.max_cosine(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)))
    small_calls = len(calls)
    kernels.max_cosine(rng.normal(size=(64, 64)), rng.normal(size=(64, 64)))
    assert len(calls) == small_calls + 1
    if kernels.BACKEND == "cython":
        assert small_calls == 0


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")
    forced = os.environ.get("RFIAD_PURE_PYTHON", "") in ("1", "true", "yes")
    assert kernels.BACKEND == ("cython" if _compiled is not None and not forced else "python")


def test_pure_python_switch(monkeypatch):
    monkeypatch.setenv("RFIAD_PURE_PYTHON", "1")
    reloaded = importlib.reload(kernels)
    try:
        assert reloaded.BACKEND == "python"
    finally:
        monkeypatch.delenv("RFIAD_PURE_PYTHON")
        importlib.reload(kernels)
