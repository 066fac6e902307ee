import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oasis.metrics import (SequenceResult, boundary_f, evaluate_sequence, fps_benchmark, jaccard,
                           summarize, tolerance_radius)
from oasis.types import IdMask, InvalidInputError
from oracles import boundary_f_bruteforce, jaccard_bruteforce


def _square(size, y, x, side, h=None):
    m = np.zeros((size, size), int)
    m[y:y + (h or side), x:x + side] = 1
    return m


def test_jaccard_examples():
    a = _square(32, 4, 4, 10)
    assert jaccard(a, a, 1) == 100
    assert jaccard(a, _square(32, 20, 20, 10), 1) == 0
    b = _square(32, 4, 9, 10)  # overlap is a 10x5 strip
    assert abs(jaccard(a, b, 1) - 100 * 50 / 150) < 1e-9
    z = np.zeros((8, 8), int)
    assert jaccard(z, z, 1) == 100 and jaccard(a, np.zeros_like(a), 1) == 0


def test_boundary_examples():
    a = _square(100, 30, 30, 40)
    assert tolerance_radius(a.shape) == 2
    assert boundary_f(a, a, 1) == 100
    assert boundary_f(a, np.roll(a, 1, axis=1), 1) == 100
    shifted = np.roll(a, 5, axis=1)
    f = boundary_f(a, shifted, 1)
    assert f < 100
    assert abs(f - boundary_f_bruteforce(a == 1, shifted == 1, 2)) < 1e-6
    far = _square(100, 80, 80, 10)
    assert boundary_f(_square(100, 2, 2, 10), far, 1) == 0


def test_metrics_match_bruteforce(rng):
    for _ in range(15):
        p = (rng.random((32, 32)) < rng.uniform(0.1, 0.9)).astype(int)
        g = (rng.random((32, 32)) < rng.uniform(0.1, 0.9)).astype(int)
        assert abs(jaccard(p, g, 1) - jaccard_bruteforce(p, g)) < 1e-6
        r = tolerance_radius((32, 32))
        assert abs(boundary_f(p, g, 1) - boundary_f_bruteforce(p == 1, g == 1, r)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6), st.integers(0, 6))
def test_symmetric_and_translation_invariant(seed, dy, dx):
    r = np.random.default_rng(seed)
    p = np.zeros((40, 40), int)
    g = np.zeros((40, 40), int)
    p[8:26, 8:26] = r.random((18, 18)) < 0.7
    g[8:26, 8:26] = r.random((18, 18)) < 0.7
    assert jaccard(p, g, 1) == jaccard(g, p, 1)
    assert abs(boundary_f(p, g, 1) - boundary_f(g, p, 1)) < 1e-9
    sh = lambda m: np.roll(np.roll(m, dy, 0), dx, 1)
    assert abs(jaccard(sh(p), sh(g), 1) - jaccard(p, g, 1)) < 1e-9
    assert abs(boundary_f(sh(p), sh(g), 1) - boundary_f(p, g, 1)) < 1e-9


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        jaccard(np.zeros((4, 4)), np.zeros((4, 5)), 1)


def test_sequence_perfect():
    gts = [IdMask(_square(32, 4 + t, 4, 10) * 2) for t in range(5)]
    r = evaluate_sequence(gts, gts)
    assert r.JF == 100 and r.frames_evaluated == 3


def test_sequence_arithmetic_mean():
    r = SequenceResult([100.0], [80.0], 90.0, 3)
    assert r.J == 100 and r.F == 80
    with pytest.raises(InvalidInputError):
        SequenceResult([100.0], [80.0], 91.0, 3)


def test_sequence_multi_object_hand_computed():
    # frame 1: obj1 exact; obj2 overlap 50/150. frame 2: obj1 half, obj2 exact.
    g1 = np.zeros((64, 64), int)
    g1[0:10, 0:10] = 1
    g1[30:40, 30:40] = 2
    p1 = g1.copy()
    p1[p1 == 2] = 0
    p1[30:40, 35:45] = 2
    g2 = g1.copy()
    p2 = g1.copy()
    p2[0:10, 5:10] = 0
    gts = [g1, g1, g2, g2]
    preds = [g1, p1, p2, g2]
    r = evaluate_sequence(preds, gts)
    j1 = (100 + 50) / 2
    j2 = (100 * 50 / 150 + 100) / 2
    np.testing.assert_allclose(r.per_object_J, [j1, j2], atol=1e-6)
    f1 = (100 + boundary_f(p2, g2, 1)) / 2
    f2 = (boundary_f(p1, g1, 2) + 100) / 2
    np.testing.assert_allclose(r.per_object_F, [f1, f2], atol=1e-6)
    assert abs(r.JF - ((j1 + j2) / 2 + (f1 + f2) / 2) / 2) < 1e-6


def test_skip_flag():
    g = [_square(32, 4, 4, 10)] * 4
    p = [np.zeros((32, 32), int)] + g[1:3] + [np.zeros((32, 32), int)]
    assert evaluate_sequence(p, g).JF == 100
    assert evaluate_sequence(p, g, skip_first_last=False).JF == 50


def test_summarize():
    a = SequenceResult([100.0], [80.0], 90.0, 3)
    b = SequenceResult([60.0], [40.0], 50.0, 3)
    s = summarize({"a": a, "b": b})
    assert s == {"JF": 70.0, "J": 80.0, "F": 60.0, "G": 70.0}
    s = summarize({"a": a, "b": b}, {"a": "seen", "b": "unseen"})
    assert s["J_s"] == 100 and s["F_u"] == 40 and s["G"] == 70.0


class _Sleeper:
    def step(self, frame):
        time.sleep(0.02)


def test_fps_sleep_model():
    rep = fps_benchmark(_Sleeper(), list(range(30)), 5, 25)
    assert abs(rep.fps - 50) <= 2.5
    assert "machine" in rep.hardware


def test_fps_stable():
    a = fps_benchmark(_Sleeper(), list(range(20)), 2, 15).fps
    b = fps_benchmark(_Sleeper(), list(range(20)), 2, 15).fps
    assert abs(a - b) / max(a, b) < 0.15


def test_fps_errors():
    with pytest.raises(InvalidInputError):
        fps_benchmark(_Sleeper(), [0, 1], 0, 0)
    with pytest.raises(InvalidInputError):
        fps_benchmark(_Sleeper(), [0, 1], 1, 5)
