"""Both kernel backends against each other and against plain oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairsound import _kernels as K

from oracles import auc_pairs, quantile_sorted

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba unavailable or disabled")

small_floats = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 6)), elements=small_floats),
       st.floats(0.0, 1.0))
def test_quantile_columns_numpy(a, q):
    expected = [quantile_sorted(a[:, j], q) for j in range(a.shape[1])]
    np.testing.assert_allclose(K._quantile_columns_np(a, q), expected, rtol=0, atol=1e-9)


@needs_numba
@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 6)), elements=small_floats),
       st.floats(0.0, 1.0))
def test_quantile_columns_backends_agree(a, q):
    np.testing.assert_array_equal(K._quantile_columns_nb(a, q), K._quantile_columns_np(a, q))


scores_labels = st.integers(2, 60).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0])),
        arrays(np.bool_, n),
    )
).filter(lambda sl: 0 < sl[1].sum() < sl[1].size)


@settings(max_examples=80, deadline=None)
@given(scores_labels)
def test_auc_backends(sl):
    s, y = sl
    ref = auc_pairs(s, y)
    assert abs(K._auc_np(s, y) - ref) < 1e-12
    if K.HAS_NUMBA:
        assert abs(K._auc_nb(s, y) - ref) < 1e-12


@settings(max_examples=80, deadline=None)
@given(scores_labels)
def test_roc_sweep(sl):
    s, y = sl
    thr, tps, fps = K._roc_sweep_np(s, y)
    assert np.all(np.diff(thr) < 0)
    for t, tp, fp in zip(thr, tps, fps):
        assert tp == np.sum((s >= t) & y)
        assert fp == np.sum((s >= t) & ~y)
    if K.HAS_NUMBA:
        for a, b in zip((thr, tps, fps), K._roc_sweep_nb(s, y)):
            np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 3000), elements=st.floats(-1, 1, width=64)),
       st.sampled_from([(256, 64), (2048, 512), (100, 100), (7, 3)]))
def test_frame_rms(x, wh):
    win, hop = wh
    out = K._frame_rms_np(x, win, hop)
    n = x.shape[0]
    starts = [0] if n <= win else list(range(0, n - win + hop, hop))
    assert out.shape[0] == len(starts)
    ref = [np.sqrt(np.mean(x[s : s + win] ** 2)) for s in starts]
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-12)
    assert starts[-1] + win >= n
    if K.HAS_NUMBA:
        np.testing.assert_allclose(K._frame_rms_nb(x, win, hop), out, rtol=1e-9, atol=1e-12)


def test_env_flag_selects_numpy(monkeypatch):
    import subprocess
    import sys

    code = "from fairsound import _kernels as K; print(K.HAS_NUMBA)"
    env = {**__import__("os").environ, "FAIRSOUND_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
