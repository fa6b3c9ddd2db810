"""Numeric inner loops with a numba path and a pure-numpy fallback.

Set ``FAIRSOUND_DISABLE_NUMBA=1`` before import to force the numpy path.
Both paths return identical results; the benchmark script in
``benchmarks/`` times one against the other.
"""

import os

import numpy as np

_DISABLE = os.environ.get("FAIRSOUND_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLE:
        raise ImportError("numba disabled by FAIRSOUND_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _frame_starts(n, win, hop):
    if n <= win:
        return np.zeros(1, dtype=np.int64)
    count = -(-(n - win) // hop) + 1
    return np.arange(count, dtype=np.int64) * hop


def _frame_rms_np(x, win, hop):
    x = np.asarray(x, dtype=np.float64)
    starts = _frame_starts(x.shape[0], win, hop)
    csum = np.concatenate(([0.0], np.cumsum(x * x)))
    ends = np.minimum(starts + win, x.shape[0])
    energy = csum[ends] - csum[starts]
    # cumulative sums can go slightly negative on silent stretches
    return np.sqrt(np.maximum(energy, 0.0) / (ends - starts))


def _quantile_columns_np(a, q):
    a = np.sort(np.asarray(a, dtype=np.float64), axis=0)
    t = a.shape[0]
    pos = q * (t - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, t - 1)
    frac = pos - lo
    return a[lo] + (a[hi] - a[lo]) * frac


def _auc_np(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # average ranks over ties
    ranks = np.empty(s.shape[0], dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.shape[0]]))
    for b, e in zip(starts, ends):
        ranks[b:e] = 0.5 * (b + e - 1) + 1.0
    r = np.empty_like(ranks)
    r[order] = ranks
    n_pos = labels.sum()
    n_neg = labels.shape[0] - n_pos
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _roc_sweep_np(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.concatenate((np.flatnonzero(np.diff(s)), [s.shape[0] - 1]))
    return s[last], tps[last], fps[last]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _frame_rms_nb(x, win, hop):
        n = x.shape[0]
        if n <= win:
            count = 1
        else:
            count = (n - win + hop - 1) // hop + 1
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            s = i * hop
            e = min(s + win, n)
            acc = 0.0
            for j in range(s, e):
                acc += x[j] * x[j]
            out[i] = np.sqrt(acc / (e - s))
        return out

    @njit(cache=True)
    def _quantile_columns_nb(a, q):
        t, d = a.shape
        out = np.empty(d, dtype=np.float64)
        pos = q * (t - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, t - 1)
        frac = pos - lo
        at = np.ascontiguousarray(a.T)
        for j in range(d):
            # only two order statistics are needed, so select instead of sorting
            col = np.partition(at[j], lo)
            v_lo = col[lo]
            v_hi = v_lo
            if hi > lo:
                v_hi = col[hi]
                for i in range(hi + 1, t):
                    if col[i] < v_hi:
                        v_hi = col[i]
            out[j] = v_lo + (v_hi - v_lo) * frac
        return out

    @njit(cache=True)
    def _auc_nb(scores, labels):
        n = scores.shape[0]
        order = np.argsort(scores, kind="mergesort")
        n_pos = 0
        for i in range(n):
            if labels[i]:
                n_pos += 1
        n_neg = n - n_pos
        rank_sum = 0.0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            avg = 0.5 * (i + j) + 1.0
            for k in range(i, j + 1):
                if labels[order[k]]:
                    rank_sum += avg
            i = j + 1
        u = rank_sum - n_pos * (n_pos + 1) / 2.0
        return u / (n_pos * n_neg)

    @njit(cache=True)
    def _roc_sweep_nb(scores, labels):
        n = scores.shape[0]
        order = np.argsort(-scores, kind="mergesort")
        thr = np.empty(n, dtype=np.float64)
        tps = np.empty(n, dtype=np.int64)
        fps = np.empty(n, dtype=np.int64)
        tp = 0
        fp = 0
        m = 0
        for i in range(n):
            k = order[i]
            if labels[k]:
                tp += 1
            else:
                fp += 1
            if i == n - 1 or scores[order[i + 1]] != scores[k]:
                thr[m] = scores[k]
                tps[m] = tp
                fps[m] = fp
                m += 1
        return thr[:m], tps[:m], fps[:m]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def frame_rms(x, win, hop):
    """RMS over windows starting every ``hop`` samples; the last window may be short."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _frame_rms_nb(x, int(win), int(hop))
    return _frame_rms_np(x, int(win), int(hop))


def quantile_columns(a, q):
    """Per-column linear-interpolation quantile of a 2-D array (over axis 0)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if HAS_NUMBA:
        return _quantile_columns_nb(a, float(q))
    return _quantile_columns_np(a, float(q))


def mann_whitney_auc(scores, labels):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.bool_)
    if HAS_NUMBA:
        return float(_auc_nb(scores, labels))
    return float(_auc_np(scores, labels))


def roc_sweep(scores, labels):
    """Distinct thresholds (descending) with cumulative TP/FP counts at ``score >= thr``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.bool_)
    if HAS_NUMBA:
        return _roc_sweep_nb(scores, labels)
    return _roc_sweep_np(scores, labels)
