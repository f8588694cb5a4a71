"""Shared test vectors and small builders."""

import math

import numpy as np

from sbgnn.dataset import Graph

TASKS = ["Emotion", "Gambling", "Motor", "Language", "Relational", "Social", "WorkingMemory"]
E, G, M, L, R, S, WM = range(7)

# Cells with stated counts in the reference seven-task results.
REFERENCE_NAMED_CELLS = {
    (E, G): 4,
    (G, E): 3,
    (M, S): 4,
    (R, WM): 4,
    (R, M): 2,
    (L, M): 3,
    (WM, R): 3,
    (S, S): 209,
}
REFERENCE_TOTAL = 1489
REFERENCE_CORRECT = 1444


def reference_confusion() -> np.ndarray:
    """A 7-class matrix consistent with every stated reference count.

    Only the named cells, the Social row and the 1444/1489 totals are
    given. The other diagonals and the 22 unnamed errors are filled in
    near-balanced; any fill with the same totals gives the same accuracy.
    """
    m = np.zeros((7, 7), dtype=np.int64)
    for (i, j), v in REFERENCE_NAMED_CELLS.items():
        m[i, j] = v
    for k, v in zip((E, G, M, L, R, WM), (206, 205, 207, 206, 205, 206)):
        m[k, k] = v
    unnamed = {
        (E, R): 1, (E, WM): 1,
        (G, L): 2, (G, R): 1, (G, WM): 1,
        (M, L): 2, (M, R): 1,
        (L, E): 1, (L, R): 2, (L, WM): 1,
        (R, L): 2, (R, G): 1,
        (WM, L): 2, (WM, M): 2, (WM, G): 2,
    }
    for (i, j), v in unnamed.items():
        assert m[i, j] == 0
        m[i, j] = v
    return m


def random_graph(rng, n, density=0.6, f=None, label=0, low=0.1):
    w = rng.uniform(low, 1.0, (n, n)) * (rng.random((n, n)) < density)
    adj = np.triu(w, 1)
    adj = adj + adj.T
    x = rng.standard_normal((n, f if f is not None else n))
    return Graph(adj, x, label=label)


def permute_graph(g: Graph, perm) -> Graph:
    perm = np.asarray(perm)
    return Graph(g.adjacency[np.ix_(perm, perm)], g.features[perm], label=g.label)


def _t_density(x, df):
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def _adaptive_simpson(f, a, b, tol):
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6 * (fa + 4 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth > 50 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return rec(a, m, fa, flm, fm, left, tol / 2, depth + 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth + 1)

    fa, fb, fm = f(a), f(b), f((a + b) / 2)
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 0)


def numeric_t_cdf(t, df):
    return 0.5 + _adaptive_simpson(lambda x: _t_density(x, df), 0.0, t, 1e-10)
