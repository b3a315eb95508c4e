"""Hungarian algorithm (shortest augmenting paths with dual potentials), O(N^3)."""
from __future__ import annotations

import numpy as np


def hungarian_assign(cost) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``mapping`` with row ``i`` assigned to column ``mapping[i]``.
    Each of the N row insertions grows an alternating tree over at most N
    columns, and every growth step is an O(N) vector update.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost must be a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # column 0 is a virtual root; rows and columns are 1-based below
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cols = np.flatnonzero(free)
            reduced = C[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols[better]] = reduced[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            tree = np.flatnonzero(used)
            u[owner[tree]] += delta
            v[tree] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    mapping = np.empty(n, dtype=np.int64)
    mapping[owner[1:] - 1] = np.arange(n)
    return mapping


def assignment_cost(cost, mapping) -> float:
    C = np.asarray(cost, dtype=np.float64)
    return float(C[np.arange(len(mapping)), mapping].sum())
