"""Maximum-similarity injective assignment (Hungarian algorithm).

``hungarian_match`` pairs cluster centroids with interest vectors so that the
summed cosine over matched pairs is maximal.  When there are more centroids
than interests only ``K`` of them are matched, and vice versa; every solution
has exactly ``min(s, K)`` pairs.

Among equally good assignments the lexicographically smallest one wins, where
an assignment is read as the tuple of matched interest indices per centroid
and "unmatched" sorts after every interest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_TOL = 1e-12


@dataclass(frozen=True)
class MatchResult:
    assignment: dict      # centroid index -> interest index
    total: float

    @property
    def pairs(self) -> list:
        return sorted(self.assignment.items())

    def as_tuple(self, n_rows: int) -> tuple:
        return tuple(self.assignment.get(i) for i in range(n_rows))


def solve_min_cost(cost: np.ndarray):
    """Square minimum-cost assignment with dual potentials.

    Shortest-augmenting-path Kuhn-Munkres, O(n^3).  Returns ``(col_of_row, u,
    v)`` with reduced costs ``cost[i, j] - u[i] - v[j] >= 0`` and zero on
    matched pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)     # p[j]: row (1-based) holding column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _best_value(sim: np.ndarray, need: int) -> float:
    """Max total over injective matchings of exactly ``need`` pairs (-inf if impossible)."""
    s, K = sim.shape
    if need == 0:
        return 0.0
    if min(s, K) != need:
        return -np.inf
    n = max(s, K)
    cost = np.zeros((n, n))
    cost[:s, :K] = -sim
    cols, _, _ = solve_min_cost(cost)
    return float(sum(sim[i, cols[i]] for i in range(s) if cols[i] < K))


def max_similarity_assignment(sim: np.ndarray, tol: float = TIE_TOL) -> MatchResult:
    sim = np.asarray(sim, dtype=np.float64)
    s, K = sim.shape
    if s == 0 or K == 0:
        return MatchResult({}, 0.0)
    n = max(s, K)
    cost = np.zeros((n, n))
    cost[:s, :K] = -sim  # zero-cost dummies absorb the surplus side
    cols, u, v = solve_min_cost(cost)
    assignment = {i: int(cols[i]) for i in range(s) if cols[i] < K}
    if _unique_optimum(cost, cols, u, v, s, K, tol):
        return MatchResult(assignment, _total(sim, assignment))
    return _lexicographic(sim, tol)


def _unique_optimum(cost, cols, u, v, s, K, tol) -> bool:
    # optimal solutions are exactly the perfect matchings of the tight subgraph
    # of an optimal dual; no alternating cycle there means a unique optimum
    n = cost.shape[0]
    tight = (cost - u[:, None] - v[None, :]) <= tol
    row_of_col = np.empty(n, dtype=np.int64)
    row_of_col[cols] = np.arange(n)
    succ = [[int(row_of_col[j]) for j in np.flatnonzero(tight[i]) if j != cols[i]] for i in range(n)]
    if not _has_cycle(succ):
        return True
    # cycles may only permute padding; test each real pair by forbidding it
    best = -float(cost[np.arange(n), cols].sum())
    sim = -cost[:s, :K]
    for i in range(s):
        j = int(cols[i])
        if j >= K:
            continue
        alt = _best_value_forbidden(sim, i, j)
        if alt >= best - tol:
            return False
    return True


def _best_value_forbidden(sim, i, j) -> float:
    """Best total with pair (i, j) banned; the padding keeps min(s, K) real pairs."""
    s, K = sim.shape
    n = max(s, K)
    big = 4.0 * (np.abs(sim).max() + 1.0) * n
    cost = np.zeros((n, n))
    cost[:s, :K] = -sim
    cost[i, j] = big
    cols, _, _ = solve_min_cost(cost)
    if cols[i] == j:
        return -np.inf
    return float(sum(sim[r, cols[r]] for r in range(s) if cols[r] < K))


def _has_cycle(succ) -> bool:
    state = [0] * len(succ)   # 0 new, 1 on stack, 2 done
    for root in range(len(succ)):
        if state[root]:
            continue
        stack = [(root, iter(succ[root]))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                return True
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
    return False


def _lexicographic(sim: np.ndarray, tol: float) -> MatchResult:
    s, K = sim.shape
    need = min(s, K)
    best = _best_value(sim, need)
    rows_left = list(range(s))
    cols_left = list(range(K))
    assignment, acc = {}, 0.0
    for i in range(s):
        rows_left.remove(i)
        chosen = False
        for c in list(cols_left) + [None]:
            got = len(assignment) + (c is not None)
            rest_cols = [j for j in cols_left if j != c]
            sub = sim[np.ix_(rows_left, rest_cols)] if rows_left and rest_cols else np.zeros((len(rows_left), len(rest_cols)))
            val = acc + (sim[i, c] if c is not None else 0.0) + _best_value(sub, need - got)
            if val >= best - tol:
                if c is not None:
                    assignment[i] = c
                    acc += sim[i, c]
                    cols_left.remove(c)
                chosen = True
                break
        if not chosen:  # pragma: no cover - guarded by the optimum above
            raise RuntimeError("lexicographic refinement lost the optimum")
    return MatchResult(assignment, _total(sim, assignment))


def _total(sim, assignment) -> float:
    return float(sum(sim[i, j] for i, j in sorted(assignment.items())))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-30)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-30)
    return (a / na) @ (b / nb).T


def hungarian_match(centroids: np.ndarray, interests: np.ndarray) -> MatchResult:
    """Match centroids (s, d) to interests (K, d) maximising summed cosine."""
    centroids = np.atleast_2d(centroids)
    if centroids.shape[0] == 0:
        raise ValueError("hungarian_match needs at least one centroid")
    return max_similarity_assignment(cosine_matrix(centroids, interests))
