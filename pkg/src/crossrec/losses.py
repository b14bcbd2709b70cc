"""Contrastive objectives: next-item NCE and the matched window loss.

Both use the same per-pair form

    L(anchor, pos) = -log e^{tau <anchor, pos>} / (e^{tau <anchor, pos>} + sum_j e^{tau <anchor, neg_j>})

with ``tau`` a learnable multiplicative scale on cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .assign import MatchResult, hungarian_match
from .cluster import Clustering, cluster_targets

TAU_MIN, TAU_MAX = 1.0, 100.0


@dataclass(frozen=True)
class NegativePool:
    rows: np.ndarray   # catalog row indices
    ids: tuple = ()

    def __len__(self):
        return len(self.rows)


def sample_negatives(catalog_size: int, m: int, exclude, rng, ids=None) -> NegativePool:
    """Uniform sample of ``m`` distinct catalog rows outside ``exclude``.

    A uniformly permuted prefix of length ``m + |exclude|`` always holds at
    least ``m`` admissible rows, and their relative order is uniform.
    """
    exclude = set(int(e) for e in exclude)
    exclude = {e for e in exclude if 0 <= e < catalog_size}
    if m < 0 or catalog_size - len(exclude) < m:
        raise ValueError(f"cannot draw {m} negatives from {catalog_size - len(exclude)} admissible items")
    if m == 0:
        return NegativePool(np.zeros(0, dtype=np.int64), ())
    draw = rng.choice(catalog_size, m + len(exclude), replace=False)
    rows = np.array([r for r in draw if int(r) not in exclude][:m], dtype=np.int64)
    return NegativePool(rows, tuple(ids[r] for r in rows) if ids is not None else ())


def _as(x, grad):
    return nx.Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


def nce_loss(u, v_pos, negs, tau, with_grad: bool = True):
    """Single-pair NCE; returns ``(loss, grads)`` with grads for u, v_pos, negs, tau."""
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, np.shape(u)[-1])
    a, p, n, t = (_as(np.atleast_2d(u), with_grad), _as(np.atleast_2d(v_pos), with_grad),
                  _as(negs, with_grad), _as(tau, with_grad))
    loss = nx.sum_all(nx.info_nce(a, p, n, t))
    if not with_grad:
        return float(loss.data), None
    loss.backward()
    grads = {"u": a.grad[0], "v_pos": p.grad[0], "negs": n.grad, "tau": float(t.grad)}
    return float(loss.data), grads


@dataclass(frozen=True)
class WindowPlan:
    """Which interest each target in the window is trained against."""

    clustering: Clustering
    match: MatchResult
    interest_of_target: np.ndarray   # (w,) interest index, -1 when unmatched

    @property
    def matched_targets(self) -> np.ndarray:
        return np.flatnonzero(self.interest_of_target >= 0)


def plan_window(interests: np.ndarray, targets: np.ndarray, s: int, rng) -> WindowPlan:
    """Cluster the window targets and match non-empty centroids to interests."""
    cl = cluster_targets(targets, s, rng)
    live = cl.nonempty
    match = hungarian_match(cl.centroids[live], interests)
    cluster_to_interest = np.full(s, -1, dtype=np.int64)
    for ci, j in match.assignment.items():
        cluster_to_interest[live[ci]] = j
    return WindowPlan(cl, match, cluster_to_interest[cl.labels])


def window_loss_tensor(interests: nx.Tensor, targets: nx.Tensor, interest_of_target,
                       negs: nx.Tensor, tau: nx.Tensor) -> nx.Tensor:
    """(1/w) * sum over matched targets of L(interest_matched, target)."""
    w = targets.shape[0]
    sel = np.flatnonzero(np.asarray(interest_of_target) >= 0)
    if len(sel) == 0:
        return nx.Tensor(np.array(0.0))
    anchors = nx.embedding_lookup(interests, np.asarray(interest_of_target)[sel])
    pos = nx.embedding_lookup(targets, sel)
    return nx.scale(nx.sum_all(nx.info_nce(anchors, pos, negs, tau)), 1.0 / w)


def window_contrastive_loss(interests, targets, interest_of_target, negs, tau, with_grad: bool = True):
    """Matched window loss for one user; returns ``(loss, grads)``.

    ``interest_of_target[i]`` is the interest matched to target i's cluster,
    or -1 when that cluster received no interest (contributes zero).
    """
    r = _as(interests, with_grad)
    t = _as(np.atleast_2d(targets), with_grad)
    n = _as(np.asarray(negs, dtype=np.float64).reshape(-1, r.shape[1]), with_grad)
    tt = _as(tau, with_grad)
    loss = window_loss_tensor(r, t, interest_of_target, n, tt)
    if not with_grad:
        return float(loss.data), None
    if loss.requires_grad:
        loss.backward()
    zero = np.zeros_like
    grads = {"interests": r.grad if r.grad is not None else zero(r.data),
             "targets": t.grad if t.grad is not None else zero(t.data),
             "negs": n.grad if n.grad is not None else zero(n.data),
             "tau": float(tt.grad) if tt.grad is not None else 0.0}
    return float(loss.data), grads
