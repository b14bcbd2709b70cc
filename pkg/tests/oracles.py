"""Independent reference implementations used by the test-suite.

None of these share code with the package beyond plain data types: metrics
are recomputed from a full sort, assignments by exhaustive enumeration and
retrieval by a double loop.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from crossrec import numerics as nx
from crossrec.events import FLAG_NAMES, SCENARIOS, InteractionEvent, UserHistory

# ---------------------------------------------------------------------------
# ranking metrics


def full_sort_ranks(scores: dict) -> dict:
    order = sorted(scores, key=lambda k: (-scores[k], k))
    return {k: i + 1 for i, k in enumerate(order)}


def brute_hr(per_user, k):
    return sum(1.0 if min(r) <= k else 0.0 for r in per_user) / len(per_user)


def brute_ndcg(per_user, k):
    total = 0.0
    for r in per_user:
        dcg = 0.0
        for x in r:
            if x <= k:
                dcg += 1.0 / math.log2(x + 1)
        idcg = 0.0
        for j in range(1, min(len(r), k) + 1):
            idcg += 1.0 / math.log2(j + 1)
        total += dcg / idcg
    return total / len(per_user)


def brute_mrr(per_user, k):
    total = 0.0
    for r in per_user:
        first = min(r)
        if first <= k:
            total += 1.0 / first
    return total / len(per_user)


# ---------------------------------------------------------------------------
# assignment


def brute_assignment(sim):
    """Best total and lexicographically smallest optimal assignment tuple.

    The tuple lists each row's column, with ``None`` for an unmatched row and
    ``None`` ordered after every column.
    """
    s, K = sim.shape
    best_val, best_key = -np.inf, None
    need = min(s, K)
    for rows in itertools.combinations(range(s), need):
        for cols in itertools.permutations(range(K), need):
            val = sum(sim[r, c] for r, c in zip(rows, cols))
            a = [K] * s
            for r, c in zip(rows, cols):
                a[r] = c
            key = tuple(a)
            if val > best_val + 1e-12 or (abs(val - best_val) <= 1e-12 and key < best_key):
                best_val, best_key = val, key
    return best_val, tuple(None if c == K else c for c in best_key)


def random_assignment_value(sim, rng):
    s, K = sim.shape
    need = min(s, K)
    rows = rng.permutation(s)[:need]
    cols = rng.permutation(K)[:need]
    return float(sum(sim[r, c] for r, c in zip(rows, cols)))


# ---------------------------------------------------------------------------
# retrieval


def reference_topk(ids, emb, interests, k):
    scored = []
    for i in range(len(ids)):
        best = -np.inf
        for q in interests:
            c = float(np.dot(q, emb[i]) / (np.linalg.norm(q) * np.linalg.norm(emb[i])))
            best = max(best, c)
        scored.append((-best, ids[i]))
    scored.sort()
    return [i for _, i in scored[:k]]


# ---------------------------------------------------------------------------
# synthetic inputs


def random_history(rng, n_max=60, ts_span=10_000, user_id="u", allow_ties=True):
    evs = []
    n = int(rng.integers(0, n_max + 1))
    for j in range(n):
        s = SCENARIOS[int(rng.choice(3, p=[0.7, 0.1, 0.2]))]
        ts = int(rng.integers(1, ts_span if allow_ties else 10 ** 9)) + 1_700_000_000
        evs.append(InteractionEvent(f"i{int(rng.integers(0, 50))}", s, ts,
                                    int(rng.integers(0, 60)), int(rng.integers(0, 1 << len(FLAG_NAMES)))))
    return UserHistory.from_events(user_id, evs)


def wsum(t, w):
    """Scalar sum(t * w) used to probe every output coordinate."""
    return nx.sum_all(nx.mul(t, w))


def op_cases(rng):
    """(name, fn, inputs, elementwise?) for every differentiable op."""
    r = rng.standard_normal
    w34 = r((3, 4))
    mask = np.zeros((1, 1, 4))
    mask[..., 3] = nx.MASK_VALUE
    idx = np.array([[0, 2], [2, 1]])
    pos = rng.uniform(0.5, 2.0, (3, 4))
    away = r((3, 4))
    away = np.where(np.abs(away) < 0.1, away + 0.3 * np.sign(away + 1e-9), away)
    unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)  # noqa: E731
    w1 = r((2, 4))
    w2 = r((4, 3))
    w3 = r((4, 3))
    w4 = r((2, 3))
    w5 = r((5, 4))
    w6 = r((2, 3, 5))
    w7 = r((2, 3, 5))
    w8 = r((2, 2, 4))
    w9 = r((2, 3, 8))
    w10 = r((3,))
    w11 = rng.uniform(0.5, 1.5, 3)
    return [
        ("add", lambda t: wsum(nx.add(t[0], t[1]), w34), [r((3, 4)), r((4,))], True),
        ("sub", lambda t: wsum(nx.sub(t[0], t[1]), w34), [r((3, 4)), r((3, 1))], True),
        ("mul", lambda t: wsum(nx.mul(t[0], t[1]), w34), [r((3, 4)), r((3, 4))], True),
        ("scale", lambda t: wsum(nx.scale(t[0], -1.7), w34), [r((3, 4))], True),
        ("relu", lambda t: wsum(nx.relu(t[0]), w34), [away], True),
        ("exp", lambda t: wsum(nx.exp(t[0]), w34), [r((3, 4))], True),
        ("log", lambda t: wsum(nx.log(t[0]), w34), [pos], True),
        ("sum_all", lambda t: nx.sum_all(nx.mul(t[0], t[0])), [r((3, 4))], True),
        ("mean_all", lambda t: nx.mean_all(nx.mul(t[0], t[0])), [r((3, 4))], True),
        ("mean_rows", lambda t: wsum(nx.mean_rows(t[0]), w1), [r((2, 3, 4))], False),
        ("reshape", lambda t: wsum(nx.reshape(t[0], (4, 3)), w2), [r((3, 4))], True),
        ("transpose", lambda t: wsum(nx.transpose(t[0], (1, 0)), w3), [r((3, 4))], True),
        ("getitem", lambda t: wsum(nx.getitem(t[0], (slice(1, 3), [0, 0, 2])), w4), [r((3, 4))], True),
        ("concat_rows", lambda t: wsum(nx.concat_rows([t[0], t[1]]), w5), [r((2, 4)), r((3, 4))], True),
        ("matmul", lambda t: wsum(nx.matmul(t[0], t[1]), w6), [r((2, 3, 4)), r((4, 5))], False),
        ("matmul_batched", lambda t: wsum(nx.matmul(t[0], t[1]), w7), [r((2, 3, 4)), r((2, 4, 5))], False),
        ("embedding_lookup", lambda t: wsum(nx.embedding_lookup(t[0], idx), w8), [r((3, 4))], False),
        ("row_softmax", lambda t: wsum(nx.row_softmax(t[0]), w34), [r((3, 4))], False),
        ("layer_norm", lambda t: wsum(nx.layer_norm(t[0], t[1], t[2]), w34), [r((3, 4)), r((4,)), r((4,))], False),
        ("scaled_dot_attention", lambda t: wsum(nx.scaled_dot_attention(t[0], t[1], t[2], mask), w9),
         [r((2, 3, 8)), r((2, 4, 8)), r((2, 4, 8))], False),
        ("l2_normalize", lambda t: wsum(nx.l2_normalize(t[0]), w34), [r((3, 4))], False),
        ("cosine_similarity", lambda t: wsum(nx.cosine_similarity(t[0], t[1]), w10), [r((3, 4)), r((3, 4))], False),
        ("info_nce", lambda t: wsum(nx.info_nce(t[0], t[1], t[2], t[3]), w11),
         [unit(r((3, 4))), unit(r((3, 4))), unit(r((5, 4))), np.array(rng.uniform(1, 5))], False),
    ]


def composed_loss_grad_check(model, samples, feats, neg_rows, cfg, rng, per_block=5, h=1e-5):
    """Worst central-difference error of the full batch loss for every parameter block.

    Routing (anchor choice and window matching) is frozen from the first
    evaluation so the loss is a smooth function of the parameters.
    """
    from crossrec.training import batch_loss

    out = batch_loss(model, samples, feats, neg_rows, cfg, np.random.default_rng(1))
    plans = out.plans
    for p in model.parameters():
        p.grad = None
    out.loss.backward()

    def value():
        return float(batch_loss(model, samples, feats, neg_rows, cfg, plans=plans).loss.data)

    worst = {}
    for p in model.parameters():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        nz = np.flatnonzero(g.reshape(-1))
        picks = list(rng.choice(nz, min(per_block, len(nz)), replace=False)) if len(nz) else []
        picks += list(rng.integers(0, flat.size, 2))
        err = 0.0
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = max(err, abs(g.reshape(-1)[i] - num) / max(1.0, abs(num)))
        worst[p.name] = err
    return worst
