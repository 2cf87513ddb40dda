"""Convex-hull decomposition of control-time beliefs over corpus beliefs.

The entry point is :func:`minimal_hull`: restrict to the ``k_search``
nearest corpus beliefs, then pick the smallest-volume simplex of at most
``d_b + 1`` of them that contains the query. When nothing contains the
query, the nearest point of the neighbours' hull is used instead and its
distance is reported as the residual.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError

CONTAIN_TOL = 1e-7
RANK_TOL = 1e-9
ENUMERATION_MAX_DIM = 8
# C(18, 9): every subset of the default 2(d_b+1) neighbours at d_b = 8
ENUMERATION_MAX_SUBSETS = math.comb(18, 9)


@dataclass
class HullDecomposition:
    support: np.ndarray          # corpus entry ids, ascending
    weights: np.ndarray
    residual: float
    projected: np.ndarray
    mode: str = "enumeration"
    contained: bool = True
    volume: float = 0.0
    # "min-volume" when a containing simplex was found, else "min-residual"
    selection: str = "min-volume"

    def to_dict(self) -> dict:
        return {
            "support": [int(i) for i in self.support],
            "weights": [float(w) for w in self.weights],
            "residual": float(self.residual),
            "mode": self.mode,
            "contained": bool(self.contained),
            "volume": float(self.volume),
            "selection": self.selection,
        }


@dataclass
class BeliefCache:
    """Corpus beliefs with aligned labels and a kd-tree for exact k-NN."""

    beliefs: np.ndarray
    values: np.ndarray | None = None
    policy_tags: np.ndarray | None = None
    actions: np.ndarray | None = None
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.beliefs = np.ascontiguousarray(np.atleast_2d(np.asarray(self.beliefs, dtype=float)))
        if len(self.beliefs) and not np.all(np.isfinite(self.beliefs)):
            raise ValueError("beliefs must be finite")
        n = len(self.beliefs)
        for name in ("values", "policy_tags", "actions"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
        self.tree = cKDTree(self.beliefs) if n else None

    def __len__(self):
        return len(self.beliefs)

    @property
    def dim(self) -> int:
        return self.beliefs.shape[1]


# --------------------------------------------------------------------------
# nearest neighbours
# --------------------------------------------------------------------------

def knn(cache: BeliefCache, b_t, k: int) -> np.ndarray:
    """Ids of the ``k`` nearest beliefs, ascending distance, ties to lower id."""
    return knn_batch(cache, np.atleast_2d(b_t), k)[0]


def knn_batch(cache: BeliefCache, queries, k: int) -> np.ndarray:
    n = len(cache)
    if n == 0:
        raise ValueError("empty belief cache")
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    kk = min(k + 1, n)
    _, idx = cache.tree.query(Q, kk)
    idx = np.asarray(idx).reshape(len(Q), kk)
    out = np.empty((len(Q), k), dtype=int)
    for j, q in enumerate(Q):
        ids = idx[j]
        dist = np.sqrt(np.sum((cache.beliefs[ids] - q) ** 2, axis=1))
        order = np.lexsort((ids, dist))
        ids, dist = ids[order], dist[order]
        if kk > k and dist[k] <= dist[k - 1]:
            # a tie straddles the cut: collect every point at that radius
            r = dist[k - 1]
            ball = np.array(cache.tree.query_ball_point(q, r * (1 + 1e-9) + 1e-300), dtype=int)
            ids = np.union1d(ball, ids)
            dist = np.sqrt(np.sum((cache.beliefs[ids] - q) ** 2, axis=1))
            order = np.lexsort((ids, dist))
            ids = ids[order]
        out[j] = ids[:k]
    return out


# --------------------------------------------------------------------------
# simplex-constrained least squares
# --------------------------------------------------------------------------

def _equality_ls(A, b):
    """min ||A z - b|| subject to sum(z) = 1 via the KKT system."""
    m = A.shape[1]
    K = np.zeros((m + 1, m + 1))
    K[:m, :m] = A.T @ A
    K[:m, m] = 1.0
    K[m, :m] = 1.0
    rhs = np.concatenate([A.T @ b, [1.0]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:m]


def simplex_project(points, b_t):
    """Nearest point to ``b_t`` in the convex hull of ``points``.

    Solves ``min ||P^T w - b_t||`` over the probability simplex with a
    primal active-set method.

    Parameters
    ----------
    points : array_like, shape (m, d)
    b_t : array_like, shape (d,)

    Returns
    -------
    weights : ndarray, shape (m,)
    projected : ndarray, shape (d,)
    residual : float
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    b = np.asarray(b_t, dtype=float).ravel()
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input to simplex_project")
    m = len(P)
    if m == 0:
        raise ValueError("need at least one point")
    A = P.T
    w = np.zeros(m)
    w[int(np.argmin(np.sum((P - b) ** 2, axis=1)))] = 1.0
    if m == 1:
        return w, P[0].copy(), float(np.linalg.norm(P[0] - b))
    scale = max(1.0, float(np.max(np.abs(P))), float(np.max(np.abs(b))))
    tol = 1e-13 * scale * scale
    passive = w > 0
    for _ in range(10 * m + 20):
        g = A.T @ (A @ w - b)
        nu = -float(np.mean(g[passive]))
        lam = g + nu
        lam[passive] = np.inf
        i = int(np.argmin(lam))
        if lam[i] >= -tol:
            break
        passive[i] = True
        for _ in range(m + 1):
            S = np.flatnonzero(passive)
            z = np.zeros(m)
            z[S] = _equality_ls(A[:, S], b)
            if np.all(z[S] > 0):
                w = z
                break
            neg = S[z[S] <= 0]
            alpha = float(np.min(w[neg] / (w[neg] - z[neg])))
            w = w + alpha * (z - w)
            w[np.abs(w) <= 1e-15] = 0.0
            passive = passive & (w > 0)
            if not passive.any():
                passive[int(np.argmax(w))] = True
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    proj = A @ w
    return w, proj, float(np.linalg.norm(proj - b))


def reduce_support(points, weights):
    """Caratheodory reduction: drop points from a convex combination until
    the support is affinely independent, keeping the combined point fixed.

    Returns
    -------
    index : ndarray of int
        Positions (into ``points``) of the remaining support, ascending.
    weights : ndarray
        Their weights, summing to one.
    """
    P = np.asarray(points, dtype=float)
    idx = np.flatnonzero(np.asarray(weights) > 0)
    w = np.asarray(weights, dtype=float)[idx]
    while len(idx) > 1:
        A = np.vstack([P[idx].T, np.ones(len(idx))])
        _, sv, Vt = np.linalg.svd(A)
        rank = int(np.sum(sv > RANK_TOL * sv[0]))
        if rank == len(idx):
            break
        z = Vt[-1]                       # A z = 0: moving along z keeps the point and the sum
        if not np.any(z > 0):
            z = -z
        pos = np.flatnonzero(z > 0)
        ratios = w[pos] / z[pos]
        drop = int(pos[np.argmin(ratios)])
        w = w - ratios.min() * z
        w[drop] = 0.0
        keep = w > 1e-15
        idx, w = idx[keep], np.clip(w[keep], 0.0, None)
        w /= w.sum()
    return idx, w


def kkt_gap(points, b_t, weights) -> float:
    """Frank-Wolfe gap ``g.w - min_j g_j``; zero exactly at the optimum."""
    P = np.asarray(points, dtype=float)
    g = P @ (P.T @ weights - np.asarray(b_t, dtype=float))
    return float(g @ weights - g.min())


# --------------------------------------------------------------------------
# simplex geometry
# --------------------------------------------------------------------------

def affine_independent(points) -> bool:
    """True iff the difference vectors ``p_i - p_1`` have full rank."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = P.shape
    if m == 1:
        return True
    if m - 1 > d:
        return False
    sv = np.linalg.svd(P[1:] - P[0], compute_uv=False)
    if sv[0] <= 0:
        return False
    return int(np.sum(sv > RANK_TOL * sv[0])) == m - 1


def simplex_volume(points) -> float:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    m, d = P.shape
    if m != d + 1:
        raise ValueError(f"need exactly {d + 1} points in R^{d}, got {m}")
    return abs(float(np.linalg.det(P[1:] - P[0]))) / math.factorial(d)


def _combos(k: int, r: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(k), r)), dtype=int).reshape(-1, r)


def _barycentric_batch(S, Q):
    """Barycentric coordinates of ``Q[j]`` in every simplex ``S[j, c]``.

    ``S`` has shape (n, C, d+1, d); returns weights (n, C, d+1), volumes
    (n, C), a degeneracy mask and the clipped-weight reconstruction error.
    """
    n, C, r, d = S.shape
    D = S[:, :, 1:, :] - S[:, :, :1, :]
    det = np.abs(np.linalg.det(D))
    vol = det / math.factorial(d)
    # sigma_min / sigma_max >= |det| / ||D||_F^d, so the exact rank test is
    # only needed where that lower bound is too weak
    frob = np.sqrt(np.sum(D * D, axis=(-1, -2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        suspect = ~(det > RANK_TOL * frob ** d)
    degenerate = np.zeros(suspect.shape, dtype=bool)
    if suspect.any():
        sv = np.linalg.svd(D[suspect], compute_uv=False)
        top = sv[..., 0]
        degenerate[suspect] = ~(sv[..., -1] > RANK_TOL * top) | ~(top > 0)
    Mx = np.concatenate([np.swapaxes(S, -1, -2), np.ones((n, C, 1, r))], axis=-2)
    Mx[degenerate] = np.eye(r)
    rhs = np.concatenate([Q, np.ones((n, 1))], axis=1)[:, None, :, None]
    rhs = np.broadcast_to(rhs, (n, C, r, 1))
    w = np.linalg.solve(Mx, rhs)[..., 0]
    wc = np.clip(w, 0.0, None)
    wc = wc / np.maximum(wc.sum(axis=-1, keepdims=True), 1e-300)
    recon = np.einsum("ncr,ncrd->ncd", wc, S)
    err = np.linalg.norm(recon - Q[:, None, :], axis=-1)
    err[degenerate] = np.inf
    return w, vol, degenerate, err


def _pick(ids_k, combos, ok, vol):
    """Smallest volume among ``ok`` subsets; equal volumes by sorted ids."""
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return None
    vmin = vol[cand].min()
    ties = cand[vol[cand] <= vmin * (1 + 1e-12)]
    if ties.size == 1:
        return int(ties[0])
    keys = [tuple(sorted(ids_k[combos[c]])) for c in ties]
    return int(ties[min(range(len(ties)), key=lambda i: keys[i])])


def _finish(cache, ids, b, mode, contained, volume, selection):
    w, proj, res = simplex_project(cache.beliefs[ids], b)
    keep = w > 0
    ids, w = ids[keep], w[keep]
    order = np.argsort(ids, kind="stable")
    return HullDecomposition(ids[order], w[order], res, proj, mode, contained, volume, selection)


def minimal_hull(cache: BeliefCache, b_t, d_b: int | None = None, k_search: int | None = None,
                 mode: str = "auto") -> HullDecomposition:
    return minimal_hull_batch(cache, np.atleast_2d(b_t), d_b, k_search, mode)[0]


def minimal_hull_batch(cache: BeliefCache, queries, d_b: int | None = None,
                       k_search: int | None = None, mode: str = "auto") -> list[HullDecomposition]:
    """Minimal-hull decomposition for each row of ``queries``.

    ``mode`` is ``"enumeration"``, ``"heuristic"`` or ``"auto"``; auto
    enumerates exactly while ``d_b <= 8`` and the neighbour subsets number
    at most ``C(18, 9)``, and falls back to the heuristic otherwise.
    """
    if len(cache) == 0:
        raise ValueError("empty belief cache")
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    d = cache.dim if d_b is None else int(d_b)
    k = 2 * (d + 1) if k_search is None else int(k_search)
    k = max(1, min(k, len(cache)))
    if mode == "auto":
        tractable = d <= ENUMERATION_MAX_DIM and math.comb(k, min(k, d + 1)) <= ENUMERATION_MAX_SUBSETS
        mode = "enumeration" if tractable else "heuristic"
    nb = knn_batch(cache, Q, k)
    if mode == "heuristic":
        return [_heuristic(cache, nb[j], Q[j], d) for j in range(len(Q))]
    if mode != "enumeration":
        raise ValueError(f"unknown mode {mode!r}")

    results: list[HullDecomposition | None] = [None] * len(Q)
    pending = []
    for j, q in enumerate(Q):
        p0 = cache.beliefs[nb[j, 0]]
        if np.linalg.norm(p0 - q) <= CONTAIN_TOL:
            results[j] = HullDecomposition(nb[j, :1].copy(), np.ones(1), float(np.linalg.norm(p0 - q)),
                                           p0.copy(), "enumeration", True, 0.0, "min-volume")
        else:
            pending.append(j)
    r = d + 1
    if k < r:
        for j in pending:
            results[j] = _fallback_small(cache, nb[j], Q[j])
        return results
    # Project onto all k neighbours first. A query outside their hull cannot
    # be contained by any subset, and the projection lies on a face whose
    # vertices carry every positive weight of any minimal-residual subset, so
    # the active support is the answer. Only contained queries are enumerated.
    inside = []
    for j in pending:
        dec = _fallback_small(cache, nb[j], Q[j])
        if dec.residual <= CONTAIN_TOL:
            inside.append(j)
        else:
            results[j] = dec
    if not inside:
        return results
    combos = _combos(k, r)
    for chunk in _chunks(inside, max(1, 200_000 // len(combos))):
        S = cache.beliefs[nb[chunk]][:, combos]
        _, vol, degenerate, err = _barycentric_batch(S, Q[chunk])
        for row, j in enumerate(chunk):
            ok = err[row] <= CONTAIN_TOL
            c = _pick(nb[j], combos, ok, vol[row])
            if c is None:
                results[j] = _fallback_small(cache, nb[j], Q[j])
                continue
            results[j] = _finish(cache, nb[j, combos[c]], Q[j], "enumeration", True,
                                 float(vol[row, c]), "min-volume")
    return results


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _fallback_small(cache, ids, q) -> HullDecomposition:
    """Projection onto the hull of ``ids``; support is the active set."""
    w, proj, res = simplex_project(cache.beliefs[ids], q)
    keep, ww = reduce_support(cache.beliefs[ids], w)
    sup = ids[keep]
    order = np.argsort(sup, kind="stable")
    contained = res <= CONTAIN_TOL
    return HullDecomposition(sup[order], ww[order], res, proj, "enumeration", contained, 0.0,
                             "min-volume" if contained else "min-residual")


def _heuristic(cache, ids, q, d, max_rounds: int = 50) -> HullDecomposition:
    """Active support of the projection onto all neighbours, then
    single-point swaps that shrink the simplex while keeping ``q`` inside.

    Each round scores every (vertex, unused neighbour) swap at once and takes
    the smallest containing simplex; it stops when no swap shrinks the volume.
    """
    w, proj, res = simplex_project(cache.beliefs[ids], q)
    if res > CONTAIN_TOL:
        dec = _fallback_small(cache, ids, q)
        dec.mode = "heuristic"
        return dec
    keep, _ = reduce_support(cache.beliefs[ids], w)
    support = ids[keep]
    if len(support) < d + 1:
        # q lies on a lower-dimensional face: zero volume, nothing to shrink
        return _finish(cache, support, q, "heuristic", True, 0.0, "min-volume")
    r = d + 1
    best_vol = simplex_volume(cache.beliefs[support])
    for _ in range(max_rounds):
        unused = np.setdiff1d(ids, support)
        if unused.size == 0:
            break
        trials = np.repeat(support[None, :], r * unused.size, axis=0)
        trials[np.arange(len(trials)), np.repeat(np.arange(r), unused.size)] = np.tile(unused, r)
        _, vol, _, err = _barycentric_batch(cache.beliefs[trials][None], q[None])
        ok = (err[0] <= CONTAIN_TOL) & (vol[0] < best_vol * (1 - 1e-12))
        if not ok.any():
            break
        j = int(np.flatnonzero(ok)[np.argmin(vol[0][ok])])
        support, best_vol = trials[j], float(vol[0, j])
    return _finish(cache, np.sort(support), q, "heuristic", True, best_vol, "min-volume")


def decompose_or_reject(cache: BeliefCache, b_t, d_b: int | None = None,
                        k_search: int | None = None, checked: bool = True) -> HullDecomposition:
    """:func:`minimal_hull` plus uniqueness checks on containing supports."""
    dec = minimal_hull(cache, b_t, d_b, k_search)
    if checked and dec.residual <= CONTAIN_TOL:
        pts = cache.beliefs[dec.support]
        if not affine_independent(pts):
            raise GeometryError(f"support {dec.support.tolist()} is affinely dependent")
        M = np.vstack([pts.T, np.ones(len(pts))])
        rhs = np.concatenate([np.asarray(b_t, dtype=float), [1.0]])
        bary, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        if np.max(np.abs(bary - dec.weights)) > 1e-6:
            raise GeometryError("weights differ from the barycentric solution of the support")
    return dec
