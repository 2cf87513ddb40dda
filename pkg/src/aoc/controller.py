"""Control-time action selection by hull decomposition, plus baselines.

Per step the controller samples ``K`` candidate actions, embeds each
``(o, a, h)`` into belief space, decomposes every belief over a minimal
corpus hull and scores it with the weighted corpus values. Candidates whose
corpus residual lies above the ``epsilon`` quantile are dropped before the
arg-max, which keeps decisions close to logged experience.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .belief import BeliefModel
from .corpus import DecisionCorpus, HistoryBuffer, flatten_inputs
from .environments import Trajectory
from .hull import BeliefCache, HullDecomposition, minimal_hull_batch


@dataclass
class ControllerConfig:
    K: int = 100
    epsilon: float = 0.5
    gamma: float = 0.99
    seed: int = 0
    k_search: int | None = None
    action_low: tuple = (-2.0,)
    action_high: tuple = (2.0,)
    hull_mode: str = "auto"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")


@dataclass
class CandidateSummary:
    action: np.ndarray
    residual: float
    value: float
    filtered: bool


@dataclass
class DecisionRecord:
    t: int
    action: np.ndarray
    value: float
    decomposition: HullDecomposition
    candidates: list = field(default_factory=list)
    effective_action_size: int = 1
    support_tags: list = field(default_factory=list)

    def tag_mass(self) -> dict:
        """Decomposition weight per behaviour-policy tag."""
        mass: dict = {}
        for tag, w in zip(self.support_tags, self.decomposition.weights):
            mass[tag] = mass.get(tag, 0.0) + float(w)
        return mass

    def to_dict(self, with_candidates: bool = True) -> dict:
        d = {
            "t": self.t,
            "action": [float(x) for x in np.ravel(self.action)],
            "value": float(self.value),
            "decomposition": self.decomposition.to_dict(),
            "support_tags": list(self.support_tags),
            "effective_action_size": int(self.effective_action_size),
        }
        if with_candidates:
            d["candidates"] = [
                {"action": [float(x) for x in np.ravel(c.action)], "residual": float(c.residual),
                 "value": float(c.value), "filtered": bool(c.filtered)}
                for c in self.candidates
            ]
        return d

    def to_json(self, with_candidates: bool = True) -> str:
        return json.dumps(self.to_dict(with_candidates))


def estimate_value(decomp: HullDecomposition, cache: BeliefCache) -> float:
    """Weighted corpus value ``sum_c w_c v_c`` over the decomposition support."""
    ids = np.asarray(decomp.support, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= len(cache)):
        raise IndexError("support id out of range for this cache")
    return float(np.dot(decomp.weights, cache.values[ids]))


def quantile_keep(residuals, epsilon: float) -> np.ndarray:
    """Mask of candidates with residual at or below the ``epsilon`` quantile.

    The quantile is the ``ceil(epsilon * K)``-th smallest residual, so at
    least that many candidates survive (more on ties); the lowest-residual
    candidate always does.
    """
    r = np.asarray(residuals, dtype=float)
    q = np.quantile(r, epsilon, method="inverted_cdf")
    keep = r <= q
    keep[int(np.argmin(r))] = True
    return keep


def choose(values, keep) -> int:
    """Index of the largest value among kept candidates, ties to lower index."""
    masked = np.where(keep, np.asarray(values, dtype=float), -np.inf)
    return int(np.argmax(masked))


def select_action(model: BeliefModel, cache: BeliefCache, obs, history, mask,
                  cfg: ControllerConfig, rng: np.random.Generator, t: int = 0):
    """One decision: sample, decompose, filter, arg-max.

    Returns
    -------
    action : ndarray
    record : DecisionRecord
    """
    low = np.asarray(cfg.action_low, dtype=float)
    high = np.asarray(cfg.action_high, dtype=float)
    cands = rng.uniform(low, high, size=(cfg.K, low.size))
    K = cfg.K
    X = flatten_inputs(np.repeat(np.atleast_2d(obs), K, axis=0), cands,
                       np.repeat(np.asarray(history, dtype=float)[None], K, axis=0),
                       np.repeat(np.asarray(mask)[None], K, axis=0))
    B = model.encode_features(X)
    decs = minimal_hull_batch(cache, B, model.d_b, cfg.k_search, cfg.hull_mode)
    residuals = np.array([d.residual for d in decs])
    values = np.array([estimate_value(d, cache) for d in decs])
    keep = quantile_keep(residuals, cfg.epsilon)
    i = choose(values, keep)
    summary = [CandidateSummary(cands[j], residuals[j], values[j], not keep[j]) for j in range(K)]
    tags = [] if cache.policy_tags is None else [str(cache.policy_tags[s]) for s in decs[i].support]
    rec = DecisionRecord(t, cands[i].copy(), float(values[i]), decs[i], summary,
                         int(keep.sum()), tags)
    return cands[i].copy(), rec


# --------------------------------------------------------------------------
# policies sharing a live history window
# --------------------------------------------------------------------------

class HistoryPolicy:
    """Base class: keeps the last ``M`` transitions of the running episode."""

    def __init__(self, d_o: int, d_a: int, M: int = 4, with_reward: bool = True):
        self.d_o, self.d_a, self.M, self.with_reward = d_o, d_a, M, with_reward
        self.buffer = HistoryBuffer(d_o, d_a, M, with_reward)

    def reset(self):
        self.buffer = HistoryBuffer(self.d_o, self.d_a, self.M, self.with_reward)

    def observe(self, obs, action, reward):
        self.buffer.push(obs, action, reward)

    def act(self, obs, rng, t: int = 0):
        raise NotImplementedError


class AOCPolicy(HistoryPolicy):
    def __init__(self, model: BeliefModel, cache: BeliefCache, cfg: ControllerConfig):
        s = model.schema
        super().__init__(s.d_o, s.d_a, s.M, with_reward=s.width == s.d_o + s.d_a + 1)
        self.model, self.cache, self.cfg = model, cache, cfg

    def act(self, obs, rng, t: int = 0):
        hist, mask = self.buffer.window()
        return select_action(self.model, self.cache, obs, hist, mask, self.cfg, rng, t)


class KNNPolicy(HistoryPolicy):
    """Raw-feature nearest neighbours over flattened ``(o, h)``; acts with
    the action of the best-valued neighbour among the ``k`` found."""

    def __init__(self, corpus: DecisionCorpus, k: int = 1):
        super().__init__(corpus.d_o, corpus.d_a, corpus.M, corpus.has_values)
        if len(corpus) == 0:
            raise ValueError("empty corpus")
        self.k = max(1, min(int(k), len(corpus)))
        self.features = corpus.features(with_action=False)
        self.tree = cKDTree(self.features)
        self.actions = corpus.actions
        self.values = corpus.values if corpus.values is not None else np.zeros(len(corpus))

    def act(self, obs, rng=None, t: int = 0):
        hist, mask = self.buffer.window()
        return knn_policy(self, obs, hist, mask), None


def knn_policy(policy: KNNPolicy, obs, history, mask) -> np.ndarray:
    x = flatten_inputs(obs, None, history[None], mask[None])[0]
    _, idx = policy.tree.query(x, policy.k)
    idx = np.atleast_1d(idx)
    dist = np.linalg.norm(policy.features[idx] - x, axis=1)
    idx = idx[np.lexsort((idx, dist))]
    best = idx[int(np.argmax(policy.values[idx]))]
    return policy.actions[best].copy()


@dataclass
class LinearPolicy:
    coef: np.ndarray        # (n_features + 1, d_a), last row is the intercept
    M: int
    low: np.ndarray | None = None
    high: np.ndarray | None = None


def _bc_features(obs, histories, masks):
    X = flatten_inputs(obs, None, histories, masks)
    return np.hstack([X, np.ones((len(X), 1))])


def bc_linear(corpus: DecisionCorpus, ridge: float = 1e-6, bounds=None) -> LinearPolicy:
    """Ridge-regularised least squares from flattened ``(o, h)`` to actions."""
    X = _bc_features(corpus.observations, corpus.histories, corpus.masks)
    Y = np.asarray(corpus.actions, dtype=float)
    G = X.T @ X + ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(G, X.T @ Y)
    low, high = (None, None) if bounds is None else map(np.asarray, bounds)
    return LinearPolicy(coef, corpus.M, low, high)


def bc_act(policy: LinearPolicy, obs, history, mask) -> np.ndarray:
    a = _bc_features(obs, np.asarray(history)[None], np.asarray(mask)[None])[0] @ policy.coef
    if policy.low is not None:
        a = np.clip(a, policy.low, policy.high)
    return a


class BCPolicy(HistoryPolicy):
    def __init__(self, corpus: DecisionCorpus, bounds=None):
        super().__init__(corpus.d_o, corpus.d_a, corpus.M, corpus.has_values)
        self.linear = bc_linear(corpus, bounds=bounds)

    def act(self, obs, rng=None, t: int = 0):
        hist, mask = self.buffer.window()
        return bc_act(self.linear, obs, hist, mask), None


# --------------------------------------------------------------------------
# rollouts and monitoring
# --------------------------------------------------------------------------

def rollout(env, policy: HistoryPolicy, horizon: int, rng: np.random.Generator,
            perturb=None, episode_id: int = 0, **tags):
    """Run one episode.

    ``perturb(t, action, rng)`` optionally alters the action sent to the
    environment; the policy's own history keeps the commanded action.

    Returns
    -------
    trajectory : Trajectory
    records : list of DecisionRecord (empty for policies that keep none)
    score : float
        Undiscounted sum of rewards.
    """
    obs = env.reset(rng)
    policy.reset()
    O, A, R, O2, D, records = [], [], [], [], [], []
    for t in range(horizon):
        action, rec = policy.act(obs, rng, t)
        sent = action if perturb is None else perturb(t, action, rng)
        nxt, r, done = env.step(sent)
        policy.observe(obs, action, r)
        O.append(np.asarray(obs, dtype=float))
        A.append(np.atleast_1d(np.asarray(action, dtype=float)))
        R.append(float(r))
        O2.append(np.asarray(nxt, dtype=float))
        D.append(bool(done))
        if rec is not None:
            records.append(rec)
        obs = nxt
        if done:
            break
    traj = Trajectory(np.array(O), np.array(A), np.array(R), np.array(O2), np.array(D),
                      tags.get("policy_tag", "controller"), tags.get("mode_tag"), episode_id)
    return traj, records, float(np.sum(R))


def ood_detect(trace, calibration: tuple[int, int]):
    """Three-sigma flags against a calibration window ``[start, stop)``.

    Returns
    -------
    flags : ndarray of bool
    threshold : float
    """
    r = np.asarray(trace, dtype=float)
    start, stop = calibration
    if not (0 <= start < stop <= len(r)) or stop - start < 30:
        raise ValueError("calibration window must lie in the trace and span at least 30 steps")
    window = r[start:stop]
    thr = float(window.mean() + 3.0 * max(float(window.std()), 1e-12))
    return r > thr, thr


def write_records(records, path, with_candidates: bool = True) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json(with_candidates) + "\n")


def summarize(records) -> tuple[float, float]:
    """Mean chosen residual and mean effective action size of an episode."""
    if not records:
        return math.nan, math.nan
    return (float(np.mean([r.decomposition.residual for r in records])),
            float(np.mean([r.effective_action_size for r in records])))
