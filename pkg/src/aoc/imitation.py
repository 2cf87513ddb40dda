"""Reward-free imitation by hull decomposition (ABC).

The belief is learned over ``(o, h)`` alone with a linear head that predicts
the logged action. At decision time the belief is decomposed over a minimal
corpus hull and the emitted action is the same convex combination of the
corpus actions, so every output lies inside the hull of real decisions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .belief import BeliefModel, Schema, TrainConfig, _train
from .controller import DecisionRecord, HistoryPolicy
from .corpus import DecisionCorpus, build_corpus, flatten_inputs
from .environments import Trajectory
from .errors import SchemaError
from .hull import BeliefCache, minimal_hull


class SbiModel(BeliefModel):
    kind = "sbi"


def train_sbi(corpus: DecisionCorpus, cfg: TrainConfig | None = None) -> SbiModel:
    """Fit belief + linear action head on a reward-free corpus."""
    cfg = cfg or TrainConfig()
    if corpus.has_values:
        raise SchemaError("imitation expects a reward-free corpus (see corpus.strip_rewards)")
    schema = Schema(corpus.d_o, corpus.d_a, corpus.M, corpus.history_width, with_action=False)
    X = corpus.features(with_action=False)
    Y = np.asarray(corpus.actions, dtype=float)
    return _train(SbiModel, X, Y, schema, cfg, {"n_train": len(corpus)})


def sbi_cache(model: SbiModel, corpus: DecisionCorpus) -> BeliefCache:
    B = model.encode_features(corpus.features(with_action=False))
    return BeliefCache(B, policy_tags=corpus.policy_tags, actions=np.asarray(corpus.actions, dtype=float))


def abc_act(model: SbiModel, cache: BeliefCache, obs, history, mask, k_search=None, t: int = 0):
    """Convex combination of corpus actions on the minimal hull of ``b(o, h)``.

    Returns
    -------
    action : ndarray
    record : DecisionRecord
    """
    b = model.encode_features(flatten_inputs(obs, None, np.asarray(history)[None],
                                             np.asarray(mask)[None]))[0]
    dec = minimal_hull(cache, b, model.d_b, k_search)
    action = dec.weights @ cache.actions[dec.support]
    tags = [] if cache.policy_tags is None else [str(cache.policy_tags[i]) for i in dec.support]
    rec = DecisionRecord(t, action.copy(), float("nan"), dec, [], 1, tags)
    return action, rec


def decode_binary(action) -> int:
    """Arg-max of a one-hot mixture, ties to the lower index."""
    return int(np.argmax(np.asarray(action, dtype=float)))


class ABCPolicy(HistoryPolicy):
    def __init__(self, model: SbiModel, cache: BeliefCache, k_search=None):
        s = model.schema
        super().__init__(s.d_o, s.d_a, s.M, with_reward=False)
        self.model, self.cache, self.k_search = model, cache, k_search

    def act(self, obs, rng=None, t: int = 0):
        hist, mask = self.buffer.window()
        return abc_act(self.model, self.cache, obs, hist, mask, self.k_search, t)


# --------------------------------------------------------------------------
# synthetic two-regime treatment task
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClinicConfig:
    """Episodes of a two-regime treatment decision.

    Every episode belongs to a hidden regime. The first vital sign follows
    ``x1' = rho * x1 + noise`` with ``rho > 0`` in regime 0 and ``-rho`` in
    regime 1, so consecutive observations reveal the regime. The second vital
    sits in one of two clusters (``+level`` or ``-level``) and switches
    cluster with probability ``switch`` per step, slightly pushed by the
    treatment. The expert treats when ``x2 > 0`` in regime 0 and when
    ``x2 < 0`` in regime 1, an exclusive-or of a hidden and a visible
    factor that no affine map of the window can express. Its logged label
    is flipped with probability ``flip``.
    """

    n_episodes: int = 330
    length: int = 80
    rho: float = 0.95
    level: float = 1.5
    spread: float = 0.3
    switch: float = 0.1
    effect: float = 0.05
    flip: float = 0.05
    seed: int = 0


def clinic_expert(obs, regime: int) -> int:
    high = float(obs[1]) > 0.0
    return int(high) if regime == 0 else int(not high)


def generate_clinic(cfg: ClinicConfig = ClinicConfig()):
    """Logged episodes with one-hot actions.

    Returns
    -------
    trajectories : list of Trajectory
        ``mode_tag`` holds the regime; rewards are zero (the task is
        reward-free).
    clean : list of ndarray
        Noise-free expert decision at every step, for the noise ceiling.
    """
    rng = np.random.default_rng(cfg.seed)
    s1 = np.sqrt(1.0 - cfg.rho ** 2)     # unit stationary variance
    trajs, clean = [], []
    for ep in range(cfg.n_episodes):
        regime = int(rng.integers(2))
        rho = cfg.rho if regime == 0 else -cfg.rho
        cluster = 1.0 if rng.random() < 0.5 else -1.0
        x = np.array([rng.normal(), cluster * cfg.level + rng.normal(0.0, cfg.spread)])
        O, A, N, C = [], [], [], []
        for _ in range(cfg.length):
            c = clinic_expert(x, regime)
            a = 1 - c if rng.random() < cfg.flip else c
            # treatment nudges the cluster switch rate up or down
            p_switch = cfg.switch + cfg.effect * (2 * a - 1)
            if rng.random() < p_switch:
                cluster = -cluster
            nxt = np.array([rho * x[0] + rng.normal(0.0, s1),
                            cluster * cfg.level + rng.normal(0.0, cfg.spread)])
            O.append(x)
            A.append(np.eye(2)[a])
            N.append(nxt)
            C.append(c)
            x = nxt
        T = cfg.length
        trajs.append(Trajectory(np.array(O), np.array(A), np.zeros(T), np.array(N),
                                np.zeros(T, dtype=bool), "expert", f"regime-{regime}", ep))
        clean.append(np.array(C))
    return trajs, clean


def split_episodes(n: int, holdout: float, seed: int = 0):
    """Random episode split; ``holdout`` is the test fraction."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = max(1, int(round(holdout * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def replay_decisions(policy: HistoryPolicy, traj: Trajectory) -> np.ndarray:
    """Actions the policy would take along a logged episode (open loop)."""
    policy.reset()
    out = []
    for t in range(len(traj)):
        a, _ = policy.act(traj.observations[t], None, t)
        out.append(np.asarray(a, dtype=float))
        policy.observe(traj.observations[t], traj.actions[t], None)
    return np.array(out)


def evaluate_clinic(holdout: float = 0.0909, cfg: ClinicConfig = ClinicConfig(),
                    train_cfg: TrainConfig | None = None, k_search=None) -> dict:
    """Held-out agreement of ABC and linear behaviour cloning with the logged
    expert labels, next to the noise ceiling of the expert itself."""
    from .controller import BCPolicy

    trajs, clean = generate_clinic(cfg)
    train_idx, test_idx = split_episodes(len(trajs), holdout, cfg.seed + 1)
    corpus = build_corpus([trajs[i] for i in train_idx], gamma=1.0)
    from .corpus import strip_rewards

    corpus = strip_rewards(corpus)
    train_cfg = train_cfg or TrainConfig(d_b=6, epochs=100, seed=cfg.seed)
    model = train_sbi(corpus, train_cfg)
    cache = sbi_cache(model, corpus)
    abc = ABCPolicy(model, cache, k_search)
    bc = BCPolicy(corpus)
    hits = {"abc": 0, "bc": 0, "ceiling": 0}
    total = 0
    for i in test_idx:
        tr = trajs[i]
        labels = np.argmax(tr.actions, axis=1)
        hits["abc"] += int(np.sum(np.argmax(replay_decisions(abc, tr), axis=1) == labels))
        hits["bc"] += int(np.sum(np.argmax(replay_decisions(bc, tr), axis=1) == labels))
        hits["ceiling"] += int(np.sum(clean[i] == labels))
        total += len(tr)
    return {k: v / total for k, v in hits.items()} | {"n_test_steps": total,
                                                       "final_loss": model.meta["final_loss"]}
