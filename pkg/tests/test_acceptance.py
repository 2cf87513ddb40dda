"""Acceptance gate: fourteen criteria, each reported as one pass/fail line.

Criteria 1-6 are fast property checks against independent oracles.
Criteria 7-13 run the desk-scale experiment recipes (about two hours on
one core); their outputs land in ``$AOC_ACCEPTANCE_OUT`` when set, else in
a pytest temporary directory. Criterion 14 runs the imitation benchmark.
"""

import hashlib
import itertools
import math
import os
from pathlib import Path

import numpy as np
import pytest

from aoc import experiments as ex
from aoc.belief import BeliefModel, Schema, TrainConfig, predict_value, train
from aoc.controller import AOCPolicy, ControllerConfig, choose, quantile_keep, rollout
from aoc.corpus import build_corpus, compute_returns
from aoc.environments import (Mode, PendulumEnv, PendulumState, PolicySpec, generate_dataset,
                              pendulum_config, pendulum_step, write_dataset)
from aoc.hull import BeliefCache, minimal_hull, simplex_project
from aoc.imitation import evaluate_clinic
from aoc.nn import PARAM_ORDER, Network, Standardizer
from conftest import record

# ---------------------------------------------------------------- oracles


def mc_residual(P, b, rng, n=100_000):
    """Smallest distance from ``b`` over random simplex points (an upper
    bound on the true projection distance)."""
    m = len(P)
    W = np.vstack([rng.dirichlet(np.ones(m), n // 2),
                   rng.dirichlet(np.full(m, 0.05), n - n // 2),   # near faces
                   np.eye(m)])
    return float(np.min(np.linalg.norm(W @ P - b, axis=1)))


def kkt_violation(P, b, w):
    """Independent KKT check of min 0.5|P'w - b|^2 on the simplex."""
    g = P @ (P.T @ w - b)
    lam = g[w > 1e-12].mean()
    on = np.abs(g[w > 1e-12] - lam)
    off = np.maximum(lam - g[w <= 1e-12], 0.0)
    return float(max(on.max(initial=0.0), off.max(initial=0.0)))


def barycentric(P, b):
    """Exhaustive barycentric solve on a (d+1)-point support."""
    A = np.vstack([P.T, np.ones(len(P))])
    return np.linalg.solve(A, np.append(b, 1.0))


def simplex_volume_oracle(P):
    E = P[1:] - P[0]
    return math.sqrt(max(np.linalg.det(E @ E.T), 0.0)) / math.factorial(len(E))


def hull_distance_faces(P, b):
    """Exact distance from ``b`` to conv(P): the nearest point lies in the
    relative interior of some face spanned by at most d+1 points, so take the
    best affine projection with nonnegative weights over all such subsets."""
    d = P.shape[1]
    best = np.inf
    for size in range(1, d + 2):
        for S in itertools.combinations(range(len(P)), size):
            Q = P[list(S)]
            E = (Q[1:] - Q[0]).T
            if size > 1:
                c, *_ = np.linalg.lstsq(E, b - Q[0], rcond=None)
                w = np.concatenate([[1 - c.sum()], c])
            else:
                w = np.ones(1)
            if np.all(w >= -1e-12):
                best = min(best, float(np.linalg.norm(w @ Q - b)))
    return best


def minimal_hull_oracle(P, b):
    """Minimal-volume containing simplex over ALL (d+1)-subsets of ``P``."""
    d = P.shape[1]
    best = None
    for S in itertools.combinations(range(len(P)), d + 1):
        Q = P[list(S)]
        vol = simplex_volume_oracle(Q)
        if vol < 1e-12:
            continue
        w = barycentric(Q, b)
        if np.all(w >= -1e-10) and (best is None or vol < best[1]):
            best = (S, vol)
    return best


# ---------------------------------------------------------------- 1-6


def test_c01_simplex_projection():
    rng = np.random.default_rng(101)
    worst_gap, worst_kkt = -np.inf, 0.0
    for _ in range(1000):
        d, m = int(rng.integers(2, 5)), int(rng.integers(2, 9))
        P = rng.normal(size=(m, d))
        b = rng.normal(size=d) * 2.0
        w, proj, r = simplex_project(P, b)
        worst_gap = max(worst_gap, r - mc_residual(P, b, rng, 20_000))
        worst_kkt = max(worst_kkt, kkt_violation(P, b, w))
    ok = worst_gap <= 1e-6 and worst_kkt <= 1e-8
    record(1, "simplex projection vs Monte-Carlo oracle, KKT", ok,
           f"max(solver - oracle)={worst_gap:.2e}, max KKT violation={worst_kkt:.2e}, n=1000")
    assert ok


def test_c02_uniqueness():
    rng = np.random.default_rng(202)
    err_a = err_b = agree = 0.0
    for _ in range(500):
        d = int(rng.integers(2, 5))
        P = rng.normal(size=(d + 1, d))
        w = rng.dirichlet(np.ones(d + 1))
        b = w @ P
        dec = minimal_hull(BeliefCache(P), b, d)
        got = np.zeros(d + 1)
        got[dec.support] = dec.weights
        bary = barycentric(P, b)
        err_a = max(err_a, np.abs(got - w).max())
        err_b = max(err_b, np.abs(bary - w).max())
        agree = max(agree, np.abs(got - bary).max())
    ok = err_a <= 1e-6 and err_b <= 1e-6 and agree <= 1e-6
    record(2, "generate-and-recover, two solvers", ok,
           f"hull err={err_a:.1e}, barycentric err={err_b:.1e}, disagreement={agree:.1e}, n=500")
    assert ok


def _random_model(rng, n_in=6, d_b=4):
    net = Network(n_in, 8, d_b, 1, seed=int(rng.integers(1 << 30)))
    net.params["Wh"] = rng.normal(size=(d_b, 1)) * rng.uniform(0.1, 5)
    net.params["bh"] = rng.normal(size=1)
    schema = Schema(1, 1, 1, 3, True)
    return BeliefModel(net, schema, Standardizer(np.zeros(n_in), np.ones(n_in)),
                       Standardizer([rng.normal()], [rng.uniform(0.5, 3)]))


def test_c03_error_bound():
    from aoc.belief import operator_norm

    rng = np.random.default_rng(303)
    violations, worst = 0, -np.inf
    for _ in range(1000):
        model = _random_model(rng)
        B = model.encode_features(rng.normal(size=(30, 6)))
        cache = BeliefCache(B)
        b_t = model.encode_features(rng.normal(size=(1, 6)) * 1.5)[0]
        dec = minimal_hull(cache, b_t, model.d_b)
        b_hat = B[dec.support].T @ dec.weights
        gap = abs(predict_value(model, b_hat) - predict_value(model, b_t))
        slack = gap - (operator_norm(model) * dec.residual + 1e-9)
        worst = max(worst, slack)
        violations += slack > 0
    ok = violations == 0
    record(3, "value error <= operator norm x residual", ok,
           f"violations={violations}/1000, max slack={worst:.2e}")
    assert ok


def test_c04_minimal_hull_vs_exhaustive():
    rng = np.random.default_rng(404)
    matches, total, worse, pruned_matches = 0, 0, 0, 0
    for d in (2, 3):
        for _ in range(100):
            P = rng.normal(size=(12, d))
            if rng.random() < 0.8:
                idx = rng.choice(12, d + 1, replace=False)
                b = rng.dirichlet(np.ones(d + 1)) @ P[idx]
            else:
                b = rng.normal(size=d) * 2.5
            cache = BeliefCache(P)
            # enumeration over the whole cache; the default neighbour pruning is reported only
            dec = minimal_hull(cache, b, d, k_search=len(P), mode="enumeration")
            pruned = minimal_hull(cache, b, d, mode="enumeration")
            best = minimal_hull_oracle(P, b)
            total += 1
            if best is not None:
                oracle_r = 0.0
                same = sorted(best[0]) == dec.support.tolist()
                pruned_matches += sorted(best[0]) == pruned.support.tolist()
            else:
                oracle_r = hull_distance_faces(P, b)
                same = abs(dec.residual - oracle_r) <= 1e-6
                pruned_matches += abs(pruned.residual - oracle_r) <= 1e-6
            matches += same
            worse += (not same) and dec.residual > oracle_r + 1e-6
    rate = matches / total
    ok = rate >= 0.95 and worse == 0
    record(4, "enumeration vs all-subset oracle (12-point caches, d=2,3)", ok,
           f"match={matches}/{total} ({rate:.1%}), worse than oracle={worse}, "
           f"with default 2(d+1)-neighbour pruning match={pruned_matches}/{total}")
    assert ok


def _grad_rel_errors(net, X, Y, h=1e-5):
    _, g = net.loss_and_grads(X, Y)
    worst = 0.0
    for k in PARAM_ORDER:
        P = net.params[k]
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            lp, _ = net.loss_and_grads(X, Y)
            P[idx] = old - h
            lm, _ = net.loss_and_grads(X, Y)
            P[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        worst = max(worst, np.linalg.norm(g[k] - num) /
                    max(np.linalg.norm(g[k]) + np.linalg.norm(num), 1e-12))
    return worst


def test_c05_gradient_checks():
    from aoc.corpus import strip_rewards
    from aoc.imitation import train_sbi

    cfg = pendulum_config()
    corpus = build_corpus(generate_dataset(cfg, PolicySpec(), 400, seed=0), gamma=0.99, M=2)
    value = train(corpus, TrainConfig(hidden=6, d_b=3, epochs=2, seed=0))
    sbi = train_sbi(strip_rewards(corpus), TrainConfig(hidden=6, d_b=3, epochs=2, seed=0))
    X = corpus.features()[:10]
    e_val = _grad_rel_errors(value.net, value.x_norm(X), value.y_norm(corpus.values[:10, None]))
    Xs = strip_rewards(corpus).features(with_action=False)[:10]
    e_sbi = _grad_rel_errors(sbi.net, sbi.x_norm(Xs), sbi.y_norm(corpus.actions[:10]))
    ok = e_val <= 1e-4 and e_sbi <= 1e-4
    record(5, "belief and imitation gradients vs central differences", ok,
           f"value rel err={e_val:.1e}, imitation rel err={e_sbi:.1e}")
    assert ok


def test_c06_invariants():
    rng = np.random.default_rng(606)
    bad = {}
    # head affinity
    m = _random_model(rng)
    v = 0
    for _ in range(10_000):
        b1, b2 = rng.normal(size=(2, m.d_b)) * 3
        a = rng.random()
        lhs = predict_value(m, a * b1 + (1 - a) * b2)
        v += abs(lhs - (a * predict_value(m, b1) + (1 - a) * predict_value(m, b2))) > 1e-12
    bad["affinity"] = v
    # quantile filter and arg-max
    v = 0
    for _ in range(1000):
        K = int(rng.integers(1, 200))
        r, vals, eps = rng.exponential(size=K), rng.normal(size=K), rng.uniform(0.01, 1.0)
        keep = quantile_keep(r, eps)
        q = np.quantile(r, eps, method="inverted_cdf")
        i = choose(vals, keep)
        v += (not 1 <= keep.sum() <= K) or np.any(r[~keep] <= q) or vals[i] < vals[keep].max() or not keep[i]
    bad["quantile filter"] = v
    # weight simplex on decompositions
    v = 0
    cache = BeliefCache(rng.normal(size=(200, 3)))
    for q in rng.normal(size=(1000, 3)) * 1.5:
        dec = minimal_hull(cache, q, 3)
        w = dec.weights
        v += np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1) > 1e-9
    bad["weight simplex"] = v
    # return recursion
    v = 0
    for _ in range(200):
        r = rng.normal(size=int(rng.integers(1, 60)))
        g = rng.uniform(0.01, 1.0)
        ret = compute_returns(r, g)
        v += int(np.sum(np.abs(ret[:-1] - (r[:-1] + g * ret[1:])) > 1e-12)) + (ret[-1] != r[-1])
    bad["return recursion"] = v
    # mode negation (exact)
    v = 0
    cfg = pendulum_config()
    for _ in range(10_000):
        th, thd, u = rng.uniform(-math.pi, math.pi), rng.uniform(-8, 8), rng.uniform(-3, 3)
        s1, r1 = pendulum_step(PendulumState(th, thd, Mode.CONVERSE), u, cfg)
        s2, r2 = pendulum_step(PendulumState(th, thd, Mode.NORMAL), -u, cfg)
        v += (s1.theta, s1.theta_dot, r1) != (s2.theta, s2.theta_dot, r2)
    bad["mode negation"] = v
    # determinism of data and rollouts
    v = 0
    digests = []
    for _ in range(2):
        path = Path(os.environ.get("TMPDIR", "/tmp")) / f"aoc_det_{os.getpid()}.jsonl"
        write_dataset(generate_dataset(cfg, PolicySpec(), 2000, seed=9), path)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        path.unlink()
    v += digests[0] != digests[1]
    corpus = build_corpus(generate_dataset(cfg, PolicySpec(), 600, seed=0), gamma=0.99, M=2)
    model = train(corpus, TrainConfig(hidden=8, d_b=3, epochs=2, seed=0))
    from aoc.belief import embed_corpus
    cache = embed_corpus(model, corpus)
    runs = [rollout(PendulumEnv(cfg), AOCPolicy(model, cache, ControllerConfig(K=6)), 10,
                    np.random.default_rng(3))[0].actions for _ in range(2)]
    v += not np.array_equal(*runs)
    bad["determinism"] = v
    ok = sum(bad.values()) == 0
    record(6, "affinity, filter, simplex, recursion, negation, determinism", ok,
           ", ".join(f"{k}={n}" for k, n in bad.items()))
    assert ok


# ---------------------------------------------------------------- 7-13


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    env = os.environ.get("AOC_ACCEPTANCE_OUT")
    return Path(env) if env else tmp_path_factory.mktemp("acceptance")


_RUNS: dict = {}


def run(name, out_root):
    if name not in _RUNS:
        _RUNS[name] = ex.run_experiment(name, out_root / name)
    return _RUNS[name]


def _summary(verdict, limit=4):
    parts = []
    for name, c in list(verdict["checks"].items())[:limit]:
        extra = {k: v for k, v in c.items() if k != "pass"}
        txt = ", ".join(f"{k}={_fmt(v)}" for k, v in extra.items())
        parts.append(f"{'ok' if c['pass'] else 'no'}: {name} ({txt})")
    return "; ".join(parts) + f"; {verdict['seconds']:.0f}s"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


EXPERIMENTS = [
    (7, "pendulum_het", "Pendulum-Het ordering vs 1NN/kNN and data average"),
    (8, "quantile_sweep", "quantile sweep ordering"),
    (9, "maze_accountability", "maze provenance before/after the gate"),
    (10, "adaptivity", "gate usage follows resampling rate"),
    (11, "conservation", "Two Gates conservation over epsilon"),
    (12, "tradeoff_k", "neighbour-count trade-off"),
    (13, "ood", "residual OOD detection"),
]


@pytest.mark.slow
@pytest.mark.parametrize("number,name,title", EXPERIMENTS, ids=[e[1] for e in EXPERIMENTS])
def test_experiment_criteria(number, name, title, out_root):
    verdict = run(name, out_root)
    record(number, title, verdict["pass"], _summary(verdict))
    assert verdict["pass"], _summary(verdict, limit=10)


# ---------------------------------------------------------------- 14


@pytest.mark.slow
def test_c14_imitation():
    res = evaluate_clinic()
    ok = res["abc"] >= res["bc"] and res["abc"] >= res["ceiling"] - 0.03
    record(14, "ABC agreement >= linear BC and within 3 points of the noise ceiling", ok,
           f"ABC={res['abc']:.3f}, BC={res['bc']:.3f}, ceiling={res['ceiling']:.3f}, "
           f"steps={res['n_test_steps']}")
    assert ok
