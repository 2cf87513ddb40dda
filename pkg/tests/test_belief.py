import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aoc.belief import (BeliefModel, Schema, TrainConfig, embed_corpus, encode, load_model,
                        operator_norm, predict_value, save_model, train)
from aoc.corpus import build_corpus, strip_rewards
from aoc.environments import Trajectory
from aoc.errors import CorpusFormatError, NumericDivergence, SchemaError
from aoc.imitation import train_sbi
from aoc.nn import PARAM_ORDER, Network, Standardizer, fit


def numeric_grads(net, X, Y, h=1e-5):
    out = {}
    for k in PARAM_ORDER:
        P = net.params[k]
        g = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            lp, _ = net.loss_and_grads(X, Y)
            P[idx] = old - h
            lm, _ = net.loss_and_grads(X, Y)
            P[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def gradient_errors(n_out, seed):
    rng = np.random.default_rng(seed)
    net = Network(7, 6, 3, n_out, seed=seed)
    for k in ("b1", "b2", "b3", "bh"):
        net.params[k] = rng.normal(scale=0.3, size=net.params[k].shape)
    X, Y = rng.normal(size=(10, 7)), rng.normal(size=(10, n_out))
    _, g = net.loss_and_grads(X, Y)
    num = numeric_grads(net, X, Y)
    return {k: rel_err(g[k], num[k]) for k in PARAM_ORDER}


@pytest.mark.parametrize("n_out", [1, 2])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(n_out, seed):
    # n_out=1 is the value head, n_out=2 an action head
    errs = gradient_errors(n_out, seed)
    assert max(errs.values()) <= 1e-4, errs


def test_loss_definition():
    net = Network(2, 3, 2, 1)
    X, Y = np.ones((4, 2)), np.zeros((4, 1))
    loss, _ = net.loss_and_grads(X, Y)
    assert loss == pytest.approx(np.mean(net.forward(X)[:, 0] ** 2))


def test_flat_roundtrip_and_length_checks():
    net = Network(3, 4, 2, 1, seed=5)
    v = net.flat()
    other = Network(3, 4, 2, 1, seed=6)
    other.load_flat(v)
    np.testing.assert_array_equal(other.flat(), v)
    with pytest.raises(ValueError):
        other.load_flat(v[:-1])
    with pytest.raises(ValueError):
        other.load_flat(np.append(v, 0.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_raises():
    net = Network(2, 3, 2, 1)
    X = np.ones((5, 2))
    with pytest.raises(NumericDivergence, match="epoch 0"):
        fit(net, X, np.full((5, 1), np.inf), 3, 5, 1e-3, 0)


def test_standardizer_constant_column():
    s = Standardizer.fit([[1.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(s.scale, [1.0, 1.0])
    np.testing.assert_allclose(s([[2.0, 5.0]]), [[0.0, 0.0]])


# ---------------------------------------------------------------- corpora

def toy_corpus(n_eps=6, T=10, seed=0, d_o=2, d_a=1):
    rng = np.random.default_rng(seed)
    trajs = []
    for e in range(n_eps):
        obs = rng.normal(size=(T, d_o))
        trajs.append(Trajectory(obs, rng.uniform(-1, 1, (T, d_a)), rng.normal(size=T),
                                np.vstack([obs[1:], rng.normal(size=(1, d_o))]),
                                np.zeros(T, bool), "p", None, e))
    return build_corpus(trajs, gamma=0.9, M=2)


def model_with_head(w, c):
    """Network whose effective head is exactly ``w . b + c``; 6 inputs."""
    schema = Schema(1, 1, 1, 3, True)
    d_in = schema.n_in
    net = Network(d_in, 5, len(w), 1)
    net.params["Wh"] = np.asarray(w, float)[:, None]
    net.params["bh"] = np.array([float(c)])
    return BeliefModel(net, schema, Standardizer(np.zeros(d_in), np.ones(d_in)),
                       Standardizer([0.0], [1.0]))


def test_predict_value_examples():
    m = model_with_head([1.0, 0.0, 0.0], 0.0)
    assert predict_value(m, np.array([3.5, 2.0, -1.0])) == 3.5
    rng = np.random.default_rng(0)
    w, c = rng.normal(size=5), rng.normal()
    m = model_with_head(w, c)
    b = rng.normal(size=5)
    assert predict_value(m, b) == pytest.approx(float(np.dot(w, b) + c), abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_head_affinity(seed, alpha):
    rng = np.random.default_rng(seed)
    m = model_with_head(rng.normal(size=4), rng.normal())
    b1, b2 = rng.normal(size=(2, 4)) * 3
    lhs = predict_value(m, alpha * b1 + (1 - alpha) * b2)
    rhs = alpha * predict_value(m, b1) + (1 - alpha) * predict_value(m, b2)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_operator_norm():
    assert operator_norm(model_with_head([3.0, 4.0], 1.0)) == pytest.approx(5.0)
    assert operator_norm(model_with_head([0.0, 0.0], 2.0)) == 0.0
    rng = np.random.default_rng(1)
    w = rng.normal(size=6)
    m = model_with_head(w, 0.0)
    U = rng.normal(size=(10_000, 6))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    best = np.max(np.abs(U @ w))
    assert best <= operator_norm(m) + 1e-12
    assert abs(w @ (w / np.linalg.norm(w))) == pytest.approx(operator_norm(m))


def test_zero_final_layer_gives_bias():
    m = model_with_head([1.0, 2.0], 0.0)
    m.net.params["W3"][:] = 0.0
    m.net.params["b3"] = np.array([0.3, -0.7])
    X = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(m.encode_features(X), np.tile([0.3, -0.7], (5, 1)))


def test_encode_lipschitz():
    m = model_with_head([1.0, 2.0, 0.5], 0.0)
    p = m.net.params
    L = np.prod([np.linalg.norm(p[k], 2) for k in ("W1", "W2", "W3")])
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(size=6)
        y = x.copy()
        y[rng.integers(6)] += 1e-6
        d = np.linalg.norm(m.encode_features(x) - m.encode_features(y))
        assert d <= L * 1e-6 * (1 + 1e-6)


def test_encode_shape_mismatch():
    m = model_with_head([1.0, 2.0], 0.0)
    with pytest.raises(SchemaError):
        m.encode_features(np.zeros((1, 5)))


def test_linear_target_is_learned():
    c = toy_corpus(n_eps=20)
    u = np.random.default_rng(4).normal(size=c.features().shape[1]) * 0.3
    c.values = c.features() @ u
    m = train(c, TrainConfig(hidden=32, d_b=4, epochs=2000, batch_size=500, lr=3e-3, seed=0))
    pred = m.predict(c.features())[:, 0]
    assert np.mean((pred - c.values) ** 2) <= 1e-3


def test_constant_target():
    c = toy_corpus()
    c.values = np.full(len(c), 2.5)
    m = train(c, TrainConfig(hidden=8, d_b=2, epochs=2000, lr=1e-2, seed=0))
    assert np.mean((m.predict(c.features())[:, 0] - 2.5) ** 2) <= 1e-6


def test_training_is_deterministic():
    c = toy_corpus()
    cfg = TrainConfig(hidden=16, d_b=3, epochs=20, seed=7)
    np.testing.assert_array_equal(train(c, cfg).net.flat(), train(c, cfg).net.flat())


def test_train_requires_values():
    with pytest.raises(SchemaError):
        train(strip_rewards(toy_corpus()), TrainConfig(epochs=1))
    with pytest.raises(SchemaError):
        train_sbi(toy_corpus(), TrainConfig(epochs=1))


def test_embed_corpus_consistency():
    c = toy_corpus()
    m = train(c, TrainConfig(hidden=16, d_b=3, epochs=10, seed=0))
    cache = embed_corpus(m, c)
    assert len(cache) == len(c)
    for i in (0, 7, len(c) - 1):
        e = c.entry(i)
        b = encode(m, e.observation, e.action, e.history, e.mask)
        # a lone row and a batch may differ in the last bit of the matmul
        np.testing.assert_allclose(b, cache.beliefs[i], rtol=0, atol=1e-12)
        assert predict_value(m, b) == pytest.approx(m.predict(c.features()[i])[0, 0], abs=1e-12)
    np.testing.assert_array_equal(cache.values, c.values)
    np.testing.assert_array_equal(embed_corpus(m, c).beliefs, cache.beliefs)


def test_model_metadata_records_encoder_and_loss():
    m = train(toy_corpus(), TrainConfig(hidden=8, d_b=2, epochs=3, seed=0))
    assert "feed-forward" in m.meta["encoder"]
    assert np.isfinite(m.meta["final_loss"]) and m.meta["train"]["seed"] == 0


def test_checkpoint_roundtrip(tmp_path):
    c = toy_corpus()
    m = train(c, TrainConfig(hidden=8, d_b=3, epochs=5, seed=0))
    save_model(m, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.net.flat(), m.net.flat())
    np.testing.assert_array_equal(back.encode_features(c.features()), m.encode_features(c.features()))
    lines = (tmp_path / "m.txt").read_text().splitlines()
    (tmp_path / "t.txt").write_text(lines[0] + "\n")
    with pytest.raises(CorpusFormatError):
        load_model(tmp_path / "t.txt")
    (tmp_path / "s.txt").write_text(lines[0] + "\n" + lines[1].rsplit(" ", 1)[0] + "\n")
    with pytest.raises(CorpusFormatError):
        load_model(tmp_path / "s.txt")
