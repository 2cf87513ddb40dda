"""Belief model: an encoder of ``(o, a, h)`` into ``R^d_b`` plus an affine
value head trained on Monte-Carlo returns.

The encoder sees the history as a fixed window of the last ``M``
transitions (flattened, with a validity mask) instead of a recurrent cell;
for ``M = 4`` the two carry the same information.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import DecisionCorpus, flatten_inputs
from .errors import CorpusFormatError, SchemaError
from .hull import BeliefCache
from .nn import Network, Standardizer, fit

ENCODER_NOTE = "feed-forward over a masked history window (recurrent encoder substituted)"


@dataclass
class TrainConfig:
    hidden: int = 128
    d_b: int = 8
    batch_size: int = 500
    epochs: int = 4000
    lr: float = 1e-3
    seed: int = 0
    max_steps: int | None = None


@dataclass
class Schema:
    d_o: int
    d_a: int
    M: int
    width: int
    with_action: bool = True

    @property
    def n_in(self) -> int:
        return (self.d_o + (self.d_a if self.with_action else 0)
                + self.M * self.width + self.M)


class BeliefModel:
    """Trained encoder with input/output normalisation folded in.

    ``encode`` maps raw decision points to beliefs; ``head`` maps beliefs to
    targets in original units, so ``head(encode(x))`` is the prediction.
    """

    kind = "value"

    def __init__(self, net: Network, schema: Schema, x_norm: Standardizer,
                 y_norm: Standardizer, meta: dict | None = None):
        self.net = net
        self.schema = schema
        self.x_norm = x_norm
        self.y_norm = y_norm
        self.meta = dict(meta or {})
        self.meta.setdefault("encoder", ENCODER_NOTE)

    @property
    def d_b(self) -> int:
        return self.net.params["W3"].shape[1]

    @property
    def head_weights(self) -> np.ndarray:
        """Effective head matrix, shape ``(d_b, n_out)``, in target units."""
        return self.net.params["Wh"] * self.y_norm.scale

    @property
    def head_bias(self) -> np.ndarray:
        return self.net.params["bh"] * self.y_norm.scale + self.y_norm.mean

    def encode_features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.schema.n_in:
            raise SchemaError(f"encoder expects {self.schema.n_in} inputs, got {X.shape[1]}")
        return self.net.belief(self.x_norm(X))

    def encode(self, obs, actions, histories, masks) -> np.ndarray:
        if not self.schema.with_action:
            actions = None
        return self.encode_features(flatten_inputs(obs, actions, histories, masks))

    def head(self, beliefs) -> np.ndarray:
        return np.atleast_2d(beliefs) @ self.head_weights + self.head_bias

    def predict(self, X) -> np.ndarray:
        return self.head(self.encode_features(X))


def encode(model: BeliefModel, obs, action, history, mask) -> np.ndarray:
    """Belief of a single decision point (or a batch, if given batched)."""
    single = np.ndim(obs) == 1
    B = model.encode(obs, None if action is None else np.atleast_2d(action),
                     np.asarray(history, dtype=float)[None] if single else history,
                     np.asarray(mask)[None] if single else mask)
    return B[0] if single else B


def predict_value(model: BeliefModel, beliefs):
    """Value head in return units; scalar for a single belief."""
    out = model.head(beliefs)[:, 0]
    return float(out[0]) if np.ndim(beliefs) == 1 else out


def operator_norm(model: BeliefModel) -> float:
    """Spectral norm of the effective head (Euclidean norm for scalar output)."""
    return float(np.linalg.norm(model.head_weights, 2))


def _train(model_cls, X, Y, schema, cfg: TrainConfig, meta):
    x_norm = Standardizer.fit(X)
    y_norm = Standardizer.fit(Y)
    net = Network(schema.n_in, cfg.hidden, cfg.d_b, Y.shape[1], seed=cfg.seed)
    loss = fit(net, x_norm(X), y_norm(Y), cfg.epochs, cfg.batch_size, cfg.lr,
               seed=cfg.seed + 1, max_steps=cfg.max_steps)
    meta = dict(meta, train=asdict(cfg), final_loss=loss)
    return model_cls(net, schema, x_norm, y_norm, meta)


def train(corpus: DecisionCorpus, cfg: TrainConfig | None = None) -> BeliefModel:
    """Fit the value model on ``(features, value)`` pairs of a corpus."""
    cfg = cfg or TrainConfig()
    if not corpus.has_values:
        raise SchemaError("value training needs a corpus with reward-derived values")
    schema = Schema(corpus.d_o, corpus.d_a, corpus.M, corpus.history_width, True)
    X = corpus.features(with_action=True)
    Y = np.asarray(corpus.values, dtype=float)[:, None]
    return _train(BeliefModel, X, Y, schema, cfg, {"gamma": corpus.gamma, "n_train": len(corpus)})


def embed_corpus(model: BeliefModel, corpus: DecisionCorpus) -> BeliefCache:
    """Belief cache over every corpus entry, aligned with its labels."""
    X = corpus.features(with_action=model.schema.with_action)
    B = model.encode_features(X)
    return BeliefCache(B, values=corpus.values, policy_tags=corpus.policy_tags,
                       actions=corpus.actions)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _num(a):
    return [float(format(x, ".17g")) for x in np.ravel(a)]


def save_model(model: BeliefModel, path) -> None:
    """JSON header line, then one line with every parameter at 17 digits."""
    net = model.net
    header = {
        "format": "aoc-model", "version": 1, "kind": model.kind,
        "architecture": {"n_in": model.schema.n_in, "hidden": net.params["W1"].shape[1],
                         "d_b": model.d_b, "n_out": net.params["Wh"].shape[1],
                         "activation": "tanh"},
        "schema": asdict(model.schema),
        "normalization": {"x_mean": _num(model.x_norm.mean), "x_scale": _num(model.x_norm.scale),
                          "y_mean": _num(model.y_norm.mean), "y_scale": _num(model.y_norm.scale)},
        "meta": model.meta,
    }
    body = " ".join(format(x, ".17g") for x in net.flat())
    Path(path).write_text(json.dumps(header) + "\n" + body + "\n")


def load_model(path) -> BeliefModel:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2:
        raise CorpusFormatError(f"{path}: truncated model file")
    try:
        header = json.loads(lines[0])
        flat = np.array([float(x) for x in lines[1].split()])
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: unreadable model file ({exc})") from None
    if header.get("format") != "aoc-model" or header.get("version") != 1:
        raise SchemaError(f"{path}: unsupported model format/version")
    arch = header["architecture"]
    schema = Schema(**header["schema"])
    if schema.n_in != arch["n_in"]:
        raise SchemaError(f"{path}: schema implies {schema.n_in} inputs, header says {arch['n_in']}")
    net = Network(arch["n_in"], arch["hidden"], arch["d_b"], arch["n_out"])
    try:
        net.load_flat(flat)
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from None
    norm = header["normalization"]
    x_norm = Standardizer(norm["x_mean"], norm["x_scale"])
    y_norm = Standardizer(norm["y_mean"], norm["y_scale"])
    cls = BeliefModel
    if header.get("kind") == "sbi":
        from .imitation import SbiModel
        cls = SbiModel
    return cls(net, schema, x_norm, y_norm, header.get("meta"))
