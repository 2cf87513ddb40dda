"""The decision corpus: logged steps as (observation, action, history, value).

The corpus is stored column-wise in numpy arrays so that beliefs can be
computed for every entry in one batched pass. ``entry(i)`` gives the
row view of a single example.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .environments import Trajectory
from .errors import CorpusFormatError, SchemaError

FORMAT_NAME = "aoc-corpus"
FORMAT_VERSION = 1


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted reward-to-go ``v_t = r_t + gamma * v_{t+1}``."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty trajectory")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    v = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        v[t] = acc
    return v


class HistoryBuffer:
    """Rolling window over the last ``M`` transitions of a live episode."""

    def __init__(self, d_o: int, d_a: int, M: int = 4, with_reward: bool = True):
        self.M = M
        self.width = d_o + d_a + (1 if with_reward else 0)
        self.with_reward = with_reward
        self._rows: list[np.ndarray] = []

    def push(self, obs, action, reward=None):
        parts = [np.ravel(obs), np.ravel(action)]
        if self.with_reward:
            parts.append([0.0 if reward is None else float(reward)])
        self._rows.append(np.concatenate(parts).astype(float))
        if len(self._rows) > self.M:
            self._rows.pop(0)

    def window(self):
        """Return ``(history[M, width], mask[M])`` with padding at the front."""
        hist = np.zeros((self.M, self.width))
        mask = np.zeros(self.M, dtype=bool)
        n = len(self._rows)
        if n:
            hist[self.M - n:] = np.array(self._rows)
            mask[self.M - n:] = True
        return hist, mask


@dataclass(frozen=True)
class CorpusEntry:
    entry_id: int
    observation: np.ndarray
    action: np.ndarray
    history: np.ndarray
    mask: np.ndarray
    value: float | None
    policy_tag: str
    episode_id: int
    t: int


@dataclass
class DecisionCorpus:
    """Indexed pool of decision examples sharing one schema."""

    d_o: int
    d_a: int
    M: int
    gamma: float
    observations: np.ndarray
    actions: np.ndarray
    histories: np.ndarray          # (N, M, width)
    masks: np.ndarray              # (N, M) bool
    values: np.ndarray | None
    rewards: np.ndarray | None
    policy_tags: np.ndarray        # (N,) str
    episode_ids: np.ndarray
    steps: np.ndarray
    mode_tags: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise SchemaError("gamma must lie in (0, 1]")
        n = len(self.observations)
        if self.mode_tags is None:
            self.mode_tags = np.array([""] * n, dtype=object)
        for name in ("actions", "histories", "masks", "policy_tags", "episode_ids", "steps"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.values is not None and not np.all(np.isfinite(self.values)):
            raise SchemaError("corpus values must be finite")

    def __len__(self):
        return len(self.observations)

    @property
    def has_values(self) -> bool:
        return self.values is not None

    @property
    def history_width(self) -> int:
        return self.d_o + self.d_a + (1 if self.has_values else 0)

    def entry(self, i: int) -> CorpusEntry:
        return CorpusEntry(
            i, self.observations[i], self.actions[i], self.histories[i], self.masks[i],
            None if self.values is None else float(self.values[i]),
            str(self.policy_tags[i]), int(self.episode_ids[i]), int(self.steps[i]),
        )

    def features(self, with_action: bool = True) -> np.ndarray:
        """Flattened encoder inputs ``[o, a, h, mask]`` for every entry."""
        return flatten_inputs(self.observations, self.actions if with_action else None,
                              self.histories, self.masks)

    def select(self, index) -> "DecisionCorpus":
        index = np.asarray(index, dtype=int)
        take = lambda a: None if a is None else a[index]
        return replace(
            self,
            observations=self.observations[index], actions=self.actions[index],
            histories=self.histories[index], masks=self.masks[index],
            values=take(self.values), rewards=take(self.rewards),
            policy_tags=self.policy_tags[index], episode_ids=self.episode_ids[index],
            steps=self.steps[index], mode_tags=self.mode_tags[index],
        )

    def episodes(self) -> list[np.ndarray]:
        """Entry indices grouped by episode, in first-appearance order."""
        _, first, inverse = np.unique(self.episode_ids, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        groups = [np.flatnonzero(inverse == g) for g in order]
        return [g[np.argsort(self.steps[g], kind="stable")] for g in groups]

    def equals(self, other: "DecisionCorpus") -> bool:
        if (self.d_o, self.d_a, self.M, self.gamma) != (other.d_o, other.d_a, other.M, other.gamma):
            return False
        if self.has_values != other.has_values or len(self) != len(other):
            return False
        arrays = ["observations", "actions", "histories", "masks", "episode_ids", "steps"]
        if self.has_values:
            arrays += ["values", "rewards"]
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        return (list(self.policy_tags) == list(other.policy_tags)
                and list(self.mode_tags) == list(other.mode_tags))


def flatten_inputs(obs, actions, histories, masks) -> np.ndarray:
    obs = np.atleast_2d(obs)
    n = len(obs)
    parts = [obs]
    if actions is not None:
        parts.append(np.asarray(actions, dtype=float).reshape(n, -1))
    parts.append(np.asarray(histories, dtype=float).reshape(n, -1))
    parts.append(np.asarray(masks, dtype=float).reshape(n, -1))
    return np.concatenate(parts, axis=1)


def _windows(obs, actions, rewards, M):
    T = len(obs)
    rows = np.concatenate([obs, actions] + ([rewards[:, None]] if rewards is not None else []), axis=1)
    width = rows.shape[1]
    padded = np.vstack([np.zeros((M, width)), rows])
    hist = np.stack([padded[t:t + M] for t in range(T)])
    valid = np.concatenate([np.zeros(M, dtype=bool), np.ones(T, dtype=bool)])
    mask = np.stack([valid[t:t + M] for t in range(T)])
    return hist, mask


def build_corpus(trajectories: Sequence[Trajectory], gamma: float, M: int = 4) -> DecisionCorpus:
    """One corpus entry per logged step, values from discounted returns."""
    if not trajectories:
        raise SchemaError("no trajectories")
    d_o = trajectories[0].observations.shape[1]
    d_a = trajectories[0].actions.shape[1]
    cols = {k: [] for k in ("o", "a", "h", "m", "v", "r", "tag", "mode", "ep", "t")}
    for tr in trajectories:
        if tr.observations.shape[1] != d_o or tr.actions.shape[1] != d_a:
            raise SchemaError(
                f"episode {tr.episode_id}: dims ({tr.observations.shape[1]}, {tr.actions.shape[1]}) "
                f"differ from ({d_o}, {d_a})"
            )
        T = len(tr)
        h, m = _windows(tr.observations, tr.actions, tr.rewards, M)
        cols["o"].append(tr.observations)
        cols["a"].append(tr.actions)
        cols["h"].append(h)
        cols["m"].append(m)
        cols["v"].append(compute_returns(tr.rewards, gamma))
        cols["r"].append(tr.rewards)
        cols["tag"] += [tr.policy_tag] * T
        cols["mode"] += [tr.mode_tag or ""] * T
        cols["ep"].append(np.full(T, tr.episode_id))
        cols["t"].append(np.arange(T))
    return DecisionCorpus(
        d_o, d_a, M, gamma,
        np.vstack(cols["o"]), np.vstack(cols["a"]), np.concatenate(cols["h"]),
        np.concatenate(cols["m"]), np.concatenate(cols["v"]), np.concatenate(cols["r"]),
        np.array(cols["tag"], dtype=object), np.concatenate(cols["ep"]).astype(int),
        np.concatenate(cols["t"]).astype(int), np.array(cols["mode"], dtype=object),
    )


def resample(corpus: DecisionCorpus, policy_tag: str, rate: float, rng: np.random.Generator) -> DecisionCorpus:
    """Duplicate or drop whole trajectories carrying ``policy_tag``.

    For ``rate >= 1`` each tagged trajectory appears ``floor(rate)`` times,
    plus one more copy with probability ``rate - floor(rate)``. For
    ``rate < 1`` each is kept independently with probability ``rate``.
    Extra copies receive fresh episode ids.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if policy_tag not in set(corpus.policy_tags):
        raise ValueError(f"unknown policy tag {policy_tag!r}")
    next_id = int(corpus.episode_ids.max()) + 1
    pieces, new_ids = [], []
    for idx in corpus.episodes():
        eid = int(corpus.episode_ids[idx[0]])
        if corpus.policy_tags[idx[0]] != policy_tag:
            pieces.append(idx)
            new_ids.append(np.full(len(idx), eid))
            continue
        if rate >= 1.0:
            whole = math.floor(rate)
            copies = whole + int(rng.random() < rate - whole)
        else:
            copies = int(rng.random() < rate)
        for c in range(copies):
            pieces.append(idx)
            new_ids.append(np.full(len(idx), eid if c == 0 else next_id))
            if c > 0:
                next_id += 1
    if not pieces:
        raise ValueError("resampling removed every trajectory")
    out = corpus.select(np.concatenate(pieces))
    out.episode_ids = np.concatenate(new_ids).astype(int)
    return out


def strip_rewards(corpus: DecisionCorpus) -> DecisionCorpus:
    """Reward-free view for strictly batch imitation: no values, no rewards."""
    hist = corpus.histories
    if corpus.has_values:
        hist = hist[:, :, : corpus.d_o + corpus.d_a]
    return replace(corpus, histories=hist.copy(), values=None, rewards=None)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _nums(a) -> str:
    return "[" + ",".join(format(float(x), ".17g") for x in np.ravel(a)) + "]"


def save_corpus(corpus: DecisionCorpus, path) -> None:
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION,
        "d_o": corpus.d_o, "d_a": corpus.d_a, "M": corpus.M,
        "gamma": corpus.gamma, "count": len(corpus), "has_values": corpus.has_values,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(corpus)):
            parts = [
                f'"id":{i}',
                f'"episode_id":{int(corpus.episode_ids[i])}',
                f'"t":{int(corpus.steps[i])}',
                f'"policy_tag":{json.dumps(str(corpus.policy_tags[i]))}',
                f'"mode_tag":{json.dumps(str(corpus.mode_tags[i]))}',
                f'"obs":{_nums(corpus.observations[i])}',
                f'"action":{_nums(corpus.actions[i])}',
                f'"history":{_nums(corpus.histories[i])}',
                f'"mask":{json.dumps([bool(x) for x in corpus.masks[i]])}',
            ]
            if corpus.has_values:
                parts.append(f'"value":{format(float(corpus.values[i]), ".17g")}')
                parts.append(f'"reward":{format(float(corpus.rewards[i]), ".17g")}')
            fh.write("{" + ",".join(parts) + "}\n")


def load_corpus(path) -> DecisionCorpus:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError("empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"bad header: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise CorpusFormatError("not a corpus file")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"corpus format version {header.get('version')} is not {FORMAT_VERSION}")
    n = header["count"]
    if len(lines) - 1 != n:
        raise CorpusFormatError(f"expected {n} entries, found {len(lines) - 1} (truncated file?)")
    d_o, d_a, M = header["d_o"], header["d_a"], header["M"]
    has_values = header["has_values"]
    width = d_o + d_a + (1 if has_values else 0)
    recs = []
    for k, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"entry {k}: {exc}") from None
        if rec.get("id") != k:
            raise CorpusFormatError(f"entry {k}: id {rec.get('id')} out of sequence")
        recs.append(rec)
    try:
        obs = np.array([r["obs"] for r in recs], dtype=float).reshape(n, d_o)
        act = np.array([r["action"] for r in recs], dtype=float).reshape(n, d_a)
        hist = np.array([r["history"] for r in recs], dtype=float).reshape(n, M, width)
        mask = np.array([r["mask"] for r in recs], dtype=bool).reshape(n, M)
        values = np.array([r["value"] for r in recs], dtype=float) if has_values else None
        rewards = np.array([r["reward"] for r in recs], dtype=float) if has_values else None
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"entry does not match header schema: {exc}") from None
    return DecisionCorpus(
        d_o, d_a, M, header["gamma"], obs, act, hist, mask, values, rewards,
        np.array([r["policy_tag"] for r in recs], dtype=object),
        np.array([r["episode_id"] for r in recs], dtype=int),
        np.array([r["t"] for r in recs], dtype=int),
        np.array([r.get("mode_tag", "") for r in recs], dtype=object),
    )
