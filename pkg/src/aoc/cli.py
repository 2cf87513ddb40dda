"""Command-line entry point: ``aoc <subcommand> ...``.

Every command writes a ``*.manifest.json`` next to its output before doing
any work and finalizes it afterwards with output hashes and status. On
failure a single line ``error: <category>: <message>`` goes to stderr and
the process exits with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import AOCError

EXIT_MISSING_FILE = 7
EXIT_USAGE = 2     # same as argparse


class MissingFile(AOCError):
    category = "missing-file"
    exit_code = EXIT_MISSING_FILE


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256(path) -> str | None:
    p = Path(path)
    if not p.exists():
        return None
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file() and not x.name.endswith(".manifest.json")):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Provenance record of one command invocation."""

    def __init__(self, path, argv, config: dict, inputs: dict, seeds=()):
        self.path = Path(path)
        self.data = {
            "command": list(argv), "config": config, "seeds": list(seeds),
            "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in inputs.items()},
            "outputs": {}, "tool_version": _version(), "python": platform.python_version(),
            "numpy": np.__version__, "started": _now(), "finished": None, "status": "running",
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")

    def finalize(self, outputs: dict, status: str = "ok", **extra):
        self.data["outputs"] = {k: {"path": str(v), "sha256": sha256(v)} for k, v in outputs.items()}
        self.data.update(finished=_now(), status=status, **extra)
        self._write()


def _need(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise MissingFile(f"{p} does not exist")


def _manifest_path(out) -> Path:
    """Sibling manifest of a single-file output."""
    p = Path(out)
    return p.with_name(p.name + ".manifest.json")


def _config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _seeds(text) -> list[int]:
    """``"0-7"`` or ``"0,3,5"`` or ``"4"``."""
    out = []
    for part in str(text).split(","):
        if "-" in part.strip()[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part.strip():
            out.append(int(part))
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    from .environments import MAZE_EXPERTS, TWO_GATE_EXPERTS, PolicySpec, generate_dataset, make_config, write_dataset

    cfg = make_config(args.env)
    if args.env == "pendulum-het":
        spec = PolicySpec(epsilon=args.epsilon)
    else:
        experts = MAZE_EXPERTS if args.env == "maze" else TWO_GATE_EXPERTS
        spec = PolicySpec(groups={k: args.per_expert for k in experts})
    man = RunManifest(_manifest_path(args.out), sys.argv, _config_of(args), {}, [args.seed])
    trajs = generate_dataset(cfg, spec, args.n, args.seed)
    write_dataset(trajs, args.out)
    man.finalize({"dataset": args.out}, episodes=len(trajs),
                 transitions=int(sum(len(t) for t in trajs)))


def cmd_build_corpus(args):
    from .corpus import build_corpus, resample, save_corpus, strip_rewards
    from .environments import read_dataset

    _need(args.data)
    man = RunManifest(_manifest_path(args.out), sys.argv, _config_of(args), {"dataset": args.data},
                      [args.seed])
    corpus = build_corpus(read_dataset(args.data), args.gamma, args.M)
    rng = np.random.default_rng(args.seed)
    for item in args.resample or []:
        tag, _, rate = item.rpartition(":")
        if not tag:
            raise ValueError(f"--resample expects tag:rate, got {item!r}")
        corpus = resample(corpus, tag, float(rate), rng)
    if args.strip_rewards:
        corpus = strip_rewards(corpus)
    save_corpus(corpus, args.out)
    man.finalize({"corpus": args.out}, entries=len(corpus))


def _train(args, mode):
    from .belief import TrainConfig, save_model, train
    from .corpus import load_corpus

    _need(args.corpus)
    man = RunManifest(_manifest_path(args.out), sys.argv, _config_of(args), {"corpus": args.corpus},
                      [args.seed])
    corpus = load_corpus(args.corpus)
    cfg = TrainConfig(hidden=args.hidden, d_b=args.d_b, batch_size=args.batch_size, epochs=args.epochs,
                      lr=args.lr, seed=args.seed, max_steps=args.max_steps)
    if mode == "sbi":
        from .imitation import train_sbi

        model = train_sbi(corpus, cfg)
    else:
        model = train(corpus, cfg)
    save_model(model, args.out)
    man.finalize({"model": args.out}, final_loss=model.meta.get("final_loss"))


def cmd_train_belief(args):
    _train(args, args.mode)


def cmd_train_abc(args):
    _train(args, "sbi")


def _load_pair(args):
    from .belief import embed_corpus, load_model
    from .corpus import load_corpus

    _need(args.model, args.corpus)
    model, corpus = load_model(args.model), load_corpus(args.corpus)
    from .errors import SchemaError

    s = model.schema
    if (s.d_o, s.d_a, s.M) != (corpus.d_o, corpus.d_a, corpus.M):
        raise SchemaError("model and corpus disagree on observation/action/history shape")
    return model, corpus, embed_corpus(model, corpus)


def _env(kind, mode, cfg):
    from .environments import MazeEnv, Mode, PendulumEnv

    if kind == "pendulum-het":
        return PendulumEnv(cfg, Mode(mode))
    return MazeEnv(cfg)


def cmd_rollout(args):
    from .controller import AOCPolicy, ControllerConfig, rollout, summarize, write_records
    from .environments import make_config

    _need(args.model, args.corpus)
    out = Path(args.out)
    seeds = _seeds(args.seeds)
    man = RunManifest(out / "manifest.json", sys.argv, _config_of(args),
                      {"model": args.model, "corpus": args.corpus}, seeds)
    model, corpus, cache = _load_pair(args)
    cfg = make_config(args.env)
    ccfg = ControllerConfig(K=args.K, epsilon=args.epsilon, gamma=args.gamma, k_search=args.k_search,
                            action_low=tuple(cfg.action_low), action_high=tuple(cfg.action_high),
                            hull_mode=args.hull_mode)
    rows = []
    for seed in seeds:
        traj, recs, score = rollout(_env(args.env, args.mode, cfg), AOCPolicy(model, cache, ccfg),
                                    args.horizon or cfg.horizon, np.random.default_rng(seed),
                                    episode_id=seed)
        write_records(recs, out / f"provenance_seed{seed}.jsonl", not args.no_candidates)
        res, eff = summarize(recs)
        rows.append({"seed": seed, "score": repr(score), "mean_residual": repr(res),
                     "effective_action_size": repr(eff), "steps": len(traj)})
    _write_rows(out / "summary.csv", rows)
    man.finalize({"summary": out / "summary.csv"})


def _write_rows(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_eval_abc(args):
    from .belief import TrainConfig
    from .imitation import ClinicConfig, evaluate_clinic

    out = Path(args.out)
    man = RunManifest(_manifest_path(out), sys.argv, _config_of(args), {}, [args.seed])
    res = evaluate_clinic(args.holdout, ClinicConfig(seed=args.seed),
                          TrainConfig(d_b=args.d_b, epochs=args.epochs, seed=args.seed))
    res["pass"] = bool(res["abc"] >= res["bc"] and res["abc"] >= res["ceiling"] - 0.03)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    man.finalize({"report": out})
    print(json.dumps(res, sort_keys=True))


def cmd_ood_run(args):
    from .controller import AOCPolicy, ControllerConfig, ood_detect, rollout
    from .environments import make_config

    _need(args.model, args.corpus)
    out = Path(args.out)
    seeds = _seeds(args.seeds)
    man = RunManifest(out / "manifest.json", sys.argv, _config_of(args),
                      {"model": args.model, "corpus": args.corpus}, seeds)
    model, corpus, cache = _load_pair(args)
    cfg = make_config(args.env)
    ccfg = ControllerConfig(K=args.K, epsilon=args.epsilon, gamma=args.gamma,
                            action_low=tuple(cfg.action_low), action_high=tuple(cfg.action_high))
    rows, trace_rows = [], []
    for seed in seeds:
        noise = np.random.default_rng(20_000 + seed)
        perturb = (lambda t, a, _r, _n=noise: a + _n.normal(0.0, args.sigma, np.shape(a))
                   if t >= args.inject_at else a)
        _, recs, score = rollout(_env(args.env, args.mode, cfg), AOCPolicy(model, cache, ccfg),
                                 cfg.horizon, np.random.default_rng(seed), perturb)
        trace = [r.decomposition.residual for r in recs]
        flags, thr = ood_detect(trace, (args.calibration_start, args.inject_at))
        rows.append({"seed": seed, "score": repr(score), "threshold": repr(thr),
                     "pre_flag_rate": repr(float(np.mean(flags[args.calibration_start:args.inject_at]))),
                     "post_flag_rate": repr(float(np.mean(flags[args.inject_at:])))})
        trace_rows += [{"seed": seed, "t": t, "residual": repr(float(r)), "flagged": bool(f)}
                       for t, (r, f) in enumerate(zip(trace, flags))]
    _write_rows(out / "summary.csv", rows)
    _write_rows(out / "residuals.csv", trace_rows)
    man.finalize({"summary": out / "summary.csv", "residuals": out / "residuals.csv"})


def cmd_exp_run(args):
    from .experiments import run_experiment

    out = Path(args.out)
    man = RunManifest(out / "manifest.json", sys.argv, _config_of(args), {}, [])
    verdict = run_experiment(args.name, out, args.scale)
    man.finalize({"results": out / "results.csv", "verdicts": out / "verdicts.json"},
                 passed=verdict["pass"], seconds=verdict["seconds"])
    for name, check in verdict["checks"].items():
        print(f"{'PASS' if check['pass'] else 'FAIL'}  {name}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _controller_flags(p):
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--env", default="pendulum-het", choices=["pendulum-het", "maze", "two-gates"])
    p.add_argument("--mode", default="Normal", choices=["Normal", "Converse"])
    p.add_argument("--seeds", default="0")
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--out", required=True)


def _train_flags(p):
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--d-b", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--epochs", type=int, default=4000)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="aoc", description="Accountable offline control toolkit")
    parser.add_argument("--config", help="JSON file of defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", help="simulate a logged dataset")
    p.add_argument("--env", default="pendulum-het", choices=["pendulum-het", "maze", "two-gates"])
    p.add_argument("--n", type=int, default=30_000, help="transitions (pendulum) or lower bound")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.2, help="pendulum exploration rate")
    p.add_argument("--per-expert", type=int, default=250, help="maze trajectories per expert")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = subs["build-corpus"] = sub.add_parser("build-corpus", help="dataset -> decision corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--resample", action="append", metavar="TAG:RATE")
    p.add_argument("--strip-rewards", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_corpus)

    p = subs["train-belief"] = sub.add_parser("train-belief", help="fit the belief encoder")
    _train_flags(p)
    p.add_argument("--mode", default="value", choices=["value", "sbi"])
    p.set_defaults(func=cmd_train_belief)

    p = subs["train-abc"] = sub.add_parser("train-abc", help="fit a reward-free imitation encoder")
    _train_flags(p)
    p.set_defaults(func=cmd_train_abc)

    p = subs["rollout"] = sub.add_parser("rollout", help="run the controller with provenance logs")
    _controller_flags(p)
    p.add_argument("--k-search", type=int, default=None)
    p.add_argument("--hull-mode", default="auto", choices=["auto", "enumeration", "heuristic"])
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--no-candidates", action="store_true", help="omit per-candidate log fields")
    p.set_defaults(func=cmd_rollout)

    p = subs["eval-abc"] = sub.add_parser("eval-abc", help="held-out agreement on the clinic task")
    p.add_argument("--holdout", type=float, default=0.0909)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-b", type=int, default=6)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_abc)

    p = subs["ood-run"] = sub.add_parser("ood-run", help="residual monitoring with injected noise")
    _controller_flags(p)
    p.add_argument("--inject-at", type=int, default=100)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--calibration-start", type=int, default=20)
    p.set_defaults(func=cmd_ood_run)

    p = subs["exp"] = sub.add_parser("exp", help="experiment recipes")
    esub = p.add_subparsers(dest="exp_command", required=True)
    r = esub.add_parser("run", help="run one recipe")
    r.add_argument("name")
    r.add_argument("--out", required=True)
    r.add_argument("--scale", default="desk", choices=["desk", "paper"])
    r.set_defaults(func=cmd_exp_run)
    subs["exp run"] = r
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        _need(known.config)
        try:
            overrides = json.loads(Path(known.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"--config is not valid JSON ({exc})") from None
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        for p in subs.values():
            p.set_defaults(**overrides)
            # a config value satisfies a required flag
            for action in p._actions:
                if action.dest in overrides:
                    action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except AOCError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    threads = os.environ.get("AOC_THREADS")
    if threads is not None and not threads.isdigit():
        print("error: usage: AOC_THREADS must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        args.func(args)
    except AOCError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ValueError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if os.environ.get("AOC_VERBOSE"):
        print(f"done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
