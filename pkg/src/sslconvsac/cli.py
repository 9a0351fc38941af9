"""Command line entry point: ``python -m sslconvsac <command>``.

Commands mirror the experiment workflow: ``gen-data``, ``train``, ``eval``,
``matrix``, ``online`` and ``plot``.  Configuration comes from a JSON file
(``--config``) with selected fields overridable by flags; the output root
defaults to ``$SSLCONVSAC_OUT`` or ``./runs``.  The exit code is 2 for
configuration errors and 0 otherwise, including runs that diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .binsim import load_eval_set, save_eval_set
from .errors import ConfigurationError, UsageError
from .net import load_checkpoint, save_checkpoint
from .trainer import ReplayBuffer, ReplaySample
from .weights import MethodConfig

log = logging.getLogger("sslconvsac")


def _load_json(path):
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def _experiment(args):
    d = _load_json(args.config)
    for flag, key in (("epochs", "epochs"), ("train_points", "train_points"),
                      ("eval_scenes", "eval_scenes"), ("steps_per_epoch", "steps_per_epoch"),
                      ("out", "output_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "seeds", None):
        d["seeds"] = args.seeds
    if getattr(args, "lr", None) is not None:
        d.setdefault("train", {})["learning_rate"] = args.lr
    return harness.ExperimentConfig.from_dict(d)


def _method_from_args(args):
    d = {"method": args.method}
    for flag, key in (("tau", "tau"), ("tau_lb", "tau_lb"), ("budget", "budget")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = int(v) if key == "budget" and v != "full" else v
    d["soft_weight"] = args.soft
    d["contextual"] = args.contextual
    return MethodConfig.from_dict(d)


def _samples_to_buffer(samples, capacity, seed):
    buf = ReplayBuffer(max(capacity, len(samples), 1), seed=seed)
    for s in samples:
        buf.push(ReplaySample(s.state, tuple(s.pixel), np.asarray(s.action), int(s.reward)))
    return buf


# commands ----------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _experiment(args)
    out = Path(cfg.output_dir)
    seed = cfg.seeds[0]
    policy = harness.make_policy(cfg.collector, None, cfg.collector_noise, cfg.collector_explore)
    train, scenes = harness.collect_offline(cfg.env, policy, cfg.train_points, seed=seed, return_scenes=True)
    rows = [harness.EvalSample(s.state, s.pixel, s.action, s.reward, i) for i, s in enumerate(train)]
    save_eval_set(out / "train", rows, dict(enumerate(scenes)))
    ev, ev_scenes = harness.make_eval_set(cfg.env, cfg.eval_scenes, cfg.eval_negatives,
                                          seed=cfg.eval_seed, return_scenes=True)
    save_eval_set(out / "eval", ev, ev_scenes)
    print(json.dumps({"train": len(train), "train_success": float(np.mean([s.reward for s in train])),
                      "eval": len(ev), "eval_positive": float(np.mean([s.reward for s in ev])),
                      "dir": str(out)}))


def cmd_train(args):
    cfg = _experiment(args)
    entry = _method_from_args(args)
    seed = cfg.seeds[0]
    buf = None
    if args.data:
        buf = _samples_to_buffer(load_eval_set(Path(args.data) / "train"), cfg.train.buffer_capacity, seed)
    ev = load_eval_set(Path(args.data) / "eval") if args.data else harness.build_eval_set(cfg)
    learner, rows = harness.train_run(cfg, entry, seed, eval_set=ev, buffer=buf,
                                      on_epoch=lambda r: log.info("epoch %d mse %s", r["epoch"], r["eval_mse"]))
    d = harness.run_dir(cfg, entry, seed)
    harness.write_csv(d / "curve.csv", rows, harness.CURVE_COLUMNS)
    save_checkpoint(d / "model.ckpt", learner.model, learner.ema,
                    {"method": entry.to_dict(), "seed": seed, "steps": learner.steps})
    print(json.dumps({"run": str(d), "final_mse": rows[-1]["eval_mse"],
                      "aborted_steps": learner.aborted_steps}))


def cmd_eval(args):
    model, ema, extra = load_checkpoint(args.checkpoint)
    if args.data:
        ev = load_eval_set(Path(args.data) / "eval")
    else:
        ev = harness.build_eval_set(_experiment(args))
    chosen = ema.model if (ema is not None and not args.live) else model
    print(json.dumps({"mse": harness.evaluate_mse(chosen, ev), "samples": len(ev),
                      "model": "live" if chosen is model else "ema"}))


def cmd_matrix(args):
    cfg = _experiment(args)
    summaries = harness.run_matrix(cfg, workers=args.workers)
    for s in summaries:
        std = "" if s.std_mse is None else f" +- {s.std_mse:.5f}"
        flag = " DIVERGED" if any(s.diverged) else ""
        print(f"{s.label:40s} {s.mean_mse:.5f}{std}{flag}")


def cmd_online(args):
    d = _load_json(args.config)
    if args.out is not None:
        d["output_dir"] = args.out
    if args.grasps is not None:
        d["n_grasps"] = args.grasps
    if args.seeds:
        d["seeds"] = args.seeds
    cfg = harness.OnlineConfig.from_dict(d)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    warm = load_checkpoint(args.warm_start)[0] if args.warm_start else None
    res = harness.run_online(cfg, warm_start=warm)
    for label, finals in res.items():
        print(f"{label:40s} median trailing success {np.median(finals):.3f}  {finals}")


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.csv:
        rows = [r for r in harness.read_csv(path) if r.get(args.y, "") != ""]
        if not rows:
            raise UsageError(f"{path} has no column {args.y!r} values")
        ax.plot([float(r[args.x]) for r in rows], [float(r[args.y]) for r in rows],
                label=Path(path).parent.name if Path(path).name == "curve.csv" else Path(path).stem)
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.y)
    if args.log:
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, format="svg")
    print(args.out)


# parser ------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="experiment JSON file")
    p.add_argument("--out", help="output directory (default $SSLCONVSAC_OUT or ./runs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--train-points", dest="train_points", type=int)
    p.add_argument("--eval-scenes", dest="eval_scenes", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--lr", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="sslconvsac", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect a training buffer and build the eval set")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one method on one seed and save a checkpoint")
    _common(p)
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--method", default="none", choices=["none", "fixmatch", "flexmatch", "freematch"])
    p.add_argument("--tau", type=float)
    p.add_argument("--tau-lb", dest="tau_lb", type=float)
    p.add_argument("--budget")
    p.add_argument("--soft", action="store_true")
    p.add_argument("--contextual", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="MSE of a checkpoint on the eval set")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--live", action="store_true", help="score the live model instead of the EMA")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("matrix", help="run every method entry x seed")
    _common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("online", help="online grasp learning comparison")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--grasps", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--warm-start", dest="warm_start", help="checkpoint to start from")
    p.set_defaults(fn=cmd_online)

    p = sub.add_parser("plot", help="render CSV curves to SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--x", default="epoch")
    p.add_argument("--y", default="eval_mse")
    p.add_argument("--log", action="store_true")
    p.add_argument("--out", default="curves.svg")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
