"""Offline method matrix, evaluation and the online comparison.

A matrix run trains every method entry on every seed, evaluates the EMA
model on a fixed held-out set after each epoch, and writes::

    <out>/<label>_s<seed>/curve.csv      one row per epoch
    <out>/<label>_s<seed>/manifest.json  config fingerprint + final numbers
    <out>/summary.json                   mean/std per entry, divergence flags

A run whose manifest fingerprint matches the current config is not redone.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binsim import EvalSample, SceneSpec, _derive_seed, execute_grasp, generate_scene, make_eval_set
from .errors import ConfigurationError
from .net import ConvSAC
from .trainer import (
    GreedyPolicy,
    Learner,
    NoisyOraclePolicy,
    OraclePolicy,
    RandomPolicy,
    ReplayBuffer,
    ReplaySample,
    TrainConfig,
    online_loop,
)
from .weights import MethodConfig, apply_topk_budget  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

OUTPUT_ENV = "SSLCONVSAC_OUT"
CURVE_COLUMNS = ["epoch", "step", "critic_l", "actor_l", "critic_u", "actor_u",
                 "accepted_pixels", "mean_lambda", "aborted_steps", "eval_mse"]
ONLINE_COLUMNS = ["step", "grasp_index", "bin", "reward", "trailing_sr_15bins", "critic_l",
                  "actor_l", "critic_u", "actor_u", "mean_lambda", "accepted", "tau_summary"]


def default_output_dir():
    return os.environ.get(OUTPUT_ENV, "runs")


def make_policy(name, model=None, noise=0.05, explore=0.5):
    if name == "random":
        return RandomPolicy()
    if name == "noisy-oracle":
        return NoisyOraclePolicy(noise, explore)
    if name == "oracle":
        return OraclePolicy()
    if name == "greedy":
        if model is None:
            raise ConfigurationError("greedy collection needs a model")
        return GreedyPolicy(model)
    raise ConfigurationError(f"unknown policy {name!r}")


@dataclass
class ExperimentConfig:
    env: SceneSpec = field(default_factory=SceneSpec)
    train_points: int = 500
    eval_scenes: int = 200
    eval_negatives: int = 2
    eval_seed: int = 10_007
    collector: str = "noisy-oracle"
    collector_noise: float = 0.05
    collector_explore: float = 0.2
    matrix: list = field(default_factory=lambda: [MethodConfig("none"), MethodConfig("fixmatch")])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 200
    steps_per_epoch: int = 0          # 0: train_points // batch_size
    eval_every: int = 1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3))
    divergence_factor: float = 10.0
    output_dir: str = ""

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = SceneSpec(**_tuples(self.env, ("n_objects", "radius", "object_height", "kinds")))
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.matrix = [m if isinstance(m, MethodConfig) else MethodConfig.from_dict(m) for m in self.matrix]
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if not self.matrix:
            raise ConfigurationError("matrix must have at least one entry")
        if self.train_points < 1 or self.eval_scenes < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigurationError("dataset sizes, epochs and eval_every must be positive")
        if self.eval_negatives < 0 or self.steps_per_epoch < 0:
            raise ConfigurationError("eval_negatives and steps_per_epoch must be >= 0")
        labels = [m.label for m in self.matrix]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate matrix entries: {labels}")
        self.output_dir = self.output_dir or default_output_dir()

    @property
    def epoch_steps(self):
        return self.steps_per_epoch or max(1, self.train_points // self.train.batch_size)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["env"] = asdict(self.env)
        d["train"] = self.train.to_dict()
        d["matrix"] = [m.to_dict() for m in self.matrix]
        return d


def _tuples(d, keys):
    d = dict(d)
    for k in keys:
        if k in d and d[k] is not None:
            d[k] = tuple(d[k])
    return d


@dataclass
class RunSummary:
    label: str
    method: dict
    seeds: list
    final_mse: list
    mean_mse: float
    std_mse: float | None          # sample std, omitted below two seeds
    diverged: list
    aborted_steps: list
    wall_clock: float

    def to_dict(self):
        return asdict(self)


# data --------------------------------------------------------------------------

def collect_offline(env_spec, policy, n, seed=0, return_scenes=False):
    """``n`` one-grasp samples, each on a freshly generated scene.

    With ``return_scenes`` the ``(state, gt)`` pairs come back as a second list.
    """
    rng = np.random.default_rng(_derive_seed(seed, 21))
    out, scenes = [], []
    for i in range(n):
        state, gt = generate_scene(env_spec.with_seed(_derive_seed(seed, i, 22)))
        if return_scenes:
            scenes.append((state, gt))
        pixel, action = policy(state, gt, rng)
        pixel = (int(pixel[0]), int(pixel[1]))
        action = np.asarray(action, dtype=np.float64)
        out.append(ReplaySample(state, pixel, action, execute_grasp(state, gt, pixel, action)))
    return (out, scenes) if return_scenes else out


def build_eval_set(config):
    return make_eval_set(config.env, config.eval_scenes, config.eval_negatives, seed=config.eval_seed)


def build_buffer(config, seed, model=None):
    policy = make_policy(config.collector, model, config.collector_noise, config.collector_explore)
    buf = ReplayBuffer(max(config.train.buffer_capacity, 1), seed=_derive_seed(seed, 23))
    for s in collect_offline(config.env, policy, config.train_points, seed=_derive_seed(seed, 24)):
        buf.push(s)
    return buf


def predict_at(model, states, pixels, actions, batch=64):
    """Quality at each ``pixels[i]`` when acting with ``actions[i]``."""
    out = np.empty(len(states))
    for lo in range(0, len(states), batch):
        st = np.stack(states[lo:lo + batch])
        act = np.stack(actions[lo:lo + batch]).astype(np.float64)
        n, _, h, w = st.shape
        emb = model.encode(st)
        q = model.critic_from_embedding(emb, np.broadcast_to(act[:, :, None, None], (n, 3, h, w))).data
        px = pixels[lo:lo + batch]
        out[lo:lo + n] = q[np.arange(n), [p[0] for p in px], [p[1] for p in px]]
    return out


def evaluate_mse(model, eval_set):
    """Mean of ``(Q(s)[pixel] - r)^2`` with each sample's own action."""
    if not eval_set:
        raise ConfigurationError("empty eval set")
    pred = predict_at(model, [s.state for s in eval_set], [s.pixel for s in eval_set],
                      [s.action for s in eval_set])
    r = np.array([s.reward for s in eval_set], dtype=np.float64)
    return float(np.mean((pred - r) ** 2))


# one run -------------------------------------------------------------------------

def _fingerprint(config, entry, seed):
    d = config.to_dict()
    d.pop("output_dir")
    d.pop("matrix")
    d.pop("seeds")
    d.pop("divergence_factor")
    blob = json.dumps([d, entry.to_dict(), seed], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_dir(config, entry, seed):
    return Path(config.output_dir) / f"{entry.label}_s{seed}"


def train_run(config, entry, seed, eval_set=None, buffer=None, on_epoch=None):
    """Train one matrix entry for one seed; returns ``(learner, curve rows)``."""
    eval_set = eval_set if eval_set is not None else build_eval_set(config)
    buffer = buffer if buffer is not None else build_buffer(config, seed)
    tc = TrainConfig(**{**config.train.to_dict(), "method": entry, "seed": seed})
    learner = Learner(tc, shape=(config.env.height, config.env.width))
    rows = []
    for epoch in range(1, config.epochs + 1):
        parts = [learner.train_step(buffer) for _ in range(config.epoch_steps)]
        ok = [p for p in parts if not p.aborted]
        row = {"epoch": epoch, "step": learner.steps}
        for key in ("critic_l", "actor_l", "critic_u", "actor_u"):
            row[key] = float(np.mean([getattr(p, key) for p in ok])) if ok else float("nan")
        row["accepted_pixels"] = float(np.mean([p.accepted for p in ok])) if ok else 0.0
        row["mean_lambda"] = float(np.mean([p.mean_lambda for p in ok])) if ok else 0.0
        row["aborted_steps"] = learner.aborted_steps
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            row["eval_mse"] = evaluate_mse(learner.ema.model, eval_set)
        else:
            row["eval_mse"] = ""
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return learner, rows


def write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_one(args):
    config, entry, seed = args
    d = run_dir(config, entry, seed)
    fp = _fingerprint(config, entry, seed)
    manifest = d / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        if m.get("fingerprint") == fp and (d / "curve.csv").exists():
            log.info("%s seed %d already complete", entry.label, seed)
            return m
    t0 = time.perf_counter()
    learner, rows = train_run(config, entry, seed)
    write_csv(d / "curve.csv", rows, CURVE_COLUMNS)
    m = {"fingerprint": fp, "label": entry.label, "seed": seed,
         "final_mse": rows[-1]["eval_mse"], "aborted_steps": learner.aborted_steps,
         "wall_clock": time.perf_counter() - t0}
    manifest.write_text(json.dumps(m, indent=1))
    return m


def _final_from_csv(path):
    rows = [r for r in read_csv(path) if r["eval_mse"] != ""]
    return float(rows[-1]["eval_mse"])


def summarize(config, manifests):
    """Per-entry summaries; values are re-read from the curve files."""
    by_label = {}
    for m in manifests:
        by_label.setdefault(m["label"], []).append(m)
    finals = {}
    for entry in config.matrix:
        finals[entry.label] = [_final_from_csv(run_dir(config, entry, s) / "curve.csv")
                               for s in config.seeds]
    base = [entry.label for entry in config.matrix if entry.method == "none"]
    ref = float(np.median(finals[base[0]])) if base else None
    out = []
    for entry in config.matrix:
        ms = sorted(by_label[entry.label], key=lambda m: config.seeds.index(m["seed"]))
        fin = finals[entry.label]
        aborted = [int(m["aborted_steps"]) for m in ms]
        div = [bool((not np.isfinite(f)) or a > 0 or (ref is not None and f >= config.divergence_factor * ref))
               for f, a in zip(fin, aborted)]
        out.append(RunSummary(
            label=entry.label, method=entry.to_dict(), seeds=list(config.seeds), final_mse=fin,
            mean_mse=float(np.mean(fin)), std_mse=float(np.std(fin, ddof=1)) if len(fin) >= 2 else None,
            diverged=div, aborted_steps=aborted, wall_clock=float(sum(m["wall_clock"] for m in ms))))
    return out


def run_matrix(config, workers=1):
    """Train and evaluate every entry x seed; returns the list of :class:`RunSummary`."""
    jobs = [(config, entry, seed) for entry in config.matrix for seed in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            manifests = list(pool.map(_run_one, jobs))
    else:
        manifests = [_run_one(j) for j in jobs]
    summaries = summarize(config, manifests)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": config.to_dict(), "baseline_median_mse": _baseline_median(summaries),
           "runs": [s.to_dict() for s in summaries]}
    (out / "summary.json").write_text(json.dumps(doc, indent=1))
    return summaries


def _baseline_median(summaries):
    for s in summaries:
        if s.method["method"] == "none":
            return float(np.median(s.final_mse))
    return None


# online comparison ---------------------------------------------------------------------

@dataclass
class OnlineConfig:
    env: SceneSpec = field(default_factory=SceneSpec)
    n_grasps: int = 300
    methods: list = field(default_factory=lambda: [MethodConfig("none"), MethodConfig("fixmatch")])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3))
    pretrain_steps: int = 3000        # labeled-only warm start on an offline collection; 0: from scratch
    prefill: bool = True              # online replay starts with that offline collection
    output_dir: str = ""

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = SceneSpec(**_tuples(self.env, ("n_objects", "radius", "object_height", "kinds")))
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.methods = [m if isinstance(m, MethodConfig) else MethodConfig.from_dict(m) for m in self.methods]
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if self.n_grasps < 1:
            raise ConfigurationError("n_grasps must be positive")
        if self.pretrain_steps < 0:
            raise ConfigurationError("pretrain_steps must be >= 0")
        self.output_dir = self.output_dir or default_output_dir()

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc


def prepare_online(config, seed, pretrain=True):
    """Offline collection for ``seed`` and the labeled-only model pretrained on it.

    Every method of one seed starts from the same pair, so online budgets compare
    like with like.  The model is None when pretraining is off.
    """
    offline = ExperimentConfig(env=config.env, train=config.train, seeds=[seed], output_dir=config.output_dir)
    buffer = build_buffer(offline, seed)
    if not (pretrain and config.pretrain_steps):
        return None, list(buffer)
    tc = TrainConfig(**{**config.train.to_dict(), "method": MethodConfig("none"), "seed": seed})
    learner = Learner(tc, shape=(config.env.height, config.env.width))
    for _ in range(config.pretrain_steps):
        learner.train_step(buffer)
    return learner.model, list(buffer)


def online_run(config, entry, seed, warm_start=None, prepared=None):
    """Online learning from the warm start; returns per-grasp rows.

    ``warm_start`` overrides the pretrained model; ``prepared`` reuses the
    output of :func:`prepare_online`.
    """
    if prepared is None:
        prepared = prepare_online(config, seed, pretrain=warm_start is None)
    model, offline = prepared
    model = warm_start if warm_start is not None else model
    tc = TrainConfig(**{**config.train.to_dict(), "method": entry, "seed": seed})
    learner = Learner(tc, model=model.clone() if model is not None else None,
                      shape=(config.env.height, config.env.width))
    buffer = ReplayBuffer(tc.buffer_capacity, seed=_derive_seed(seed, 12))
    if config.prefill:
        for sample in offline:
            buffer.push(sample)
    return online_loop(config.env, GreedyPolicy(learner.model), config.n_grasps,
                       learner=learner, buffer=buffer, seed=seed)


def run_online(config, warm_start=None):
    """Every method x seed; writes one CSV per run and returns final trailing success."""
    results = {entry.label: [] for entry in config.methods}
    for seed in config.seeds:
        prepared = prepare_online(config, seed, pretrain=warm_start is None)
        for entry in config.methods:
            rows = online_run(config, entry, seed, warm_start, prepared)
            write_csv(Path(config.output_dir) / f"online_{entry.label}_s{seed}.csv", rows, ONLINE_COLUMNS)
            results[entry.label].append(rows[-1]["trailing_sr_15bins"])
    (Path(config.output_dir) / "online_summary.json").write_text(json.dumps(
        {"final_trailing_sr": results,
         "median": {k: float(np.median(v)) for k, v in results.items()}}, indent=1))
    return results


def untrained_success(env_spec, n_grasps, seed=0, model=None):
    model = model or ConvSAC(seed=seed)
    rows = online_loop(env_spec, GreedyPolicy(model), n_grasps, seed=seed)
    return rows[-1]["trailing_sr_15bins"]
