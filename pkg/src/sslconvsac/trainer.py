"""Replay buffer, labeled and pseudo-labeled actor-critic losses, online loop.

Episodes last one grasp, so the critic target is always the stored reward
(labeled pixel) or a pseudo label (unlabeled pixels); nothing is bootstrapped.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, align_map, map_pixel, strong_augment, weak_augment
from .autodiff import Tape, Tensor
from .binsim import _derive_seed, execute_grasp, generate_scene, remove_object
from .errors import NumericError, UsageError
from .net import ANGLE_LIMITS, ConvSAC, EmaModel, select_grasp
from .optim import AdamState, adam_step
from .weights import (
    FlexMatchTally,
    MethodConfig,
    apply_topk_budget,
    compose_lambda,
    confident_counts,
    flexmatch_from_counts,
    freematch_update,
    init_threshold_state,
)

log = logging.getLogger(__name__)

BIN_ATTEMPTS = 15
TRAILING_BINS = 15


@dataclass
class ReplaySample:
    state: np.ndarray
    pixel: tuple
    action: np.ndarray
    reward: int


class ReplayBuffer:
    """Fixed-capacity FIFO ring with seeded uniform sampling."""

    def __init__(self, capacity=500, seed=0):
        if capacity < 1:
            raise UsageError("capacity must be positive")
        self.capacity = capacity
        self._items = [None] * capacity
        self._next = 0
        self._size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def push(self, sample):
        """Store ``sample``; returns its slot index (reused slots are evictions)."""
        slot = self._next
        self._items[slot] = sample
        self._next = (slot + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return slot

    def slots(self):
        """Occupied slots, oldest first."""
        start = (self._next - self._size) % self.capacity
        return [(start + i) % self.capacity for i in range(self._size)]

    def __iter__(self):
        return (self._items[s] for s in self.slots())

    def __getitem__(self, slot):
        return self._items[slot]

    def sample(self, batch_size, rng=None):
        if self._size == 0:
            raise UsageError("cannot sample from an empty buffer")
        rng = rng or self.rng
        occupied = self.slots()
        idx = rng.choice(len(occupied), size=batch_size, replace=len(occupied) < batch_size)
        chosen = [occupied[i] for i in idx]
        return chosen, [self._items[s] for s in chosen]


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    entropy_alpha: float = 0.2
    steps_per_grasp: int = 10
    ema_momentum: float = 0.99
    buffer_capacity: int = 500
    hidden: int = 16
    critic_hidden: int = 16
    seed: int = 0
    method: MethodConfig = field(default_factory=lambda: MethodConfig(method="none"))
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.method, dict):
            self.method = MethodConfig.from_dict(self.method)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.learning_rate <= 0 or self.steps_per_grasp < 1:
            raise UsageError("batch_size, learning_rate and steps_per_grasp must be positive")

    def to_dict(self):
        d = asdict(self)
        d["augment"]["color_ops"] = list(d["augment"]["color_ops"])
        return d


@dataclass
class LossBreakdown:
    critic_l: float = 0.0
    actor_l: float = 0.0
    critic_u: float = 0.0
    actor_u: float = 0.0
    critic: float = 0.0
    actor: float = 0.0
    accepted: int = 0
    mean_lambda: float = 0.0
    tau_summary: str = ""
    aborted: bool = False
    message: str = ""


# losses ---------------------------------------------------------------------------

def _stack_states(batch):
    return np.stack([s.state for s in batch])


def _pixels(batch):
    return (np.array([s.pixel[0] for s in batch]), np.array([s.pixel[1] for s in batch]))


def labeled_critic_loss(q_map, rows, cols, rewards):
    """Batch-mean BCE of the quality map at each sample's labeled pixel."""
    n, h, w = q_map.shape
    q_px = ad.gather_pixels(ad.reshape(q_map, (n, 1, h, w)), rows, cols)
    target = np.asarray(rewards, dtype=np.float64).reshape(n, 1, 1, 1)
    return ad.mean(ad.bce_map(q_px, target))


def unlabeled_critic_loss(q_map, pseudo, lam, n_u):
    """``sum(lam * BCE(q, pseudo)) / n_u``, averaged over the batch."""
    n = q_map.shape[0]
    return ad.tsum(ad.bce_map(q_map, pseudo) * lam) * (1.0 / (n * n_u))


def labeled_losses(batch, model, entropy_alpha, rng, emb=None):
    """Critic BCE at the replayed action and SAC actor loss with a fresh action.

    Both act only at the labeled pixel.  The actor branch sees a detached
    embedding, so its loss never reaches the encoder.
    """
    if not batch:
        raise UsageError("empty batch")
    states = _stack_states(batch)
    rows, cols = _pixels(batch)
    emb = model.encode(states) if emb is None else emb
    n, _, h, w = emb.shape
    stored = np.stack([np.asarray(s.action, dtype=np.float64) for s in batch])
    q = model.critic_from_embedding(emb, np.broadcast_to(stored[:, :, None, None], (n, 3, h, w)))
    critic = labeled_critic_loss(q, rows, cols, [s.reward for s in batch])

    emb_px = ad.gather_pixels(emb.detach(), rows, cols)
    act = model.actor_from_embedding(emb_px, "sample", rng)
    q_new = model.critic_from_embedding(emb_px, act.angles)
    actor = ad.mean(act.logprob * entropy_alpha - q_new)
    return critic, actor


def unlabeled_losses(strong_states, model, lam, pseudo, entropy_alpha, rng):
    """Consistency losses on the strong views.

    ``lam`` and ``pseudo`` are ``(N, H, W)`` arrays already in the strong
    frames.  The critic is scored at the actor's mean action (held constant);
    the actor term uses a reparameterised sample through a detached embedding.
    """
    lam = np.asarray(lam, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    states = np.asarray(strong_states)
    if lam.shape != pseudo.shape or lam.shape != (states.shape[0],) + states.shape[2:]:
        raise UsageError(f"weights {lam.shape} / pseudo {pseudo.shape} do not match states {states.shape}")
    n, h, w = lam.shape
    n_u = h * w - 1
    emb = model.encode(states)
    frozen = emb.detach()
    mean_act = model.actor_from_embedding(frozen, "mean").angles.data
    q = model.critic_from_embedding(emb, mean_act)
    critic = unlabeled_critic_loss(q, pseudo, lam, n_u)
    act = model.actor_from_embedding(frozen, "sample", rng)
    q_act = model.critic_from_embedding(frozen, act.angles)
    actor = ad.tsum((act.logprob * entropy_alpha - q_act) * lam) * (1.0 / (n * n_u))
    return critic, actor


# learner ------------------------------------------------------------------------

class Learner:
    """Live model, EMA shadow, optimiser and curriculum state for one run."""

    def __init__(self, config=None, model=None, shape=(32, 32)):
        self.config = config or TrainConfig()
        cfg = self.config
        self.model = model or ConvSAC(cfg.hidden, cfg.critic_hidden, seed=cfg.seed)
        self.ema = EmaModel(self.model, cfg.ema_momentum)
        self.adam = AdamState(cfg.learning_rate, cfg.betas[0], cfg.betas[1], cfg.weight_decay)
        self.rng = np.random.default_rng(_derive_seed(cfg.seed, 7))
        self.shape = tuple(shape)
        self.thresholds = init_threshold_state(cfg.method, self.shape)
        m = cfg.method
        self.tally = FlexMatchTally(m.tau, m.contextual, self.shape) if m.method == "flexmatch" else None
        self.steps = 0
        self.aborted_steps = 0

    @property
    def params(self):
        return self.model.critic_params + self.model.actor_params

    def _pseudo_targets(self, slots, batch, buffer):
        cfg, m = self.config, self.config.method
        weak = [weak_augment(s.state, self.rng, cfg.augment) for s in batch]
        strong = [strong_augment(s.state, self.rng, cfg.augment) for s in batch]
        q_weak, _ = self.ema.model.predict(np.stack([v.state for v in weak]))
        h, w = self.shape
        q_al = np.zeros((len(batch), h, w))
        masks = np.zeros((len(batch), h, w), dtype=bool)
        valid = np.zeros_like(masks)
        labeled = []
        for i, (s, wv, sv) in enumerate(zip(batch, weak, strong)):
            q_al[i], v1 = align_map(q_weak[i], wv.transform, sv.transform, "nearest")
            wvalid, _ = align_map(wv.validity_mask, wv.transform, sv.transform, "nearest")
            valid[i] = (v1 > 0) & (wvalid > 0) & (sv.validity_mask > 0)
            lp = map_pixel(s.pixel, sv.transform, (h, w))
            labeled.append(lp)
            masks[i] = valid[i]
            if lp is not None:
                masks[i, lp[0], lp[1]] = False

        if m.method == "freematch":
            self.thresholds = freematch_update(q_al, masks, self.thresholds)
        elif m.method == "flexmatch":
            if m.flexmatch_exact:
                self.thresholds = self._flexmatch_recount(buffer)
            else:
                for slot, qi, mi in zip(slots, q_al, masks):
                    self.tally.update(slot, qi, mi)
                self.thresholds = flexmatch_from_counts(
                    self.tally.sigma, self.tally.n_total(len(buffer)), self.thresholds)

        lam = np.zeros_like(q_al)
        for i in range(len(batch)):
            lam[i] = compose_lambda(m, q_al[i], labeled[i], valid[i], self.thresholds)
            lam[i] = apply_topk_budget(lam[i], m.budget, np.maximum(q_al[i], 1.0 - q_al[i]))
        pseudo = (q_al > 0.5).astype(np.float64)
        return np.stack([v.state for v in strong]), pseudo, lam

    def _flexmatch_recount(self, buffer):
        """Exact mode: EMA predictions on every unaugmented buffer state."""
        m = self.config.method
        items = list(buffer)
        q, _ = self.ema.model.predict(np.stack([s.state for s in items]))
        masks = np.ones(q.shape, dtype=bool)
        for i, s in enumerate(items):
            masks[i, s.pixel[0], s.pixel[1]] = False
        sigma, total = confident_counts(q, masks, m.tau, m.contextual)
        return flexmatch_from_counts(sigma, total, self.thresholds)

    def train_step(self, buffer):
        """Sample a batch, update thresholds and weights, take one optimiser step."""
        cfg = self.config
        slots, batch = buffer.sample(cfg.batch_size, self.rng)
        ssl = cfg.method.method != "none"
        out = LossBreakdown()
        try:
            if ssl:
                strong, pseudo, lam = self._pseudo_targets(slots, batch, buffer)
                out.accepted = int((lam > 0).sum())
                out.mean_lambda = float(lam.mean())
            out.tau_summary = self.thresholds.summary() if ssl else ""
            with Tape() as tape:
                critic_l, actor_l = labeled_losses(batch, self.model, cfg.entropy_alpha, self.rng)
                if ssl and out.accepted:
                    critic_u, actor_u = unlabeled_losses(strong, self.model, lam, pseudo,
                                                         cfg.entropy_alpha, self.rng)
                else:
                    critic_u = actor_u = Tensor(0.0)
                critic = critic_l + critic_u
                actor = actor_l + actor_u
            g_critic = tape.backward(critic, wrt=self.model.critic_params)
            g_actor = tape.backward(actor, wrt=self.model.actor_params)
            grads = [g_critic[p] for p in self.model.critic_params] + \
                    [g_actor[p] for p in self.model.actor_params]
            if not all(np.isfinite(g).all() for g in grads):
                raise NumericError("backward")
        except NumericError as exc:
            self.aborted_steps += 1
            out.aborted, out.message = True, str(exc)
            log.warning("step %d aborted: %s", self.steps, exc)
            self.steps += 1
            return out
        adam_step(self.params, grads, self.adam)
        self.ema.update(self.model)
        self.steps += 1
        out.critic_l, out.actor_l = float(critic_l.data), float(actor_l.data)
        out.critic_u, out.actor_u = float(critic_u.data), float(actor_u.data)
        out.critic, out.actor = float(critic.data), float(actor.data)
        return out


def train_step(learner, buffer):
    return learner.train_step(buffer)


# policies and the online loop ------------------------------------------------------

class GreedyPolicy:
    """Argmax of the live model's quality map with the mean action there."""

    def __init__(self, model):
        self.model = model

    def __call__(self, state, gt, rng):
        q, actions = self.model.predict(state)
        pixel, action, _ = select_grasp(q[0], actions[0])
        return pixel, action


class OraclePolicy:
    """Ground-truth quality/action maps injected in place of a network."""

    def __call__(self, state, gt, rng):
        pixel, action, _ = select_grasp(gt.quality, gt.action)
        return pixel, action


class RandomPolicy:
    """Uniform pixel, straight-down approach."""

    def __call__(self, state, gt, rng):
        h, w = gt.quality.shape
        return (int(rng.integers(h)), int(rng.integers(w))), np.zeros(3)


class NoisyOraclePolicy:
    """Stand-in for a warm-started collector.

    With probability ``explore`` it grasps a uniform pixel with a small
    random tilt; otherwise it picks a uniform object pixel and perturbs the
    ground-truth approach angles with Gaussian noise of scale ``noise``.
    """

    def __init__(self, noise=0.05, explore=0.5):
        self.noise = noise
        self.explore = explore

    def __call__(self, state, gt, rng):
        h, w = gt.quality.shape
        fg = np.argwhere(gt.background_mask == 0)
        if rng.uniform() < self.explore or len(fg) == 0:
            pixel = (int(rng.integers(h)), int(rng.integers(w)))
            return pixel, rng.uniform(-1.0, 1.0, 3) * ANGLE_LIMITS * 0.3
        r, c = fg[int(rng.integers(len(fg)))]
        return (int(r), int(c)), gt.action[:, r, c] + rng.normal(0.0, self.noise, 3)


def trailing_success(bins, window=TRAILING_BINS):
    """Success ratio over the attempts of the latest ``window`` bins."""
    recent = bins[-window:]
    attempts = sum(b[1] for b in recent)
    return sum(b[0] for b in recent) / attempts if attempts else 0.0


def online_loop(env_spec, policy, n_grasps, learner=None, buffer=None, seed=0, on_grasp=None):
    """Grasp, store the sparse reward, train ``steps_per_grasp`` steps, repeat.

    A bin is replaced once it is cleared or after 15 attempts.  Returns one
    dict per grasp with the reward, trailing success over the latest 15 bins
    and the mean losses of the train steps that followed.
    """
    rng = np.random.default_rng(_derive_seed(seed, 11))
    if learner is not None and buffer is None:
        buffer = ReplayBuffer(learner.config.buffer_capacity, seed=_derive_seed(seed, 12))
    bins = []  # [successes, attempts] per bin
    rows = []
    bin_index = -1
    state = gt = None
    step = 0
    for g in range(n_grasps):
        if gt is None or bins[-1][1] >= BIN_ATTEMPTS or (bins[-1][1] > 0 and not gt.objects):
            bin_index += 1
            try:
                state, gt = generate_scene(env_spec.with_seed(_derive_seed(seed, bin_index, 13)))
            except Exception as exc:  # generation failure: skip this bin
                log.warning("scene %d skipped: %s", bin_index, exc)
                gt = None
                continue
            bins.append([0, 0])
        pixel, action = policy(state, gt, rng)
        reward = execute_grasp(state, gt, pixel, action)
        bins[-1][0] += reward
        bins[-1][1] += 1
        losses = []
        if learner is not None:
            buffer.push(ReplaySample(state.copy(), tuple(int(v) for v in pixel),
                                     np.asarray(action, dtype=np.float64), reward))
            for _ in range(learner.config.steps_per_grasp):
                losses.append(learner.train_step(buffer))
                step += 1
        if reward:
            obj = int(gt.object_map[pixel[0], pixel[1]])
            state, gt = remove_object(gt, obj)
        row = {"step": step, "grasp_index": g, "bin": bin_index, "reward": reward,
               "trailing_sr_15bins": trailing_success(bins)}
        ok = [l for l in losses if not l.aborted]
        for key in ("critic_l", "actor_l", "critic_u", "actor_u", "mean_lambda", "accepted"):
            row[key] = float(np.mean([getattr(l, key) for l in ok])) if ok else 0.0
        row["tau_summary"] = losses[-1].tau_summary if losses else ""
        rows.append(row)
        if on_grasp is not None:
            on_grasp(row)
    return rows
