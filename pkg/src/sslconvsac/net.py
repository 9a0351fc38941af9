"""Pixel-wise soft actor-critic network, EMA shadow, greedy grasp selection.

Layouts are channel-first: a scene state is ``(7, H, W)`` (RGB, normal xyz,
height in mm), an action map is ``(3, H, W)`` holding (yaw, pitch, roll) and a
quality map is ``(H, W)``.  Batched variants add a leading axis.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, UsageError

STATE_CHANNELS = 7
HEIGHT_SCALE = 0.01  # mm -> network input units
ANGLE_LIMITS = np.array([math.pi, math.pi / 4, math.pi / 4])  # yaw, pitch, roll
CHECKPOINT_VERSION = 1


def approach_direction(yaw, pitch, roll):
    """Unit approach vector ``Rz(yaw) Ry(pitch) Rx(roll) (0, 0, -1)``."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.stack([-cy * sp * cr - sy * sr, -sy * sp * cr + cy * sr, -cp * cr])


def direction_to_euler(d):
    """Euler angles (yaw = 0) whose approach vector is ``d``; ``d`` is ``(3, ...)``."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=0, keepdims=True)
    roll = np.arcsin(np.clip(d[1], -1.0, 1.0))
    pitch = np.arctan2(-d[0], -d[2])
    return np.stack([np.zeros_like(roll), pitch, roll])


def angle_between(a, b):
    """Angle in radians between the approach directions of two Euler triples."""
    da = approach_direction(*np.asarray(a, dtype=np.float64))
    db = approach_direction(*np.asarray(b, dtype=np.float64))
    return np.arccos(np.clip((da * db).sum(axis=0), -1.0, 1.0))


def _approach_tensor(angles):
    yaw = ad.channels(angles, 0, 1)
    pitch = ad.channels(angles, 1, 2)
    roll = ad.channels(angles, 2, 3)
    cy, sy = ad.cos(yaw), ad.sin(yaw)
    cp, sp = ad.cos(pitch), ad.sin(pitch)
    cr, sr = ad.cos(roll), ad.sin(roll)
    spcr = sp * cr
    dx = -(cy * spcr) - sy * sr
    dy = cy * sr - sy * spcr
    dz = -(cp * cr)
    return ad.concat([dx, dy, dz], axis=1)


def _normalise_states(states):
    x = np.array(states, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != STATE_CHANNELS:
        raise UsageError(f"expected state(s) shaped (N, 7, H, W), got {np.shape(states)}")
    x[:, 6] *= HEIGHT_SCALE
    return x


@dataclass
class ActorOutput:
    angles: Tensor      # (N, 3, H, W) Euler angles within ANGLE_LIMITS
    u: Tensor           # pre-squash sample
    mean: Tensor
    log_std: Tensor     # clamped
    logprob: Tensor     # (N, H, W)


class ConvSAC:
    """Shared pixel encoder feeding a Gaussian actor head and a sigmoid critic head.

    The encoder is two padding-preserving 3x3 conv + ReLU layers.  The actor
    is a 1x1 conv to per-pixel mean and log-std; the critic runs two 1x1 convs
    over the embedding concatenated with the action's approach vector.
    """

    def __init__(self, hidden=16, critic_hidden=16, seed=0):
        self.hidden = hidden
        self.critic_hidden = critic_hidden
        rng = np.random.default_rng(seed)
        self.params = OrderedDict()
        self._add("enc1", rng, hidden, STATE_CHANNELS, 3)
        self._add("enc2", rng, hidden, hidden, 3)
        self._add("actor", rng, 6, hidden, 1)
        self._add("critic1", rng, critic_hidden, hidden + 3, 1)
        self._add("critic2", rng, 1, critic_hidden, 1)

    def _add(self, name, rng, out_ch, in_ch, k):
        bound = 1.0 / math.sqrt(in_ch * k * k)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, k, k)),
                                          requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, out_ch),
                                          requires_grad=True, name=f"{name}.b")

    def group(self, prefix):
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    @property
    def critic_params(self):
        return self.group("enc") + self.group("critic")

    @property
    def actor_params(self):
        return self.group("actor")

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def clone(self):
        twin = ConvSAC.__new__(ConvSAC)
        twin.hidden, twin.critic_hidden = self.hidden, self.critic_hidden
        twin.params = OrderedDict(
            (n, Tensor(p.data.copy(), requires_grad=True, name=n)) for n, p in self.params.items())
        return twin

    def _conv(self, name, x):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    # forward pieces -----------------------------------------------------------

    def encode(self, states):
        x = Tensor(_normalise_states(states))
        return ad.relu(self._conv("enc2", ad.relu(self._conv("enc1", x))))

    def actor_from_embedding(self, emb, mode="mean", rng=None):
        if mode not in ("mean", "sample"):
            raise UsageError(f"unknown actor mode {mode!r}")
        head = self._conv("actor", emb)
        mean = ad.channels(head, 0, 3)
        log_std = ad.clamp(ad.channels(head, 3, 6), ad.LOG_STD_MIN, ad.LOG_STD_MAX)
        if mode == "sample":
            if rng is None:
                raise UsageError("sample mode needs an rng")
            noise = rng.standard_normal(mean.shape)
            u = mean + ad.exp(log_std) * noise
        else:
            u = mean
        limits = np.broadcast_to(ANGLE_LIMITS[None, :, None, None], mean.shape)
        angles = ad.tanh(u) * limits
        logprob = ad.gaussian_logprob(u, mean, log_std, squash=True)
        return ActorOutput(angles, u, mean, log_std, logprob)

    def critic_from_embedding(self, emb, actions):
        if not isinstance(actions, Tensor):
            actions = Tensor(actions)
        if actions.ndim == 3:
            actions = ad.reshape(actions, (1,) + actions.shape)
        n, _, h, w = emb.shape
        if actions.shape != (n, 3, h, w):
            raise UsageError(f"action map shape {actions.shape} does not match ({n}, 3, {h}, {w})")
        feats = ad.concat([emb, _approach_tensor(actions)], axis=1)
        hidden = ad.relu(self._conv("critic1", feats))
        return ad.reshape(ad.sigmoid(self._conv("critic2", hidden)), (n, h, w))

    # public API -------------------------------------------------------------

    def actor_forward(self, states, mode="mean", rng=None):
        return self.actor_from_embedding(self.encode(states), mode, rng)

    def critic_forward(self, states, actions):
        return self.critic_from_embedding(self.encode(states), actions)

    def predict(self, states):
        """Greedy (mean-action) quality and action maps as numpy arrays."""
        emb = self.encode(states)
        act = self.actor_from_embedding(emb, "mean")
        q = self.critic_from_embedding(emb, act.angles)
        return q.data, act.angles.data

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, arrays):
        for n, p in self.params.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != p.shape:
                raise UsageError(f"{n}: shape {a.shape} != {p.shape}")
            p.data = a.copy()


def quality_classes(q):
    """Two-class view ``(..., 2)``: index 0 failure (1 - q), index 1 success (q)."""
    q = np.asarray(q, dtype=np.float64)
    return np.stack([1.0 - q, q], axis=-1)


def select_grasp(q, actions):
    """Global argmax pixel of ``q`` (first hit in row-major order).

    Returns ``((h, w), action, confidence)``.
    """
    q = np.asarray(q)
    flat = int(np.argmax(q))
    h, w = divmod(flat, q.shape[1])
    return (h, w), np.asarray(actions)[:, h, w].copy(), float(q[h, w])


class EmaModel:
    """Shadow parameters tracking a live model with ``shadow <- m*shadow + (1-m)*live``."""

    def __init__(self, model, momentum=0.99):
        self.model = model.clone()
        self.momentum = momentum

    @property
    def shadow(self):
        return self.model.params

    def update(self, live):
        return ema_update(live.params if isinstance(live, ConvSAC) else live, self)


def ema_update(live_params, ema):
    m = ema.momentum
    shadow = ema.shadow
    if list(shadow) != list(live_params):
        raise UsageError("EMA and live parameter names differ")
    for n, p in live_params.items():
        s = shadow[n]
        live = p.data if isinstance(p, Tensor) else np.asarray(p)
        if s.shape != live.shape:
            raise UsageError(f"{n}: EMA shape {s.shape} != live {live.shape}")
        s.data = m * s.data + (1.0 - m) * live
    return ema


# checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model, ema=None, extra=None):
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64 blobs)."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    groups = [("live", model.params)]
    if ema is not None:
        groups.append(("ema", ema.shadow))
    for group, params in groups:
        for n, p in params.items():
            entries.append({"group": group, "name": n, "shape": list(p.shape), "offset": offset})
            blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
            offset += p.size
    manifest = {
        "format": "sslconvsac-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": {"hidden": model.hidden, "critic_hidden": model.critic_hidden},
        "ema_momentum": ema.momentum if ema is not None else None,
        "dtype": "<f8",
        "tensors": entries,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".bin").write_bytes(b"".join(blobs))
    path.write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, ema_or_None, extra)``."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "sslconvsac-checkpoint":
        raise ConfigurationError(f"{path} is not a checkpoint manifest")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {manifest['version']}")
    flat = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f8")
    model = ConvSAC(**manifest["arch"])
    arrays = {"live": {}, "ema": {}}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"]))
        arrays[e["group"]][e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"])
    model.load_state_dict(arrays["live"])
    ema = None
    if arrays["ema"]:
        ema = EmaModel(model, manifest["ema_momentum"])
        ema.model.load_state_dict(arrays["ema"])
    return model, ema, manifest["extra"]
