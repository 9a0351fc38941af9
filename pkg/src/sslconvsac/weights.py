"""Pseudo labels and the per-pixel weighting functions for unlabeled pixels.

A quality map ``q`` is read as two classes, failure ``1 - q`` and success
``q``.  Every weighting scheme accepts an unlabeled pixel when its confidence
``max(q, 1 - q)`` reaches the threshold of its predicted class:

* ``fixmatch``  - one constant threshold;
* ``flexmatch`` - class thresholds scaled by how many confident predictions
  each class has across the replay buffer (warm-up denominator and the
  convex mapping ``x / (2 - x)``);
* ``freematch`` - an EMA of mean confidence (global threshold) modulated by
  an EMA of class probabilities.

``contextual`` promotes all curriculum statistics to per-pixel maps
``(H, W, 2)``.  Thresholds can be lower-bounded, and accepted pixels can be
soft-weighted with a softmax over their confidences.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, UsageError

METHODS = ("none", "fixmatch", "flexmatch", "freematch")


@dataclass
class MethodConfig:
    method: str = "fixmatch"
    contextual: bool = False
    soft_weight: bool = False
    tau: float = 0.95
    tau_lb: float = 0.5
    ema_momentum: float = 0.95
    budget: object = "full"         # "full" or a per-sample top-k cap
    flexmatch_exact: bool = False   # recount the whole buffer every step

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.tau <= 1.0 or not 0.0 <= self.tau_lb <= 1.0:
            raise ConfigurationError("thresholds must lie in [0, 1]")
        if not 0.0 < self.ema_momentum < 1.0:
            raise ConfigurationError("ema_momentum must lie in (0, 1)")
        if self.budget != "full" and (not isinstance(self.budget, int) or self.budget < 0):
            raise ConfigurationError(f"budget must be 'full' or a non-negative int, got {self.budget!r}")

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d or {}))

    def to_dict(self):
        return asdict(self)

    @property
    def label(self):
        if self.method == "none":
            return "ON"
        tag = {"fixmatch": "FI", "flexmatch": "FL", "freematch": "FR"}[self.method]
        parts = [tag, f"C{self.tau:g}", f"L{self.tau_lb:g}"]
        if self.soft_weight:
            parts.append("S")
        if self.contextual:
            parts.append("X")
        parts.append(f"K{self.budget}")
        return "-".join(parts)


@dataclass
class PseudoLabels:
    labels: np.ndarray       # {0, 1}
    confidence: np.ndarray   # max(q, 1 - q), in [0.5, 1]
    class_index: np.ndarray  # same as labels: 0 failure, 1 success


def pseudo_labels(q):
    """Hard labels ``q > 0.5``; a tie at exactly 0.5 counts as failure."""
    q = np.asarray(q, dtype=np.float64)
    labels = (q > 0.5).astype(np.uint8)
    return PseudoLabels(labels, np.maximum(q, 1.0 - q), labels.copy())


# threshold state -----------------------------------------------------------------

@dataclass
class ThresholdState:
    method: str
    tau: float = 0.95
    tau_lb: float = 0.5
    contextual: bool = False
    alpha_ema: float = 0.95
    class_tau: np.ndarray = field(default_factory=lambda: np.zeros(2))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(2))
    n_total: object = 0.0
    beta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tau_global: object = 0.5
    p_tilde: np.ndarray = field(default_factory=lambda: np.full(2, 0.5))
    step: int = 0

    @property
    def shape(self):
        return self.class_tau.shape[:-1]

    def summary(self):
        """Compact text for logs: mean lower-bounded threshold per class."""
        t = apply_lower_bound(self, self.tau_lb).class_tau.reshape(-1, 2).mean(axis=0)
        return f"{t[0]:.4f}/{t[1]:.4f}"


def init_threshold_state(config, shape=None):
    """Initial curriculum state; ``shape`` is ``(H, W)`` for the contextual variant."""
    if config.contextual and shape is None:
        raise UsageError("contextual thresholds need the map shape")
    lead = tuple(shape) if config.contextual else ()
    z2 = np.zeros(lead + (2,))
    if config.method in ("fixmatch", "none"):
        class_tau = np.full(lead + (2,), config.tau)
    elif config.method == "flexmatch":
        class_tau = z2.copy()
    else:
        class_tau = np.full(lead + (2,), 0.5)
    return ThresholdState(
        method=config.method, tau=config.tau, tau_lb=config.tau_lb,
        contextual=config.contextual, alpha_ema=config.ema_momentum,
        class_tau=class_tau, sigma=z2.copy(), n_total=np.zeros(lead) if lead else 0.0,
        beta=z2.copy(), tau_global=np.full(lead, 0.5) if lead else 0.5,
        p_tilde=np.full(lead + (2,), 0.5),
    )


def convex_map(x):
    return x / (2.0 - x)


def flexmatch_thresholds(sigma, n_total, tau):
    """Normalised learning effect and class thresholds from confident counts.

    The denominator is ``max(max_c sigma, n_unused)`` with ``n_unused`` the
    unlabeled pixels not yet confident in any class, so thresholds stay low
    until most pixels have been predicted confidently.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    n_unused = np.asarray(n_total, dtype=np.float64) - sigma.sum(axis=-1)
    denom = np.maximum(sigma.max(axis=-1), n_unused)[..., None]
    beta = np.divide(sigma, denom, out=np.zeros_like(sigma), where=denom > 0)
    return beta, convex_map(beta) * tau


def _check_batch(predictions, masks, state):
    q = np.asarray(predictions, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    m = np.ones_like(q, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape != q.shape:
        raise UsageError(f"mask shape {m.shape} != prediction shape {q.shape}")
    if state.contextual and q.shape[1:] != state.shape:
        raise UsageError(f"contextual state is {state.shape}, predictions are {q.shape[1:]}")
    return q, m


def confident_counts(q, mask, tau, contextual):
    """Per-class counts of ``max(q, 1-q) > tau`` over masked pixels, and the masked total.

    Non-contextual results are ``(2,)`` and a scalar; contextual ones keep
    the pixel axes, ``(H, W, 2)`` and ``(H, W)``.
    """
    q, mask = np.asarray(q, dtype=np.float64), np.asarray(mask, dtype=bool)
    if q.ndim == 2:
        q, mask = q[None], mask[None]
    confident = (np.maximum(q, 1.0 - q) > tau) & mask
    success = q > 0.5
    per = np.stack([(confident & ~success).sum(axis=0), (confident & success).sum(axis=0)], axis=-1)
    total = mask.sum(axis=0).astype(np.float64)
    if contextual:
        return per.astype(np.float64), total
    return per.reshape(-1, 2).sum(axis=0).astype(np.float64), float(total.sum())


def flexmatch_update(predictions, masks, state, n_total=None):
    """Recount confident pixels over the buffer predictions and refresh thresholds.

    ``n_total`` defaults to the number of masked pixels; pass the full
    unlabeled-pixel count to treat unpredicted pixels as unused.
    """
    q, m = _check_batch(predictions, masks, state)
    sigma, counted = confident_counts(q, m, state.tau, state.contextual)
    total = counted if n_total is None else n_total
    if np.all(np.asarray(total) == 0):
        return state
    return flexmatch_from_counts(sigma, total, state)


def flexmatch_from_counts(sigma, n_total, state):
    beta, class_tau = flexmatch_thresholds(sigma, n_total, state.tau)
    return replace(state, sigma=np.asarray(sigma, dtype=np.float64), n_total=n_total,
                   beta=beta, class_tau=class_tau, step=state.step + 1)


def freematch_update(predictions, masks, state):
    """One EMA step of the global threshold and class-probability estimates.

    Non-contextual statistics average over every masked pixel of the batch;
    contextual ones average per pixel over the batch samples, leaving pixels
    with no observation unchanged.
    """
    q, m = _check_batch(predictions, masks, state)
    a = state.alpha_ema
    conf = np.maximum(q, 1.0 - q)
    if state.contextual:
        count = m.sum(axis=0)
        seen = count > 0
        safe = np.where(seen, count, 1)
        mean_conf = (conf * m).sum(axis=0) / safe
        mean_q = (q * m).sum(axis=0) / safe
        mean_p = np.stack([1.0 - mean_q, mean_q], axis=-1)
        tau_global = np.where(seen, a * state.tau_global + (1 - a) * mean_conf, state.tau_global)
        p_tilde = np.where(seen[..., None], a * state.p_tilde + (1 - a) * mean_p, state.p_tilde)
    else:
        count = m.sum()
        if count == 0:
            return state
        mean_q = (q * m).sum() / count
        tau_global = a * state.tau_global + (1 - a) * (conf * m).sum() / count
        p_tilde = a * state.p_tilde + (1 - a) * np.array([1.0 - mean_q, mean_q])
    class_tau = p_tilde / p_tilde.max(axis=-1, keepdims=True) * np.asarray(tau_global)[..., None]
    return replace(state, tau_global=tau_global, p_tilde=p_tilde, class_tau=class_tau,
                   step=state.step + 1)


def contextual_update(predictions, masks, state, n_total=None):
    """Per-pixel variant of the FlexMatch/FreeMatch recurrences (``state.contextual`` must be set)."""
    if not state.contextual:
        raise UsageError("contextual_update called on a non-contextual state")
    if state.method == "flexmatch":
        return flexmatch_update(predictions, masks, state, n_total)
    if state.method == "freematch":
        return freematch_update(predictions, masks, state)
    return state


def apply_lower_bound(state, tau_lb):
    return replace(state, class_tau=np.maximum(state.class_tau, tau_lb))


class FlexMatchTally:
    """Running buffer-wide confident counts, refreshed one replay slot at a time.

    Each slot keeps the counts of its latest prediction; slots never
    predicted contribute nothing to ``sigma`` and count as unused pixels.
    """

    def __init__(self, tau, contextual, shape):
        self.tau = tau
        self.contextual = contextual
        self.shape = tuple(shape)
        self._slots = {}
        self.sigma = np.zeros(self.shape + (2,)) if contextual else np.zeros(2)

    def update(self, slot, q, mask):
        new, _ = confident_counts(q, mask, self.tau, self.contextual)
        old = self._slots.get(slot)
        if old is not None:
            self.sigma = self.sigma - old
        self.sigma = self.sigma + new
        self._slots[slot] = new

    def n_total(self, buffer_size):
        h, w = self.shape
        if self.contextual:
            return np.full(self.shape, float(buffer_size))
        return float(buffer_size * (h * w - 1))


# weight masks ----------------------------------------------------------------------

def _pixel_thresholds(class_tau, class_index):
    if class_tau.ndim == 1:
        return class_tau[class_index]
    return np.take_along_axis(class_tau, class_index[..., None].astype(np.intp), axis=-1)[..., 0]


def _unlabeled_valid(shape, labeled_pixel, validity):
    keep = np.ones(shape, dtype=bool) if validity is None else np.asarray(validity, dtype=bool).copy()
    if labeled_pixel is not None:
        keep[int(labeled_pixel[0]), int(labeled_pixel[1])] = False
    return keep


def fixmatch_mask(p, tau, labeled_pixel=None, validity=None):
    """``1`` where confidence >= tau on valid unlabeled pixels, else ``0``."""
    keep = _unlabeled_valid(p.confidence.shape, labeled_pixel, validity)
    return ((p.confidence >= tau) & keep).astype(np.float64)


def soft_weights(p, accept_mask):
    """Softmax of confidences over the accepted pixels, rescaled to mean 1 and clipped to [0, 1]."""
    accept = np.asarray(accept_mask, dtype=bool)
    lam = np.zeros(accept.shape)
    n = accept.sum()
    if n == 0:
        return lam
    c = p.confidence[accept]
    e = np.exp(c - c.max())
    lam[accept] = np.minimum(n * e / e.sum(), 1.0)
    return lam


def compose_lambda(config, q_aligned, labeled_pixel, validity, state):
    """Weight mask for one image in the strong view's frame.

    pseudo labels -> class-specific (or pixel-and-class-specific) lower-bounded
    threshold -> optional soft weights -> zero at the labeled and invalid pixels.
    """
    if config.method not in METHODS:
        raise ConfigurationError(f"unknown method {config.method!r}")
    q = np.asarray(q_aligned, dtype=np.float64)
    if config.method == "none":
        return np.zeros(q.shape)
    p = pseudo_labels(q)
    class_tau = np.maximum(state.class_tau, config.tau_lb)
    thr = _pixel_thresholds(class_tau, p.class_index)
    accept = (p.confidence >= thr) & _unlabeled_valid(q.shape, labeled_pixel, validity)
    if config.soft_weight:
        return soft_weights(p, accept)
    return accept.astype(np.float64)


def apply_topk_budget(mask, k, confidence=None):
    """Keep at most ``k`` nonzero pixels, highest confidence first (row-major ties).

    ``k == "full"`` returns the mask unchanged.  Without ``confidence`` the
    mask values themselves rank the pixels.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if k == "full":
        return mask
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise UsageError(f"budget must be 'full' or a non-negative int, got {k!r}")
    flat = mask.ravel()
    rank = flat if confidence is None else np.asarray(confidence, dtype=np.float64).ravel()
    nz = np.flatnonzero(flat)
    if len(nz) <= k:
        return mask
    order = nz[np.argsort(-rank[nz], kind="stable")]
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(mask.shape)
