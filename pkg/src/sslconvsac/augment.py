"""Weak/strong augmentation of 7-channel states with pixel correspondence.

Every view records the :class:`GeometricTransform` that produced it from the
original frame, so a map predicted on one view can be carried into another
view's frame with :func:`align_map`.

Coordinates are ``(x, y) = (column, row)``; a transform maps an original
point ``p`` to ``R(rotation) (p - c) + c + shift`` with ``c`` the frame
centre.  Surface normals and action yaw rotate with the same ``R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, map_coordinates

COLOR_OPS = ("autocontrast", "brightness", "contrast", "equalize",
             "posterize", "sharpness", "solarize")


@dataclass(frozen=True)
class GeometricTransform:
    rotation: float = 0.0            # degrees, counter-clockwise in (x, y)
    shift: tuple = (0.0, 0.0)        # (dx, dy) pixels
    interpolation: str = "bilinear"

    def matrix(self):
        quarter = self.rotation / 90.0
        if quarter == round(quarter):
            c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][int(round(quarter)) % 4]
        else:
            t = math.radians(self.rotation)
            c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    def apply(self, x, y, shape):
        """Map original-frame points to this view's frame."""
        cx, cy = (shape[-1] - 1) / 2.0, (shape[-2] - 1) / 2.0
        r = self.matrix()
        dx, dy = x - cx, y - cy
        return (r[0, 0] * dx + r[0, 1] * dy + cx + self.shift[0],
                r[1, 0] * dx + r[1, 1] * dy + cy + self.shift[1])

    def invert(self, x, y, shape):
        """Map this view's points back to the original frame."""
        cx, cy = (shape[-1] - 1) / 2.0, (shape[-2] - 1) / 2.0
        r = self.matrix()
        dx, dy = x - cx - self.shift[0], y - cy - self.shift[1]
        return r[0, 0] * dx + r[1, 0] * dy + cx, r[0, 1] * dx + r[1, 1] * dy + cy

    def inverse(self):
        r = self.matrix()
        sx, sy = -(r.T @ np.asarray(self.shift, dtype=np.float64))
        return GeometricTransform(-self.rotation, (float(sx), float(sy)), self.interpolation)

    def compose(self, first):
        """The transform equal to applying ``first`` then ``self``."""
        t = self.matrix() @ np.asarray(first.shift, dtype=np.float64) + np.asarray(self.shift)
        return GeometricTransform(self.rotation + first.rotation,
                                  (float(t[0]), float(t[1])), self.interpolation)


IDENTITY = GeometricTransform()


@dataclass
class AugmentedView:
    state: np.ndarray
    transform: GeometricTransform
    validity_mask: np.ndarray


@dataclass
class AugmentConfig:
    weak_rotation: float = 10.0
    weak_shift: int = 10
    jitter: float = 0.2                 # brightness/contrast/saturation factor spread
    strong_rotation: float = 180.0
    strong_shift: int = 30
    randaugment_n: int = 2
    color_ops: tuple = COLOR_OPS
    depth_noise: float = 5.0            # uniform in [-a, a], height units (mm)
    normal_dropout: float = 0.10
    interpolation: str = "bilinear"

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "color_ops" in d:
            d["color_ops"] = tuple(d["color_ops"])
        return cls(**d)


def _round(v):
    return np.floor(v + 0.5).astype(np.int64)


def _grid(shape):
    ys, xs = np.mgrid[0:shape[-2], 0:shape[-1]]
    return xs.astype(np.float64), ys.astype(np.float64)


def _sample(arr, sx, sy, valid, interpolation):
    h, w = arr.shape[-2:]
    flat = arr.reshape(-1, h, w)
    out = np.zeros_like(flat)
    if interpolation == "nearest":
        ix = np.clip(_round(sx), 0, w - 1)
        iy = np.clip(_round(sy), 0, h - 1)
        out[:] = flat[:, iy, ix]
    elif interpolation == "bilinear":
        coords = np.stack([sy.ravel(), sx.ravel()])
        for c in range(flat.shape[0]):
            out[c] = map_coordinates(flat[c], coords, order=1, mode="nearest").reshape(h, w)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    out *= valid
    return out.reshape(arr.shape)


def _in_frame(sx, sy, shape):
    ix, iy = _round(sx), _round(sy)
    return (ix >= 0) & (ix < shape[-1]) & (iy >= 0) & (iy < shape[-2])


def warp(arr, transform, interpolation=None):
    """Resample an original-frame ``(H, W)`` or ``(C, H, W)`` array into the view frame.

    Returns ``(warped, validity)``; pixels whose preimage falls outside the
    frame are zero and invalid.
    """
    interpolation = interpolation or transform.interpolation
    xs, ys = _grid(arr.shape)
    sx, sy = transform.invert(xs, ys, arr.shape)
    valid = _in_frame(sx, sy, arr.shape)
    return _sample(np.asarray(arr, dtype=np.float64), sx, sy, valid, interpolation), valid.astype(np.uint8)


def warp_state(state, transform, interpolation=None):
    """Geometric part of augmentation: warp all seven channels, re-rotate normals."""
    out, valid = warp(state, transform, interpolation)
    if transform.rotation == 0 and tuple(transform.shift) == (0, 0):
        return out, valid  # identity: leave normals bit-exact
    r = transform.matrix()
    nx, ny = out[3].copy(), out[4].copy()
    out[3] = r[0, 0] * nx + r[0, 1] * ny
    out[4] = r[1, 0] * nx + r[1, 1] * ny
    norm = np.sqrt((out[3:6] ** 2).sum(axis=0))
    nz = norm > 0
    out[3:6, nz] /= norm[nz]
    return out, valid


def align_map(arr, source, target, interpolation="nearest"):
    """Carry a map from ``source``'s view frame into ``target``'s view frame.

    Both transforms are relative to the same original frame.  Returns
    ``(aligned, validity)`` where validity is 0 wherever the target pixel
    has no corresponding pixel in the source view.  Callers intersect with
    the views' own validity masks to drop padding.
    """
    arr = np.asarray(arr, dtype=np.float64)
    xs, ys = _grid(arr.shape)
    ox, oy = target.invert(xs, ys, arr.shape)
    sx, sy = source.apply(ox, oy, arr.shape)
    valid = _in_frame(sx, sy, arr.shape)
    return _sample(arr, sx, sy, valid, interpolation), valid.astype(np.uint8)


def map_pixel(pixel, transform, shape):
    """Image of an original-frame ``(row, col)`` in the view, or None if it leaves the frame."""
    x, y = transform.apply(float(pixel[1]), float(pixel[0]), shape)
    c, r = int(_round(np.asarray(x))), int(_round(np.asarray(y)))
    if 0 <= r < shape[-2] and 0 <= c < shape[-1]:
        return r, c
    return None


def wrap_angle(a):
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


def transform_action_map(actions, transform):
    """Rotate approach directions with the image plane: yaw += rotation.

    Only angle values change; pitch and roll are relative to the rotated
    yaw frame so the polar angle is preserved.  Shifts leave angles alone.
    """
    out = np.array(actions, dtype=np.float64)
    if transform.rotation:
        out[0] = wrap_angle(out[0] + math.radians(transform.rotation))
    return out


# colour operations on RGB in [0, 1] -----------------------------------------------

def _luma(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _blend(a, b, f):
    return b + f * (a - b)


def color_op(img, op, m):
    """Apply one RandAugment colour op with magnitude ``m`` in [0, 1]."""
    factor = 1.0 + (2.0 * m - 1.0) * 0.9
    if op == "autocontrast":
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        out = np.where(hi > lo, (img - lo) / span, img)
    elif op == "brightness":
        out = img * factor
    elif op == "contrast":
        out = _blend(img, _luma(img).mean(), factor)
    elif op == "equalize":
        out = np.empty_like(img)
        for c in range(3):
            levels = np.clip((img[c] * 255).astype(np.int64), 0, 255)
            hist = np.bincount(levels.ravel(), minlength=256)
            cdf = np.cumsum(hist)
            span = cdf[-1] - cdf[cdf > 0][0]
            out[c] = (cdf[levels] - cdf[cdf > 0][0]) / span if span > 0 else img[c]
    elif op == "posterize":
        bits = 8 - int(m * 4)
        shift = 8 - bits
        levels = np.clip((img * 255).astype(np.int64), 0, 255)
        out = ((levels >> shift) << shift) / 255.0
    elif op == "sharpness":
        kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
        blur = np.stack([convolve(img[c], kernel, mode="nearest") for c in range(3)])
        out = _blend(img, blur, factor)
    elif op == "solarize":
        out = np.where(img >= 1.0 - m, 1.0 - img, img)
    else:
        raise ValueError(f"unknown colour op {op!r}")
    return np.clip(out, 0.0, 1.0)


def color_jitter(img, rng, amount):
    if amount <= 0:
        return img
    b, c, s = rng.uniform(1.0 - amount, 1.0 + amount, 3)
    out = img * b
    out = _blend(out, _luma(out).mean(), c)
    out = _blend(out, _luma(out)[None], s)
    return np.clip(out, 0.0, 1.0)


def _random_transform(rng, max_rot, max_shift, interpolation):
    rot = float(rng.uniform(-max_rot, max_rot)) if max_rot > 0 else 0.0
    if max_shift > 0:
        dx, dy = (float(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
    else:
        dx = dy = 0.0
    return GeometricTransform(rot, (dx, dy), interpolation)


def weak_augment(state, rng, config=None):
    """Small rotation and shift on all channels plus RGB colour jitter."""
    cfg = config or AugmentConfig()
    t = _random_transform(rng, cfg.weak_rotation, cfg.weak_shift, cfg.interpolation)
    out, valid = warp_state(state, t)
    out[0:3] = color_jitter(out[0:3], rng, cfg.jitter) * valid
    return AugmentedView(out, t, valid)


def strong_augment(state, rng, config=None):
    """Large rotation/shift, RandAugment colour ops, depth noise, normal dropout.

    Noise order: colour, then depth noise, then normal zeroing.
    """
    cfg = config or AugmentConfig()
    t = _random_transform(rng, cfg.strong_rotation, cfg.strong_shift, cfg.interpolation)
    out, valid = warp_state(state, t)
    if cfg.randaugment_n > 0 and cfg.color_ops:
        rgb = out[0:3]
        for i in rng.choice(len(cfg.color_ops), size=cfg.randaugment_n):
            rgb = color_op(rgb, cfg.color_ops[int(i)], float(rng.uniform()))
        out[0:3] = rgb * valid
    if cfg.depth_noise > 0:
        out[6] += rng.uniform(-cfg.depth_noise, cfg.depth_noise, out[6].shape) * valid
    if cfg.normal_dropout > 0:
        drop = rng.uniform(size=out[6].shape) < cfg.normal_dropout
        out[3:6, drop] = 0.0
    return AugmentedView(out, t, valid)
