"""Procedural top-down bin scenes with analytic grasp ground truth.

Objects are discs and boxes with planar (possibly tilted) tops, rendered
with a z-buffer so taller objects occlude lower ones.  The suction ground
truth is derived from the rendered geometry:

* quality is 0 on background, 0.3 on an object's visible edge ring and ramps
  linearly to 1 three pixels inside it;
* the best action approaches along the negative surface normal.

Per-object trigonometry uses the ``math`` module on scalars; array work is
plain arithmetic and ``sqrt``, so scenes are reproducible from the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import GenerationError, UsageError
from .net import ANGLE_LIMITS, angle_between

FLOOR_COLOR = (0.45, 0.45, 0.45)
WALL_COLOR = (0.25, 0.25, 0.3)
SUCCESS_QUALITY = 0.5
ALIGN_TOLERANCE_DEG = 15.0
SCENE_VERSION = 1


@dataclass
class ObjectSpec:
    kind: str               # "disc" or "box"
    cx: float
    cy: float
    size: tuple             # (radius, radius) for discs, half extents for boxes
    angle: float            # box orientation, radians
    top: float              # top-surface height at the centre, mm
    tilt: float             # surface tilt, radians
    tilt_dir: float         # azimuth of steepest ascent, radians
    color: tuple


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 32
    n_objects: tuple = (10, 12)
    radius: tuple = (3.0, 6.0)
    object_height: tuple = (30.0, 60.0)
    max_tilt_deg: float = 20.0
    flat_fraction: float = 0.5
    kinds: tuple = ("disc", "box")
    wall_width: int = 2
    wall_height: float = 80.0
    pixel_size_mm: float = 10.0
    max_retries: int = 50
    objects: list | None = None  # explicit placement, bypasses sampling

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class GroundTruth:
    quality: np.ndarray          # (H, W) in [0, 1]
    action: np.ndarray           # (3, H, W) Euler angles
    background_mask: np.ndarray  # (H, W) uint8, 1 on floor and walls
    object_map: np.ndarray       # (H, W) int, -1 on background
    objects: list = field(default_factory=list)
    spec: SceneSpec | None = None


@dataclass
class EvalSample:
    state: np.ndarray
    pixel: tuple
    action: np.ndarray
    reward: int
    scene_index: int = 0


def _derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _footprint(obj, xs, ys):
    dx, dy = xs - obj.cx, ys - obj.cy
    if obj.kind == "disc":
        return dx * dx + dy * dy <= obj.size[0] ** 2
    c, s = math.cos(obj.angle), math.sin(obj.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= obj.size[0]) & (np.abs(v) <= obj.size[1])


def _surface(obj, xs, ys, pixel_size):
    """Height field of the plane plus its unit normal (numpy-free scalar trig)."""
    t = math.tan(obj.tilt)
    gx = t * math.cos(obj.tilt_dir)  # mm of height per mm along x
    gy = t * math.sin(obj.tilt_dir)
    h = obj.top + (gx * (xs - obj.cx) + gy * (ys - obj.cy)) * pixel_size
    norm = math.sqrt(gx * gx + gy * gy + 1.0)
    normal = (-gx / norm, -gy / norm, 1.0 / norm)
    return h, normal


def _normal_to_euler(n):
    # approach = -n, yaw fixed at 0
    dx, dy, dz = -n[0], -n[1], -n[2]
    return (0.0, math.atan2(-dx, -dz), math.asin(max(-1.0, min(1.0, dy))))


def _sample_objects(spec, rng):
    """Random clutter.  Centres are drawn so that footprints stay inside the
    bin; among a few candidates the one farthest from existing objects wins,
    which keeps stacking partial."""
    wall = spec.wall_width
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    objects, placed = [], []
    for _ in range(n):
        for _attempt in range(spec.max_retries):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            r = float(rng.uniform(*spec.radius))
            if kind == "disc":
                size, angle, reach = (r, r), 0.0, r
            else:
                b = float(rng.uniform(0.6, 1.0)) * r
                angle = float(rng.uniform(0.0, math.pi))
                size = (r, b)
                reach = math.hypot(r, b) * 0.85
            lo_x, hi_x = wall + reach, spec.width - 1 - wall - reach
            lo_y, hi_y = wall + reach, spec.height - 1 - wall - reach
            if lo_x <= hi_x and lo_y <= hi_y:
                break
        else:
            raise GenerationError(f"could not place object after {spec.max_retries} retries")
        best, best_gap = None, -math.inf
        for _candidate in range(8):
            cx, cy = float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))
            gap = min((math.hypot(cx - px, cy - py) - reach - pr for px, py, pr in placed),
                      default=math.inf)
            if gap > best_gap:
                best, best_gap = (cx, cy), gap
        placed.append((best[0], best[1], reach))
        flat = rng.uniform() < spec.flat_fraction
        tilt = 0.0 if flat else math.radians(float(rng.uniform(5.0, spec.max_tilt_deg)))
        objects.append(ObjectSpec(
            kind=kind,
            cx=best[0],
            cy=best[1],
            size=size,
            angle=angle,
            top=float(rng.uniform(*spec.object_height)),
            tilt=tilt,
            tilt_dir=float(rng.uniform(-math.pi, math.pi)),
            color=tuple(float(c) for c in rng.uniform(0.1, 1.0, 3)),
        ))
    return objects


def render(spec, objects):
    """Rasterise ``objects`` into a 7-channel state and its ground truth."""
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    state = np.zeros((7, h, w))
    state[0:3] = np.asarray(FLOOR_COLOR)[:, None, None]
    state[5] = 1.0
    ww = spec.wall_width
    wall = np.zeros((h, w), dtype=bool)
    if ww > 0:
        wall[:ww] = wall[-ww:] = True
        wall[:, :ww] = wall[:, -ww:] = True
    state[0:3, wall] = np.asarray(WALL_COLOR)[:, None]
    state[6, wall] = spec.wall_height
    zbuf = np.where(wall, np.inf, 0.0)  # walls are never covered
    object_map = np.full((h, w), -1, dtype=np.int64)
    action = np.zeros((3, h, w))
    for i, obj in enumerate(objects):
        mask = _footprint(obj, xs, ys)
        height, normal = _surface(obj, xs, ys, spec.pixel_size_mm)
        height = np.maximum(height, 1.0)
        top = mask & (height > zbuf)
        if not top.any():
            continue
        zbuf[top] = height[top]
        object_map[top] = i
        state[0:3, top] = np.asarray(obj.color)[:, None]
        state[3:6, top] = np.asarray(normal)[:, None]
        state[6, top] = height[top]
        action[:, top] = np.asarray(_normal_to_euler(normal))[:, None]
    quality = np.zeros((h, w))
    for i in np.unique(object_map[object_map >= 0]):
        visible = object_map == i
        dist = distance_transform_edt(np.pad(visible, 1))[1:-1, 1:-1]
        quality[visible] = 0.3 + 0.7 * np.clip((dist[visible] - 1.0) / 3.0, 0.0, 1.0)
    background = (object_map < 0).astype(np.uint8)
    gt = GroundTruth(quality, action, background, object_map, list(objects), spec)
    return state, gt


def generate_scene(spec):
    """Deterministic scene for ``spec.seed``; returns ``(state, GroundTruth)``."""
    if spec.height < 16 or spec.width < 16:
        raise UsageError("scenes must be at least 16x16")
    if spec.objects is not None:
        objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in spec.objects]
    else:
        objects = _sample_objects(spec, np.random.default_rng(spec.seed))
    return render(spec, objects)


def remove_object(gt, index):
    """Re-render the scene without object ``index`` (a successful pick)."""
    objects = [o for i, o in enumerate(gt.objects) if i != index]
    return render(gt.spec, objects)


def execute_grasp(state, gt, pixel, action, rng=None, bernoulli=False):
    """Binary outcome of a suction attempt at ``pixel`` with Euler ``action``.

    Success needs quality >= 0.5 and an approach within 15 degrees of the
    ground-truth one.  With ``bernoulli`` the quality gate is replaced by a
    draw with success probability equal to the quality.
    """
    h, w = int(pixel[0]), int(pixel[1])
    H, W = gt.quality.shape
    if not (0 <= h < H and 0 <= w < W):
        raise UsageError(f"pixel {pixel} outside {H}x{W} frame")
    q = gt.quality[h, w]
    if q <= 0.0:
        return 0
    aligned = math.degrees(float(angle_between(action, gt.action[:, h, w]))) <= ALIGN_TOLERANCE_DEG + 1e-9
    if not aligned:
        return 0
    if bernoulli:
        if rng is None:
            raise UsageError("bernoulli rewards need an rng")
        return int(rng.uniform() < q)
    return int(q >= SUCCESS_QUALITY)


def random_action(rng):
    return rng.uniform(-ANGLE_LIMITS, ANGLE_LIMITS)


def make_eval_set(spec, n_scenes, negatives_per_scene, seed=None, return_scenes=False):
    """One ground-truth-executed grasp per scene plus background negatives.

    The labelled grasp is taken at a uniformly random object pixel with the
    ground-truth approach, so its reward is the quality gate; negatives are
    background pixels with uniformly random actions and reward 0.  With
    ``return_scenes`` a ``{scene_index: (state, gt)}`` dict is returned too.
    """
    if n_scenes < 1:
        raise UsageError("n_scenes must be >= 1")
    seed = spec.seed if seed is None else seed
    samples, scenes = [], {}
    for i in range(n_scenes):
        state, gt = generate_scene(spec.with_seed(_derive_seed(seed, i, 1)))
        if return_scenes:
            scenes[i] = (state, gt)
        rng = np.random.default_rng(_derive_seed(seed, i, 2))
        fg = np.argwhere(gt.background_mask == 0)
        if len(fg) == 0:
            fg = np.argwhere(np.ones_like(gt.background_mask))
        h, w = fg[int(rng.integers(len(fg)))]
        a = gt.action[:, h, w].copy()
        samples.append(EvalSample(state, (int(h), int(w)), a,
                                  execute_grasp(state, gt, (h, w), a), i))
        bg = np.argwhere(gt.background_mask == 1)
        for _ in range(negatives_per_scene):
            bh, bw = bg[int(rng.integers(len(bg)))]
            samples.append(EvalSample(state, (int(bh), int(bw)), random_action(rng), 0, i))
    return (samples, scenes) if return_scenes else samples


# serialisation ------------------------------------------------------------------

_CHANNELS = ["r", "g", "b", "nx", "ny", "nz", "height", "gt_quality",
             "gt_yaw", "gt_pitch", "gt_roll", "background", "object_id"]


def save_scene(stem, state, gt):
    """Write ``<stem>.bin`` (13 float64 channels, C order) and ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate([state, gt.quality[None], gt.action,
                           gt.background_mask[None].astype(np.float64),
                           gt.object_map[None].astype(np.float64)])
    stem.with_suffix(".bin").write_bytes(np.ascontiguousarray(blob, dtype="<f8").tobytes())
    spec = asdict(gt.spec) if gt.spec is not None else None
    if spec is not None:
        spec["objects"] = None
    header = {
        "version": SCENE_VERSION,
        "H": int(state.shape[1]),
        "W": int(state.shape[2]),
        "seed": spec["seed"] if spec else None,
        "channels": _CHANNELS,
        "dtype": "<f8",
        "spec": spec,
        "objects": [asdict(o) for o in gt.objects],
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1))


def load_scene(stem):
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header["version"] != SCENE_VERSION:
        raise UsageError(f"unsupported scene version {header['version']}")
    H, W = header["H"], header["W"]
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    blob = blob.reshape(len(header["channels"]), H, W).copy()
    spec = None
    if header["spec"] is not None:
        s = dict(header["spec"])
        for key in ("n_objects", "radius", "object_height", "kinds"):
            s[key] = tuple(s[key])
        spec = SceneSpec(**s)
    objects = [ObjectSpec(**{**o, "size": tuple(o["size"]), "color": tuple(o["color"])})
               for o in header["objects"]]
    gt = GroundTruth(blob[7], blob[8:11], blob[11].astype(np.uint8),
                     blob[12].astype(np.int64), objects, spec)
    return blob[:7], gt


def save_eval_set(directory, samples, scenes):
    """``scenes`` maps scene index to ``(state, gt)``; writes scene files plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (state, gt) in scenes.items():
        save_scene(directory / f"scene_{i:05d}", state, gt)
    index = [{"scene": f"scene_{s.scene_index:05d}", "pixel": list(s.pixel),
              "action": [float(a) for a in s.action], "reward": int(s.reward)} for s in samples]
    (directory / "index.json").write_text(json.dumps({"version": SCENE_VERSION, "samples": index}))


def load_eval_set(directory):
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    cache, samples = {}, []
    for row in index["samples"]:
        if row["scene"] not in cache:
            cache[row["scene"]] = load_scene(directory / row["scene"])[0]
        samples.append(EvalSample(cache[row["scene"]], tuple(row["pixel"]),
                                  np.asarray(row["action"]), row["reward"],
                                  int(row["scene"].split("_")[1])))
    return samples
