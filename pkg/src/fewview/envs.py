"""Synthetic multiview worlds.

Two families:

* a classification world on a camera ring where designated class pairs share
  prototype observations on most views and separate by a configured margin on
  a few discriminative views, so the correct view choice resolves the
  ambiguity;
* a bird's-eye-view detection world on a grid, with cameras owning field-of-view
  cones and a discrete ray-casting occlusion rule, producing per-camera
  observation maps plus smoothed occupancy targets.

Instance streams are pure functions of (config, split, index): every instance
is regenerated on demand from its own child seed, so worlds are cheap to hold
and safe to sample from concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError

TRAIN, VAL, EVAL = "train", "val", "eval"
_SPLIT_TAGS = {TRAIN: 0, VAL: 1, EVAL: 2}


def _config_hash(cfg) -> str:
    payload = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, value in payload.items():
        if isinstance(value, tuple):
            payload[key] = list(list(v) if isinstance(v, tuple) else v for v in value)
    return hashlib.sha256(
        json.dumps({"kind": type(cfg).__name__, **payload}, sort_keys=True).encode()
    ).hexdigest()


# ---------------------------------------------------------------------------
# camera layouts


@dataclass(frozen=True)
class RingLayout:
    """N cameras evenly spaced on a ring; camera v sits at angle 2*pi*v/N."""

    n_cameras: int
    disabled: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("a layout needs at least 2 cameras")
        bad = [v for v in self.disabled if not 0 <= v < self.n_cameras]
        if bad:
            raise ConfigError(f"disabled ids {bad} outside camera range")

    @property
    def enabled(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.n_cameras) if v not in self.disabled)


@dataclass(frozen=True)
class GridLayout:
    """N cameras on a ring around a grid, each aimed at the grid center."""

    n_cameras: int
    grid_h: int
    grid_w: int
    ring_radius: float
    half_angle_deg: float
    view_range: float
    disabled: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("a layout needs at least 2 cameras")
        bad = [v for v in self.disabled if not 0 <= v < self.n_cameras]
        if bad:
            raise ConfigError(f"disabled ids {bad} outside camera range")

    @property
    def enabled(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.n_cameras) if v not in self.disabled)

    def positions(self) -> np.ndarray:
        """Integer (row, col) camera anchors, possibly outside the grid."""
        cy, cx = (self.grid_h - 1) / 2.0, (self.grid_w - 1) / 2.0
        out = np.zeros((self.n_cameras, 2), dtype=np.int64)
        for v in range(self.n_cameras):
            theta = 2.0 * np.pi * v / self.n_cameras
            out[v, 0] = int(np.floor(cy + self.ring_radius * np.sin(theta) + 0.5))
            out[v, 1] = int(np.floor(cx + self.ring_radius * np.cos(theta) + 0.5))
        return out


def shut_off_cameras(layout, disabled) -> "RingLayout | GridLayout":
    """Return a copy of ``layout`` with ``disabled`` removed from the action
    space. Observations and instances are untouched; selection masks change.
    """
    disabled = frozenset(int(v) for v in disabled)
    bad = [v for v in disabled if not 0 <= v < layout.n_cameras]
    if bad:
        raise ConfigError(f"cannot disable unknown cameras {sorted(bad)}")
    merged = layout.disabled | disabled
    if layout.n_cameras - len(merged) < 2:
        raise ConfigError("shut-off must leave at least 2 usable cameras")
    return replace(layout, disabled=merged)


# ---------------------------------------------------------------------------
# classification world


@dataclass(frozen=True)
class ClassificationConfig:
    n_views: int = 12
    n_classes: int = 10
    feat_dim: int = 32
    noise: float = 0.1
    margin: float = 2.0
    n_train: int = 400
    n_val: int = 160
    n_eval: int = 200
    random_pose: bool = False
    # one tuple of view ids per class pair; None picks pair p -> (2p, 2p+1)
    discriminative_views: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_classes % 2 != 0:
            raise ConfigError("n_classes must be even and at least 2")
        if self.n_views < 2:
            raise ConfigError("n_views must be at least 2")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.margin <= 6.0 * self.noise:
            raise ConfigError(
                "margin must exceed 6x the noise level or the designed "
                "discriminative views stop discriminating"
            )
        pairs = self.n_classes // 2
        if self.discriminative_views is not None:
            if len(self.discriminative_views) != pairs:
                raise ConfigError(f"need one discriminative view set per pair ({pairs})")
            for p, views in enumerate(self.discriminative_views):
                if not views:
                    raise ConfigError(f"pair {p} has an empty discriminative view set")
                if any(not 0 <= v < self.n_views for v in views):
                    raise ConfigError(f"pair {p} names a view outside the ring")
                if len(set(views)) != len(views):
                    raise ConfigError(f"pair {p} repeats a view")
        elif 2 * pairs > self.n_views:
            raise ConfigError(
                "default discriminative assignment needs n_classes <= n_views; "
                "pass discriminative_views explicitly for denser packings"
            )


@dataclass(frozen=True)
class ClassificationInstance:
    class_id: int
    pose_steps: int                 # object rotation in whole camera steps
    observations: np.ndarray        # (N, D), view v = prototype + noise

    @property
    def object_pose(self) -> float:
        return 2.0 * np.pi * self.pose_steps / self.observations.shape[0]


class ClassificationWorld:
    """Deterministic stream of ring-camera classification instances."""

    def __init__(self, config: ClassificationConfig):
        self.config = config
        self.layout = RingLayout(config.n_views)
        pairs = config.n_classes // 2
        if config.discriminative_views is not None:
            self._disc = tuple(tuple(sorted(v)) for v in config.discriminative_views)
        else:
            self._disc = tuple(tuple((2 * p + j) % config.n_views for j in range(2)) for p in range(pairs))
        rng = np.random.default_rng([config.seed, 100])
        base = rng.standard_normal((pairs, config.n_views, config.feat_dim))
        offsets = rng.standard_normal((pairs, config.feat_dim))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        # prototypes: both pair members share base everywhere; the second
        # member moves by margin * unit offset on the pair's own views
        proto = np.zeros((config.n_classes, config.n_views, config.feat_dim))
        for p in range(pairs):
            proto[2 * p] = base[p]
            proto[2 * p + 1] = base[p]
            for v in self._disc[p]:
                proto[2 * p + 1, v] += config.margin * offsets[p]
        self.prototypes = proto
        self.prototypes.setflags(write=False)

    @property
    def n_cameras(self) -> int:
        return self.config.n_views

    @property
    def n_train(self) -> int:
        return self.config.n_train

    @property
    def n_val(self) -> int:
        return self.config.n_val

    @property
    def n_eval(self) -> int:
        return self.config.n_eval

    def world_hash(self) -> str:
        return _config_hash(self.config)

    def pair_of(self, class_id: int) -> int:
        return class_id // 2

    def discriminative_views(self, class_id: int) -> tuple[int, ...]:
        """Views where the instance's class pair separates."""
        return self._disc[class_id // 2]

    def split_size(self, split: str) -> int:
        return {TRAIN: self.n_train, VAL: self.n_val, EVAL: self.n_eval}[split]

    def instance(self, split: str, index: int) -> ClassificationInstance:
        cfg = self.config
        if not 0 <= index < self.split_size(split):
            raise IndexError(f"{split} instance {index} out of range")
        rng = np.random.default_rng([cfg.seed, _SPLIT_TAGS[split], index])
        class_id = index % cfg.n_classes
        pose = int(rng.integers(cfg.n_views)) if cfg.random_pose else 0
        noise = cfg.noise * rng.standard_normal((cfg.n_views, cfg.feat_dim))
        canonical = self.prototypes[class_id] + noise
        views = (np.arange(cfg.n_views) - pose) % cfg.n_views
        return ClassificationInstance(class_id, pose, canonical[views])

    def train_instance(self, i: int) -> ClassificationInstance:
        return self.instance(TRAIN, i)

    def val_instance(self, i: int) -> ClassificationInstance:
        return self.instance(VAL, i)

    def eval_instance(self, i: int) -> ClassificationInstance:
        return self.instance(EVAL, i)

    def debug_dump(self, instance: ClassificationInstance) -> dict:
        return {
            "class_id": instance.class_id,
            "pose_steps": instance.pose_steps,
            "observations": instance.observations.tolist(),
        }


def apply_pose(instance: ClassificationInstance, steps: int) -> ClassificationInstance:
    """Rotate the object by whole camera steps: view v now sees what view
    (v - steps) mod N saw. steps = 0 and steps = N are identities."""
    n = instance.observations.shape[0]
    steps = int(steps) % n
    views = (np.arange(n) - steps) % n
    return ClassificationInstance(
        instance.class_id,
        (instance.pose_steps + steps) % n,
        instance.observations[views],
    )


def apply_random_pose(instance: ClassificationInstance, seed: int) -> ClassificationInstance:
    """Rotate by a uniformly drawn number of camera steps."""
    n = instance.observations.shape[0]
    steps = int(np.random.default_rng([seed]).integers(n))
    return apply_pose(instance, steps)


# ---------------------------------------------------------------------------
# detection world


@dataclass(frozen=True)
class DetectionConfig:
    n_cameras: int = 6
    grid_h: int = 32
    grid_w: int = 32
    channels: int = 16
    ring_radius: float = 24.0
    half_angle_deg: float = 50.0
    view_range: float = 42.0
    meters_per_cell: float = 0.25
    min_targets: int = 5
    max_targets: int = 20
    noise: float = 0.1
    smooth_sigma: float = 1.0
    occlusion: bool = True
    coverage_threshold: float = 0.9
    n_train: int = 160
    n_val: int = 60
    n_eval: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be at least 2")
        if self.grid_h < 4 or self.grid_w < 4:
            raise ConfigError("grid too small to place occupants")
        if not 0 < self.min_targets <= self.max_targets:
            raise ConfigError("need 0 < min_targets <= max_targets")
        if self.max_targets > self.grid_h * self.grid_w // 4:
            raise ConfigError("occupant density too high for the grid")
        if self.smooth_sigma <= 0:
            raise ConfigError("smooth_sigma must be positive")
        if not 0 < self.coverage_threshold <= 1:
            raise ConfigError("coverage_threshold must be in (0, 1]")
        if self.meters_per_cell <= 0:
            raise ConfigError("meters_per_cell must be positive")


@dataclass(frozen=True)
class DetectionInstance:
    occupancy: np.ndarray            # (H, W) uint8 ground truth
    positions: tuple[tuple[int, int], ...]
    target: np.ndarray               # (H, W) smoothed occupancy in [0, 1]
    observations: np.ndarray         # (N, C, H, W); zero wherever not visible
    visibility: np.ndarray           # (N, H, W) bool, FoV minus occlusion


def _ray_path(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer cells strictly between start and end on the sampled line.

    Samples the segment at K equal steps (K = Chebyshev distance) and rounds
    each coordinate with floor(x + 0.5), midpoints rounding up. All quantities
    stay exactly representable, so the rule has one well-defined answer.
    """
    (r0, c0), (r1, c1) = start, end
    k = max(abs(r1 - r0), abs(c1 - c0))
    path = []
    for m in range(1, k):
        rr = int(np.floor((r0 * (k - m) + r1 * m) / k + 0.5))
        cc = int(np.floor((c0 * (k - m) + c1 * m) / k + 0.5))
        path.append((rr, cc))
    return path


@lru_cache(maxsize=8)
def _grid_geometry(layout: GridLayout):
    """Per-layout FoV masks and padded ray-path tables, cached by layout."""
    h, w, n = layout.grid_h, layout.grid_w, layout.n_cameras
    positions = layout.positions()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    cos_half = np.cos(np.deg2rad(layout.half_angle_deg))

    fov = np.zeros((n, h, w), dtype=bool)
    for v in range(n):
        pr, pc = positions[v]
        dr, dc = rows - pr, cols - pc
        dist = np.hypot(dr, dc)
        ar, ac = cy - pr, cx - pc
        aim = np.hypot(ar, ac)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = (dr * ar + dc * ac) / (dist * aim)
        inside = (dist > 0) & (dist <= layout.view_range) & (cosang >= cos_half)
        fov[v] = inside

    sentinel = h * w
    paths = []
    for v in range(n):
        pr, pc = positions[v]
        per_cell = []
        for r in range(h):
            for c in range(w):
                cells = [
                    rr * w + cc
                    for rr, cc in _ray_path((pr, pc), (r, c))
                    if 0 <= rr < h and 0 <= cc < w
                ]
                per_cell.append(cells)
        longest = max(len(p) for p in per_cell)
        table = np.full((h * w, max(longest, 1)), sentinel, dtype=np.int64)
        for idx, cells in enumerate(per_cell):
            table[idx, : len(cells)] = cells
        paths.append(table)
    return positions, fov, paths


@lru_cache(maxsize=16)
def _gaussian_stamp(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(4.0 * sigma)))
    span = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(span, span, indexing="ij")
    return np.exp(-(dr**2 + dc**2) / (2.0 * sigma * sigma))


def smooth_occupancy(occupancy: np.ndarray, sigma: float) -> np.ndarray:
    """Occupancy indicator softened per target: each occupant contributes a
    unit-peak Gaussian bump; overlaps combine by max so peaks stay at 1."""
    h, w = occupancy.shape
    stamp = _gaussian_stamp(float(sigma))
    radius = stamp.shape[0] // 2
    out = np.zeros((h, w))
    for r, c in zip(*np.nonzero(occupancy)):
        r0, r1 = max(0, r - radius), min(h, r + radius + 1)
        c0, c1 = max(0, c - radius), min(w, c + radius + 1)
        sr, sc = r0 - (r - radius), c0 - (c - radius)
        np.maximum(
            out[r0:r1, c0:c1],
            stamp[sr : sr + (r1 - r0), sc : sc + (c1 - c0)],
            out=out[r0:r1, c0:c1],
        )
    return out


class DetectionWorld:
    """Deterministic stream of grid-world detection instances."""

    def __init__(self, config: DetectionConfig):
        self.config = config
        self.layout = GridLayout(
            n_cameras=config.n_cameras,
            grid_h=config.grid_h,
            grid_w=config.grid_w,
            ring_radius=config.ring_radius,
            half_angle_deg=config.half_angle_deg,
            view_range=config.view_range,
        )
        self.positions, self.fov_masks, self._paths = _grid_geometry(self.layout)
        union = self.fov_masks.any(axis=0)
        self.union_coverage = float(union.mean())
        if self.union_coverage < config.coverage_threshold:
            raise ConfigError(
                f"camera layout covers {self.union_coverage:.3f} of the grid, "
                f"below the required {config.coverage_threshold}"
            )
        full = config.grid_h * config.grid_w
        if any(int(self.fov_masks[v].sum()) == full for v in range(config.n_cameras)):
            raise ConfigError("a single camera covers the whole grid; widen the world")

    @property
    def n_cameras(self) -> int:
        return self.config.n_cameras

    @property
    def n_train(self) -> int:
        return self.config.n_train

    @property
    def n_val(self) -> int:
        return self.config.n_val

    @property
    def n_eval(self) -> int:
        return self.config.n_eval

    @property
    def match_threshold_cells(self) -> float:
        return 0.5 / self.config.meters_per_cell

    def world_hash(self) -> str:
        return _config_hash(self.config)

    def coverage_report(self) -> dict:
        per_cam = [float(self.fov_masks[v].mean()) for v in range(self.n_cameras)]
        return {"union": self.union_coverage, "per_camera": per_cam}

    def split_size(self, split: str) -> int:
        return {TRAIN: self.n_train, VAL: self.n_val, EVAL: self.n_eval}[split]

    def visibility(self, occupancy: np.ndarray) -> np.ndarray:
        """FoV masks minus cells whose ray passes through an occupant."""
        cfg = self.config
        vis = self.fov_masks.copy()
        if not cfg.occlusion:
            return vis
        occ_flat = np.concatenate([occupancy.astype(bool).ravel(), [False]])
        for v in range(cfg.n_cameras):
            blocked = occ_flat[self._paths[v]].any(axis=1).reshape(cfg.grid_h, cfg.grid_w)
            vis[v] &= ~blocked
        return vis

    def render_views(self, occupancy: np.ndarray, noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Observation maps for a given occupancy grid.

        Per camera and visible cell, the map carries the occupancy indicator
        plus noise, broadcast across all channels; cells outside the camera's
        visibility are exactly zero.
        """
        cfg = self.config
        occupancy = np.asarray(occupancy)
        if occupancy.shape != (cfg.grid_h, cfg.grid_w):
            raise ConfigError(f"occupancy shape {occupancy.shape} does not match the grid")
        vis = self.visibility(occupancy)
        signal = occupancy.astype(np.float64)[None, :, :] + (0.0 if noise is None else noise)
        signal = signal * vis
        obs = np.repeat(signal[:, None, :, :], cfg.channels, axis=1)
        return obs, vis

    def instance(self, split: str, index: int) -> DetectionInstance:
        cfg = self.config
        if not 0 <= index < self.split_size(split):
            raise IndexError(f"{split} instance {index} out of range")
        rng = np.random.default_rng([cfg.seed, _SPLIT_TAGS[split], index])
        count = int(rng.integers(cfg.min_targets, cfg.max_targets + 1))
        flat = rng.choice(cfg.grid_h * cfg.grid_w, size=count, replace=False)
        occupancy = np.zeros((cfg.grid_h, cfg.grid_w), dtype=np.uint8)
        occupancy.ravel()[flat] = 1
        positions = tuple(sorted((int(f) // cfg.grid_w, int(f) % cfg.grid_w) for f in flat))
        noise = cfg.noise * rng.standard_normal((cfg.n_cameras, cfg.grid_h, cfg.grid_w))
        obs, vis = self.render_views(occupancy, noise)
        target = smooth_occupancy(occupancy, cfg.smooth_sigma)
        return DetectionInstance(occupancy, positions, target, obs, vis)

    def train_instance(self, i: int) -> DetectionInstance:
        return self.instance(TRAIN, i)

    def val_instance(self, i: int) -> DetectionInstance:
        return self.instance(VAL, i)

    def eval_instance(self, i: int) -> DetectionInstance:
        return self.instance(EVAL, i)

    def debug_dump(self, instance: DetectionInstance) -> dict:
        return {
            "positions": [list(p) for p in instance.positions],
            "occupancy": instance.occupancy.tolist(),
            "visibility": instance.visibility.astype(int).tolist(),
            "coverage": self.coverage_report(),
        }
