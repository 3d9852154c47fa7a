"""Synthetic driving worlds, 2D LiDAR ray casting and single-shot OGM rendering.

A world is a straight road along +x lined with rectangular buildings; agents
are constant-velocity rectangles in the lanes beside the ego. Everything
moves with elastic reflection at the world bounds.

Random streams: every scene draws from its own PCG64 generator seeded with
``SeedSequence([seed, 1, scene_index])``; the train/val/test split permutation
uses ``SeedSequence([seed, 2])``. Scenes can therefore be generated in any
order or in parallel with bit-identical results.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, RejectedInputError
from .manifest import DatasetManifest, SequenceEntry
from .ogm import (
    CLASS_VALUES,
    FREE,
    OCCLUDED,
    OCCUPIED,
    GridSpec,
    Ogm,
    ScenarioSequence,
    write_sequence,
)
from .util import config_hash

logger = logging.getLogger(__name__)

_AXIS_EPS = 1e-12


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in meters."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def intersects(self, other: Rect) -> bool:
        return not (
            self.xmax < other.xmin
            or other.xmax < self.xmin
            or self.ymax < other.ymin
            or other.ymax < self.ymin
        )


@dataclass(frozen=True)
class Agent:
    position: tuple[float, float]
    velocity: tuple[float, float]
    half_extents: tuple[float, float] = (2.0, 0.9)

    def __post_init__(self):
        if not (self.half_extents[0] > 0 and self.half_extents[1] > 0):
            raise ValueError("agent half extents must be strictly positive")

    @property
    def footprint(self) -> Rect:
        (x, y), (hx, hy) = self.position, self.half_extents
        return Rect(x - hx, y - hy, x + hx, y + hy)

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True)
class World:
    bounds: Rect
    static_obstacles: tuple[Rect, ...]
    agents: tuple[Agent, ...]
    ego: Agent
    v_max: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))
        object.__setattr__(self, "agents", tuple(self.agents))
        for r in self.static_obstacles:
            if not r.intersects(self.bounds):
                raise ValueError(f"obstacle {r} lies outside the world bounds")
        for a in (*self.agents, self.ego):
            if not a.footprint.intersects(self.bounds):
                raise ValueError(f"agent at {a.position} lies outside the world bounds")
            if not (math.isfinite(a.speed) and a.speed <= self.v_max):
                raise ValueError(f"agent speed {a.speed} exceeds v_max={self.v_max}")

    def obstacles(self) -> list[Rect]:
        """Everything a LiDAR ray can hit: buildings and agent footprints."""
        return [*self.static_obstacles, *(a.footprint for a in self.agents)]


@dataclass(frozen=True, eq=False)
class LidarScan:
    origin: tuple[float, float]
    angles: np.ndarray
    ranges: np.ndarray
    max_range: float

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        r = np.asarray(self.ranges, dtype=np.float64)
        if a.shape != r.shape or a.ndim != 1:
            raise ValueError("angles and ranges must be 1D arrays of equal length")
        if not np.all((r > 0) & (r <= self.max_range)):
            raise ValueError("ranges must lie in (0, max_range]")
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "ranges", r)

    @property
    def hits(self) -> np.ndarray:
        return self.ranges < self.max_range


def _reflect(p: float, v: float, dt: float, lo: float, hi: float) -> tuple[float, float]:
    """Advance a 1D point with elastic reflection inside [lo, hi]."""
    u = p + v * dt - lo
    span = hi - lo
    k = math.floor(u / span)
    r = u - k * span
    if k % 2 == 0:
        return lo + r, v
    return hi - r, -v


def _step_agent(a: Agent, dt: float, bounds: Rect) -> Agent:
    x, vx = _reflect(a.position[0], a.velocity[0], dt, bounds.xmin, bounds.xmax)
    y, vy = _reflect(a.position[1], a.velocity[1], dt, bounds.ymin, bounds.ymax)
    return replace(a, position=(x, y), velocity=(vx, vy))


def step_world(world: World, dt: float) -> World:
    """Advance every agent (and the ego) by ``dt`` seconds.

    Agent centres reflect elastically off the world bounds; static obstacles
    do not move.
    """
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    return replace(
        world,
        agents=tuple(_step_agent(a, dt, world.bounds) for a in world.agents),
        ego=_step_agent(world.ego, dt, world.bounds),
    )


def ray_directions(angles: np.ndarray) -> np.ndarray:
    """Unit directions with numerically-zero components snapped to exactly 0."""
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    d[np.abs(d) < _AXIS_EPS] = 0.0
    return d


def scan_angles(n_rays: int, offset: float = 0.0) -> np.ndarray:
    return offset + 2.0 * np.pi * np.arange(n_rays) / n_rays


def _slab_axis(o, d, lo, hi):
    # o: scalar, d: (N,), lo/hi: (M,) -> entry/exit parameters (N, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - o) / d[:, None]
        t2 = (hi[None, :] - o) / d[:, None]
    tlo, thi = np.minimum(t1, t2), np.maximum(t1, t2)
    parallel = d == 0.0
    if parallel.any():
        inside = (lo <= o) & (o <= hi)
        tlo[parallel] = np.where(inside, -np.inf, np.inf)
        thi[parallel] = np.where(inside, np.inf, -np.inf)
    return tlo, thi


def cast_rays(
    world: World,
    origin: tuple[float, float],
    n_rays: int,
    max_range: float,
    angle_offset: float = 0.0,
) -> LidarScan:
    """Exact ray/rectangle intersection for ``n_rays`` uniformly spaced beams."""
    if n_rays < 4:
        raise ConfigError(f"need at least 4 rays, got {n_rays}")
    if not max_range > 0:
        raise ConfigError(f"max_range must be positive, got {max_range}")
    ox, oy = float(origin[0]), float(origin[1])
    rects = world.obstacles()
    for r in rects:
        if r.contains(ox, oy):
            raise RejectedInputError(f"ray origin ({ox}, {oy}) lies inside obstacle {r}")

    angles = scan_angles(n_rays, angle_offset)
    ranges = np.full(n_rays, float(max_range))
    if rects:
        box = np.array([[r.xmin, r.ymin, r.xmax, r.ymax] for r in rects])
        d = ray_directions(angles)
        tx0, tx1 = _slab_axis(ox, d[:, 0], box[:, 0], box[:, 2])
        ty0, ty1 = _slab_axis(oy, d[:, 1], box[:, 1], box[:, 3])
        t_near = np.maximum(tx0, ty0)
        t_far = np.minimum(tx1, ty1)
        hit = (t_near <= t_far) & (t_near > 0)
        t = np.where(hit, t_near, np.inf).min(axis=1)
        ranges = np.minimum(t, max_range)
    return LidarScan((ox, oy), angles, ranges, float(max_range))


# Priority codes used when several rays touch one cell.
_UNSEEN, _SEEN_FREE, _SHADOW, _HIT = 0, 1, 2, 3
_CODE_TO_CLASS = np.array([OCCLUDED, FREE, OCCLUDED, OCCUPIED], dtype=np.int8)


def render_classes(scan: LidarScan, grid_spec: GridSpec) -> np.ndarray:
    """Class labels (height, width) for a scan taken at the grid centre.

    Each ray is walked cell by cell (grid-line crossings sorted by ray
    parameter). Along one ray, cells before the hit cell are free, the cell
    holding the hit is occupied and later cells are shadowed. Across rays
    occupied beats shadowed beats free; untouched cells are occluded.
    """
    W, H, res = grid_spec.width, grid_spec.height, grid_spec.resolution
    ox, oy = W / 2.0, H / 2.0
    d = ray_directions(scan.angles)
    dx, dy = d[:, 0:1], d[:, 1:2]
    T = scan.max_range / res
    r = scan.ranges / res
    hit = scan.hits
    n = len(r)

    kx = np.arange(W + 1, dtype=np.float64)[None, :]
    ky = np.arange(H + 1, dtype=np.float64)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = (kx - ox) / dx
        ty = (ky - oy) / dy
    vx = ((dx > 0) & (kx > ox)) | ((dx < 0) & (kx <= ox))
    vy = ((dy > 0) & (ky > oy)) | ((dy < 0) & (ky <= oy))
    tx = np.where(vx & (tx < T), tx, np.inf)
    ty = np.where(vy & (ty < T), ty, np.inf)

    t_all = np.concatenate([tx, ty], axis=1)
    is_x = np.concatenate([np.ones_like(tx, bool), np.zeros_like(ty, bool)], axis=1)
    order = np.argsort(t_all, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_all, order, axis=1)
    x_sorted = np.take_along_axis(is_x, order, axis=1) & np.isfinite(t_sorted)
    y_sorted = ~np.take_along_axis(is_x, order, axis=1) & np.isfinite(t_sorted)

    zeros = np.zeros((n, 1))
    t_start = np.concatenate([zeros, t_sorted], axis=1)
    t_end = np.minimum(np.concatenate([t_sorted, np.full((n, 1), np.inf)], axis=1), T)
    cx = math.floor(ox) + np.sign(dx).astype(np.int64) * np.concatenate(
        [zeros.astype(np.int64), np.cumsum(x_sorted, axis=1)], axis=1
    )
    cy = math.floor(oy) + np.sign(dy).astype(np.int64) * np.concatenate(
        [zeros.astype(np.int64), np.cumsum(y_sorted, axis=1)], axis=1
    )

    rr = r[:, None]
    hh = hit[:, None]
    code = np.where(
        hh & (t_start <= rr) & (rr < t_end),
        _HIT,
        np.where(hh & (t_start > rr), _SHADOW, _SEEN_FREE),
    )
    valid = (t_start < t_end) & (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)

    rows = (H - 1 - cy[valid]).astype(np.int64)
    flat = rows * W + cx[valid]
    codes = np.zeros(W * H, dtype=np.int8)
    np.maximum.at(codes, flat, code[valid].astype(np.int8))
    return _CODE_TO_CLASS[codes].reshape(H, W)


def render_ogm(scan: LidarScan, grid_spec: GridSpec) -> Ogm:
    return Ogm(grid_spec, CLASS_VALUES[render_classes(scan, grid_spec)])


# --------------------------------------------------------------------------
# Scene synthesis


@dataclass
class SimConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(64, 64, 1.0 / 3.0))
    dt: float = 0.1
    n_scenes: int = 10
    frames_per_scene: int = 100
    H: int = 5
    P: int = 15
    window_stride: int = 5
    n_rays: int = 720
    max_range: float = 10.0
    world_length: float = 120.0
    world_width: float = 40.0
    road_half_width: float = 5.0
    lane_offset: float = 3.0
    building_length: tuple[float, float] = (3.0, 12.0)
    building_depth: tuple[float, float] = (2.0, 6.0)
    building_gap: tuple[float, float] = (1.0, 6.0)
    building_setback: tuple[float, float] = (0.5, 3.0)
    n_agents: tuple[int, int] = (1, 4)
    agent_speed: tuple[float, float] = (0.5, 4.0)
    ego_speed: tuple[float, float] = (0.0, 4.0)
    ego_start_x: tuple[float, float] = (30.0, 60.0)
    v_max: float = 10.0
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec.from_dict(self.grid)
        for name in (
            "building_length", "building_depth", "building_gap", "building_setback",
            "n_agents", "agent_speed", "ego_speed", "ego_start_x", "splits",
        ):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.H < 1 or self.P < 1:
            raise ConfigError("H and P must be >= 1")
        if self.frames_per_scene < self.H + self.P:
            raise ConfigError(
                f"frames_per_scene={self.frames_per_scene} < H+P={self.H + self.P}"
            )
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.window_stride < 1:
            raise ConfigError("window_stride must be >= 1")
        if self.n_rays < 4 or not self.max_range > 0:
            raise ConfigError("need n_rays >= 4 and max_range > 0")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ConfigError(f"split fractions must be three non-negative numbers summing to 1: {self.splits}")
        if max(self.agent_speed[1], self.ego_speed[1]) > self.v_max:
            raise ConfigError("speed ranges exceed v_max")
        if self.lane_offset + 1.2 > self.road_half_width:
            raise ConfigError("agent lanes must fit inside the road")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        return config_hash(self.to_dict())


def scene_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1, scene_index])))


def _buildings(cfg: SimConfig, rng: np.random.Generator, side: int) -> list[Rect]:
    out = []
    x = float(rng.uniform(-cfg.building_length[1], 0.0))
    while x < cfg.world_length:
        length = float(rng.uniform(*cfg.building_length))
        depth = float(rng.uniform(*cfg.building_depth))
        near = cfg.road_half_width + float(rng.uniform(*cfg.building_setback))
        x0, x1 = max(x, 0.0), min(x + length, cfg.world_length)
        if x1 - x0 > 0.5:
            if side > 0:
                out.append(Rect(x0, near, x1, near + depth))
            else:
                out.append(Rect(x0, -near - depth, x1, -near))
        x += length + float(rng.uniform(*cfg.building_gap))
    return out


def make_world(cfg: SimConfig, rng: np.random.Generator) -> World:
    L, Wd = cfg.world_length, cfg.world_width
    bounds = Rect(0.0, -Wd / 2, L, Wd / 2)
    statics = _buildings(cfg, rng, +1) + _buildings(cfg, rng, -1)
    ego_speed = float(rng.uniform(*cfg.ego_speed))
    ego = Agent((float(rng.uniform(*cfg.ego_start_x)), 0.0), (ego_speed, 0.0))
    agents = []
    for _ in range(int(rng.integers(cfg.n_agents[0], cfg.n_agents[1] + 1))):
        lane = cfg.lane_offset * (1.0 if rng.random() < 0.5 else -1.0)
        # bias agents towards the ego's neighbourhood so they enter the grid
        x = float(np.clip(ego.position[0] + rng.normal(0.0, 15.0), 1.0, L - 1.0))
        speed = float(rng.uniform(*cfg.agent_speed)) * (1.0 if rng.random() < 0.5 else -1.0)
        half = (float(rng.uniform(1.5, 2.5)), float(rng.uniform(0.8, 1.0)))
        agents.append(Agent((x, lane), (speed, 0.0), half))
    return World(bounds, tuple(statics), tuple(agents), ego, v_max=cfg.v_max)


def simulate_scene(cfg: SimConfig, world: World, sequence_id: str = "") -> ScenarioSequence:
    frames, poses = [], []
    for t in range(cfg.frames_per_scene):
        if t > 0:
            world = step_world(world, cfg.dt)
        ego = world.ego
        scan = cast_rays(world, ego.position, cfg.n_rays, cfg.max_range)
        frames.append(render_ogm(scan, cfg.grid))
        heading = math.atan2(ego.velocity[1], ego.velocity[0])
        poses.append((ego.position[0], ego.position[1], heading))
    return ScenarioSequence(cfg.grid, tuple(frames), np.array(poses), cfg.H, cfg.P, sequence_id)


def _scene_job(args) -> tuple[str, bytes]:
    from .ogm import encode_sequence

    cfg, seed, index = args
    sid = scene_id(index)
    seq = simulate_scene(cfg, make_world(cfg, scene_rng(seed, index)), sid)
    return sid, encode_sequence(seq)


def scene_id(index: int) -> str:
    return f"scene_{index:04d}"


def split_assignment(n_scenes: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> list[str]:
    """Deterministic scene-level split; counts are floor(frac * n), remainder to test."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    perm = rng.permutation(n_scenes)
    n_train = math.floor(fractions[0] * n_scenes + 1e-9)
    n_val = math.floor(fractions[1] * n_scenes + 1e-9)
    labels = [""] * n_scenes
    for rank, idx in enumerate(perm):
        labels[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def generate_dataset(config: SimConfig, seed: int, out_dir, workers: int = 1) -> DatasetManifest:
    """Write one OGMS file per scene plus ``manifest.json`` under ``out_dir``."""
    config.validate()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    jobs = [(config, seed, i) for i in range(config.n_scenes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scene_job, jobs))
    else:
        results = [_scene_job(j) for j in jobs]

    splits = split_assignment(config.n_scenes, seed, config.splits)
    entries = []
    for (sid, blob), split in zip(results, splits):
        rel = f"scenes/{sid}.ogms"
        (out / rel).write_bytes(blob)
        entries.append(SequenceEntry(sid, rel, split, config.frames_per_scene))
        logger.debug("wrote %s (%s)", rel, split)
    manifest = DatasetManifest(
        root=out,
        kind="dataset",
        grid=config.grid,
        H=config.H,
        P=config.P,
        window_stride=config.window_stride,
        sequences=entries,
        meta={"seed": seed, "config": config.to_dict(), "config_hash": config.hash()},
    )
    manifest.save()
    return manifest
