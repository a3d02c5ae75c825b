"""Procedural sim/real BEV scenes with a known corruption model.

Sim frames are clean outlines of cars and walls. Real frames are independent
scenes pushed through :class:`CorruptionModel`, which plays the role of the
unknown real sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bev
from .bev import BevConfig, BevGrid, OrientedBox
from .common import rng as make_rng
from .manifest import DatasetManifest, Entry

SENSOR_XY = (0.0, 0.0)


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    resolution: int = 64
    # a 20 m window keeps cars ~6x15 cells at 64 px, enough to survive jitter
    x_range: tuple[float, float] = (0.0, 20.0)
    y_range: tuple[float, float] = (-10.0, 10.0)
    n_cars: tuple[int, int] = (2, 6)
    car_width: tuple[float, float] = (1.6, 2.0)
    car_length: tuple[float, float] = (3.8, 4.8)
    n_walls: tuple[int, int] = (0, 3)
    wall_length: tuple[float, float] = (3.0, 10.0)
    clutter: int = 4  # small static blobs (poles, bushes)
    margin: float = 1.0
    max_attempts: int = 1000

    def __post_init__(self):
        if self.n_cars[0] < 0 or self.n_cars[1] < self.n_cars[0]:
            raise ValueError(f"bad n_cars range {self.n_cars}")

    @property
    def bev(self) -> BevConfig:
        return BevConfig(x_range=self.x_range, y_range=self.y_range, resolution=self.resolution)


@dataclass(frozen=True)
class CorruptionModel:
    dropout_p: float = 0.3
    jitter_sigma: float = 0.7
    ray_shadow: float = 0.5
    speckle_rate: float = 0.002

    def __post_init__(self):
        for name in ("dropout_p", "ray_shadow", "speckle_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


# ---------------------------------------------------------------------------
# rendering


def _segment_points(p0, p1, step: float) -> np.ndarray:
    n = max(2, int(math.ceil(math.dist(p0, p1) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return np.asarray(p0) * (1 - t) + np.asarray(p1) * t


def _rasterize(points_xy: np.ndarray, cfg: BevConfig, cells: np.ndarray) -> None:
    if len(points_xy) == 0:
        return
    x, y = points_xy[:, 0], points_xy[:, 1]
    keep = (x >= cfg.x_range[0]) & (x < cfg.x_range[1]) & (y >= cfg.y_range[0]) & (y < cfg.y_range[1])
    xi = np.clip(np.floor((x[keep] - cfg.x_range[0]) / cfg.cell_size).astype(int), 0, cfg.resolution - 1)
    yi = np.clip(np.floor((y[keep] - cfg.y_range[0]) / cfg.cell_size).astype(int), 0, cfg.resolution - 1)
    cells[cfg.resolution - 1 - xi, yi] = 1.0


def outline_points(box: OrientedBox, step: float) -> np.ndarray:
    c = box.corners()
    return np.concatenate([_segment_points(c[i], c[(i + 1) % 4], step) for i in range(4)])


def _inside(box: OrientedBox, cfg: BevConfig, margin: float) -> bool:
    c = box.corners()
    return bool((c[:, 0] >= cfg.x_range[0] + margin).all() and (c[:, 0] < cfg.x_range[1] - margin).all()
                and (c[:, 1] >= cfg.y_range[0] + margin).all() and (c[:, 1] < cfg.y_range[1] - margin).all())


def _sample_cars(spec: SceneSpec, rng: np.random.Generator) -> list[OrientedBox]:
    cfg = spec.bev
    n = int(rng.integers(spec.n_cars[0], spec.n_cars[1] + 1))
    cars: list[OrientedBox] = []
    attempts = 0
    while len(cars) < n:
        attempts += 1
        if attempts > spec.max_attempts:
            raise SceneError(f"could not place {n} non-overlapping cars in {spec.max_attempts} attempts")
        box = OrientedBox(
            cx=float(rng.uniform(cfg.x_range[0] + 3.0, cfg.x_range[1] - spec.margin)),
            cy=float(rng.uniform(cfg.y_range[0] + spec.margin, cfg.y_range[1] - spec.margin)),
            width=float(rng.uniform(*spec.car_width)),
            length=float(rng.uniform(*spec.car_length)),
            # a BEV rectangle cannot show its heading; labels use the half-turn representative
            yaw=float(rng.uniform(-math.pi / 2, math.pi / 2)),
        )
        if not _inside(box, cfg, spec.margin):
            continue
        # 0.5 m clearance so outlines never merge into one blob
        grown = OrientedBox(box.cx, box.cy, box.width + 1.0, box.length + 1.0, box.yaw)
        if any(bev.intersection_area(grown, c) > 0 for c in cars):
            continue
        cars.append(box)
    return cars


def gen_sim_frame(spec: SceneSpec, seed: int) -> tuple[BevGrid, list[OrientedBox]]:
    """Clean frame: car outlines, wall segments and a few clutter blobs."""
    rng = make_rng(seed, "scene")
    cfg = spec.bev
    cars = _sample_cars(spec, rng)
    cells = np.zeros((cfg.resolution, cfg.resolution), dtype=np.float32)
    step = cfg.cell_size / 4
    for car in cars:
        _rasterize(outline_points(car, step), cfg, cells)
    n_walls = int(rng.integers(spec.n_walls[0], spec.n_walls[1] + 1))
    for _ in range(n_walls):
        # walls run roughly along the road, at the lateral edges
        side = rng.choice([-1.0, 1.0])
        y0 = side * rng.uniform(0.6, 0.95) * cfg.y_range[1]
        x0 = rng.uniform(cfg.x_range[0], cfg.x_range[1] - spec.wall_length[0])
        length = rng.uniform(*spec.wall_length)
        ang = rng.normal(0.0, 0.1)
        p1 = (x0 + length * math.cos(ang), y0 + length * math.sin(ang))
        seg = _segment_points((x0, y0), p1, step)
        # walls may not run through cars
        free = np.ones(len(seg), dtype=bool)
        for car in cars:
            grown = OrientedBox(car.cx, car.cy, car.width + 1.0, car.length + 1.0, car.yaw)
            free &= ~grown.contains(seg[:, 0], seg[:, 1])
        _rasterize(seg[free], cfg, cells)
    for _ in range(spec.clutter):
        x = rng.uniform(*cfg.x_range)
        y = rng.uniform(*cfg.y_range)
        if any(OrientedBox(c.cx, c.cy, c.width + 1.0, c.length + 1.0, c.yaw).contains(x, y) for c in cars):
            continue
        r = rng.uniform(0.2, 0.6)
        ring = [(x + r * math.cos(t), y + r * math.sin(t)) for t in np.linspace(0, 2 * math.pi, 12)]
        _rasterize(np.asarray(ring), cfg, cells)
    return BevGrid(cells, cfg), cars


# ---------------------------------------------------------------------------
# corruption


def _shadow_mask(car: OrientedBox, cfg: BevConfig) -> np.ndarray:
    """Cells inside the car's angular wedge (seen from the sensor) beyond its center."""
    res = cfg.resolution
    rows, cols = np.mgrid[0:res, 0:res]
    x, y = cfg.cell_center(rows, cols)
    x = x - SENSOR_XY[0]
    y = y - SENSOR_XY[1]
    center_ang = math.atan2(car.cy - SENSOR_XY[1], car.cx - SENSOR_XY[0])
    corners = car.corners() - np.asarray(SENSOR_XY)
    rel = np.angle(np.exp(1j * (np.arctan2(corners[:, 1], corners[:, 0]) - center_ang)))
    lo, hi = rel.min(), rel.max()
    cell_rel = np.angle(np.exp(1j * (np.arctan2(y, x) - center_ang)))
    dist = np.hypot(x, y)
    return (cell_rel >= lo) & (cell_rel <= hi) & (dist > math.hypot(car.cx - SENSOR_XY[0], car.cy - SENSOR_XY[1]))


def corrupt_to_real(grid: BevGrid, labels: list[OrientedBox], model: CorruptionModel,
                    seed: int) -> tuple[BevGrid, list[OrientedBox]]:
    """Dropout, jitter, shadow wedges, then speckle. Labels pass through untouched."""
    rng = make_rng(seed, "corrupt")
    cfg = grid.config
    res = cfg.resolution
    cells = grid.cells.copy()

    occ = cells > 0
    if model.dropout_p > 0:
        occ &= ~(rng.random(occ.shape) < model.dropout_p)

    if model.jitter_sigma > 0:
        r, c = np.nonzero(occ)
        dr = np.rint(rng.normal(0.0, model.jitter_sigma, len(r))).astype(int)
        dc = np.rint(rng.normal(0.0, model.jitter_sigma, len(c))).astype(int)
        r2, c2 = r + dr, c + dc
        ok = (r2 >= 0) & (r2 < res) & (c2 >= 0) & (c2 < res)
        occ = np.zeros_like(occ)
        occ[r2[ok], c2[ok]] = True

    if model.ray_shadow > 0:
        for car in labels:
            if rng.random() < model.ray_shadow:
                occ &= ~_shadow_mask(car, cfg)

    if model.speckle_rate > 0:
        occ |= rng.random(occ.shape) < model.speckle_rate

    out = np.where(occ, 1.0, 0.0).astype(np.float32) if cfg.encoding == "binary" else \
        np.where(occ, np.maximum(cells, 1.0 / 255), 0.0).astype(np.float32)
    return BevGrid(out, cfg), list(labels)


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    sim: DatasetManifest
    real: DatasetManifest
    test: DatasetManifest
    paths: dict[str, Path] = field(default_factory=dict)


def _drive_spec(spec: SceneSpec, seed: int, stream: str, drive: int) -> SceneSpec:
    """Each drive gets its own surroundings: car density, walls, clutter."""
    rng = make_rng(seed, stream, "drive", drive)
    lo = int(rng.integers(spec.n_cars[0], spec.n_cars[1] + 1))
    hi = int(rng.integers(lo, spec.n_cars[1] + 1))
    wl = int(rng.integers(spec.n_walls[0], spec.n_walls[1] + 1))
    return SceneSpec(**{**spec.__dict__, "n_cars": (lo, hi), "n_walls": (wl, wl),
                        "clutter": int(rng.integers(0, 2 * spec.clutter + 1))})


def _write_split(out: Path, name: str, domain: str, n: int, spec: SceneSpec,
                 model: CorruptionModel | None, seed: int, frames_per_drive: int) -> DatasetManifest:
    fdir = out / name
    fdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        drive = i // frames_per_drive
        frame_seed = int(make_rng(seed, name, i).integers(0, 2**62))
        grid, labels = gen_sim_frame(_drive_spec(spec, seed, name, drive), frame_seed)
        if model is not None:
            grid, labels = corrupt_to_real(grid, labels, model, frame_seed)
        stem = f"{name}_d{drive:03d}_{i:05d}"
        fpath, lpath = fdir / f"{stem}.npy", fdir / f"{stem}.txt"
        bev.save_frame(fpath, grid)
        bev.write_labels(lpath, labels)
        entries.append(Entry(fpath.resolve(), lpath.resolve(), domain, "identity"))
    man = DatasetManifest(entries, seed)
    man.save(out / f"{name}.tsv")
    return man


def gen_corpus(spec: SceneSpec, model: CorruptionModel, n_sim: int, n_real: int, n_test: int,
               seed: int, out_dir: str | Path, frames_per_drive: int = 10) -> Corpus:
    """Write sim / real / test splits under ``out_dir`` with disjoint seed streams."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = _write_split(out, "sim", "sim", n_sim, spec, None, seed, frames_per_drive)
    real = _write_split(out, "real", "real", n_real, spec, model, seed, frames_per_drive)
    test = _write_split(out, "test", "real", n_test, spec, model, seed, frames_per_drive)
    return Corpus(sim, real, test, {k: out / f"{k}.tsv" for k in ("sim", "real", "test")})


def drive_of(frame_id: str) -> str:
    """Drive key of a frame id like ``real_d003_00031``."""
    return frame_id.rsplit("_", 1)[0]
