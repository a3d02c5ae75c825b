"""Mixed real + mapped-sim training sets, style selection, and the experiment matrix."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import traceback
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import bev
from . import detector as det
from . import evaluation as ev
from .common import rng as make_rng
from .manifest import DatasetManifest, Entry
from .sensor_models import MappingKind, map_frames
from .toy_world import drive_of
from .training import TrainConfig, load_checkpoint, load_cyclegan, load_grids, load_nst, preset_config

log = logging.getLogger(__name__)

PAPER_RATIOS = (0, 1, 2, 4, 8)
# KITTI test mAP (%) at paper scale, 100k sim frames for the mixed rows; kept for comparison, never asserted
REFERENCE_MAP = {"sim": 12.1, "real": 63.1, "real+sim": 65.3, "real+nst": 69.3, "real+cyclegan": 71.5}
BLOCKS = 13  # drive descriptor is a 13x13 grid of block-mean occupancy


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class MixSpec:
    """``ratio`` sim frames per real frame; ``pure_sim`` drops the real part (the sim-only baseline)."""

    ratio: float = 0.0
    mapping: MappingKind = MappingKind()
    pure_sim: bool = False
    replacement: bool = False
    allow_overlap: bool = False  # may the pool reuse frames the sensor model was trained on?

    def __post_init__(self):
        if not (self.ratio >= 0 and math.isfinite(self.ratio)):
            raise AugmentError(f"ratio must be a finite number >= 0, got {self.ratio}")
        if self.pure_sim and self.ratio == 0:
            raise AugmentError("pure-sim mode needs ratio > 0 (sim frames per real frame)")

    @property
    def tag(self) -> str:
        r = f"{self.ratio:g}"
        return f"sim{r}x-{self.mapping}" if self.pure_sim else f"real+{r}x-{self.mapping}"


# ---------------------------------------------------------------------------
# mapping networks


def load_mapping_network(kind: MappingKind, checkpoint: str | Path | None) -> nn.Module | None:
    """The module ``map_frames`` expects: CycleGAN G, or the NST transformer."""
    if kind.name == "identity":
        return None
    if checkpoint is None:
        raise AugmentError(f"{kind} mapping needs a checkpoint")
    if kind.name == "cyclegan":
        return load_cyclegan(checkpoint).G.eval()
    model = load_nst(checkpoint)
    if kind.style_index >= model.arch.n_styles:
        raise AugmentError(f"style {kind.style_index} not in a bank of {model.arch.n_styles}")
    return model.transformer.eval()


def _nsm_training_ids(checkpoint: str | Path | None) -> set[str]:
    if checkpoint is None:
        return set()
    return set(load_checkpoint(checkpoint).meta.get("train_frame_ids", []))


# ---------------------------------------------------------------------------
# manifests


def build_augmented_manifest(real: DatasetManifest, sim: DatasetManifest, spec: MixSpec,
                             out_dir: str | Path, network: nn.Module | None = None, seed: int = 0,
                             exclude_ids: Sequence[str] = (), batch_size: int = 16) -> DatasetManifest:
    """Sample the sim pool, map and materialize it under ``out_dir``, then shuffle in the real set.

    Labels are copied byte-for-byte; mapping only changes the frames.
    """
    if spec.ratio == 0 and not spec.pure_sim:
        return DatasetManifest(list(real.entries), real.seed)
    excluded = set() if spec.allow_overlap else set(exclude_ids)
    pool = [e for e in sim if e.frame_id not in excluded]
    need = int(round(spec.ratio * len(real)))
    if need > len(pool) and not spec.replacement:
        raise AugmentError(f"need {need} sim frames for ratio {spec.ratio:g} x {len(real)} real, "
                           f"pool has {len(pool)} (enable replacement to resample)")
    if need and not pool:
        raise AugmentError("sim pool is empty")
    pick_rng = make_rng(seed, "augment", "sample")
    picks = pick_rng.integers(0, len(pool), need) if spec.replacement else pick_rng.permutation(len(pool))[:need]

    out = Path(out_dir)
    fdir = out / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    sampled = [pool[i] for i in picks]
    stems = [f"{k:06d}_{e.frame_id}" for k, e in enumerate(sampled)]
    if spec.mapping.name == "identity":
        for e, stem in zip(sampled, stems):
            shutil.copyfile(e.frame, fdir / f"{stem}.npy")
    else:
        if network is None:
            raise AugmentError(f"{spec.mapping} mapping needs a loaded network")
        for i in range(0, len(sampled), batch_size):
            chunk = sampled[i:i + batch_size]
            grids = [bev.load_frame(e.frame) for e in chunk]
            for stem, g in zip(stems[i:i + batch_size], map_frames(spec.mapping, grids, network, batch_size=batch_size)):
                bev.save_frame(fdir / f"{stem}.npy", g)
    entries = []
    for e, stem in zip(sampled, stems):
        shutil.copyfile(e.label, fdir / f"{stem}.txt")
        entries.append(Entry((fdir / f"{stem}.npy").resolve(), (fdir / f"{stem}.txt").resolve(),
                             "sim", str(spec.mapping)))
    if not spec.pure_sim:
        entries = list(real.entries) + entries
    order = make_rng(seed, "augment", "interleave").permutation(len(entries))
    man = DatasetManifest([entries[i] for i in order], seed)
    man.save(out / "manifest.tsv")
    return man


# ---------------------------------------------------------------------------
# style bank


def block_means(cells: np.ndarray, blocks: int = BLOCKS) -> np.ndarray:
    """Mean occupancy over a ``blocks x blocks`` partition (uneven remainders allowed)."""
    rows = np.array_split(np.arange(cells.shape[0]), blocks)
    cols = np.array_split(np.arange(cells.shape[1]), blocks)
    return np.array([[cells[np.ix_(r, c)].mean() for c in cols] for r in rows], dtype=np.float64).ravel()


@dataclass
class StyleBank:
    frames: torch.Tensor  # [N, 1, H, W]
    frame_ids: list[str]
    drive_groups: list[list[str]]

    def __len__(self) -> int:
        return len(self.frame_ids)


def build_style_bank(real: DatasetManifest, n: int, seed: int = 0) -> StyleBank:
    """Cluster drives by block-mean occupancy and take the frame nearest each centroid."""
    from sklearn.cluster import KMeans

    if n < 1:
        raise AugmentError("style bank size must be >= 1")
    by_drive: dict[str, list[int]] = defaultdict(list)
    for i, e in enumerate(real):
        by_drive[drive_of(e.frame_id)].append(i)
    drives = sorted(by_drive)
    if n > len(drives):
        raise AugmentError(f"asked for {n} styles but the manifest has only {len(drives)} drives")
    grids = load_grids(real)
    frame_desc = np.stack([block_means(g[0].numpy()) for g in grids])
    drive_desc = np.stack([frame_desc[by_drive[d]].mean(axis=0) for d in drives])
    km = KMeans(n_clusters=n, n_init=10, random_state=int(make_rng(seed, "stylebank").integers(0, 2**31 - 1)))
    assign = km.fit_predict(drive_desc)
    picks, groups = [], []
    for k in range(n):
        members = [d for d, a in zip(drives, assign) if a == k]
        idx = [i for d in members for i in by_drive[d]]
        dist = np.linalg.norm(frame_desc[idx] - km.cluster_centers_[k], axis=1)
        picks.append(idx[int(np.argmin(dist))])  # argmin keeps the first on ties
        groups.append(members)
    return StyleBank(grids[picks].clone(), [real.entries[i].frame_id for i in picks], groups)


# ---------------------------------------------------------------------------
# style selection


@dataclass
class StyleRanking:
    best: int
    map_by_style: list[float]

    @property
    def order(self) -> list[int]:
        return sorted(range(len(self.map_by_style)), key=lambda k: (-self.map_by_style[k], k))

    def to_json(self) -> dict:
        return {"best": self.best, "map_by_style": self.map_by_style, "ranking": self.order}


def select_best_style(transformer: nn.Module, n_styles: int, probe: nn.Module, probe_cfg: det.DetectorConfig,
                      probe_set: DatasetManifest, iou_threshold: float = 0.5,
                      conf_threshold: float = 0.05) -> StyleRanking:
    """Map the probe set through every style and score it with a real-only detector."""
    if n_styles < 1:
        raise AugmentError("no candidate styles")
    if len(probe_set) == 0:
        raise AugmentError("probe set is empty")
    grids = [bev.load_frame(e.frame) for e in probe_set]
    gts = ev.ground_truth_of(probe_set)
    ids = probe_set.frame_ids()
    scores = []
    for k in range(n_styles):
        mapped = map_frames(MappingKind("nst", k), grids, transformer)
        frames = torch.from_numpy(np.stack([g.cells for g in mapped])).unsqueeze(1)
        dets = det.detect(probe, probe_cfg, frames, conf_threshold=conf_threshold)
        flat = [(f, b) for f, bs in zip(ids, dets) for b in bs]
        scores.append(ev.evaluate(flat, gts, iou_threshold).mAP)
    best = max(range(n_styles), key=lambda k: (scores[k], -k))
    return StyleRanking(best, scores)


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass
class MatrixConfig:
    real: Path
    sim: Path
    test: Path
    out_dir: Path
    ratios: tuple[float, ...] = (0, 1, 2)
    mappings: tuple[str, ...] = ("identity", "cyclegan")
    table_ratio: float = 2.0
    pure_sim_ratio: float = 1.0
    checkpoints: dict[str, str] = field(default_factory=dict)  # mapping name -> checkpoint path
    train: TrainConfig | None = None
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig.desk)
    iou_threshold: float = 0.5
    conf_threshold: float = 0.05
    allow_overlap: bool = False
    replacement: bool = False


TABLE_NAMES = {"identity": "real+sim", "cyclegan": "real+cyclegan"}


@dataclass
class CellResult:
    tag: str
    map_percent: float
    error: str | None = None


def _table_name(mapping: MappingKind) -> str:
    return "real+nst" if mapping.name == "nst" else TABLE_NAMES[mapping.name]


def _run_cell(mc: MatrixConfig, spec: MixSpec, real, sim, test, networks, exclude) -> float:
    cell_dir = mc.out_dir / "cells" / spec.tag
    train_cfg = mc.train or preset_config("detector")
    man = build_augmented_manifest(real, sim, spec, cell_dir, networks.get(str(spec.mapping)), train_cfg.seed,
                                   exclude_ids=exclude.get(spec.mapping.name, ()))
    res = det.train_detector(train_cfg, mc.detector, man, checkpoint_path=cell_dir / "detector.ckpt")
    frames = load_grids(test)
    dets = det.detect(res.info["model"], mc.detector, frames, conf_threshold=mc.conf_threshold)
    det.write_detections(cell_dir / "detections.txt", test.frame_ids(), dets)
    report = ev.map_over_manifest(cell_dir / "detections.txt", test, mc.iou_threshold)
    report.write(cell_dir)
    return 100.0 * report.mAP


def run_experiment_matrix(mc: MatrixConfig) -> dict[str, CellResult]:
    """Train one detector per cell, score on the fixed test split, write table1.csv and curve.csv.

    A failing cell is recorded (NaN plus message in failures.json) and the matrix moves on.
    """
    out = Path(mc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    real, sim, test = (DatasetManifest.load(p) for p in (mc.real, mc.sim, mc.test))
    kinds = [MappingKind.parse(m) for m in mc.mappings]
    networks: dict[str, nn.Module | None] = {}
    exclude: dict[str, set[str]] = {}
    load_errors: dict[str, str] = {}
    for k in kinds:
        ckpt = mc.checkpoints.get(k.name)
        try:
            networks[str(k)] = load_mapping_network(k, ckpt)
            exclude[k.name] = _nsm_training_ids(ckpt)
        except Exception as exc:  # recorded per cell below
            load_errors[str(k)] = f"{type(exc).__name__}: {exc}"

    results: dict[str, CellResult] = {}

    def cell(spec: MixSpec) -> CellResult:
        if spec.ratio == 0 and not spec.pure_sim:
            spec = MixSpec(0.0)  # mapping unused: one shared real-only cell
        if spec.tag in results:
            return results[spec.tag]
        if str(spec.mapping) in load_errors:
            r = CellResult(spec.tag, float("nan"), load_errors[str(spec.mapping)])
        else:
            spec = MixSpec(spec.ratio, spec.mapping, spec.pure_sim, mc.replacement, mc.allow_overlap)
            try:
                r = CellResult(spec.tag, _run_cell(mc, spec, real, sim, test, networks, exclude))
            except Exception as exc:
                log.error("cell %s failed: %s", spec.tag, exc)
                log.debug(traceback.format_exc())
                r = CellResult(spec.tag, float("nan"), f"{type(exc).__name__}: {exc}")
        results[spec.tag] = r
        log.info("cell %s: %.2f", spec.tag, r.map_percent)
        return r

    table = [("sim", cell(MixSpec(mc.pure_sim_ratio, MappingKind(), pure_sim=True))),
             ("real", cell(MixSpec(0.0)))]
    for k in kinds:
        table.append((_table_name(k), cell(MixSpec(mc.table_ratio, k))))
    curve = [(r, k, cell(MixSpec(float(r), k))) for r in mc.ratios for k in kinds]

    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["training_data", "map_percent", "reference_map_percent"])
        for name, r in table:
            w.writerow([name, f"{r.map_percent:.4f}", REFERENCE_MAP.get(name, "")])
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "mapping", "map_percent"])
        for ratio, k, r in curve:
            w.writerow([f"{ratio:g}", str(k), f"{r.map_percent:.4f}"])
    failures = {t: r.error for t, r in sorted(results.items()) if r.error}
    (out / "failures.json").write_text(json.dumps(failures, indent=1, sort_keys=True))
    series: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for ratio, k, r in curve:
        if math.isfinite(r.map_percent):
            series[str(k)].append((float(ratio), r.map_percent))
    ev.write_curve_svg(out / "curve.svg", series)
    return results
