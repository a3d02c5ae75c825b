"""Average precision over oriented boxes (all-point interpolation) and mAP reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import bev
from .bev import OrientedBox
from .manifest import DatasetManifest

PROTOCOL = "all-point interpolated AP, greedy best-IoU matching among unmatched GT"


class EvalError(ValueError):
    pass


@dataclass
class APResult:
    ap: float
    recall: list[float]
    precision: list[float]
    n_gt: int
    n_det: int
    empty: bool = False  # no GT and no detections: AP defined as 1


def match_detections(dets: Sequence[tuple[str, OrientedBox]], gts: Mapping[str, Sequence[OrientedBox]],
                     iou_threshold: float) -> list[bool]:
    """TP flags for detections already in ranked order."""
    used = {f: np.zeros(len(g), dtype=bool) for f, g in gts.items()}
    flags = []
    for fid, d in dets:
        g = gts.get(fid, ())
        best, best_iou = -1, -1.0
        for j, gt in enumerate(g):
            if used[fid][j] or gt.class_id != d.class_id:
                continue
            iou = bev.oriented_iou(d, gt)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_threshold:
            used[fid][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def rank_detections(dets: Sequence[tuple[str, OrientedBox]]) -> list[tuple[str, OrientedBox]]:
    """Descending score; ties by frame id, then input order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, dets[i][0], i))
    return [dets[i] for i in order]


def average_precision(detections: Sequence[tuple[str, OrientedBox]],
                      ground_truth: Mapping[str, Sequence[OrientedBox]],
                      iou_threshold: float = 0.5) -> APResult:
    n_gt = sum(len(g) for g in ground_truth.values())
    n_det = len(detections)
    if n_gt == 0:
        return APResult(1.0 if n_det == 0 else 0.0, [], [], 0, n_det, empty=n_det == 0)
    if n_det == 0:
        return APResult(0.0, [], [], n_gt, 0)
    if any(d.score is None for _, d in detections):
        raise EvalError("detections must carry scores")
    ranked = rank_detections(detections)
    tp = np.array(match_detections(ranked, ground_truth, iou_threshold), dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope, then area under the recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return APResult(ap, recall.tolist(), precision.tolist(), n_gt, n_det)


@dataclass
class EvalReport:
    per_class: dict[int, APResult]
    iou_threshold: float
    dataset_hash: str
    protocol: str = PROTOCOL

    @property
    def mAP(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([r.ap for r in self.per_class.values()]))

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "iou_threshold": self.iou_threshold,
            "dataset_hash": self.dataset_hash,
            "mAP": self.mAP,
            "classes": {str(c): asdict(r) for c, r in sorted(self.per_class.items())},
        }

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {self.protocol}; iou_threshold={self.iou_threshold}\n")
            w = csv.writer(fh)
            w.writerow(["class", "ap", "n_gt", "n_det"])
            for c, r in sorted(self.per_class.items()):
                w.writerow([c, repr(r.ap), r.n_gt, r.n_det])
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        return csv_path, json_path


def evaluate(detections: Sequence[tuple[str, OrientedBox]], ground_truth: Mapping[str, Sequence[OrientedBox]],
             iou_threshold: float = 0.5, dataset_hash: str = "", classes: Sequence[int] | None = None) -> EvalReport:
    if classes is None:
        classes = sorted({b.class_id for g in ground_truth.values() for b in g} |
                         {d.class_id for _, d in detections}) or [0]
    per_class = {}
    for c in classes:
        dets = [(f, d) for f, d in detections if d.class_id == c]
        gts = {f: [b for b in g if b.class_id == c] for f, g in ground_truth.items()}
        per_class[c] = average_precision(dets, gts, iou_threshold)
    return EvalReport(per_class, iou_threshold, dataset_hash)


def ground_truth_of(manifest: DatasetManifest) -> dict[str, list[OrientedBox]]:
    gts = {}
    for e in manifest:
        if e.frame_id in gts:
            raise EvalError(f"duplicate frame id {e.frame_id!r} in manifest")
        gts[e.frame_id] = bev.read_labels(e.label)
    return gts


def map_over_manifest(detections_file: str | Path, manifest: DatasetManifest,
                      iou_threshold: float = 0.5) -> EvalReport:
    from .detector import read_detections

    dets = read_detections(detections_file)
    gts = ground_truth_of(manifest)
    unknown = sorted({f for f, _ in dets} - set(gts))
    if unknown:
        raise EvalError(f"detections reference frames not in the manifest: {unknown[:5]}")
    return evaluate(dets, gts, iou_threshold, manifest.content_hash)


def write_curve_svg(path: str | Path, series: Mapping[str, Sequence[tuple[float, float]]],
                    xlabel: str = "sim:real ratio", ylabel: str = "mAP (%)") -> None:
    """Minimal line chart of mAP against augmentation ratio."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        xs, ys = zip(*sorted(pts)) if pts else ((), ())
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
