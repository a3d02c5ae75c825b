"""Oriented one-shot grid detector for BEV frames (YOLO3D-style, no z/height terms).

Raw network output is ``[N, A*(7+C), S, S]``; per anchor the channel block is
``t_x, t_y, t_w, t_l, re, im, objectness, class logits...``. ``t_x`` is the
in-cell offset along x (forward, up the image), ``t_y`` along y (image columns).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import bev
from . import tensor_core as tc
from .bev import OrientedBox
from .common import rng as make_rng
from .common import sub_seed
from .manifest import DatasetManifest
from .tensor_core import BatchNorm2d, Conv2d
from .training import (
    Checkpoint,
    RunState,
    TrainConfig,
    TrainingError,
    TrainResult,
    _begin,
    _data_meta,
    _load_module,
    _run_epochs,
    load_checkpoint,
    load_grids,
)

log = logging.getLogger(__name__)

N_BOX = 7  # tx, ty, tw, tl, re, im, obj

PAPER_ANCHORS = ((1.6, 3.9), (1.7, 4.3), (1.8, 4.7), (1.9, 5.2), (2.2, 6.0))
DESK_ANCHORS = ((1.7, 4.0), (1.9, 4.7))


@dataclass(frozen=True)
class DetectorConfig:
    input_resolution: int = 416
    grid: int = 13
    anchors: tuple[tuple[float, float], ...] = PAPER_ANCHORS
    num_classes: int = 1
    conf_threshold: float = 0.5
    nms_iou: float = 0.3
    x_range: tuple[float, float] = (0.0, 40.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    w_coord: float = 5.0
    w_size: float = 1.0
    w_orient: float = 1.0
    w_obj: float = 1.0
    w_noobj: float = 0.5
    w_class: float = 1.0
    channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    mirror: bool = True  # random left-right flips while training

    def __post_init__(self):
        if self.input_resolution % self.grid:
            raise ValueError(f"input_resolution {self.input_resolution} not divisible by grid {self.grid}")
        ratio = self.input_resolution // self.grid
        if ratio & (ratio - 1):
            raise ValueError("input_resolution / grid must be a power of two")
        if not self.anchors or any(w <= 0 or l <= 0 for w, l in self.anchors):
            raise ValueError("anchors must be positive (width, length) pairs")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "DetectorConfig":
        base = dict(input_resolution=64, grid=16, anchors=DESK_ANCHORS, channels=(16, 32, 64, 64, 96, 96),
                    x_range=(0.0, 20.0), y_range=(-10.0, 10.0))
        base.update(kw)
        return cls(**base)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def per_anchor(self) -> int:
        return N_BOX + self.num_classes

    @property
    def cell_m(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        for k in ("x_range", "y_range", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        for k in ("x_range", "y_range", "channels"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TargetTensor:
    values: Tensor  # [A, 7+C, S, S]
    mask: Tensor  # [A, S, S] bool
    dropped: int = 0


# ---------------------------------------------------------------------------
# encoding


def _anchor_iou(w: float, l: float, aw: float, al: float) -> float:
    inter = min(w, aw) * min(l, al)
    return inter / (w * l + aw * al - inter)


def encode_targets(labels: Sequence[OrientedBox], cfg: DetectorConfig,
                   dtype: torch.dtype = torch.float32) -> TargetTensor:
    S, A = cfg.grid, cfg.n_anchors
    values = torch.zeros(A, cfg.per_anchor, S, S, dtype=dtype)
    mask = torch.zeros(A, S, S, dtype=torch.bool)
    dropped = 0
    for box in labels:
        gx = (box.cx - cfg.x_range[0]) / cfg.cell_m
        gy = (box.cy - cfg.y_range[0]) / cfg.cell_m
        ix, iy = int(math.floor(gx)), int(math.floor(gy))
        if not (0 <= ix < S and 0 <= iy < S):
            raise ValueError(f"label center ({box.cx}, {box.cy}) outside detector range")
        row, col = S - 1 - ix, iy
        ranked = sorted(range(A), key=lambda a: (-_anchor_iou(box.width, box.length, *cfg.anchors[a]), a))
        slot = next((a for a in ranked if not mask[a, row, col]), None)
        if slot is None:
            dropped += 1
            log.warning("dropping label at (%.2f, %.2f): every anchor in its cell is taken", box.cx, box.cy)
            continue
        aw, al = cfg.anchors[slot]
        mask[slot, row, col] = True
        v = values[slot, :, row, col]
        v[0] = gx - ix
        v[1] = gy - iy
        v[2] = math.log(box.width / aw)
        v[3] = math.log(box.length / al)
        v[4] = math.cos(box.yaw)
        v[5] = math.sin(box.yaw)
        v[6] = 1.0
        v[N_BOX + box.class_id] = 1.0
    return TargetTensor(values, mask, dropped)


def targets_to_raw(targets: TargetTensor, cfg: DetectorConfig, conf_logit: float = 30.0) -> Tensor:
    """Raw output whose decode reproduces ``targets`` (offsets through a clipped logit)."""
    v = targets.values.clone()
    off = v[:, :2].clamp(1e-9, 1 - 1e-9)
    v[:, :2] = torch.log(off) - torch.log1p(-off)
    v[:, 6] = torch.where(targets.mask, torch.tensor(conf_logit, dtype=v.dtype),
                          torch.tensor(-conf_logit, dtype=v.dtype))
    return v.reshape(cfg.n_anchors * cfg.per_anchor, cfg.grid, cfg.grid)


# ---------------------------------------------------------------------------
# loss


def detector_loss(pred: Tensor, targets: Tensor, mask: Tensor, cfg: DetectorConfig):
    """Weighted multi-part loss, averaged over the batch.

    ``pred`` [N, A*(7+C), S, S] raw; ``targets`` [N, A, 7+C, S, S]; ``mask`` [N, A, S, S].
    Reported components are already weighted, so they sum to ``total``.
    """
    from .sensor_models import LossRecord

    n = pred.shape[0]
    S, A, K = cfg.grid, cfg.n_anchors, cfg.per_anchor
    if pred.shape != (n, A * K, S, S) or targets.shape != (n, A, K, S, S):
        raise tc.ShapeError(f"prediction {tuple(pred.shape)} / target {tuple(targets.shape)} mismatch")
    p = pred.reshape(n, A, K, S, S)
    m = mask.to(pred.dtype)
    off = torch.sigmoid(p[:, :, 0:2])
    coord = (((off - targets[:, :, 0:2]) ** 2).sum(2) * m).sum()
    size = (((p[:, :, 2:4] - targets[:, :, 2:4]) ** 2).sum(2) * m).sum()
    orient = (((p[:, :, 4:6] - targets[:, :, 4:6]) ** 2).sum(2) * m).sum()
    conf = torch.sigmoid(p[:, :, 6])
    obj = (((conf - 1) ** 2) * m).sum()
    noobj = ((conf ** 2) * (1 - m)).sum()
    logp = torch.log_softmax(p[:, :, N_BOX:], dim=2)
    cls = -((logp * targets[:, :, N_BOX:]).sum(2) * m).sum()
    parts = {
        "coord": cfg.w_coord * coord / n,
        "size": cfg.w_size * size / n,
        "orient": cfg.w_orient * orient / n,
        "obj": cfg.w_obj * obj / n,
        "noobj": cfg.w_noobj * noobj / n,
        "class": cfg.w_class * cls / n,
    }
    total = sum(parts.values())
    vals = {k: v.item() for k, v in parts.items()}
    vals["total"] = sum(vals[k] for k in parts)
    return LossRecord(vals, total)


# ---------------------------------------------------------------------------
# decoding


_zero_norm_warnings = 0


def decode_predictions(raw: Tensor, cfg: DetectorConfig, conf_threshold: float | None = None,
                       apply_nms: bool = True) -> list[OrientedBox]:
    """Boxes from one frame's raw output ``[A*(7+C), S, S]``."""
    global _zero_norm_warnings
    S, A, K = cfg.grid, cfg.n_anchors, cfg.per_anchor
    thr = cfg.conf_threshold if conf_threshold is None else conf_threshold
    p = raw.detach().reshape(A, K, S, S).double()
    conf = torch.sigmoid(p[:, 6])
    if cfg.num_classes > 1:
        cls_prob, cls_id = torch.softmax(p[:, N_BOX:], dim=1).max(dim=1)
    else:
        cls_prob, cls_id = torch.ones_like(conf), torch.zeros_like(conf, dtype=torch.long)
    score = conf * cls_prob
    keep = (score >= thr).nonzero().tolist()
    boxes = []
    for a, row, col in keep:
        ix, iy = S - 1 - row, col
        tx, ty = torch.sigmoid(p[a, 0:2, row, col]).tolist()
        aw, al = cfg.anchors[a]
        re, im = p[a, 4, row, col].item(), p[a, 5, row, col].item()
        norm = math.hypot(re, im)
        if norm < 1e-12:
            _zero_norm_warnings += 1
            yaw = 0.0
        else:
            yaw = math.atan2(im / norm, re / norm)
        boxes.append(OrientedBox(
            cx=cfg.x_range[0] + (ix + tx) * cfg.cell_m,
            cy=cfg.y_range[0] + (iy + ty) * cfg.cell_m,
            width=aw * math.exp(p[a, 2, row, col].item()),
            length=al * math.exp(p[a, 3, row, col].item()),
            yaw=yaw, class_id=int(cls_id[a, row, col]), score=float(score[a, row, col]),
        ))
    if apply_nms:
        boxes = bev.nms_oriented(boxes, cfg.nms_iou)
    return boxes


def zero_norm_warnings() -> int:
    return _zero_norm_warnings


# ---------------------------------------------------------------------------
# network


class DetectorNet(nn.Module):
    """Conv-BN-leaky blocks with max-pools until the map is S x S, then a 1x1 head."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        n_pool = int(round(math.log2(cfg.input_resolution // cfg.grid)))
        if n_pool > len(cfg.channels):
            raise ValueError("not enough conv blocks to reach the grid size")
        chans = [1, *cfg.channels]
        self.convs = nn.ModuleList(Conv2d(chans[i], chans[i + 1], 3) for i in range(len(cfg.channels)))
        self.norms = nn.ModuleList(BatchNorm2d(c) for c in cfg.channels)
        self.pool_after = set(range(n_pool))
        self.head = Conv2d(cfg.channels[-1], cfg.n_anchors * cfg.per_anchor, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = tc.leaky_relu(norm(conv(h)), 0.1)
            if i in self.pool_after:
                h = tc.max_pool(h, 2)
        return self.head(h)


def build_detector(cfg: DetectorConfig, seed: int) -> DetectorNet:
    net = DetectorNet(cfg)
    tc.init_weights(net, sub_seed(seed, "init", "detector"))
    # start with low objectness so the no-object term does not swamp early steps
    with torch.no_grad():
        bias = net.head.bias.view(cfg.n_anchors, cfg.per_anchor)
        bias[:, 6] = -4.0
    return net


def kmeans_anchors(labels: Sequence[OrientedBox], k: int, seed: int = 0, iters: int = 100) -> list[tuple[float, float]]:
    """k-means over (width, length) footprints with 1 - IoU distance."""
    wl = np.array([(b.width, b.length) for b in labels], dtype=float)
    if len(wl) < k:
        raise ValueError(f"need at least {k} labels for {k} anchors")
    r = make_rng(seed, "anchors")
    centers = wl[r.choice(len(wl), k, replace=False)]
    for _ in range(iters):
        inter = np.minimum(wl[:, None, 0], centers[None, :, 0]) * np.minimum(wl[:, None, 1], centers[None, :, 1])
        union = wl[:, None].prod(2) + centers[None].prod(2) - inter
        assign = np.argmax(inter / union, axis=1)
        new = np.array([wl[assign == j].mean(0) if (assign == j).any() else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    order = np.argsort(centers.prod(1))
    return [tuple(map(float, centers[i])) for i in order]


# ---------------------------------------------------------------------------
# training / inference


def mirror_box(box: OrientedBox, cfg: DetectorConfig) -> OrientedBox:
    """Reflect across the grid's vertical axis (image columns reversed)."""
    y0, y1 = cfg.y_range
    cy = min(y0 + y1 - box.cy, math.nextafter(y1, y0))
    return OrientedBox(box.cx, cy, box.width, box.length, -box.yaw, box.class_id, box.score)


def _targets_for(manifest: DatasetManifest, cfg: DetectorConfig,
                 mirrored: bool = False) -> tuple[Tensor, Tensor]:
    vals, masks = [], []
    for e in manifest:
        labels = bev.read_labels(e.label)
        if mirrored:
            labels = [mirror_box(b, cfg) for b in labels]
        t = encode_targets(labels, cfg)
        vals.append(t.values)
        masks.append(t.mask)
    return torch.stack(vals), torch.stack(masks)


def train_detector(cfg: TrainConfig, det_cfg: DetectorConfig, manifest: DatasetManifest,
                   checkpoint_path: str | Path | None = None, resume=None,
                   stop_after: int | None = None) -> TrainResult:
    if len(manifest) == 0:
        raise TrainingError("train_detector needs a non-empty manifest")
    frames = load_grids(manifest)
    if frames.shape[-1] != det_cfg.input_resolution:
        raise TrainingError(f"frames are {frames.shape[-1]}px, detector expects {det_cfg.input_resolution}")
    targets, masks = _targets_for(manifest, det_cfg)
    if det_cfg.mirror:
        m_targets, m_masks = _targets_for(manifest, det_cfg, mirrored=True)
    net = build_detector(det_cfg, cfg.seed)
    state = RunState(cfg, {"detector": net},
                     {"detector": tc.Adam(net.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2))},
                     make_rng(cfg.seed, "train", "detector"),
                     {"kind": "detector", **det_cfg.to_dict()})
    state.extra_meta = _data_meta(train=manifest)
    _begin(state, resume)
    keys = ("coord", "size", "orient", "obj", "noobj", "class")

    def epoch(st: RunState) -> dict[str, float]:
        net.train()
        order = st.rng.permutation(len(frames))
        sums = dict.fromkeys(keys, 0.0)
        n = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # batch norm needs >1 sample
            x, t, m = frames[idx], targets[idx], masks[idx]
            if det_cfg.mirror:
                flip = torch.from_numpy(st.rng.random(len(idx)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
                t = torch.where(flip[:, None, None, None, None], m_targets[idx], t)
                m = torch.where(flip[:, None, None, None], m_masks[idx], m)
            rec = detector_loss(net(x), t, m, det_cfg)
            st.opts["detector"].zero_grad()
            rec.total_tensor.backward()
            st.opts["detector"].step()
            for k in keys:
                sums[k] += rec[k]
            n += 1
        out = {k: v / n for k, v in sums.items()}
        out["total"] = sum(out[k] for k in keys)
        return out

    _run_epochs(state, epoch, checkpoint_path, stop_after)
    net.eval()
    return TrainResult(state.to_checkpoint(), list(state.loss_log), {"model": net, "config": det_cfg})


def load_detector(ckpt: Checkpoint | str | Path) -> tuple[DetectorNet, DetectorConfig]:
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt, "detector")
    d = {k: v for k, v in ckpt.arch.items() if k != "kind"}
    cfg = DetectorConfig.from_dict(d)
    net = DetectorNet(cfg)
    _load_module("model.detector", net, ckpt.tensors)
    return net.eval(), cfg


def detect(net: DetectorNet, cfg: DetectorConfig, frames: Tensor, batch_size: int = 32,
           conf_threshold: float | None = None) -> list[list[OrientedBox]]:
    net.eval()
    out: list[list[OrientedBox]] = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            raw = net(frames[i:i + batch_size])
            out.extend(decode_predictions(r, cfg, conf_threshold) for r in raw)
    return out


def write_detections(path: str | Path, frame_ids: Sequence[str], detections: Sequence[Sequence[OrientedBox]]) -> None:
    lines = []
    for fid, boxes in zip(frame_ids, detections):
        for b in boxes:
            lines.append(f"{fid} {b.class_id} {b.score!r} {b.cx!r} {b.cy!r} {b.width!r} {b.length!r} {b.yaw!r}\n")
    Path(path).write_text("".join(lines))


def read_detections(path: str | Path) -> list[tuple[str, OrientedBox]]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        f = line.split()
        if not f:
            continue
        if len(f) != 8:
            raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(f)}")
        out.append((f[0], OrientedBox(float(f[3]), float(f[4]), float(f[5]), float(f[6]), float(f[7]),
                                      int(f[1]), float(f[2]))))
    return out
