"""Bird's-eye-view projection, oriented boxes, rotated IoU/NMS and frame I/O."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

ENCODINGS = ("binary", "density")
IOU_AREA_EPS = 1e-12


@dataclass(frozen=True)
class BevConfig:
    x_range: tuple[float, float] = (0.0, 40.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    z_range: tuple[float, float] = (-2.5, 1.0)
    resolution: int = 416
    encoding: str = "binary"

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must have max > min, got {(lo, hi)}")
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        if self.encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}")
        sx = (self.x_range[1] - self.x_range[0]) / self.resolution
        sy = (self.y_range[1] - self.y_range[0]) / self.resolution
        if not math.isclose(sx, sy, rel_tol=1e-9):
            raise ValueError(f"x and y spans give non-square cells ({sx} vs {sy} m)")

    @property
    def cell_size(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.resolution

    def cell_center(self, row, col):
        """Metric (x, y) of cell centers; row 0 is the far (max-x) edge."""
        x = self.x_range[0] + (self.resolution - 1 - np.asarray(row) + 0.5) * self.cell_size
        y = self.y_range[0] + (np.asarray(col) + 0.5) * self.cell_size
        return x, y

    def to_pixel(self, x, y):
        """Continuous (row, col) coordinates of metric points, pixel centers at integers."""
        row = self.resolution - 0.5 - (np.asarray(x) - self.x_range[0]) / self.cell_size
        col = (np.asarray(y) - self.y_range[0]) / self.cell_size - 0.5
        return row, col

    def contains_xy(self, x: float, y: float) -> bool:
        return (self.x_range[0] <= x < self.x_range[1]) and (self.y_range[0] <= y < self.y_range[1])


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 4] float32: x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("point cloud has non-finite coordinates")
        pts = pts.copy()
        pts[:, 3] = np.clip(np.nan_to_num(pts[:, 3]), 0.0, 1.0)
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_bin(cls, path: str | Path) -> "PointCloud":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % 4:
            raise ValueError(f"{path}: size is not a multiple of 4 floats")
        return cls(raw.reshape(-1, 4))

    def to_bin(self, path: str | Path) -> None:
        self.points.astype("<f4").tofile(path)


@dataclass
class BevGrid:
    cells: np.ndarray
    config: BevConfig = field(default_factory=BevConfig)

    def __post_init__(self):
        res = self.config.resolution
        if self.cells.shape != (res, res):
            raise ValueError(f"grid shape {self.cells.shape} != ({res}, {res})")

    @property
    def occupied(self) -> int:
        return int((self.cells > 0).sum())


@dataclass
class OrientedBox:
    cx: float
    cy: float
    width: float
    length: float
    yaw: float = 0.0
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"box sizes must be positive, got w={self.width} l={self.length}")
        self.yaw = normalize_yaw(self.yaw)

    @property
    def area(self) -> float:
        return self.width * self.length

    def corners(self) -> np.ndarray:
        """Counter-clockwise [4, 2] corners in metric (x, y). Length runs along yaw."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = np.asarray(x) - self.cx, np.asarray(y) - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= self.length / 2) & (np.abs(v) <= self.width / 2)


@dataclass
class Box3D:
    """Velodyne-frame 3D box: x forward, y left, z up; yaw about z."""

    cx: float
    cy: float
    cz: float
    width: float
    length: float
    height: float
    yaw: float
    class_id: int = 0


def normalize_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.fmod(yaw, 2 * math.pi)
    if y <= -math.pi:
        y += 2 * math.pi
    elif y > math.pi:
        y -= 2 * math.pi
    return y


# ---------------------------------------------------------------------------
# projection


def project_to_bev(pcl: PointCloud, cfg: BevConfig) -> BevGrid:
    res = cfg.resolution
    cells = np.zeros((res, res), dtype=np.float32)
    pts = pcl.points
    if len(pts):
        x, y, z = pts[:, 0].astype(np.float64), pts[:, 1].astype(np.float64), pts[:, 2].astype(np.float64)
        keep = ((x >= cfg.x_range[0]) & (x < cfg.x_range[1])
                & (y >= cfg.y_range[0]) & (y < cfg.y_range[1])
                & (z >= cfg.z_range[0]) & (z < cfg.z_range[1]))
        xi = np.floor((x[keep] - cfg.x_range[0]) / cfg.cell_size).astype(np.int64)
        yi = np.floor((y[keep] - cfg.y_range[0]) / cfg.cell_size).astype(np.int64)
        # float rounding at the upper edge can land exactly on `res`
        xi = np.clip(xi, 0, res - 1)
        yi = np.clip(yi, 0, res - 1)
        rows = res - 1 - xi
        if cfg.encoding == "binary":
            cells[rows, yi] = 1.0
        else:
            np.add.at(cells, (rows, yi), 1.0)
            peak = cells.max()
            if peak > 0:
                cells /= peak
    return BevGrid(cells, cfg)


def grid_to_cloud(grid: BevGrid) -> PointCloud:
    """Synthetic cloud with one point at the center of every occupied cell."""
    cfg = grid.config
    rows, cols = np.nonzero(grid.cells > 0)
    x, y = cfg.cell_center(rows, cols)
    z = np.full_like(x, (cfg.z_range[0] + cfg.z_range[1]) / 2)
    return PointCloud(np.stack([x, y, z, np.ones_like(x)], axis=1))


def box3d_to_bev(box: Box3D, cfg: BevConfig) -> OrientedBox | None:
    """Drop z and height; None when the center falls outside the planar range."""
    if not cfg.contains_xy(box.cx, box.cy):
        return None
    return OrientedBox(box.cx, box.cy, box.width, box.length, box.yaw, box.class_id)


def filter_labels(boxes: Iterable[OrientedBox], cfg: BevConfig) -> list[OrientedBox]:
    return [b for b in boxes if cfg.contains_xy(b.cx, b.cy)]


# ---------------------------------------------------------------------------
# oriented IoU / NMS


def _clip(subject: list[tuple[float, float]], a, b) -> list[tuple[float, float]]:
    """One Sutherland-Hodgman pass against the half-plane left of edge a->b."""
    out: list[tuple[float, float]] = []
    if not subject:
        return out
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay

    def side(p):
        return ex * (p[1] - ay) - ey * (p[0] - ax)

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, sp = cur, sc
    return out


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        s += x1 * y2 - x2 * y1
    return abs(s) / 2


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    poly = [tuple(p) for p in a.corners()]
    cb = [tuple(p) for p in b.corners()]
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return polygon_area(poly)


def oriented_iou(a: OrientedBox, b: OrientedBox) -> float:
    # cheap reject on circumscribed circles
    ra = math.hypot(a.width, a.length) / 2
    rb = math.hypot(b.width, b.length) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = intersection_area(a, b)
    if inter < IOU_AREA_EPS:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def nms_oriented(boxes: Sequence[OrientedBox], iou_threshold: float) -> list[OrientedBox]:
    if any(b.score is None for b in boxes):
        raise ValueError("nms_oriented needs scored boxes")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[OrientedBox] = []
    for i in order:
        if all(oriented_iou(boxes[i], k) <= iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


# ---------------------------------------------------------------------------
# file formats


def write_labels(path: str | Path, boxes: Iterable[OrientedBox]) -> None:
    lines = [f"{b.class_id} {b.cx!r} {b.cy!r} {b.width!r} {b.length!r} {b.yaw!r}\n" for b in boxes]
    Path(path).write_text("".join(lines))


def read_labels(path: str | Path) -> list[OrientedBox]:
    boxes = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ValueError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        cid, cx, cy, w, l, yaw = parts
        boxes.append(OrientedBox(float(cx), float(cy), float(w), float(l), float(yaw), int(cid)))
    return boxes


def read_kitti_labels(path: str | Path, classes: Sequence[str] = ("Car",)) -> list[Box3D]:
    """KITTI object labels (camera frame) to velodyne-frame boxes.

    The camera->velodyne extrinsic is approximated by the axis permutation
    x_v = z_c, y_v = -x_c, z_v = -y_c; per-frame calibration is not applied.
    """
    out = []
    for line in Path(path).read_text().splitlines():
        f = line.split()
        if len(f) < 15 or f[0] not in classes:
            continue
        h, w, l = float(f[8]), float(f[9]), float(f[10])
        xc, yc, zc = float(f[11]), float(f[12]), float(f[13])
        ry = float(f[14])
        out.append(Box3D(cx=zc, cy=-xc, cz=-yc + h / 2, width=w, length=l, height=h,
                         yaw=normalize_yaw(-ry - math.pi / 2), class_id=classes.index(f[0])))
    return out


def save_frame(path: str | Path, grid: BevGrid | np.ndarray) -> None:
    cells = grid.cells if isinstance(grid, BevGrid) else grid
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(cells, dtype="<f4"), allow_pickle=False)


def load_frame(path: str | Path, cfg: BevConfig | None = None) -> BevGrid:
    cells = np.load(path, allow_pickle=False).astype(np.float32)
    if cfg is None:
        cfg = BevConfig(resolution=cells.shape[0])
    return BevGrid(cells, cfg)


# ---------------------------------------------------------------------------
# rendering


def to_bytes(grid: BevGrid | np.ndarray, boxes: Iterable[OrientedBox] = (),
             cfg: BevConfig | None = None) -> np.ndarray:
    """uint8 image of a grid with 1-pixel box outlines at 255."""
    cells = grid.cells if isinstance(grid, BevGrid) else np.asarray(grid)
    cfg = cfg or (grid.config if isinstance(grid, BevGrid) else BevConfig(resolution=cells.shape[0]))
    img = np.rint(np.clip(cells, 0.0, 1.0) * 255.0).astype(np.uint8)
    boxes = list(boxes)
    if boxes:
        pil = Image.fromarray(img, mode="L")
        draw = ImageDraw.Draw(pil)
        for b in boxes:
            corners = b.corners()
            r, c = cfg.to_pixel(corners[:, 0], corners[:, 1])
            pts = [(float(ci), float(ri)) for ri, ci in zip(r, c)]
            draw.polygon(pts, outline=255)
        img = np.asarray(pil, dtype=np.uint8).copy()
    return img


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError("only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def render_grid(grid: BevGrid, boxes: Iterable[OrientedBox] = (), fmt: str = "pgm") -> bytes:
    img = to_bytes(grid, boxes)
    if fmt == "pgm":
        return encode_pgm(img)
    if fmt == "png":
        return encode_png(img)
    raise ValueError(f"unknown image format {fmt!r}")


def with_score(box: OrientedBox, score: float) -> OrientedBox:
    return replace(box, score=score)
