"""CycleGAN and multi-style NST sensor models, their losses, and frame mapping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import tensor_core as tc
from .bev import BevGrid
from .tensor_core import BatchNorm2d, CondInstanceNorm2d, Conv2d

# ---------------------------------------------------------------------------
# architecture descriptors


@dataclass(frozen=True)
class CycleGanArch:
    ngf: int = 16
    ndf: int = 16
    n_down: int = 2
    n_res: int = 2
    d_layers: int = 3
    skip_gain: float = 4.0  # initial gain on (2x - 1) added to the output logits; 0 disables

    @classmethod
    def paper(cls) -> "CycleGanArch":
        return cls(ngf=64, ndf=64, n_down=2, n_res=9, d_layers=3, skip_gain=0.0)


@dataclass(frozen=True)
class NstArch:
    enc_channels: tuple[int, ...] = (8, 16, 32, 32)
    t_channels: tuple[int, int, int] = (8, 16, 32)
    n_res: int = 3
    n_styles: int = 2
    skip_gain: float = 2.0

    @classmethod
    def paper(cls, n_styles: int = 20) -> "NstArch":
        return cls(enc_channels=(32, 64, 128, 128), t_channels=(32, 64, 128), n_res=3, n_styles=n_styles,
                   skip_gain=0.0)


# ---------------------------------------------------------------------------
# CycleGAN networks


class _ResBlock(nn.Module):
    def __init__(self, c: int, n_styles: int = 1):
        super().__init__()
        self.c1, self.n1 = Conv2d(c, c, 3), CondInstanceNorm2d(c, n_styles)
        self.c2, self.n2 = Conv2d(c, c, 3), CondInstanceNorm2d(c, n_styles)

    def forward(self, x: Tensor, style: int | Tensor = 0) -> Tensor:
        h = tc.relu(self.n1(self.c1(x), style))
        return tc.add(x, self.n2(self.c2(h), style))


class Generator(nn.Module):
    """Downsample, residual blocks, nearest-upsample convs, sigmoid head."""

    def __init__(self, arch: CycleGanArch = CycleGanArch()):
        super().__init__()
        ngf = arch.ngf
        self.inc = Conv2d(1, ngf, 7)
        self.inn = CondInstanceNorm2d(ngf)
        chans = [ngf * 2 ** i for i in range(arch.n_down + 1)]
        self.down = nn.ModuleList(Conv2d(chans[i], chans[i + 1], 3, stride=2) for i in range(arch.n_down))
        self.down_n = nn.ModuleList(CondInstanceNorm2d(chans[i + 1]) for i in range(arch.n_down))
        self.res = nn.ModuleList(_ResBlock(chans[-1]) for _ in range(arch.n_res))
        self.up = nn.ModuleList(Conv2d(chans[i + 1], chans[i], 3) for i in reversed(range(arch.n_down)))
        self.up_n = nn.ModuleList(CondInstanceNorm2d(chans[i]) for i in reversed(range(arch.n_down)))
        self.head = Conv2d(ngf, 1, 7)
        # starts close to the identity on binary grids, so training only learns the edits
        self.skip_gain = nn.Parameter(torch.tensor(float(arch.skip_gain))) if arch.skip_gain else None

    def forward(self, x: Tensor) -> Tensor:
        h = tc.relu(self.inn(self.inc(x)))
        for conv, norm in zip(self.down, self.down_n):
            h = tc.relu(norm(conv(h)))
        for block in self.res:
            h = block(h)
        for conv, norm in zip(self.up, self.up_n):
            h = tc.relu(norm(conv(tc.upsample_nearest(h, 2))))
        logits = self.head(h)
        if self.skip_gain is not None:
            logits = tc.add(logits, tc.mul(self.skip_gain, 2 * x - 1))
        return tc.sigmoid(logits)


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic emitting one raw score per patch."""

    def __init__(self, arch: CycleGanArch = CycleGanArch()):
        super().__init__()
        ndf = arch.ndf
        layers: list[nn.Module] = [Conv2d(1, ndf, 4, stride=2, padding=1)]
        norms: list[nn.Module] = [nn.Identity()]
        c = ndf
        for i in range(1, arch.d_layers):
            layers.append(Conv2d(c, c * 2, 4, stride=2, padding=1))
            norms.append(CondInstanceNorm2d(c * 2))
            c *= 2
        layers.append(Conv2d(c, c * 2, 4, stride=1, padding=1))
        norms.append(CondInstanceNorm2d(c * 2))
        self.layers = nn.ModuleList(layers)
        self.norms = nn.ModuleList(norms)
        self.out = Conv2d(c * 2, 1, 4, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv, norm in zip(self.layers, self.norms):
            h = tc.leaky_relu(norm(conv(h)), 0.2)
        return self.out(h)


class CycleGanModel(nn.Module):
    """G: sim->real (the sensor model), F: real->sim, D_X on sim, D_Y on real."""

    def __init__(self, arch: CycleGanArch = CycleGanArch(), lambda_cycle: float = 50.0,
                 lambda_identity: float = 0.0):
        super().__init__()
        if not lambda_cycle > 0:
            raise ValueError("lambda_cycle must be > 0")
        if lambda_identity < 0:
            raise ValueError("lambda_identity must be >= 0")
        self.arch = arch
        self.lambda_cycle = lambda_cycle
        self.lambda_identity = lambda_identity
        self.G = Generator(arch)
        self.F = Generator(arch)
        self.D_X = PatchDiscriminator(arch)
        self.D_Y = PatchDiscriminator(arch)


# ---------------------------------------------------------------------------
# CycleGAN losses


def gan_loss(discriminator, real_batch: Tensor, fake_batch: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares GAN terms ``(loss_D, loss_G)``; the fake batch is detached for loss_D."""
    d_real = discriminator(real_batch)
    d_fake_detached = discriminator(fake_batch.detach())
    loss_d = 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake_detached ** 2).mean()
    loss_g = ((discriminator(fake_batch) - 1) ** 2).mean()
    return loss_d, loss_g


def generator_adv_loss(discriminator, fake_batch: Tensor) -> Tensor:
    return ((discriminator(fake_batch) - 1) ** 2).mean()


def discriminator_loss(discriminator, real_batch: Tensor, fake_batch: Tensor) -> Tensor:
    return 0.5 * ((discriminator(real_batch) - 1) ** 2).mean() + \
        0.5 * (discriminator(fake_batch.detach()) ** 2).mean()


def cycle_loss(G, F, batch_x: Tensor, batch_y: Tensor) -> Tensor:
    """mean|F(G(x)) - x| + mean|G(F(y)) - y|."""
    return tc.l1_distance(F(G(batch_x)), batch_x) + tc.l1_distance(G(F(batch_y)), batch_y)


@dataclass
class LossRecord:
    """Named loss components plus the differentiable total."""

    values: dict[str, float]
    total_tensor: Tensor | None = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    @property
    def total(self) -> float:
        return self.values["total"]


def cyclegan_total_loss(model: CycleGanModel, batch_x: Tensor, batch_y: Tensor) -> LossRecord:
    """Generator-side objective: both adversarial terms plus lambda times the cycle terms.

    With ``lambda_identity > 0`` an identity term ``|G(y) - y| + |F(x) - x|`` is added.
    """
    fake_y = model.G(batch_x)
    fake_x = model.F(batch_y)
    g_adv = generator_adv_loss(model.D_Y, fake_y)
    f_adv = generator_adv_loss(model.D_X, fake_x)
    cyc = tc.l1_distance(model.F(fake_y), batch_x) + tc.l1_distance(model.G(fake_x), batch_y)
    total = g_adv + f_adv + model.lambda_cycle * cyc
    vals = {"loss_G_adv": g_adv.item(), "loss_F_adv": f_adv.item(), "loss_cycle": cyc.item()}
    vals["total"] = vals["loss_G_adv"] + vals["loss_F_adv"] + model.lambda_cycle * vals["loss_cycle"]
    if model.lambda_identity > 0:
        idt = tc.l1_distance(model.G(batch_y), batch_y) + tc.l1_distance(model.F(batch_x), batch_x)
        total = total + model.lambda_identity * idt
        vals["loss_identity"] = idt.item()
        vals["total"] += model.lambda_identity * vals["loss_identity"]
    tc.finite_or_raise(vals)
    # fakes are reused by the discriminator step
    return LossRecord(vals, total, {"fake_x": fake_x, "fake_y": fake_y})


# ---------------------------------------------------------------------------
# NST networks


class FeatureExtractor(nn.Module):
    """Four conv -> batch-norm -> relu -> max-pool blocks; returns every block output."""

    def __init__(self, channels: Sequence[int] = NstArch.enc_channels):
        super().__init__()
        chans = [1, *channels]
        self.convs = nn.ModuleList(Conv2d(chans[i], chans[i + 1], 3) for i in range(len(channels)))
        self.norms = nn.ModuleList(BatchNorm2d(c) for c in channels)

    @property
    def depth(self) -> int:
        return len(self.convs)

    def forward(self, x: Tensor) -> list[Tensor]:
        acts = []
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = tc.max_pool(tc.relu(norm(conv(h))), 2)
            acts.append(h)
        return acts


class DomainHead(nn.Module):
    """Global-average-pooled logit on top of the extractor for the sim/real pre-train."""

    def __init__(self, c: int):
        super().__init__()
        self.fc = Conv2d(c, 1, 1)

    def forward(self, acts: list[Tensor]) -> Tensor:
        pooled = acts[-1].mean(dim=(2, 3), keepdim=True)
        return self.fc(pooled).flatten()


class StyleTransformer(nn.Module):
    """Encoder-decoder generation net, conditional instance norm keyed by style index."""

    def __init__(self, arch: NstArch = NstArch()):
        super().__init__()
        c0, c1, c2 = arch.t_channels
        s = arch.n_styles
        self.n_styles = s
        self.down = nn.ModuleList([Conv2d(1, c0, 9), Conv2d(c0, c1, 3, stride=2), Conv2d(c1, c2, 3, stride=2)])
        self.down_n = nn.ModuleList([CondInstanceNorm2d(c, s) for c in (c0, c1, c2)])
        self.res = nn.ModuleList(_ResBlock(c2, s) for _ in range(arch.n_res))
        self.up = nn.ModuleList([Conv2d(c2, c1, 3), Conv2d(c1, c0, 3), Conv2d(c0, 1, 9)])
        self.up_n = nn.ModuleList([CondInstanceNorm2d(c, s) for c in (c1, c0, 1)])
        self.up_factor = (2, 2, 1)
        self.skip_gain = nn.Parameter(torch.tensor(float(arch.skip_gain))) if arch.skip_gain else None

    def forward(self, x: Tensor, style: int | Tensor) -> Tensor:
        h = x
        for conv, norm in zip(self.down, self.down_n):
            h = tc.relu(norm(conv(h), style))
        for block in self.res:
            h = block(h, style)
        for i, (conv, norm, f) in enumerate(zip(self.up, self.up_n, self.up_factor)):
            h = norm(conv(tc.upsample_nearest(h, f)), style)
            if i < len(self.up) - 1:
                h = tc.relu(h)
        if self.skip_gain is not None:
            h = tc.add(h, tc.mul(self.skip_gain, 2 * x - 1))
        return tc.sigmoid(h)


def default_slice_weights(n: int = 4) -> list[float]:
    """Linearly increasing toward the bottom (ego-near) slice."""
    return [(i + 1) / n for i in range(n)]


@dataclass
class NstLossConfig:
    lambda_s: float = 1.0
    lambda_c: float = 1.0
    content_layers: tuple[int, ...] = (2,)  # 1-based block numbers
    style_layers: tuple[int, ...] = (1, 2, 3, 4)
    global_weight: float = 1.0
    local_weight: float = 1.0
    grid_weights: list[list[float]] = field(default_factory=lambda: [[1.0] * 3 for _ in range(3)])
    slice_weights: list[float] = field(default_factory=default_slice_weights)

    def __post_init__(self):
        w = np.asarray(self.grid_weights, dtype=float)
        if (w < 0).any() or (np.asarray(self.slice_weights) < 0).any():
            raise ValueError("grid and slice weights must be non-negative")
        if self.global_weight < 0 or self.local_weight < 0:
            raise ValueError("style term weights must be non-negative")


class NstModel(nn.Module):
    def __init__(self, arch: NstArch = NstArch(), style_bank: Tensor | None = None,
                 loss: NstLossConfig | None = None, extractor: FeatureExtractor | None = None):
        super().__init__()
        self.arch = arch
        self.loss_cfg = loss or NstLossConfig()
        self.extractor = extractor or FeatureExtractor(arch.enc_channels)
        self.transformer = StyleTransformer(arch)
        if style_bank is None:
            style_bank = torch.zeros(arch.n_styles, 1, 8, 8)
        if style_bank.shape[0] != arch.n_styles:
            raise ValueError(f"style bank has {style_bank.shape[0]} styles, arch expects {arch.n_styles}")
        self.register_buffer("style_bank", style_bank.float())
        depth = self.extractor.depth
        for layer in (*self.loss_cfg.content_layers, *self.loss_cfg.style_layers):
            if not 1 <= layer <= depth:
                raise ValueError(f"layer {layer} outside extractor depth {depth}")
        self._style_cache: list[Tensor] | None = None

    def freeze_extractor(self) -> None:
        self.extractor.eval()
        for p in self.extractor.parameters():
            p.requires_grad_(False)
        self._style_cache = None

    def style_activations(self) -> list[Tensor]:
        if self._style_cache is None:
            with torch.no_grad():
                self._style_cache = [a.detach() for a in self.extractor(self.style_bank)]
        return self._style_cache

    def stylize(self, content: Tensor, style_index: int | Tensor) -> Tensor:
        return self.transformer(content, style_index)


# ---------------------------------------------------------------------------
# NST losses


def _as_batch(a: Tensor) -> Tensor:
    if a.dim() == 3:
        return a.unsqueeze(0)
    if a.dim() != 4:
        raise tc.ShapeError(f"activations must be [C,H,W] or [N,C,H,W], got {tuple(a.shape)}")
    return a


def _sq_diff_per_unit(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise tc.ShapeError(f"activation shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    units = a[0].numel()
    return ((a - b) ** 2).flatten(1).sum(1).mean() / units


def content_loss(p_acts: Sequence[Tensor], c_acts: Sequence[Tensor], layer_set: Sequence[int]) -> Tensor:
    """Sum over layers of (1/U)·||phi(p) - phi(c)||², averaged over the batch. Layers are 1-based."""
    return sum(_sq_diff_per_unit(p_acts[i - 1], c_acts[i - 1]) for i in layer_set)


def _gram_discrepancy(p: Tensor, s: Tensor) -> Tensor:
    """Batch-mean of (1/U)·||G(p) - G(s)||_F² for [N,C,H,W] blocks."""
    if p.shape[1] != s.shape[1]:
        raise tc.ShapeError(f"channel counts differ: {p.shape[1]} vs {s.shape[1]}")
    n, c = p.shape[:2]
    units = p[0].numel()
    gp = tc.gram_matrix(p.reshape(n, c, -1))
    gs = tc.gram_matrix(s.reshape(s.shape[0], c, -1))
    return ((gp - gs) ** 2).flatten(1).sum(1).mean() / units


def gram_discrepancy(gram_p: Tensor, gram_s: Tensor, units: int) -> Tensor:
    """(1/U)·||Gp - Gs||_F² for precomputed Gram matrices."""
    return ((gram_p - gram_s) ** 2).sum() / units


def style_loss_global(p_acts: Sequence[Tensor], s_acts: Sequence[Tensor], layer_set: Sequence[int]) -> Tensor:
    return sum(_gram_discrepancy(_as_batch(p_acts[j - 1]), _as_batch(s_acts[j - 1])) for j in layer_set)


def _bounds(extent: int, parts: int) -> list[tuple[int, int]]:
    # equal parts, remainder to the last one
    step = extent // parts
    edges = [i * step for i in range(parts)] + [extent]
    return [(edges[i], edges[i + 1]) for i in range(parts)]


def localized_style_term(p: Tensor, s: Tensor, grid_weights, slice_weights) -> Tensor:
    """Weighted per-cell and per-slice Gram discrepancies on one layer."""
    p, s = _as_batch(p), _as_batch(s)
    gw = np.asarray(grid_weights, dtype=float)
    if gw.ndim != 2:
        raise ValueError("grid_weights must be a 2-d matrix")
    gr, gc = gw.shape
    h, w = p.shape[2:]
    if h < gr or w < gc:
        raise tc.ShapeError(f"localized style loss needs spatial extent >= {gr}x{gc}, got {h}x{w}")
    n_slices = len(slice_weights)
    if n_slices and h < n_slices:
        raise tc.ShapeError(f"{n_slices} slices need height >= {n_slices}, got {h}")
    loss = p.new_zeros(())
    for i, (r0, r1) in enumerate(_bounds(h, gr)):
        for j, (c0, c1) in enumerate(_bounds(w, gc)):
            if gw[i, j] == 0:
                continue
            loss = loss + gw[i, j] * _gram_discrepancy(p[:, :, r0:r1, c0:c1], s[:, :, r0:r1, c0:c1])
    for k, (r0, r1) in enumerate(_bounds(h, n_slices) if n_slices else []):
        if slice_weights[k] == 0:
            continue
        loss = loss + slice_weights[k] * _gram_discrepancy(p[:, :, r0:r1], s[:, :, r0:r1])
    return loss


def style_loss_localized(p_acts: Sequence[Tensor], s_acts: Sequence[Tensor], grid_weights,
                         slice_weights, layer_set: Sequence[int] | None = None) -> Tensor:
    layers = layer_set if layer_set is not None else range(1, len(p_acts) + 1)
    return sum(localized_style_term(p_acts[j - 1], s_acts[j - 1], grid_weights, slice_weights) for j in layers)


def nst_total_loss(model: NstModel, content: Tensor, style_index: int | Tensor) -> LossRecord:
    """lambda_s·(global + localized style) + lambda_c·content for one batch."""
    cfg = model.loss_cfg
    n = content.shape[0]
    idx = torch.as_tensor(style_index, dtype=torch.long).reshape(-1)
    if idx.numel() == 1:
        idx = idx.expand(n)
    if bool((idx < 0).any()) or bool((idx >= model.arch.n_styles).any()):
        raise IndexError(f"style index out of range [0, {model.arch.n_styles})")
    p = model.transformer(content, idx)
    p_acts = model.extractor(p)
    with torch.no_grad():
        c_acts = model.extractor(content)
    s_acts = [a[idx] for a in model.style_activations()]

    content_term = content_loss(p_acts, c_acts, cfg.content_layers)
    g = style_loss_global(p_acts, s_acts, cfg.style_layers) if cfg.global_weight else p.new_zeros(())
    loc = (style_loss_localized(p_acts, s_acts, cfg.grid_weights, cfg.slice_weights, cfg.style_layers)
           if cfg.local_weight else p.new_zeros(()))
    style_term = cfg.global_weight * g + cfg.local_weight * loc
    total = cfg.lambda_s * style_term + cfg.lambda_c * content_term
    vals = {"style_global": g.item(), "style_local": loc.item()}
    vals["style"] = cfg.global_weight * vals["style_global"] + cfg.local_weight * vals["style_local"]
    vals["content"] = content_term.item()
    vals["total"] = cfg.lambda_s * vals["style"] + cfg.lambda_c * vals["content"]
    tc.finite_or_raise(vals)
    return LossRecord(vals, total)


# ---------------------------------------------------------------------------
# mapping


@dataclass(frozen=True)
class MappingKind:
    name: str = "identity"
    style_index: int | None = None

    def __post_init__(self):
        if self.name not in ("identity", "cyclegan", "nst"):
            raise ValueError(f"unknown mapping {self.name!r}")
        if self.name == "nst" and (self.style_index is None or self.style_index < 0):
            raise ValueError("nst mapping needs a non-negative style_index")
        if self.name != "nst" and self.style_index is not None:
            raise ValueError(f"{self.name} mapping takes no style index")

    def __str__(self) -> str:
        return f"nst:{self.style_index}" if self.name == "nst" else self.name

    @classmethod
    def parse(cls, text: str) -> "MappingKind":
        text = text.strip()
        if text.startswith("nst"):
            rest = text[3:].strip(":()")
            return cls("nst", int(rest) if rest else 0)
        return cls(text)


def _to_tensor(grids: Sequence[BevGrid]) -> Tensor:
    return torch.from_numpy(np.stack([g.cells for g in grids]).astype(np.float32)).unsqueeze(1)


def _finish(out: Tensor, binary: bool) -> np.ndarray:
    arr = out.clamp(0.0, 1.0).squeeze(1).numpy()
    if binary:
        arr = (arr > 0.5).astype(np.float32)
    return arr.astype(np.float32)


def map_frames(kind: MappingKind, grids: Sequence[BevGrid], network: nn.Module | None = None,
               binary: bool | None = None, batch_size: int = 16) -> list[BevGrid]:
    """Map a list of frames with one forward pass per frame (batched)."""
    if kind.name == "identity":
        return [BevGrid(g.cells.copy(), g.config) for g in grids]
    if network is None:
        raise ValueError(f"{kind} mapping needs a loaded network")
    out: list[BevGrid] = []
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(grids), batch_size):
                chunk = grids[i:i + batch_size]
                x = _to_tensor(chunk)
                y = network(x) if kind.name == "cyclegan" else network(x, kind.style_index)
                as_binary = binary if binary is not None else chunk[0].config.encoding == "binary"
                for g, cells in zip(chunk, _finish(y, as_binary)):
                    out.append(BevGrid(cells, g.config))
    finally:
        network.train(was_training)
    return out


def apply_mapping(kind: MappingKind, grid: BevGrid, network: nn.Module | None = None,
                  binary: bool | None = None) -> BevGrid:
    """identity: unchanged; cyclegan: G(grid); nst: transformer(grid, style).

    ``network`` is the CycleGAN G or the NST StyleTransformer. Output is clamped
    to [0, 1] and, for binary grids, thresholded (strictly) at 0.5.
    """
    if kind.name == "identity":
        return grid
    return map_frames(kind, [grid], network, binary, batch_size=1)[0]


def arch_dict(arch) -> dict:
    return asdict(arch)
