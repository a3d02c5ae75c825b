"""Seeded, resumable training loops and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import tensor_core as tc
from .common import rng as make_rng
from .common import sub_seed
from .manifest import DatasetManifest
from .sensor_models import (
    CycleGanArch,
    CycleGanModel,
    DomainHead,
    FeatureExtractor,
    NstArch,
    NstLossConfig,
    NstModel,
    cyclegan_total_loss,
    discriminator_loss,
    nst_total_loss,
)

log = logging.getLogger(__name__)

MAGIC = b"NSMCKPT1"
FORMAT_VERSION = 1
TASKS = ("cyclegan", "nst", "encoder", "detector")

_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    task: str
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int = 0
    preset: str = "desk"
    lambda_cycle: float = 50.0
    lambda_identity: float = 0.0
    lambda_s: float = 1.0
    lambda_c: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    replay_buffer: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.preset not in ("desk", "paper"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS: dict[tuple[str, str], dict] = {
    ("cyclegan", "paper"): dict(learning_rate=2e-4, batch_size=1, epochs=200, lambda_cycle=50.0,
                                beta1=0.5, replay_buffer=50),
    ("cyclegan", "desk"): dict(learning_rate=2e-4, batch_size=1, epochs=5, lambda_cycle=50.0,
                               beta1=0.5, replay_buffer=0),
    ("nst", "paper"): dict(learning_rate=1e-3, batch_size=4, epochs=40),
    ("nst", "desk"): dict(learning_rate=1e-3, batch_size=4, epochs=10, lambda_s=1e-3),
    ("encoder", "paper"): dict(learning_rate=1e-3, batch_size=16, epochs=10),
    ("encoder", "desk"): dict(learning_rate=1e-3, batch_size=8, epochs=4),
    ("detector", "paper"): dict(learning_rate=1e-3, batch_size=8, epochs=100),
    ("detector", "desk"): dict(learning_rate=1e-3, batch_size=8, epochs=30),
}


def preset_config(task: str, preset: str = "desk", **overrides) -> TrainConfig:
    base = dict(PRESETS[(task, preset)])
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(task=task, preset=preset, **base)


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    task: str
    arch: dict
    tensors: dict[str, Tensor]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def header(self) -> dict:
        return {"task": self.task, "arch": self.arch, "meta": self.meta}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(head)), head, struct.pack("<I", len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dt = _DTYPES[t.dtype]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype(np_dt, copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    pos = 16
    head = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype, np_dt = _CODES[code]
        n = int(np.prod(shape)) if ndim else 1
        nbytes = n * np.dtype(np_dt).itemsize
        arr = np.frombuffer(data, dtype=np_dt, count=n, offset=pos).reshape(shape)
        pos += nbytes
        tensors[name] = torch.from_numpy(arr.copy())
    return Checkpoint(head["task"], head["arch"], tensors, head["meta"], version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, task: str | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if task is not None and ckpt.task != task:
        raise CheckpointError(f"{path} holds a {ckpt.task!r} checkpoint, expected {task!r}")
    return ckpt


# ---------------------------------------------------------------------------
# run state


def _module_tensors(prefix: str, module: nn.Module) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: nn.Module, tensors: dict[str, Tensor]) -> None:
    sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing = set(module.state_dict()) - set(sd)
    if missing:
        raise CheckpointError(f"checkpoint lacks {prefix} tensors: {sorted(missing)[:3]}...")
    module.load_state_dict(sd, strict=True)


def _opt_tensors(prefix: str, opt: tc.Adam) -> tuple[dict[str, Tensor], dict]:
    tensors, steps = {}, {}
    for name, st in opt.states.items():
        tensors[f"{prefix}.{name}.m"] = st.first_moment
        tensors[f"{prefix}.{name}.v"] = st.second_moment
        steps[name] = st.step_count
    return tensors, steps


def _load_opt(prefix: str, opt: tc.Adam, tensors: dict[str, Tensor], steps: dict) -> None:
    for name, st in opt.states.items():
        st.first_moment.copy_(tensors[f"{prefix}.{name}.m"])
        st.second_moment.copy_(tensors[f"{prefix}.{name}.v"])
        st.step_count = int(steps[name])


@dataclass
class RunState:
    """Everything a loop needs to continue bitwise-identically after a reload."""

    cfg: TrainConfig
    modules: dict[str, nn.Module]
    opts: dict[str, tc.Adam]
    rng: np.random.Generator
    arch: dict
    epoch: int = 0
    loss_log: list[tuple[int, str, float]] = field(default_factory=list)
    extra_tensors: dict[str, Tensor] = field(default_factory=dict)
    extra_meta: dict = field(default_factory=dict)

    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, Tensor] = {}
        for name, m in self.modules.items():
            tensors.update(_module_tensors(f"model.{name}", m))
        steps = {}
        for name, opt in self.opts.items():
            t, s = _opt_tensors(f"opt.{name}", opt)
            tensors.update(t)
            steps[name] = s
        tensors.update(self.extra_tensors)
        meta = {
            "epoch": self.epoch,
            "config": asdict(self.cfg),
            "config_hash": self.cfg.hash,
            "rng_state": self.rng.bit_generator.state,
            "adam_steps": steps,
            "adam": {n: {"lr": o.states[next(iter(o.states))].learning_rate,
                         "beta1": o.states[next(iter(o.states))].beta1,
                         "beta2": o.states[next(iter(o.states))].beta2} for n, o in self.opts.items() if o.states},
            "bn_eps": tc.BN_EPS,
            "bn_momentum": tc.BN_MOMENTUM,
            "loss_log": [list(r) for r in self.loss_log],
            **self.extra_meta,
        }
        return Checkpoint(self.cfg.task, self.arch, tensors, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.task != self.cfg.task:
            raise CheckpointError(f"cannot resume {self.cfg.task} from a {ckpt.task} checkpoint")
        if ckpt.meta.get("config_hash") != self.cfg.hash:
            raise CheckpointError("config hash mismatch on resume")
        if ckpt.arch != self.arch:
            raise CheckpointError("architecture mismatch on resume")
        for name, m in self.modules.items():
            _load_module(f"model.{name}", m, ckpt.tensors)
        for name, opt in self.opts.items():
            _load_opt(f"opt.{name}", opt, ckpt.tensors, ckpt.meta["adam_steps"][name])
        self.rng.bit_generator.state = ckpt.meta["rng_state"]
        self.epoch = int(ckpt.meta["epoch"])
        self.loss_log = [(int(e), str(c), float(v)) for e, c, v in ckpt.meta["loss_log"]]
        self.extra_tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith(("model.", "opt."))}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[tuple[int, str, float]]
    info: dict = field(default_factory=dict)

    def epoch_values(self, component: str) -> list[float]:
        return [v for _, c, v in self.loss_log if c == component]


def write_loss_log(path: str | Path, loss_log: Sequence[tuple[int, str, float]]) -> None:
    lines = ["epoch,component,value"] + [f"{e},{c},{v!r}" for e, c, v in loss_log]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_log(path: str | Path) -> list[tuple[int, str, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    return [(int(e), c, float(v)) for e, c, v in (r.split(",") for r in rows if r)]


def _run_epochs(state: RunState, epoch_fn: Callable[[RunState], dict[str, float]],
                checkpoint_path: str | Path | None, stop_after: int | None) -> None:
    last = state.cfg.epochs if stop_after is None else min(stop_after, state.cfg.epochs)
    while state.epoch < last:
        t0 = time.perf_counter()
        values = epoch_fn(state)
        for k, v in values.items():
            if not np.isfinite(v):
                raise TrainingError(f"non-finite {k} in epoch {state.epoch + 1}; "
                                    f"last good checkpoint kept at {checkpoint_path}")
        state.epoch += 1
        state.loss_log.extend((state.epoch, k, float(v)) for k, v in values.items())
        log.info("%s epoch %d/%d %.1fs %s", state.cfg.task, state.epoch, state.cfg.epochs,
                 time.perf_counter() - t0, {k: round(v, 5) for k, v in values.items()})
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state.to_checkpoint())


def _begin(state: RunState, resume: str | Path | Checkpoint | None) -> None:
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        state.restore(ckpt)


# ---------------------------------------------------------------------------
# data


def load_grids(manifest: DatasetManifest | Sequence[Path]) -> Tensor:
    paths = [e.frame for e in manifest] if isinstance(manifest, DatasetManifest) else list(manifest)
    if not paths:
        return torch.zeros(0, 1, 1, 1)
    arr = np.stack([np.load(p, allow_pickle=False) for p in paths]).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(1)


def _data_meta(**sets) -> dict:
    """Manifest hashes plus the sim frame ids, so augmentation can keep pools disjoint."""
    meta: dict = {"inputs": {k: v.content_hash for k, v in sets.items() if isinstance(v, DatasetManifest)}}
    sim = sets.get("sim", sets.get("content"))
    if isinstance(sim, DatasetManifest):
        meta["train_frame_ids"] = sim.frame_ids()
    return meta


def _batches(order: np.ndarray, bs: int):
    for i in range(0, len(order), bs):
        yield order[i:i + bs]


# ---------------------------------------------------------------------------
# CycleGAN


class ReplayBuffer:
    """Pool of recent fakes; with probability 1/2 a stored fake is swapped out and used instead."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.items: list[Tensor] = []

    def query(self, fakes: Tensor) -> Tensor:
        if self.size == 0:
            return fakes
        out = []
        for f in fakes.detach():
            f = f.unsqueeze(0)
            if len(self.items) < self.size:
                self.items.append(f.clone())
                out.append(f)
            elif self.rng.random() < 0.5:
                j = int(self.rng.integers(0, self.size))
                out.append(self.items[j].clone())
                self.items[j] = f.clone()
            else:
                out.append(f)
        return torch.cat(out)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{i:04d}": t for i, t in enumerate(self.items)}

    def load(self, prefix: str, tensors: dict[str, Tensor]) -> None:
        keys = sorted(k for k in tensors if k.startswith(prefix + "."))
        self.items = [tensors[k].clone() for k in keys]


def cyclegan_arch_for(cfg: TrainConfig) -> CycleGanArch:
    return CycleGanArch.paper() if cfg.preset == "paper" else CycleGanArch()


def build_cyclegan(cfg: TrainConfig, arch: CycleGanArch | None = None) -> CycleGanModel:
    model = CycleGanModel(arch or cyclegan_arch_for(cfg), cfg.lambda_cycle, cfg.lambda_identity)
    for i, name in enumerate(("G", "F", "D_X", "D_Y")):
        tc.init_weights(getattr(model, name), sub_seed(cfg.seed, "init", name))
    return model


def train_cyclegan(cfg: TrainConfig, sim: DatasetManifest | Tensor, real: DatasetManifest | Tensor,
                   checkpoint_path: str | Path | None = None, resume=None,
                   stop_after: int | None = None, arch: CycleGanArch | None = None) -> TrainResult:
    """Alternate generator and discriminator updates over unpaired sim/real frames."""
    xs = sim if isinstance(sim, Tensor) else load_grids(sim)
    ys = real if isinstance(real, Tensor) else load_grids(real)
    if len(xs) == 0 or len(ys) == 0:
        raise TrainingError("train_cyclegan needs non-empty sim and real sets")
    model = build_cyclegan(cfg, arch)
    gen_params = [(f"G.{k}", p) for k, p in model.G.named_parameters()] + \
                 [(f"F.{k}", p) for k, p in model.F.named_parameters()]
    disc_params = [(f"D_X.{k}", p) for k, p in model.D_X.named_parameters()] + \
                  [(f"D_Y.{k}", p) for k, p in model.D_Y.named_parameters()]
    betas = (cfg.beta1, cfg.beta2)
    state = RunState(cfg, {"cyclegan": model},
                     {"gen": tc.Adam(gen_params, cfg.learning_rate, betas),
                      "disc": tc.Adam(disc_params, cfg.learning_rate, betas)},
                     make_rng(cfg.seed, "train", "cyclegan"),
                     {"kind": "cyclegan", **asdict(model.arch), "lambda_cycle": cfg.lambda_cycle,
                      "lambda_identity": cfg.lambda_identity, "resolution": int(xs.shape[-1])})
    state.extra_meta = _data_meta(sim=sim, real=real)
    pool_x = ReplayBuffer(cfg.replay_buffer, state.rng)
    pool_y = ReplayBuffer(cfg.replay_buffer, state.rng)
    _begin(state, resume)
    pool_x.load("replay.X", state.extra_tensors)
    pool_y.load("replay.Y", state.extra_tensors)
    discs = (model.D_X, model.D_Y)

    def epoch(st: RunState) -> dict[str, float]:
        model.train()
        order_x = st.rng.permutation(len(xs))
        order_y = st.rng.permutation(len(ys))
        gen_keys = ("loss_G_adv", "loss_F_adv", "loss_cycle") + (("loss_identity",) if cfg.lambda_identity > 0 else ())
        sums = dict.fromkeys(gen_keys + ("loss_D_X", "loss_D_Y"), 0.0)
        n = 0
        for b, idx in enumerate(_batches(order_x, cfg.batch_size)):
            jdx = order_y[(np.arange(len(idx)) + b * cfg.batch_size) % len(ys)]
            x, y = xs[idx], ys[jdx]
            for d in discs:
                d.requires_grad_(False)
            rec = cyclegan_total_loss(model, x, y)
            st.opts["gen"].zero_grad()
            rec.total_tensor.backward()
            st.opts["gen"].step()
            for d in discs:
                d.requires_grad_(True)
            fake_y = pool_y.query(rec.extras["fake_y"].detach())
            fake_x = pool_x.query(rec.extras["fake_x"].detach())
            loss_dy = discriminator_loss(model.D_Y, y, fake_y)
            loss_dx = discriminator_loss(model.D_X, x, fake_x)
            st.opts["disc"].zero_grad()
            (loss_dx + loss_dy).backward()
            st.opts["disc"].step()
            for k in gen_keys:
                sums[k] += rec[k]
            sums["loss_D_X"] += loss_dx.item()
            sums["loss_D_Y"] += loss_dy.item()
            n += 1
        out = {k: v / n for k, v in sums.items()}
        out["total"] = out["loss_G_adv"] + out["loss_F_adv"] + cfg.lambda_cycle * out["loss_cycle"] + \
            cfg.lambda_identity * out.get("loss_identity", 0.0)
        st.extra_tensors = {**pool_x.tensors("replay.X"), **pool_y.tensors("replay.Y")}
        return out

    _run_epochs(state, epoch, checkpoint_path, stop_after)
    model.eval()
    return TrainResult(state.to_checkpoint(), list(state.loss_log), {"model": model})


def load_cyclegan(ckpt: Checkpoint | str | Path) -> CycleGanModel:
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt, "cyclegan")
    a = ckpt.arch
    model = CycleGanModel(CycleGanArch(a["ngf"], a["ndf"], a["n_down"], a["n_res"], a["d_layers"],
                                       a.get("skip_gain", 0.0)),
                          a["lambda_cycle"], a.get("lambda_identity", 0.0))
    _load_module("model.cyclegan", model, ckpt.tensors)
    return model.eval()


# ---------------------------------------------------------------------------
# encoder pre-train


def encoder_arch_for(cfg: TrainConfig) -> tuple[int, ...]:
    return NstArch.paper().enc_channels if cfg.preset == "paper" else NstArch().enc_channels


def pretrain_encoder(cfg: TrainConfig, sim: DatasetManifest | Tensor, real: DatasetManifest | Tensor,
                     checkpoint_path: str | Path | None = None, resume=None,
                     stop_after: int | None = None,
                     channels: Sequence[int] | None = None) -> TrainResult:
    """Train extractor + domain head to tell sim (0) from real (1); the head is discarded after."""
    xs = sim if isinstance(sim, Tensor) else load_grids(sim)
    ys = real if isinstance(real, Tensor) else load_grids(real)
    if len(xs) == 0 or len(ys) == 0:
        raise TrainingError("encoder pre-train needs frames from both domains")
    data = torch.cat([xs, ys])
    labels = torch.cat([torch.zeros(len(xs)), torch.ones(len(ys))])
    channels = tuple(channels or encoder_arch_for(cfg))
    enc = FeatureExtractor(channels)
    head = DomainHead(channels[-1])
    tc.init_weights(enc, sub_seed(cfg.seed, "init", "encoder"))
    tc.init_weights(head, sub_seed(cfg.seed, "init", "head"))
    params = [(f"enc.{k}", p) for k, p in enc.named_parameters()] + \
             [(f"head.{k}", p) for k, p in head.named_parameters()]
    state = RunState(cfg, {"encoder": enc, "head": head},
                     {"enc": tc.Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2))},
                     make_rng(cfg.seed, "train", "encoder"),
                     {"kind": "encoder", "enc_channels": list(channels), "resolution": int(data.shape[-1])})
    _begin(state, resume)

    def epoch(st: RunState) -> dict[str, float]:
        enc.train()
        order = st.rng.permutation(len(data))
        total, correct, n = 0.0, 0, 0
        for idx in _batches(order, cfg.batch_size):
            if len(idx) < 2:
                continue
            logits = head(enc(data[idx]))
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels[idx])
            st.opts["enc"].zero_grad()
            loss.backward()
            st.opts["enc"].step()
            total += loss.item() * len(idx)
            correct += int(((logits.detach() > 0).float() == labels[idx]).sum())
            n += len(idx)
        return {"bce": total / n, "train_accuracy": correct / n}

    _run_epochs(state, epoch, checkpoint_path, stop_after)
    acc = encoder_accuracy(enc, head, data, labels)
    state.extra_meta["final_accuracy"] = acc
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state.to_checkpoint())
    enc.eval()
    return TrainResult(state.to_checkpoint(), list(state.loss_log),
                       {"encoder": enc, "head": head, "accuracy": acc})


def encoder_accuracy(enc: FeatureExtractor, head: DomainHead, data: Tensor, labels: Tensor) -> float:
    enc.eval()
    with torch.no_grad():
        logits = torch.cat([head(enc(data[i:i + 64])) for i in range(0, len(data), 64)])
    return float(((logits > 0).float() == labels).float().mean())


def load_encoder(ckpt: Checkpoint | str | Path) -> FeatureExtractor:
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt, "encoder")
    enc = FeatureExtractor(tuple(ckpt.arch["enc_channels"]))
    _load_module("model.encoder", enc, ckpt.tensors)
    return enc.eval()


# ---------------------------------------------------------------------------
# NST


def nst_arch_for(cfg: TrainConfig, n_styles: int, enc_channels: Sequence[int]) -> NstArch:
    base = NstArch.paper(n_styles) if cfg.preset == "paper" else NstArch(n_styles=n_styles)
    return replace(base, enc_channels=tuple(enc_channels))


def train_nst(cfg: TrainConfig, content: DatasetManifest | Tensor, style_bank: Tensor,
              extractor: FeatureExtractor, loss: NstLossConfig | None = None,
              checkpoint_path: str | Path | None = None, resume=None,
              stop_after: int | None = None) -> TrainResult:
    """Train the style transformer against a frozen, pre-trained extractor.

    Every sample in a batch draws its style index uniformly from the bank.
    """
    cs = content if isinstance(content, Tensor) else load_grids(content)
    if len(cs) == 0:
        raise TrainingError("train_nst needs content frames")
    if style_bank.dim() == 3:
        style_bank = style_bank.unsqueeze(1)
    n_styles = style_bank.shape[0]
    if n_styles < 1:
        raise TrainingError("style bank is empty")
    loss = loss or NstLossConfig(lambda_s=cfg.lambda_s, lambda_c=cfg.lambda_c)
    channels = tuple(c.weight.shape[0] for c in extractor.convs)
    arch = nst_arch_for(cfg, n_styles, channels)
    model = NstModel(arch, style_bank, loss, extractor)
    model.freeze_extractor()
    tc.init_weights(model.transformer, sub_seed(cfg.seed, "init", "transformer"))
    state = RunState(cfg, {"transformer": model.transformer},
                     {"transformer": tc.Adam(model.transformer.named_parameters(), cfg.learning_rate,
                                             (cfg.beta1, cfg.beta2))},
                     make_rng(cfg.seed, "train", "nst"),
                     {"kind": "nst", **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(arch).items()},
                      "loss": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(loss).items()},
                      "resolution": int(cs.shape[-1])})
    state.extra_meta = _data_meta(content=content)
    # frozen parts travel in the checkpoint but are never optimized
    state.extra_tensors = {**_module_tensors("frozen.extractor", extractor), "frozen.style_bank": model.style_bank}
    _begin(state, resume)
    state.extra_tensors = {**_module_tensors("frozen.extractor", extractor), "frozen.style_bank": model.style_bank}

    def epoch(st: RunState) -> dict[str, float]:
        model.transformer.train()
        order = st.rng.permutation(len(cs))
        keys = ("style_global", "style_local", "style", "content")
        sums = dict.fromkeys(keys, 0.0)
        n = 0
        for idx in _batches(order, cfg.batch_size):
            styles = torch.from_numpy(st.rng.integers(0, n_styles, size=len(idx)))
            rec = nst_total_loss(model, cs[idx], styles)
            st.opts["transformer"].zero_grad()
            rec.total_tensor.backward()
            st.opts["transformer"].step()
            for k in keys:
                sums[k] += rec[k]
            n += 1
        out = {k: v / n for k, v in sums.items()}
        out["total"] = loss.lambda_s * out["style"] + loss.lambda_c * out["content"]
        return out

    _run_epochs(state, epoch, checkpoint_path, stop_after)
    model.eval()
    return TrainResult(state.to_checkpoint(), list(state.loss_log), {"model": model})


def load_nst(ckpt: Checkpoint | str | Path) -> NstModel:
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt, "nst")
    a = ckpt.arch
    arch = NstArch(tuple(a["enc_channels"]), tuple(a["t_channels"]), a["n_res"], a["n_styles"],
                   a.get("skip_gain", 0.0))
    lc = dict(a["loss"])
    lc["content_layers"] = tuple(lc["content_layers"])
    lc["style_layers"] = tuple(lc["style_layers"])
    extractor = FeatureExtractor(arch.enc_channels)
    _load_module("frozen.extractor", extractor, ckpt.tensors)
    model = NstModel(arch, ckpt.tensors["frozen.style_bank"], NstLossConfig(**lc), extractor)
    _load_module("model.transformer", model.transformer, ckpt.tensors)
    model.freeze_extractor()
    return model.eval()


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
