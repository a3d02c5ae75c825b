"""Dense tensor ops, layers and Adam used by every network in the package.

Autodiff is torch's reverse mode; this module pins the op contracts the rest
of the code relies on (shape checks, tie-breaking, epsilons, finiteness) and
owns the optimizer so its state can be checkpointed byte-exactly.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
IN_EPS = 1e-5
INIT_STD = 0.02

DEFAULT_DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# op-count probe

_probe: Counter | None = None


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count calls to the ops of this module inside the block."""
    global _probe
    prev, _probe = _probe, Counter()
    try:
        yield _probe
    finally:
        _probe = prev


def _tick(name: str) -> None:
    if _probe is not None:
        _probe[name] += 1


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# functional ops


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    _tick("conv2d")
    if x.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({k},)")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
               running_mean: Tensor | None = None, running_var: Tensor | None = None,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Running statistics move by an exponential average only when ``training``;
    eval mode normalizes with them instead of the batch moments.
    """
    _tick("batch_norm")
    if x.dim() != 4:
        raise ShapeError(f"batch_norm expects [N,C,H,W], got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm in training mode needs N*H*W >= 2")
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        if running_mean is not None and running_var is not None:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_var.mul_(1 - momentum).add_(momentum * var.detach() * count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm eval mode needs running statistics")
        mean, var = running_mean, running_var
    xhat = (x - mean.view(1, c, 1, 1)) / torch.sqrt(var.view(1, c, 1, 1) + eps)
    return xhat * gamma.view(1, c, 1, 1) + beta.view(1, c, 1, 1)


def max_pool(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    # torch's CPU kernel keeps the first maximum in row-major scan order,
    # which is the tie rule gradients are routed by.
    _tick("max_pool")
    if x.dim() != 4:
        raise ShapeError(f"max_pool expects [N,C,H,W], got {tuple(x.shape)}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"max_pool window {window} exceeds spatial size {tuple(x.shape[2:])}")
    return F.max_pool2d(x, window, stride if stride is not None else window)


def instance_norm_conditional(x: Tensor, style_index: int | Sequence[int] | Tensor,
                              scale_bank: Tensor, shift_bank: Tensor,
                              eps: float = IN_EPS) -> Tensor:
    """Instance normalization followed by the affine row of the chosen style.

    ``style_index`` is one int for the whole batch or one index per sample.
    """
    _tick("instance_norm_conditional")
    if x.dim() != 4:
        raise ShapeError(f"instance norm expects [N,C,H,W], got {tuple(x.shape)}")
    n, c = x.shape[:2]
    s = scale_bank.shape[0]
    if scale_bank.shape != (s, c) or shift_bank.shape != (s, c):
        raise ShapeError(f"style banks must be [S,{c}]")
    idx = torch.as_tensor(style_index, dtype=torch.long).reshape(-1)
    if idx.numel() == 1:
        idx = idx.expand(n)
    if idx.numel() != n:
        raise ShapeError(f"{idx.numel()} style indices for a batch of {n}")
    if bool((idx < 0).any()) or bool((idx >= s).any()):
        raise IndexError(f"style index out of range [0, {s}): {idx.tolist()}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    xhat = (x - mean) / torch.sqrt(var + eps)
    return xhat * scale_bank[idx].view(n, c, 1, 1) + shift_bank[idx].view(n, c, 1, 1)


def gram_matrix(activations: Tensor) -> Tensor:
    """Unnormalized Gram matrix of [C,U] (or batched [N,C,U]) activations."""
    _tick("gram_matrix")
    if activations.dim() == 2:
        return activations @ activations.t()
    if activations.dim() == 3:
        return torch.bmm(activations, activations.transpose(1, 2))
    raise ShapeError(f"gram_matrix expects [C,U] or [N,C,U], got {tuple(activations.shape)}")


def relu(x: Tensor) -> Tensor:
    _tick("relu")
    return torch.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    _tick("leaky_relu")
    return F.leaky_relu(x, slope)


def tanh(x: Tensor) -> Tensor:
    _tick("tanh")
    return torch.tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    _tick("sigmoid")
    return torch.sigmoid(x)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _tick("upsample_nearest")
    if factor == 1:
        return x
    return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)


def add(a: Tensor, b: Tensor) -> Tensor:
    _tick("add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _tick("mul")
    return a * b


def mean(x: Tensor) -> Tensor:
    _tick("mean")
    return x.mean()


def total(x: Tensor) -> Tensor:
    _tick("sum")
    return x.sum()


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    _tick("l1_distance")
    return (a - b).abs().mean()


def sq_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences."""
    _tick("sq_l2_distance")
    return ((a - b) ** 2).sum()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: Tensor
    second_moment: Tensor
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), **hyper)


def adam_step(param: Tensor, grad: Tensor, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``param`` and ``state``."""
    _tick("adam_step")
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise ShapeError("adam_step: param, grad and moments must share a shape")
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f"non-finite gradient for parameter of shape {tuple(param.shape)}")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    with torch.no_grad():
        state.first_moment.mul_(b1).add_(grad, alpha=1 - b1)
        state.second_moment.mul_(b2).addcmul_(grad, grad, value=1 - b2)
        m_hat = state.first_moment / (1 - b1 ** t)
        v_hat = state.second_moment / (1 - b2 ** t)
        param.sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon))
    state.step_count = t


class Adam:
    """Adam over a dict of named parameters; a parameter without grad is skipped."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.states = {
            name: AdamState.zeros_like(p.detach(), beta1=betas[0], beta2=betas[1],
                                       epsilon=eps, learning_rate=lr)
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in {name}")
        for name, g in grads.items():
            adam_step(self.params[name].data, g, self.states[name])


# ---------------------------------------------------------------------------
# layers


class Conv2d(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(c))
        self.beta = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.training,
                          self.running_mean, self.running_var)


class CondInstanceNorm2d(nn.Module):
    """Instance norm with one (scale, shift) row per style; S=1 is plain IN."""

    def __init__(self, c: int, n_styles: int = 1):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(n_styles, c))
        self.shift = nn.Parameter(torch.zeros(n_styles, c))

    def forward(self, x: Tensor, style_index: int | Tensor = 0) -> Tensor:
        return instance_norm_conditional(x, style_index, self.scale, self.shift)


def init_weights(module: nn.Module, seed: int) -> None:
    """Seeded N(0, 0.02) conv weights, zero biases; norm layers keep identity."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, Conv2d):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()


def num_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def finite_or_raise(values: dict[str, float]) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite loss component {k!r}")
