"""Numeric substrate: tensors, primitive ops, gradient checking and seeded randomness.

Tensors are ``torch.Tensor`` objects and the gradient tape is torch's autograd
graph. This module pins the conventions the rest of the package relies on
(double precision, "same" padding, BN momentum/eps) and adds the two pieces
torch does not provide: a finite-difference gradient checker that is fully
independent of autograd, and a counter-based random source whose output does
not depend on the torch version.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

NdArray = torch.Tensor

DEFAULT_DTYPE = torch.float64
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

PRIMITIVES = (
    "linear", "conv1d", "conv2d", "batchnorm", "maxpool", "avgpool",
    "elementwise", "reduce", "softmax", "concat", "split", "permute",
)


class ShapeError(ValueError):
    """Raised when op inputs do not fit the op's shape contract."""


class GradCheckError(ValueError):
    pass


def conv_out_len(n: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int = 1) -> tuple[int, int]:
    """(left, right) padding that keeps a stride-1 extent unchanged."""
    total = dilation * (kernel - 1)
    left = total // 2
    return left, total - left


def _need(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _conv(op: str, x: NdArray, w: NdArray, b: NdArray | None, attrs: dict) -> NdArray:
    nd = 1 if op == "conv1d" else 2
    _need(x.dim() == nd + 2, op, f"input must have {nd + 2} dims, got shape {tuple(x.shape)}")
    _need(w.dim() == nd + 2, op, f"weight must have {nd + 2} dims, got shape {tuple(w.shape)}")
    groups = attrs.get("groups", 1)
    _need(x.shape[1] == w.shape[1] * groups, op,
          f"input channels {x.shape[1]} != weight in-channels {w.shape[1]} x groups {groups}")
    _need(w.shape[0] % groups == 0, op, f"out channels {w.shape[0]} not divisible by groups {groups}")
    stride = attrs.get("stride", 1)
    dilation = attrs.get("dilation", 1)
    padding = attrs.get("padding", "same")
    kernel = tuple(w.shape[2:])
    dil = (dilation,) * nd if isinstance(dilation, int) else tuple(dilation)
    if padding == "same":
        _need(stride == 1, op, "same padding requires stride 1")
        pads: list[int] = []
        for k, d in reversed(list(zip(kernel, dil))):
            pads.extend(same_padding(k, d))
        x = F.pad(x, pads)
        padding = 0
    pad = (padding,) * nd if isinstance(padding, int) else tuple(padding)
    st = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    for axis in range(nd):
        n = x.shape[2 + axis]
        _need(conv_out_len(n, kernel[axis], st[axis], pad[axis], dil[axis]) >= 1, op,
              f"spatial dim {axis} of extent {n} too small for kernel {kernel[axis]} "
              f"(dilation {dil[axis]}, padding {pad[axis]})")
    fn = F.conv1d if nd == 1 else F.conv2d
    return fn(x, w, b, stride=st, padding=pad, dilation=dil, groups=groups)


def _pool(op: str, x: NdArray, attrs: dict) -> NdArray:
    kernel = attrs["kernel"]
    stride = attrs.get("stride", kernel)
    padding = attrs.get("padding", 0)
    nd = x.dim() - 2
    _need(nd in (1, 2), op, f"expected 3 or 4 dims, got shape {tuple(x.shape)}")
    for axis in range(nd):
        n = x.shape[2 + axis]
        _need(conv_out_len(n, kernel, stride, padding) >= 1, op,
              f"dim {2 + axis} of extent {n} too small for kernel {kernel}")
    if op == "maxpool":
        fn = F.max_pool1d if nd == 1 else F.max_pool2d
        return fn(x, kernel, stride, padding)
    fn = F.avg_pool1d if nd == 1 else F.avg_pool2d
    return fn(x, kernel, stride, padding)


_ELEMENTWISE: dict[str, Callable[..., NdArray]] = {
    "add": torch.add, "sub": torch.sub, "mul": torch.mul, "div": torch.div,
    "neg": torch.neg, "exp": torch.exp, "log": torch.log, "square": torch.square,
}


def primitive_forward(op: str, inputs: Sequence[NdArray], attrs: dict | None = None):
    """Run one primitive with explicit shape checking.

    ``split`` returns a tuple; every other op returns a single tensor. Autograd
    records the op whenever an input requires grad.
    """
    attrs = dict(attrs or {})
    if op not in PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    x = inputs[0]
    if op == "linear":
        w = inputs[1]
        b = inputs[2] if len(inputs) > 2 else None
        _need(x.shape[-1] == w.shape[1], op, f"input features {x.shape[-1]} != weight in-features {w.shape[1]}")
        return F.linear(x, w, b)
    if op in ("conv1d", "conv2d"):
        b = inputs[2] if len(inputs) > 2 else None
        return _conv(op, x, inputs[1], b, attrs)
    if op == "batchnorm":
        _need(x.dim() >= 2, op, f"need at least 2 dims, got {tuple(x.shape)}")
        weight, bias, mean, var = (list(inputs[1:]) + [None] * 4)[:4]
        c = x.shape[1]
        for name, t in (("weight", weight), ("bias", bias), ("running_mean", mean), ("running_var", var)):
            _need(t is None or t.shape == (c,), op, f"{name} shape {tuple(t.shape) if t is not None else None} != ({c},)")
        return F.batch_norm(x, mean, var, weight, bias, training=attrs.get("training", True),
                            momentum=attrs.get("momentum", BN_MOMENTUM), eps=attrs.get("eps", BN_EPS))
    if op in ("maxpool", "avgpool"):
        return _pool(op, x, attrs)
    if op == "elementwise":
        fn = _ELEMENTWISE[attrs["fn"]]
        if len(inputs) == 2:
            try:
                torch.broadcast_shapes(inputs[0].shape, inputs[1].shape)
            except RuntimeError as exc:
                raise ShapeError(f"elementwise: cannot broadcast {tuple(inputs[0].shape)} "
                                 f"with {tuple(inputs[1].shape)}") from exc
        return fn(*inputs)
    if op == "reduce":
        kind = attrs.get("kind", "sum")
        dim = attrs.get("dim")
        keep = attrs.get("keepdim", False)
        fn = {"sum": torch.sum, "mean": torch.mean}[kind]
        return fn(x) if dim is None else fn(x, dim=dim, keepdim=keep)
    if op == "softmax":
        return torch.softmax(x, dim=attrs.get("dim", -1))
    if op == "concat":
        dim = attrs.get("dim", 0)
        ref = list(x.shape)
        for t in inputs[1:]:
            other = list(t.shape)
            _need(len(other) == len(ref) and all(a == b for i, (a, b) in enumerate(zip(ref, other))
                                                 if i != dim % len(ref)),
                  op, f"shapes {tuple(ref)} and {tuple(other)} differ outside axis {dim}")
        return torch.cat(list(inputs), dim=dim)
    if op == "split":
        dim = attrs.get("dim", 0)
        sizes = attrs["sizes"]
        _need(sum(sizes) == x.shape[dim], op, f"sizes {sizes} do not sum to extent {x.shape[dim]} of axis {dim}")
        return torch.split(x, list(sizes), dim=dim)
    # permute
    order = attrs["order"]
    _need(sorted(order) == list(range(x.dim())), op, f"order {order} is not a permutation of {x.dim()} axes")
    return x.permute(*order)


def backward(loss: NdArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any leaf requiring grad")
    loss.reshape(()).backward()


def finite_difference_grad(f: Callable[[NdArray], NdArray], point: NdArray, step: float) -> NdArray:
    """Central differences, one coordinate at a time; never touches autograd."""
    x = point.detach().clone().to(DEFAULT_DTYPE)
    flat = x.view(-1)
    grad = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(f(x))
            flat[i] = orig - step
            down = float(f(x))
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
    return grad.view_as(x)


def grad_check(f: Callable[[NdArray], NdArray], point: NdArray, step: float = 1e-5,
               tol: float = 1e-4) -> bool:
    """Compare autograd gradients of scalar ``f`` at ``point`` with central differences.

    The relative difference uses ``max(|a|, |b|, 1)`` as the scale so that
    near-zero gradients are compared absolutely. Raises ``GradCheckError`` if
    ``f`` is non-finite or routes through a hard step (no gradient path).
    """
    x = point.detach().clone().to(DEFAULT_DTYPE).requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise GradCheckError("f must return a scalar")
    if not torch.isfinite(y).all():
        raise GradCheckError("f is non-finite at the check point")
    if not y.requires_grad:
        raise GradCheckError("f has no gradient path to the check point")
    if _hits_hard_step(y.grad_fn):
        raise GradCheckError("f contains a hard Heaviside step; finite differences are meaningless there")
    (g_tape,) = torch.autograd.grad(y, x)
    g_fd = finite_difference_grad(f, point, step)
    if not (torch.isfinite(g_tape).all() and torch.isfinite(g_fd).all()):
        raise GradCheckError("non-finite gradient")
    scale = torch.maximum(torch.maximum(g_tape.abs(), g_fd.abs()), torch.ones_like(g_fd))
    return bool(((g_tape - g_fd).abs() / scale).max() <= tol)


def _hits_hard_step(fn) -> bool:
    seen = set()
    stack = [fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        name = type(node).__name__
        # surrogate spike functions flag themselves; raw comparisons have no grad_fn at all
        if "SpikeFunction" in name or "LifFunction" in name or name in ("SignBackward0", "HeavisideBackward0"):
            return True
        stack.extend(n for n, _ in node.next_functions)
    return False


class Rng:
    """Seeded, counter-based random source (Philox-4x32-10 via numpy).

    Philox is a documented counter-based generator, so a given seed produces
    the same stream on every platform and numpy version that ships it.
    """

    def __init__(self, seed: int = 200):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def spawn(self, index: int) -> "Rng":
        """Independent child stream; children with different indices never overlap."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.Philox(key=self.seed, counter=[0, 0, index + 1, 0]))
        return child

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def tensor_uniform(self, shape, bound: float, dtype=DEFAULT_DTYPE) -> NdArray:
        return torch.from_numpy(self.uniform(-bound, bound, tuple(shape))).to(dtype)


def init_parameters(module: torch.nn.Module, rng: Rng) -> None:
    """Re-initialise every parameter from ``rng`` in registration order.

    Weights and biases of conv/linear layers draw U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    BN affine params are (1, 0); anything else keeps its constructor value.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (torch.nn.Conv1d, torch.nn.Conv2d, torch.nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(rng.tensor_uniform(m.weight.shape, bound, m.weight.dtype))
                if m.bias is not None:
                    m.bias.copy_(rng.tensor_uniform(m.bias.shape, bound, m.bias.dtype))
            elif isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.reset_parameters()
