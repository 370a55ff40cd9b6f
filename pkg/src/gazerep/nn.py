"""Layers built from autodiff ops: dilated convs, batch norm, residual blocks."""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KERNEL_SIZE = 3
DILATIONS = (1, 1, 2, 4, 8, 16, 32, 64)


class Module:
    """Minimal container: parameters, buffers and children in definition order."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (params.keys() | buffers.keys()) - state.keys()
        unexpected = state.keys() - (params.keys() | buffers.keys())
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, arr in buffers.items():
            arr[...] = state[name]

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 replay)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, child in [("", self), *self._all_modules()]:
            for k in child._buffers:
                child._buffers[k] = child._buffers[k].astype(dtype)
        return self

    def _all_modules(self) -> Iterator[tuple[str, "Module"]]:
        for name, child in self._children():
            yield name, child
            yield from child._all_modules()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._all_modules():
            child.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Conv1d(Module):
    """Dilated convolution with bias; ``causal`` selects left-only padding."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel_size: int = KERNEL_SIZE,
                 dilation: int = 1, causal: bool = False):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.dilation, self.causal = kernel_size, dilation, causal
        self.weight = _kaiming_uniform(rng, (out_ch, in_ch, kernel_size), in_ch * kernel_size)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)

    @property
    def padding(self):
        if self.kernel_size == 1:
            return (0, 0)
        return "causal" if self.causal else "same"

    def forward(self, x: Tensor, extra_bias: Tensor | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ValueError(f"Conv1d: expected (B, {self.in_ch}, T) input, got {x.shape}")
        out = ad.add_over_time(ad.conv1d(x, self.weight, self.dilation, self.padding), self.bias)
        if extra_bias is not None:
            out = ad.add_over_time(out, extra_bias)
        return out


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, np.float32)
        self._buffers["running_var"] = np.ones(channels, np.float32)

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ValueError(f"BatchNorm1d: expected (B, {self.channels}, T) input, got {x.shape}")
        gamma = self.gamma.reshape(1, self.channels, 1)
        beta = self.beta.reshape(1, self.channels, 1)
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm1d: training mode needs a batch of at least 2")
            mean = ad.batch_mean(x)
            var = ad.batch_var(x)
            n = x.shape[0] * x.shape[2]
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
            xhat = (x - mean) * (var + self.eps) ** -0.5
        else:
            mean = self.running_mean.reshape(1, -1, 1)
            inv = (self.running_var + self.eps).astype(x.dtype) ** -0.5
            xhat = (x - Tensor(mean.astype(x.dtype))) * Tensor(inv.reshape(1, -1, 1))
        return xhat * gamma + beta


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _kaiming_uniform(rng, (out_dim, in_dim), in_dim)
        self.bias = Tensor(np.zeros(out_dim, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"Linear: expected (B, {self.in_dim}) input, got {x.shape}")
        return fc(x, self.weight, self.bias)


def fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Batched ``W x + b`` for x of shape (n,) or (B, n)."""
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"fc: shapes x={x.shape} W={weight.shape} b={bias.shape} do not conform")
    out = ad.matmul(x, ad.transpose(weight)) + bias
    return out.reshape(-1) if single else out


class ResidualBlock(Module):
    """Two conv -> ReLU -> BN stages plus a skip path.

    ``project="auto"`` inserts a 1x1 skip convolution only when channel counts
    differ; ``"always"`` gives every block one.
    """

    def __init__(self, in_ch: int, out_ch: int, dilations: Sequence[int], rng: np.random.Generator,
                 causal: bool = False, project: str = "auto"):
        super().__init__()
        if project not in ("auto", "always"):
            raise ValueError(f"project must be 'auto' or 'always', got {project!r}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.convs = [
            Conv1d(in_ch, out_ch, rng, dilation=dilations[0], causal=causal),
            Conv1d(out_ch, out_ch, rng, dilation=dilations[1], causal=causal),
        ]
        self.norms = [BatchNorm1d(out_ch), BatchNorm1d(out_ch)]
        needs = project == "always" or in_ch != out_ch
        self.skip = Conv1d(in_ch, out_ch, rng, kernel_size=1) if needs else None

    def forward(self, x: Tensor, cond: dict[int, Tensor] | None = None) -> Tensor:
        cond = cond or {}
        h = x
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = norm(ad.relu(conv(h, cond.get(i))))
        return h + (self.skip(x) if self.skip is not None else x)


class TCN(Module):
    """Stack of residual blocks, two conv layers each.

    ``widths`` lists the filter count of every conv layer; a block's two layers
    must share a width.
    """

    def __init__(self, in_ch: int, widths: Sequence[int], dilations: Sequence[int], rng: np.random.Generator,
                 causal: bool = False, project: str = "auto"):
        super().__init__()
        if len(widths) != len(dilations) or len(widths) % 2:
            raise ValueError(f"TCN: need an even number of layers with one dilation each, got {widths} / {dilations}")
        self.widths, self.dilations, self.causal = tuple(widths), tuple(dilations), causal
        blocks = []
        c = in_ch
        for b in range(len(widths) // 2):
            w0, w1 = widths[2 * b], widths[2 * b + 1]
            if w0 != w1:
                raise ValueError(f"TCN: block {b} mixes widths {w0} and {w1}")
            blocks.append(ResidualBlock(c, w0, dilations[2 * b: 2 * b + 2], rng, causal=causal, project=project))
            c = w0
        self.blocks = blocks

    def forward(self, x: Tensor, cond: dict[int, Tensor] | None = None) -> list[Tensor]:
        """Return the output of every block. ``cond`` maps 0-based layer index to a (B, C) bias."""
        cond = cond or {}
        outs = []
        h = x
        for b, block in enumerate(self.blocks):
            local = {i: cond[2 * b + i] for i in (0, 1) if 2 * b + i in cond}
            h = block(h, local)
            outs.append(h)
        return outs


def gap(x: Tensor) -> Tensor:
    return ad.global_avg_pool(x)


def receptive_field(layer: int, dilations: Sequence[int] = DILATIONS, kernel_size: int = KERNEL_SIZE) -> int:
    """Receptive field after ``layer`` (1-based) stacked dilated convolutions."""
    if not 1 <= layer <= len(dilations):
        raise IndexError(f"layer must be in 1..{len(dilations)}, got {layer}")
    return 1 + sum((kernel_size - 1) * d for d in dilations[:layer])


def destroy(x: Tensor | np.ndarray, p: float, rng: np.random.Generator | int) -> Tensor:
    """Zero each scalar independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"destroy: p must lie in [0, 1], got {p}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if p == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= p
    return ad.apply_mask(x, keep)
