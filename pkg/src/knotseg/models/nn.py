"""Module containers and the feedforward building blocks."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.ops import RunningStats
from ..autodiff.tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Registers Tensor parameters, RunningStats buffers and child modules
    in assignment order, which fixes checkpoint parameter names."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, RunningStats):
            self._buffers[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        """Cast parameters in place (float64 for finite-difference oracles)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[f"{name}.running_mean"] = b.mean
            state[f"{name}.running_var"] = b.var
            state[f"{name}.num_batches"] = np.array([b.batches], np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"{name}: stored shape {arr.shape} vs model {expected[name].shape}")
        params = self.parameters()
        for name, p in params.items():
            p.data = np.array(state[name], dtype=np.float32)
        for name, b in self.named_buffers():
            b.mean = np.array(state[f"{name}.running_mean"], dtype=np.float32)
            b.var = np.array(state[f"{name}.running_var"], dtype=np.float32)
            b.batches = int(state[f"{name}.num_batches"][0])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(fan_in_uniform(rng, (cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.stats = RunningStats.empty(c, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.stats, self.training)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng)
        self.bn = BatchNorm2d(cout, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    """2 x [Conv3x3 - BatchNorm - ReLU]."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.first = ConvBNReLU(cin, cout, rng, momentum, eps)
        self.second = ConvBNReLU(cout, cout, rng, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class Decoder(Module):
    """Three [nearest upsample -> DoubleConv] blocks followed by a 1x1 head.

    With `skip_channels`, each block concatenates an encoder feature map at
    the upsampled resolution before its convolutions (U-Net style).
    """

    def __init__(self, in_channels: int, out_channels: list[int], rng: np.random.Generator,
                 skip_channels: Optional[list[int]] = None, momentum: float = 0.1, eps: float = 1e-5,
                 head_bias: float = 0.0):
        super().__init__()
        self.skip_channels = list(skip_channels) if skip_channels else [0] * len(out_channels)
        self.block_in_channels = []
        c = in_channels
        for k, (cout, cskip) in enumerate(zip(out_channels, self.skip_channels)):
            self.block_in_channels.append(c + cskip)
            setattr(self, f"block{k}", DoubleConv(c + cskip, cout, rng, momentum, eps))
            c = cout
        self.nblocks = len(out_channels)
        self.head = Conv2d(c, 1, 1, rng)
        self.head.bias.data[:] = head_bias

    def forward(self, x: Tensor, skips: Optional[list[Tensor]] = None) -> Tensor:
        for k in range(self.nblocks):
            x = ops.upsample_nearest2(x)
            if skips is not None:
                x = ops.concat([x, skips[k]], axis=1)
            x = getattr(self, f"block{k}")(x)
        return self.head(x)
