"""Parameter-owning layers on top of the autodiff kernels.

Modules track parameters through sorted attribute walking, so every build of
the same topology enumerates identical dotted names (lists of child modules
contribute their index to the name: ``block0``, ``block1``, ...).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Tensor


class Module:
    """Base class: child discovery by attribute walk, train/eval switching."""

    def __init__(self):
        self.training = True

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _children(self):
        for key in sorted(vars(self)):
            val = getattr(self, key)
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = ""):
        for key in sorted(vars(self)):
            val = getattr(self, key)
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        own = getattr(self, "_buffers", None)
        if own:
            for key in sorted(own):
                yield prefix + key, own[key]
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> ParameterSet:
        return ParameterSet(self.named_parameters())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays, for checkpointing."""
        out = {name: t.data for name, t in self.named_parameters(prefix)}
        out.update({name: arr for name, arr in self.named_buffers(prefix)})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, t in self.named_parameters(prefix):
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch loading {name}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(t.data.dtype)
        for name, arr in self.named_buffers(prefix):
            arr[...] = arrays[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, groups=1,
                 bias=True, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_ch // groups) * k
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.normal(0.0, std, (out_ch, in_ch // groups, k)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)


class ConvTranspose1d(Module):
    def __init__(self, in_ch, out_ch, k, stride, groups=1, bias=True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.groups = groups
        fan_in = (in_ch // groups) * k
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.normal(0.0, std, (in_ch, out_ch // groups, k)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d_transposed(x, self.weight, self.bias,
                                   stride=self.stride, groups=self.groups)


class BatchNorm1d(Module):
    def __init__(self, ch, eps=1e-5, momentum=0.1, *, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self._buffers = {
            "running_mean": np.zeros(ch, dtype=dtype),
            "running_var": np.ones(ch, dtype=dtype),
        }

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm1d(
            x, self.gamma, self.beta,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training, eps=self.eps, momentum=self.momentum,
        )


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor(
            rng.normal(0.0, std, (out_features, in_features)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)
