"""Minimal layer containers on top of the autodiff tensors."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor
from canopysr.errors import DimensionError, UsageError


class Module:
    """Parameter container. Parameters are discovered from instance attributes
    in assignment order, which fixes the naming and iteration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.is_leaf and (val.requires_grad or val.frozen):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise DimensionError(f"state dict mismatch: missing {sorted(missing)}, "
                                 f"unexpected {sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"parameter {k!r}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
            p.requires_grad = False
            p.grad = None

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            if p.frozen:
                raise UsageError("cannot change dtype of frozen parameters")
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def digest(self) -> str:
        return parameter_digest(self.state_dict())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter_digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 gain: float = 1.0):
        self.weight = _param((rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in))
                             .astype(dtype))
        self.bias = _param(np.zeros(n_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3 and not ad.is_grad_enabled():
            # one gemm per leading slice: BLAS rounding then depends on the slice
            # shape only, never on how many slices share the call
            return Tensor(np.matmul(x.data, self.weight.data) + self.bias.data)
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
        y = flat @ self.weight
        y = y + ad.expand(self.bias, y.shape)
        return y.reshape(*lead, y.shape[-1]) if x.ndim != 2 else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim, dtype=dtype))
        self.beta = _param(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self._eps)


class MLP(Module):
    """Stack of linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x
