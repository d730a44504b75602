"""Named collection of learnable arrays."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, default_dtype


class ModelParams:
    """Ordered mapping ``name -> Tensor`` with ``requires_grad=True`` leaves.

    Names are dotted paths such as ``enc.0.conv1.weight`` or ``asm.2.score.bias``.
    """

    def __init__(self, arrays: "dict[str, np.ndarray] | None" = None, dtype=None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.add(name, arr, dtype=dtype)

    def add(self, name: str, arr, dtype=None) -> Tensor:
        t = Tensor(arr, requires_grad=True, name=name, dtype=dtype or default_dtype())
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._tensors.items())

    def with_prefix(self, prefix: str) -> list[str]:
        return [k for k in self._tensors if k.startswith(prefix)]

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.size for t in self._tensors.values()))

    def copy(self, dtype=None) -> "ModelParams":
        out = ModelParams()
        for k, t in self._tensors.items():
            out.add(k, t.data, dtype=dtype or t.dtype)
        return out

    def astype(self, dtype) -> "ModelParams":
        return self.copy(dtype=np.dtype(dtype))

    def frozen(self) -> "ModelParams":
        """Copy whose tensors do not request gradients."""
        out = self.copy()
        for t in out._tensors.values():
            t.requires_grad = False
        return out

    def assign(self, name: str, arr: np.ndarray) -> None:
        t = self._tensors[name]
        arr = np.asarray(arr, dtype=t.dtype)
        if arr.shape != t.shape:
            raise ShapeError(f"{name}: cannot assign shape {arr.shape} to {t.shape}")
        t.data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._tensors.items():
            h.update(k.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._tensors.values())

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} arrays, {self.count()} values)"
