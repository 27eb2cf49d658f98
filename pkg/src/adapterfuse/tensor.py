"""Dense matrices and low-rank adapter values.

Everything in this module is immutable: construction validates shapes and
finiteness, and every operation returns a fresh object.  Arithmetic always
runs in float64 no matter how the operands were produced; narrowing to
float32 happens only when a library is written to disk.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np

from .errors import NumericError, StructuralError


@dataclasses.dataclass(frozen=True, eq=False)
class Matrix:
    """A finite, non-empty 2-D array held in row-major float64."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise StructuralError(
                f"matrix must be 2-D with positive extent, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("matrix entries must all be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    def allclose(self, other: "Matrix", rtol: float = 1e-12, atol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(
            self.data, other.data, rtol=rtol, atol=atol
        )


@dataclasses.dataclass(frozen=True, eq=False)
class LoraPair:
    """A low-rank update to one layer, factored as the product B A.

    The down-projection A has shape rank x k and the up-projection B has
    shape d x rank.  The scaling numerator alpha is stored separately and
    only applied when a delta is materialized, so the stored factors stay
    exactly as they were trained.
    """

    layer_name: str
    B: Matrix
    A: Matrix
    rank: int
    alpha: float

    def __post_init__(self) -> None:
        if not self.layer_name:
            raise StructuralError("layer_name must be non-empty")
        if self.rank < 1:
            raise StructuralError(f"rank must be positive, got {self.rank}")
        if self.B.cols != self.rank or self.A.rows != self.rank:
            raise StructuralError(
                f"layer {self.layer_name!r}: factor shapes {self.B.shape} x "
                f"{self.A.shape} do not match rank {self.rank}"
            )
        d, k = self.B.rows, self.A.cols
        if not self.rank < min(d, k):
            raise StructuralError(
                f"layer {self.layer_name!r}: rank {self.rank} must be strictly "
                f"below min(d, k) = {min(d, k)}"
            )
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise StructuralError(f"alpha must be a positive real, got {self.alpha}")

    @property
    def out_dim(self) -> int:
        return self.B.rows

    @property
    def in_dim(self) -> int:
        return self.A.cols

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclasses.dataclass(frozen=True, eq=False)
class AdapterSet:
    """All per-layer low-rank updates produced by one fine-tuning run.

    Layers keep their insertion order; that order is what serialization,
    fusion, and application all iterate in.
    """

    adapter_id: str
    layers: tuple[LoraPair, ...]
    metadata: Mapping[str, str] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.adapter_id:
            raise StructuralError("adapter_id must be non-empty")
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise StructuralError(f"adapter {self.adapter_id!r} has no layers")
        names = [p.layer_name for p in self.layers]
        if len(set(names)) != len(names):
            raise StructuralError(
                f"adapter {self.adapter_id!r} has duplicate layer names"
            )
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(p.layer_name for p in self.layers)

    def layer(self, name: str) -> LoraPair:
        for p in self.layers:
            if p.layer_name == name:
                return p
        raise StructuralError(f"adapter {self.adapter_id!r} has no layer {name!r}")


def delta(p: LoraPair, apply_scaling: bool = False) -> Matrix:
    """Materialize the dense update B A, optionally times alpha/rank."""
    prod = np.einsum("dr,rk->dk", p.B.data, p.A.data, optimize=False)
    if apply_scaling:
        prod = prod * p.scaling
    return Matrix(prod)


def matmul(x: Matrix, y: Matrix) -> Matrix:
    """Standard matrix product with a fixed reduction order.

    einsum without optimization sums each dot product left to right, so
    repeated runs on one platform give bit-identical results.
    """
    if x.cols != y.rows:
        raise StructuralError(
            f"cannot multiply {x.shape} by {y.shape}: inner dimensions differ"
        )
    return Matrix(np.einsum("ab,bc->ac", x.data, y.data, optimize=False))


def axpy_accumulate(acc: Matrix, scale: float, x: Matrix) -> Matrix:
    """Return acc + scale * x elementwise."""
    if acc.shape != x.shape:
        raise StructuralError(
            f"cannot accumulate {x.shape} into {acc.shape}: shapes differ"
        )
    return Matrix(acc.data + float(scale) * x.data)
