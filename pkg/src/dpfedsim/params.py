"""Flat float64 parameter vectors and the layer layouts behind them.

Every model in the simulator is a single flat vector of 64-bit reals plus a
LayoutSpec that records how the flat storage maps back to named, shaped
layers (row-major order).  All protocol arithmetic (local SGD deltas,
clipping, noise, aggregation) happens on these vectors.

The layout digest doubles as the vector's ``layout_id``, so vectors from
incompatible models cannot be combined by accident.  Norm reductions use
exactly rounded summation (``math.fsum``), which makes them independent of
platform vectorization and reproducible bit for bit.
"""

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ParamVector",
    "LayerSpec",
    "LayoutSpec",
    "l2_norm",
    "scale",
    "axpy",
    "zeros",
    "zeros_like",
    "flatten",
    "unflatten",
]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable 1-D float64 vector tagged with the layout it belongs to."""

    values: np.ndarray
    layout_id: str = "anon"

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.size


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class LayoutSpec:
    """Ordered layer descriptors covering a flat vector without gaps."""

    layers: tuple

    def __post_init__(self):
        offset = 0
        for layer in self.layers:
            if layer.offset != offset:
                raise ValueError(
                    f"layout offsets not contiguous at layer {layer.name!r}: "
                    f"expected {offset}, got {layer.offset}"
                )
            offset += layer.size

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple]) -> "LayoutSpec":
        """Build a layout from ordered ``(name, shape)`` pairs."""
        layers = []
        offset = 0
        for name, shape in shapes:
            spec = LayerSpec(str(name), tuple(int(s) for s in shape), offset)
            layers.append(spec)
            offset += spec.size
        return cls(tuple(layers))

    @classmethod
    def from_layers(cls, layers: Iterable[tuple]) -> "LayoutSpec":
        """Build a layout from ordered ``(name, array)`` pairs."""
        return cls.from_shapes([(name, np.asarray(a).shape) for name, a in layers])

    @cached_property
    def total_size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @cached_property
    def _digest(self) -> bytes:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(f"{layer.name}:{layer.shape};".encode("utf-8"))
        return h.digest()

    @cached_property
    def layout_id(self) -> str:
        return self._digest[:8].hex()

    def digest64(self) -> int:
        """Layout digest as an unsigned 64-bit integer (wire form)."""
        return int.from_bytes(self._digest[:8], "little")


def _require_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError("non-finite parameter")


def _require_same_layout(x: ParamVector, y: ParamVector, op: str) -> None:
    if x.layout_id != y.layout_id:
        raise ValueError(
            f"{op}: layout mismatch ({x.layout_id!r} vs {y.layout_id!r})"
        )
    if x.size != y.size:
        raise ValueError(f"{op}: length mismatch ({x.size} vs {y.size})")


# Below this, squared entries approach the subnormal range and lose precision.
_RESCALE_THRESHOLD = 1e-280


def l2_norm(v: ParamVector) -> float:
    """Euclidean norm of ``v`` with exactly rounded summation.

    Falls back to a rescaled computation when the naive sum of squares
    overflows or drifts toward the subnormal range, so precision holds at
    extreme magnitudes and the result is 0 only for the all-zero vector.
    """
    _require_finite(v.values)
    with np.errstate(over="ignore"):
        sq = math.fsum((v.values * v.values).tolist())
    if _RESCALE_THRESHOLD <= sq < math.inf:
        return math.sqrt(sq)
    m = float(np.abs(v.values).max())
    if m == 0.0:
        return 0.0
    scaled = v.values / m
    return m * math.sqrt(math.fsum((scaled * scaled).tolist()))


def scale(v: ParamVector, a: float) -> ParamVector:
    """Return ``a * v`` as a new vector."""
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * v.values
    _require_finite(out)
    return ParamVector(out, v.layout_id)


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y`` element-wise; layouts must match."""
    _require_same_layout(x, y, "axpy")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * x.values + y.values
    _require_finite(out)
    return ParamVector(out, y.layout_id)


def zeros(n: int, layout_id: str = "anon") -> ParamVector:
    return ParamVector(np.zeros(int(n)), layout_id)


def zeros_like(v: ParamVector) -> ParamVector:
    return ParamVector(np.zeros(v.size), v.layout_id)


def flatten(layers: Sequence[tuple]) -> ParamVector:
    """Flatten ordered ``(name, array)`` pairs into one vector (row-major).

    The vector's layout_id is the digest of the implied layout, so
    ``unflatten`` with a matching LayoutSpec round-trips bit-exactly.
    """
    layout = LayoutSpec.from_layers(layers)
    parts = [np.asarray(a, dtype=np.float64).ravel(order="C") for _, a in layers]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    _require_finite(flat)
    return ParamVector(flat, layout.layout_id)


def unflatten(v: ParamVector, layout: LayoutSpec) -> Mapping[str, np.ndarray]:
    """Split a flat vector back into named, shaped layers."""
    if v.size != layout.total_size:
        raise ValueError(
            f"unflatten: length mismatch (vector {v.size}, layout {layout.total_size})"
        )
    if v.layout_id != layout.layout_id:
        raise ValueError(
            f"unflatten: layout mismatch ({v.layout_id!r} vs {layout.layout_id!r})"
        )
    out = {}
    for layer in layout.layers:
        block = v.values[layer.offset : layer.offset + layer.size]
        out[layer.name] = block.reshape(layer.shape).copy()
    return out
