"""Dense rank-4 tensors, a seedable PRNG, and reverse-mode differentiation.

Every value in this package is a :class:`Tensor4`: a C-contiguous NCHW
array of single or double precision floats with an attached gradient slot.
Operations on tensors record a backward closure so that calling
``backward()`` on a scalar result accumulates exact adjoints into every
reachable leaf (parameters and inputs flagged with ``requires_grad``).

Determinism contract
--------------------
* :class:`Prng` is splitmix64, a published 64-bit shift/multiply
  generator.  The same seed yields the same byte sequence on every
  platform; normal variates come from the Box-Muller transform applied to
  consecutive pairs of 53-bit uniforms.
* All reductions delegate to numpy's fixed pairwise summation, so
  repeated calls on identical inputs are bitwise identical.  Nothing in
  this module depends on wall clock, hash seeds, or thread scheduling.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor4",
    "Prng",
    "ShapeError",
    "NumericError",
    "tensor4",
    "zeros",
    "full",
    "randn",
    "elementwise",
    "reduce",
    "concat_channels",
    "index_to_offset",
    "offset_to_index",
    "set_debug_checks",
    "no_grad",
]

_DTYPES = {"single": np.float32, "double": np.float64}
_NAMED_AXES = {"n": 0, "c": 1, "h": 2, "w": 3}

# Elements above this bound would overflow an addressable buffer.
_MAX_ELEMENTS = 2**62

_debug_finite = os.environ.get("EMCAD_DEBUG", "") == "1"


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when non-finite values invalidate a computation."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle the finite-value assertion applied after every operation."""
    global _debug_finite
    _debug_finite = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_finite


def _validate_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    if len(shape) != 4:
        raise ShapeError(f"rank-4 shape required, got {tuple(shape)}")
    n, c, h, w = (int(d) for d in shape)
    if min(n, c, h, w) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {(n, c, h, w)}")
    if n * c * h * w > _MAX_ELEMENTS:
        raise ShapeError(f"element count of {(n, c, h, w)} exceeds addressable size")
    return n, c, h, w


class Tensor4:
    """A rank-4 value of shape (batch, channels, rows, cols).

    ``data`` is a C-contiguous float32 or float64 ndarray; ``grad`` is
    filled lazily by :meth:`backward` and shares dtype and shape with
    ``data``.  Tensors produced by operations are treated as immutable;
    only optimizer code mutates leaf ``data`` in place, between graph
    constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            raise ShapeError(f"unsupported dtype {data.dtype}; use float32 or float64")
        _validate_shape(data.shape)
        self.data = np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        if _debug_finite and not np.isfinite(self.data).all():
            raise NumericError("non-finite values in tensor")

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor4(shape={self.shape}, {self.precision}{tag})"

    def detach(self) -> "Tensor4":
        return Tensor4(self.data)

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, precision: str) -> "Tensor4":
        return Tensor4(self.data.astype(_DTYPES[precision]), requires_grad=self.requires_grad)

    # -- autodiff -----------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate adjoints of this value into every reachable leaf.

        ``seed`` defaults to ones, which for a scalar-shaped tensor is the
        usual dL/dL = 1.  Traversal order is a deterministic depth-first
        topological sort, so gradient accumulation order is fixed.
        """
        topo: list[Tensor4] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor4, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other: "Tensor4") -> "Tensor4":
        return elementwise(self, other, "add")

    def __sub__(self, other: "Tensor4") -> "Tensor4":
        return elementwise(self, other, "sub")

    def __mul__(self, other: "Tensor4") -> "Tensor4":
        return elementwise(self, other, "mul")

    def scale(self, factor: float) -> "Tensor4":
        """Multiply by a python scalar."""
        out_data = self.data * self.data.dtype.type(factor)

        def bwd(g: np.ndarray, x: "Tensor4" = self, f: float = factor) -> None:
            if x.requires_grad or x._parents:
                x._accumulate_grad(g * x.data.dtype.type(f))

        return _make(out_data, (self,), bwd)


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, counting)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _make(data: np.ndarray, parents: tuple, backward: Callable | None) -> Tensor4:
    """Wrap an op result, keeping the graph only where gradients can flow."""
    track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if not track:
        return Tensor4(data)
    return Tensor4(data, _parents=parents, _backward=backward)


def tensor4(values, precision: str = "single", requires_grad: bool = False) -> Tensor4:
    """Build a tensor from array-like values (must already be rank 4)."""
    arr = np.asarray(values, dtype=_DTYPES[precision])
    return Tensor4(arr, requires_grad=requires_grad)


def zeros(shape: Sequence[int], precision: str = "single") -> Tensor4:
    """All-zero tensor of the given NCHW shape."""
    return Tensor4(np.zeros(_validate_shape(shape), dtype=_DTYPES[precision]))


def full(shape: Sequence[int], value: float, precision: str = "single") -> Tensor4:
    return Tensor4(np.full(_validate_shape(shape), value, dtype=_DTYPES[precision]))


# -- pseudo-random numbers --------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TAG_GAMMA = 0xD1B54A32D192ED03


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output mixer on uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Prng:
    """splitmix64: state advances by a fixed odd gamma, outputs are mixed.

    The generator is counter-based, so a block of ``n`` draws is produced
    in one vectorized pass and the state jumps ahead by ``n`` steps.  The
    (seed, sequence) mapping is identical on every platform.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def u64_block(self, count: int) -> np.ndarray:
        """``count`` raw draws as uint64, advancing the state by ``count``."""
        if count < 0:
            raise ValueError("count must be >= 0")
        with np.errstate(over="ignore"):
            steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            block = _mix64(np.uint64(self.state) + steps)
        self.state = (self.state + count * _GAMMA) & _MASK64
        return block

    def uniform_block(self, count: int) -> np.ndarray:
        """``count`` float64 uniforms in [0, 1) from the top 53 bits."""
        return (self.u64_block(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_block(self, count: int, stddev: float = 1.0) -> np.ndarray:
        """``count`` N(0, stddev^2) float64 draws via Box-Muller.

        Consecutive uniform pairs (u1, u2) map to the pair
        (r cos(2 pi u2), r sin(2 pi u2)) with r = sqrt(-2 ln u1); u1 is
        shifted into (0, 1] so the log never sees zero.
        """
        if stddev <= 0:
            raise ValueError("stddev must be > 0")
        pairs = (count + 1) // 2
        raw = self.u64_block(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count] * stddev

    def randint(self, upper: int) -> int:
        """Uniform integer in [0, upper).  Modulo bias is < 2**-53 here."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        return self.next_u64() % upper

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def derive(self, tag: int) -> "Prng":
        """A statistically independent child stream for a fixed integer tag."""
        mixed = _mix64(np.uint64((self.state + (int(tag) & _MASK64) * _TAG_GAMMA) & _MASK64))
        return Prng(int(mixed))


def randn(shape: Sequence[int], prng: Prng, stddev: float = 1.0,
          precision: str = "single") -> Tensor4:
    """I.i.d. normal tensor; same (seed, shape) always gives the same bytes."""
    dims = _validate_shape(shape)
    count = dims[0] * dims[1] * dims[2] * dims[3]
    block = prng.normal_block(count, stddev=stddev)
    return Tensor4(block.reshape(dims).astype(_DTYPES[precision]))


# -- elementwise arithmetic --------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that were broadcast up from ``shape``."""
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_operands(a: Tensor4, b: Tensor4, broadcast: bool) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed precision operands: {a.precision} vs {b.precision}")
    if a.shape == b.shape:
        return
    if broadcast:
        for da, db in zip(a.shape, b.shape):
            if da != db and 1 not in (da, db):
                raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast")
        return
    raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise(a: Tensor4, b: Tensor4, op: str, broadcast: bool = False) -> Tensor4:
    """Pointwise add/sub/mul of two tensors.

    With ``broadcast=True`` size-1 axes stretch numpy-style; the backward
    pass sums gradients back over stretched axes.  The plain contract is
    identical shapes.
    """
    _check_operands(a, b, broadcast)
    if op == "add":
        data = a.data + b.data

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate_grad(_unbroadcast(g, b.shape))
    elif op == "sub":
        data = a.data - b.data

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate_grad(_unbroadcast(-g, b.shape))
    elif op == "mul":
        data = a.data * b.data

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad or b._parents:
                b._accumulate_grad(_unbroadcast(g * a.data, b.shape))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    if _debug_finite and not np.isfinite(data).all():
        raise NumericError(f"non-finite result in elementwise {op}")
    return _make(data, (a, b), bwd)


def _normalize_axes(axes) -> tuple[int, ...]:
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, str):
        try:
            return tuple(sorted(_NAMED_AXES[ch] for ch in axes))
        except KeyError as exc:
            raise ValueError(f"unknown axis name in {axes!r}") from exc
    out = tuple(sorted(int(ax) for ax in axes))
    if any(ax < 0 or ax > 3 for ax in out):
        raise ValueError(f"axes out of range: {axes}")
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes: {axes}")
    return out


def reduce(a: Tensor4, axes, op: str) -> Tensor4:
    """Reduce over named ('nchw' letters) or numeric axes; dims collapse to 1.

    An empty axis set is the identity.  ``mean`` is sum divided by the
    element count of the reduced axes; ``max`` splits gradient equally
    among tied maxima.
    """
    axes_t = _normalize_axes(axes)
    if not axes_t:
        out_data = a.data.copy()

        def bwd_id(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(g)

        return _make(out_data, (a,), bwd_id)

    count = 1
    for ax in axes_t:
        count *= a.shape[ax]

    if op == "sum":
        data = a.data.sum(axis=axes_t, keepdims=True)

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(np.broadcast_to(g, a.shape))
    elif op == "mean":
        data = a.data.sum(axis=axes_t, keepdims=True) / a.data.dtype.type(count)

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                a._accumulate_grad(np.broadcast_to(g, a.shape) / a.data.dtype.type(count))
    elif op == "max":
        data = a.data.max(axis=axes_t, keepdims=True)

        def bwd(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                mask = (a.data == data).astype(a.data.dtype)
                ties = mask.sum(axis=axes_t, keepdims=True)
                a._accumulate_grad(np.broadcast_to(g / ties, a.shape) * mask)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(data, (a,), bwd)


def concat_channels(parts: Iterable[Tensor4]) -> Tensor4:
    """Concatenate along the channel axis; backward slices the gradient."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    base = parts[0]
    for p in parts[1:]:
        if p.dtype != base.dtype:
            raise ShapeError("mixed precision in concat_channels")
        if (p.shape[0], p.shape[2], p.shape[3]) != (base.shape[0], base.shape[2], base.shape[3]):
            raise ShapeError("concat_channels requires matching n, h, w")
    data = np.concatenate([p.data for p in parts], axis=1)
    splits = [p.shape[1] for p in parts]

    def bwd(g: np.ndarray) -> None:
        start = 0
        for p, width in zip(parts, splits):
            if p.requires_grad or p._parents:
                p._accumulate_grad(g[:, start:start + width])
            start += width

    return _make(data, tuple(parts), bwd)


# -- indexing helpers --------------------------------------------------------


def index_to_offset(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major NCHW offset of a (n, c, h, w) index."""
    n, c, h, w = _validate_shape(shape)
    i, j, k, l = (int(v) for v in index)
    if not (0 <= i < n and 0 <= j < c and 0 <= k < h and 0 <= l < w):
        raise IndexError(f"index {tuple(index)} out of bounds for shape {(n, c, h, w)}")
    return ((i * c + j) * h + k) * w + l


def offset_to_index(shape: Sequence[int], offset: int) -> tuple[int, int, int, int]:
    """Inverse of :func:`index_to_offset`."""
    n, c, h, w = _validate_shape(shape)
    total = n * c * h * w
    if not 0 <= offset < total:
        raise IndexError(f"offset {offset} out of bounds for shape {(n, c, h, w)}")
    l = offset % w
    rest = offset // w
    k = rest % h
    rest //= h
    j = rest % c
    i = rest // c
    return i, j, k, l
