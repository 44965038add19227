"""Strict dense-tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 1-4 in row-major
(C-contiguous) layout with dtype float32 (working precision) or float64
(gradient checking). The functions here never broadcast: operands must
have identical shapes, and every result is checked for NaN/Inf.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
WORKING_DTYPE = np.float32


def tensor(data, dtype=WORKING_DTYPE) -> np.ndarray:
    """Build a contiguous tensor from array-like ``data``."""
    out = np.ascontiguousarray(data, dtype=dtype)
    if out.dtype not in DTYPES:
        raise DimensionError(f"unsupported dtype {out.dtype}")
    if not 1 <= out.ndim <= 4:
        raise DimensionError(f"rank must be 1-4, got {out.ndim}")
    if 0 in out.shape:
        raise DimensionError(f"extents must be positive, got {out.shape}")
    return check_finite(out)


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {where}")
    return x


def _same_dtype(a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product ``(m, k) @ (k, p)``."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    _same_dtype(a, b)
    return check_finite(a @ b, "matmul")


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return check_finite(fn(a, b), op)


def split_channels(t: np.ndarray, parts: int = 2) -> tuple[np.ndarray, ...]:
    """Split the last (channel) axis into ``parts`` equal contiguous pieces."""
    d = t.shape[-1]
    if d % parts:
        raise DimensionError(f"channel extent {d} not divisible by {parts}")
    w = d // parts
    return tuple(np.ascontiguousarray(t[..., i * w:(i + 1) * w]) for i in range(parts))


def concat_channels(*pieces: np.ndarray) -> np.ndarray:
    lead = {p.shape[:-1] for p in pieces}
    if len(lead) != 1:
        raise DimensionError(f"leading extents differ: {sorted(lead)}")
    for p in pieces[1:]:
        _same_dtype(pieces[0], p)
    return np.concatenate(pieces, axis=-1)


def reduce(op: str, t: np.ndarray, axis: int, keepdims: bool = False):
    """Reduce along ``axis``.

    ``max_with_argmax`` returns ``(values, indices)``; ties resolve to the
    lowest index, which is what ``np.argmax`` does.
    """
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {t.ndim}")
    if op == "sum":
        return t.sum(axis=axis, keepdims=keepdims)
    if op == "mean":
        return t.mean(axis=axis, keepdims=keepdims)
    if op == "max_with_argmax":
        idx = np.argmax(t, axis=axis)
        vals = np.take_along_axis(t, np.expand_dims(idx, axis), axis)
        if not keepdims:
            vals = np.squeeze(vals, axis=axis)
        else:
            idx = np.expand_dims(idx, axis)
        return vals, idx
    raise ValueError(f"unknown reduction {op!r}")
