"""Dense order-3 tensors and the multilinear primitives used by the CP solvers.

Storage convention: mode-1 index varies fastest (Fortran order). Unfoldings
follow the Kolda-Bader convention, so that ``unfold(X, 1) == A @ khatri_rao(C, B).T``
for a CP tensor built from factors ``A, B, C``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DenseTensor3",
    "FactorModel",
    "unfold",
    "fold",
    "khatri_rao",
    "reconstruct",
    "loss",
    "rmse",
    "save_tensor",
    "load_tensor",
    "load_tensor_csv",
    "save_tensor_csv",
]

MAGIC = b"FPT3"


class DenseTensor3:
    """An ``I x J x K`` dense real tensor.

    Values are kept in a Fortran-ordered float64 array; ``values`` exposes the
    flat canonical layout (first index fastest).
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="F", copy=True)
        if arr.ndim != 3:
            raise ValueError(f"expected a 3-way array, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def from_values(cls, dims, values) -> "DenseTensor3":
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != int(np.prod(dims)):
            raise ValueError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def size(self) -> int:
        return self.data.size

    def norm_sq(self) -> float:
        return float(np.sum(self.data * self.data))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor3):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"DenseTensor3(dims={self.dims})"


@dataclass
class FactorModel:
    """CP factor matrices ``A`` (I x R), ``B`` (J x R), ``C`` (K x R) plus momentum state."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    velA: np.ndarray = field(default=None, repr=False)
    velB: np.ndarray = field(default=None, repr=False)
    velC: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        self.B = np.ascontiguousarray(self.B, dtype=np.float64)
        self.C = np.ascontiguousarray(self.C, dtype=np.float64)
        for m in (self.A, self.B, self.C):
            if m.ndim != 2:
                raise ValueError("factor matrices must be 2-D")
        if not (self.A.shape[1] == self.B.shape[1] == self.C.shape[1]):
            raise ValueError(
                f"factor column counts differ: {self.A.shape[1]}, {self.B.shape[1]}, {self.C.shape[1]}"
            )
        if self.A.shape[1] < 1:
            raise ValueError("rank must be positive")
        for name in ("velA", "velB", "velC"):
            base = getattr(self, name[-1])
            vel = getattr(self, name)
            if vel is None:
                vel = np.zeros_like(base)
            vel = np.ascontiguousarray(vel, dtype=np.float64)
            if vel.shape != base.shape:
                raise ValueError(f"{name} shape {vel.shape} != {base.shape}")
            setattr(self, name, vel)

    @classmethod
    def random(cls, dims, rank: int, rng: np.random.Generator) -> "FactorModel":
        """Factors with i.i.d. uniform [0, 1) entries, zero velocities."""
        I, J, K = dims
        return cls(rng.random((I, rank)), rng.random((J, rank)), rng.random((K, rank)))

    @classmethod
    def zeros(cls, dims, rank: int) -> "FactorModel":
        I, J, K = dims
        return cls(np.zeros((I, rank)), np.zeros((J, rank)), np.zeros((K, rank)))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.A.shape[0], self.B.shape[0], self.C.shape[0])

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.A, self.B, self.C)

    def copy(self) -> "FactorModel":
        return FactorModel(
            self.A.copy(), self.B.copy(), self.C.copy(),
            self.velA.copy(), self.velB.copy(), self.velC.copy(),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(m)) for m in (self.A, self.B, self.C))


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization (1-based), earlier remaining mode fastest in the columns."""
    ax = _check_mode(mode)
    X = np.asarray(t)
    return np.reshape(np.moveaxis(X, ax, 0), (X.shape[ax], -1), order="F")


def fold(M: np.ndarray, mode: int, dims) -> DenseTensor3:
    """Inverse of :func:`unfold`."""
    ax = _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    rest = [d for n, d in enumerate(dims) if n != ax]
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (dims[ax], rest[0] * rest[1]):
        raise ValueError(f"matrix of shape {M.shape} cannot fold into {dims} along mode {mode}")
    arr = np.reshape(M, (dims[ax], rest[0], rest[1]), order="F")
    return DenseTensor3(np.moveaxis(arr, 0, ax))


def khatri_rao(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row index ``p * m2.rows + q`` holds ``m1[p] * m2[q]``."""
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.ndim != 2 or m2.ndim != 2:
        raise ValueError("khatri_rao expects 2-D matrices")
    if m1.shape[1] != m2.shape[1]:
        raise ValueError(f"column mismatch: {m1.shape[1]} vs {m2.shape[1]}")
    return (m1[:, None, :] * m2[None, :, :]).reshape(m1.shape[0] * m2.shape[0], m1.shape[1])


def reconstruct(f: FactorModel) -> DenseTensor3:
    """Dense tensor ``sum_r A[:, r] o B[:, r] o C[:, r]``."""
    return DenseTensor3(_full(f.A, f.B, f.C))


def _full(A, B, C) -> np.ndarray:
    return np.einsum("ir,jr,kr->ijk", A, B, C, optimize=True)


def _check_dims(t, f: FactorModel):
    if tuple(np.shape(t)) != f.dims:
        raise ValueError(f"tensor dims {np.shape(t)} do not match factor dims {f.dims}")


def loss(t, f: FactorModel) -> float:
    """Squared Frobenius norm of ``X - reconstruct(f)``."""
    _check_dims(t, f)
    res = np.asarray(t) - _full(f.A, f.B, f.C)
    return float(np.sum(res * res))


def rmse(t, f: FactorModel) -> float:
    return float(np.sqrt(loss(t, f) / np.prod(np.shape(t))))


# --------------------------------------------------------------------------- I/O


def save_tensor(path, t: DenseTensor3) -> None:
    """Write the binary format: ``FPT3`` magic, three little-endian u64 dims, f64 values."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3Q", *t.dims))
        fh.write(t.values.astype("<f8").tobytes())


def load_tensor(path) -> DenseTensor3:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack("<3Q", raw[4:28])
    n = int(np.prod(dims))
    body = raw[28:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} payload bytes, found {len(body)}")
    return DenseTensor3.from_values(dims, np.frombuffer(body, dtype="<f8"))


def load_tensor_csv(path, dims=None) -> DenseTensor3:
    """Read ``i,j,k,value`` rows (0-based). Unlisted entries are zero.

    A non-numeric first row is treated as a header. ``dims`` defaults to the
    largest index seen plus one in each mode. When a coordinate is listed more
    than once the last row wins.
    """
    entries = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                i, j, k, v = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            if min(i, j, k) < 0:
                raise ValueError(f"{path}:{lineno}: negative index")
            entries[(i, j, k)] = v
    if not entries:
        raise ValueError(f"{path}: no entries")
    idx = np.array(list(entries), dtype=np.int64)
    vals = list(entries.values())
    if dims is None:
        dims = tuple(int(d) for d in idx.max(axis=0) + 1)
    elif np.any(idx >= np.array(dims)):
        raise ValueError(f"{path}: index out of range for dims {tuple(dims)}")
    arr = np.zeros(dims, dtype=np.float64, order="F")
    arr[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
    return DenseTensor3(arr)


def save_tensor_csv(path, t: DenseTensor3) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k", "value"])
        I, J, K = t.dims
        for k in range(K):
            for j in range(J):
                for i in range(I):
                    w.writerow([i, j, k, repr(float(t.data[i, j, k]))])
