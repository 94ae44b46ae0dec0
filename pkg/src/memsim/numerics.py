"""Dense linear-algebra primitives, seeded random streams and matrix interchange.

Everything here works on float64 numpy arrays. The solvers double as test
oracles for the circuit models, so they are written out explicitly rather
than delegated to LAPACK.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PIVOT_EPS = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, pivot_index: int, pivot: float):
        super().__init__(f"matrix is singular: pivot {pivot_index} has magnitude {abs(pivot):.3e}")
        self.pivot_index = pivot_index
        self.pivot = pivot


class ZeroPivotError(ArithmeticError):
    """Thomas elimination hit a (near) zero pivot; callers fall back to a dense solve."""

    def __init__(self, index: int):
        super().__init__(f"zero pivot in tridiagonal elimination at row {index}")
        self.index = index


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul_exact(a, b) -> np.ndarray:
    """Reference product accumulated in ascending inner index.

    Each step is a separately rounded multiply followed by an add, so the
    result is reproducible bit-for-bit across BLAS builds and thread counts.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def solve_dense(a, b) -> np.ndarray:
    """Gaussian elimination with partial pivoting."""
    m = np.array(a, dtype=np.float64)
    rhs = np.array(b, dtype=np.float64)
    n = m.shape[0]
    if m.ndim != 2 or m.shape[1] != n:
        raise ValueError(f"solve_dense needs a square matrix, got {m.shape}")
    if rhs.shape[0] != n:
        raise ValueError(f"rhs length {rhs.shape[0]} does not match matrix size {n}")
    vector_rhs = rhs.ndim == 1
    rhs = rhs.reshape(n, -1)

    for k in range(n):
        p = k + int(np.argmax(np.abs(m[k:, k])))
        if abs(m[p, k]) <= PIVOT_EPS:
            raise SingularMatrixError(k, m[p, k])
        if p != k:
            m[[k, p]] = m[[p, k]]
            rhs[[k, p]] = rhs[[p, k]]
        factors = m[k + 1:, k] / m[k, k]
        m[k + 1:, k:] -= factors[:, None] * m[k, k:]
        rhs[k + 1:] -= factors[:, None] * rhs[k]

    x = np.zeros_like(rhs)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - m[k, k + 1:] @ x[k + 1:]) / m[k, k]
    return x[:, 0] if vector_rhs else x


def thomas(lower, diag, upper, b) -> np.ndarray:
    """Batched Thomas algorithm.

    ``diag`` and ``b`` have shape (n, ...); ``lower``/``upper`` hold the n-1
    sub/super-diagonal entries along axis 0. Trailing axes broadcast, so a
    stack of independent chains is solved in one pass.
    """
    return TridiagonalFactor(lower, diag, upper).solve(b)


class TridiagonalFactor:
    """Thomas elimination of a (batched) tridiagonal matrix kept for repeated solves.

    Used by the cross-iteration solver, where each line's matrix is fixed and
    only the right-hand side changes between sweeps.
    """

    def __init__(self, lower, diag, upper):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.lower = np.asarray(lower, dtype=np.float64)
        n = self.diag.shape[0]
        upper = np.asarray(upper, dtype=np.float64)
        self.c_prime = np.empty((max(n - 1, 0),) + self.diag.shape[1:])
        self.denom = np.empty(self.diag.shape)
        self.denom[0] = self.diag[0]
        for i in range(n):
            if i > 0:
                self.denom[i] = self.diag[i] - self.lower[i - 1] * self.c_prime[i - 1]
            if np.any(self.denom[i] == 0) or not np.all(np.isfinite(self.denom[i])):
                raise ZeroPivotError(i)
            if i < n - 1:
                self.c_prime[i] = upper[i] / self.denom[i]

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        n = self.diag.shape[0]
        shape = np.broadcast_shapes(self.diag.shape, b.shape)
        d = np.empty(shape)
        d[0] = b[0] / self.denom[0]
        for i in range(1, n):
            d[i] = (b[i] - self.lower[i - 1] * d[i - 1]) / self.denom[i]
        for i in range(n - 2, -1, -1):
            d[i] -= self.c_prime[i] * d[i + 1]
        return d


def tridiagonal_to_dense(lower, diag, upper) -> np.ndarray:
    n = len(diag)
    a = np.diag(np.asarray(diag, dtype=np.float64))
    if n > 1:
        a[np.arange(1, n), np.arange(n - 1)] = lower
        a[np.arange(n - 1), np.arange(1, n)] = upper
    return a


def solve_tridiagonal(lower, diag, upper, b) -> np.ndarray:
    """Solve a single tridiagonal system, falling back to pivoted elimination
    when the Thomas recurrence meets a zero pivot."""
    diag = np.asarray(diag, dtype=np.float64)
    n = diag.shape[0]
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if lower.shape[0] != n - 1 or upper.shape[0] != n - 1:
        raise ValueError("lower/upper must have n-1 entries")
    try:
        return thomas(lower, diag, upper, b)
    except ZeroPivotError:
        return solve_dense(tridiagonal_to_dense(lower, diag, upper), b)


@dataclass
class CGResult:
    x: np.ndarray
    history: list[float] = field(default_factory=list)
    converged: bool = False
    status: str = "max_iter"

    @property
    def iterations(self) -> int:
        return len(self.history)


def conjugate_gradient(apply_a: Callable[[np.ndarray], np.ndarray], b, tol: float = 1e-10,
                       max_iter: int | None = None, x0=None) -> CGResult:
    """Plain CG for symmetric positive-definite operators.

    ``history`` holds the relative residual ||r_k|| / ||b|| after each
    iteration. Non-convergence and breakdown are reported through
    ``converged``/``status`` rather than raised, so partial histories survive.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(np.zeros(n), [], True, "converged")

    r = b - apply_a(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    result = CGResult(x)
    for _ in range(max_iter):
        ap = np.asarray(apply_a(p), dtype=np.float64)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0.0:
            result.status = "breakdown"
            break
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        rel = float(np.sqrt(rr_new)) / b_norm
        result.history.append(rel)
        if not np.isfinite(rel):
            result.status = "breakdown"
            break
        if rel <= tol:
            result.converged = True
            result.status = "converged"
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    result.x = x
    return result


# -- random streams ---------------------------------------------------------

PURPOSES = {"program": 1, "operand": 2, "init": 3, "shuffle": 4, "kmeans": 5, "data": 6, "signal": 7}


def stream(seed: int, *stream_id: int | str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    The key is hashed through ``SeedSequence`` into a Philox key, so each
    (purpose, block, slice, cycle) tuple owns an independent sequence and the
    draw order across tuples never matters.
    """
    key = tuple(PURPOSES[s] if isinstance(s, str) else int(s) for s in stream_id)
    if any(k < 0 for k in key):
        raise ValueError(f"stream ids must be non-negative, got {stream_id}")
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


# -- interchange ------------------------------------------------------------

def write_csv(path, data, header: Sequence[str] | None = None) -> None:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> np.ndarray:
    """Numeric CSV matrix; a non-numeric first row is taken as a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}:{i + 1}: non-numeric row") from None
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def matrix_to_json(m) -> dict:
    m = as_matrix(m)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": [float(v) for v in m.ravel()]}


def matrix_from_json(obj) -> np.ndarray:
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text())
    rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    if len(data) != rows * cols:
        raise ValueError(f"data length {len(data)} != rows*cols = {rows * cols}")
    return np.asarray(data, dtype=np.float64).reshape(rows, cols)
