"""Compressed sparse row storage, products, the CG baseline and Matrix Market I/O."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np


class StructuralError(ValueError):
    """Index or dimension mismatch in a sparse operation."""


class NumericalError(ArithmeticError):
    """Non-finite value encountered during an iterative solve."""


class MatrixMarketError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        vals = np.ascontiguousarray(self.values)
        if vals.dtype.kind not in "fi":
            vals = vals.astype(np.float64)
        for arr in (rp, ci, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        object.__setattr__(self, "values", vals)
        self._validate()

    def _validate(self) -> None:
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,):
            raise StructuralError("row_ptr must have length n_rows + 1")
        if rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise StructuralError("row_ptr must start at 0 and be non-decreasing")
        if rp[-1] != len(ci) or len(ci) != len(self.values):
            raise StructuralError("row_ptr[-1], len(col_idx) and len(values) disagree")
        if len(ci) == 0:
            return
        if ci.min() < 0 or ci.max() >= self.n_cols:
            raise StructuralError("column index out of range")
        # strictly increasing columns within each row
        step = np.diff(ci)
        row_start = np.zeros(len(ci), dtype=bool)
        row_start[rp[1:-1][rp[1:-1] < len(ci)]] = True
        if np.any((step <= 0) & ~row_start[1:]):
            raise StructuralError("column indices must be strictly increasing within a row")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry (COO view)."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.row_indices(), self.col_idx] = self.values
        return out

    def transpose(self) -> CsrMatrix:
        return csr_from_arrays(self.col_idx, self.row_indices(), self.values, self.n_cols, self.n_rows)

    @property
    def T(self) -> CsrMatrix:
        return self.transpose()

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.shape), dtype=self.values.dtype)
        rows = self.row_indices()
        on = rows == self.col_idx
        d[rows[on]] = self.values[on]
        return d

    def scale(self, alpha: float) -> CsrMatrix:
        return CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, self.values * alpha)

    def __matmul__(self, other):
        if isinstance(other, CsrMatrix):
            return spmm(self, other)
        return spmv(self, np.asarray(other))

    def __neg__(self) -> CsrMatrix:
        return self.scale(-1.0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CsrMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def from_dense(cls, dense, drop_zeros: bool = True) -> CsrMatrix:
        dense = np.atleast_2d(np.asarray(dense))
        if drop_zeros:
            r, c = np.nonzero(dense)
        else:
            r, c = np.indices(dense.shape).reshape(2, -1)
        return csr_from_arrays(r, c, dense[r, c], *dense.shape)

    @classmethod
    def identity(cls, n: int) -> CsrMatrix:
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> CsrMatrix:
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64), np.zeros(0, np.int64), np.zeros(0))


def csr_from_arrays(rows, cols, vals, n_rows: int, n_cols: int) -> CsrMatrix:
    """Vectorised triplet constructor; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals).ravel()
    if vals.dtype.kind not in "fi":
        vals = vals.astype(np.float64)
    if not (len(rows) == len(cols) == len(vals)):
        raise StructuralError("triplet arrays differ in length")
    if len(rows) and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise StructuralError(f"triplet index out of range for a {n_rows}x{n_cols} matrix")
    key = rows * max(n_cols, 1) + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    uniq, start = np.unique(key, return_index=True)
    summed = np.add.reduceat(vals[order], start) if len(start) else vals[:0]
    r = uniq // max(n_cols, 1)
    c = uniq % max(n_cols, 1)
    row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n_rows), out=row_ptr[1:])
    return CsrMatrix(n_rows, n_cols, row_ptr, c, summed)


def csr_from_triplets(entries: Iterable[tuple[int, int, float]], n_rows: int, n_cols: int) -> CsrMatrix:
    entries = list(entries)
    if not entries:
        return CsrMatrix.zeros(n_rows, n_cols)
    rows, cols, vals = zip(*entries)
    return csr_from_arrays(rows, cols, np.asarray(vals, dtype=np.float64), n_rows, n_cols)


def spmv(A: CsrMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (A.n_cols,):
        raise StructuralError(f"spmv: vector of length {x.shape} does not match {A.n_cols} columns")
    contrib = A.values * x[A.col_idx]
    if A.values.dtype.kind == "i" and x.dtype.kind == "i":
        out = np.zeros(A.n_rows, dtype=np.int64)
        np.add.at(out, A.row_indices(), contrib)
        return out
    return np.bincount(A.row_indices(), weights=contrib, minlength=A.n_rows)


def spmm(A: CsrMatrix, B: CsrMatrix) -> CsrMatrix:
    """Sparse product by row expansion; exact pattern, duplicates summed."""
    if A.n_cols != B.n_rows:
        raise StructuralError(f"spmm: {A.shape} @ {B.shape}")
    a_rows = A.row_indices()
    counts = np.diff(B.row_ptr)[A.col_idx]
    total = int(counts.sum())
    rows = np.repeat(a_rows, counts)
    a_vals = np.repeat(A.values, counts)
    starts = np.repeat(B.row_ptr[A.col_idx], counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = starts + offs
    return csr_from_arrays(rows, B.col_idx[idx], a_vals * B.values[idx], A.n_rows, B.n_cols)


def is_symmetric(A: CsrMatrix, tol: float = 1e-12) -> bool:
    if A.n_rows != A.n_cols:
        return False
    At = A.transpose()
    if not (np.array_equal(A.row_ptr, At.row_ptr) and np.array_equal(A.col_idx, At.col_idx)):
        # patterns may differ only by explicit zeros
        D = csr_from_arrays(
            np.concatenate([A.row_indices(), At.row_indices()]),
            np.concatenate([A.col_idx, At.col_idx]),
            np.concatenate([A.values, -At.values]),
            A.n_rows,
            A.n_cols,
        )
        scale = max(np.abs(A.values).max(initial=0.0), 1.0)
        return bool(np.abs(D.values).max(initial=0.0) <= tol * scale)
    scale = max(np.abs(A.values).max(initial=0.0), 1.0)
    return bool(np.abs(A.values - At.values).max(initial=0.0) <= tol * scale)


def rel_residual(A: CsrMatrix, x, b) -> float:
    """Relative residual ||b - Ax|| / ||b|| in the Euclidean norm."""
    b = np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ValueError("relative residual undefined for b = 0")
    if b.shape != (A.n_rows,):
        raise StructuralError("rhs length does not match matrix rows")
    return float(np.linalg.norm(b - spmv(A, np.asarray(x, dtype=float))) / nb)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    final_rel_residual: float
    converged: bool


def cg_solve(A: CsrMatrix, b, tol: float = 1e-12, max_iter: int | None = None, x0=None) -> SolveResult:
    """Unpreconditioned conjugate gradients for a symmetric positive definite A.

    Stops when ||b - Ax|| / ||b|| <= tol, using the true residual at the end
    to decide convergence. Returns the iterate with the smallest recursive
    residual if ``max_iter`` is reached.
    """
    b = np.asarray(b, dtype=float)
    n = A.n_rows
    if A.n_rows != A.n_cols or b.shape != (n,):
        raise StructuralError(f"cg_solve: matrix {A.shape} and rhs {b.shape} disagree")
    if not np.all(np.isfinite(b)):
        raise NumericalError("rhs contains non-finite values")
    if n <= 200 and not is_symmetric(A):
        raise StructuralError("cg_solve requires a symmetric matrix")
    if max_iter is None:
        max_iter = 10 * n + 100
    nb = np.linalg.norm(b)
    if nb == 0:
        return SolveResult(np.zeros(n), 0, 0.0, True)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - spmv(A, x)
    p = r.copy()
    rr = r @ r
    best_x, best_res = x.copy(), np.sqrt(rr) / nb
    it = 0
    while True:
        it, x, r, p, rr, best_x, best_res, broke = _cg_iterate(A, b, nb, tol, max_iter, it, x, r, p, rr, best_x, best_res)
        if broke or it >= max_iter:
            break
        # the recursive residual met tol; restart from the true residual if it did not
        r = b - spmv(A, x)
        rr = r @ r
        if np.sqrt(rr) / nb <= tol:
            break
        p = r.copy()
    if not np.all(np.isfinite(x)):
        raise NumericalError("iterate became non-finite")
    final = rel_residual(A, x, b)
    if final > tol and best_res < final:
        x = best_x
        final = rel_residual(A, x, b)
    return SolveResult(x, it, final, final <= tol)


def _cg_iterate(A, b, nb, tol, max_iter, it, x, r, p, rr, best_x, best_res):
    while it < max_iter and np.sqrt(rr) / nb > tol:
        Ap = spmv(A, p)
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericalError(f"non-finite curvature at iteration {it}")
        if pAp <= 0:
            # A is not positive definite along p; stop with the best iterate
            return it, x, r, p, rr, best_x, best_res, True
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        res = np.sqrt(rr) / nb
        if res < best_res:
            best_x, best_res = x.copy(), res
        # recursive residual drifts from the true one; refresh periodically
        if it % 50 == 0:
            r = b - spmv(A, x)
            rr = r @ r
    return it, x, r, p, rr, best_x, best_res, False


# -- Matrix Market -----------------------------------------------------------

_MM_HEADER = "%%MatrixMarket"


def mm_read(stream: TextIO | str) -> CsrMatrix:
    """Read a real coordinate Matrix Market matrix (general or symmetric)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = iter(enumerate(stream, start=1))
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MatrixMarketError("empty file", 1) from None
    tokens = header.split()
    if len(tokens) != 5 or tokens[0] != _MM_HEADER:
        raise MatrixMarketError(f"bad header {header.strip()!r}", lineno)
    obj, fmt, field, symm = (t.lower() for t in tokens[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"only 'matrix coordinate' is supported, got {obj} {fmt}", lineno)
    if field not in ("real", "double", "integer"):
        raise MatrixMarketError(f"unsupported field {field!r}", lineno)
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry {symm!r}", lineno)

    size = None
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        size = s.split()
        break
    if size is None:
        raise MatrixMarketError("missing size line", lineno + 1)
    try:
        n_rows, n_cols, nnz = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError(f"bad size line {' '.join(size)!r}", lineno) from None

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.float64)
    k = 0
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        if k >= nnz:
            raise MatrixMarketError("more entries than declared", lineno)
        parts = s.split()
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 'row col value', got {s!r}", lineno)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"unparsable entry {s!r}", lineno) from None
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixMarketError(f"entry ({i}, {j}) outside {n_rows}x{n_cols}", lineno)
        rows[k], cols[k], vals[k] = i - 1, j - 1, v
        k += 1
    if k != nnz:
        raise MatrixMarketError(f"declared {nnz} entries but found {k}", lineno)

    if symm == "symmetric":
        if np.any(cols > rows):
            bad = int(np.argmax(cols > rows))
            raise MatrixMarketError(f"symmetric file stores upper-triangular entry #{bad + 1}")
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return csr_from_arrays(rows, cols, vals, n_rows, n_cols)


def mm_write(A: CsrMatrix, stream: TextIO | None = None, comment: str | None = None) -> str:
    """Write A in general coordinate form; values use repr so they round-trip exactly."""
    out = io.StringIO()
    field = "integer" if A.values.dtype.kind == "i" else "real"
    out.write(f"{_MM_HEADER} matrix coordinate {field} general\n")
    if comment:
        for line in comment.splitlines():
            out.write(f"% {line}\n")
    out.write(f"{A.n_rows} {A.n_cols} {A.nnz}\n")
    rows = A.row_indices() + 1
    cols = A.col_idx + 1
    for i, j, v in zip(rows.tolist(), cols.tolist(), A.values.tolist()):
        out.write(f"{i} {j} {v!r}\n")
    text = out.getvalue()
    if stream is not None:
        stream.write(text)
    return text
