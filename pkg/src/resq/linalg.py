"""Dense linear algebra used by the quantization pipeline.

Everything here is a pure function of its inputs. Covariances and
eigendecompositions run in double precision; orthogonal matrices can be
requested in either precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "EighResult",
    "ConvergenceError",
    "OpCounter",
    "as_matrix",
    "eigh_symmetric",
    "random_orthogonal",
    "hadamard",
    "is_hadamard_size",
    "fast_hadamard_transform",
    "fro_norm",
    "max_abs",
]

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# "auto" hands larger matrices to LAPACK; Jacobi costs O(n^3) per sweep in
# elementwise numpy and takes minutes at n = 1024 on one core
JACOBI_AUTO_MAX_DIM = 128


class ConvergenceError(RuntimeError):
    """Raised when the Jacobi sweeps hit the iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class EighResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0


@dataclass
class OpCounter:
    """Tallies scalar additions and multiplications."""

    adds: int = 0
    muls: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.adds + self.muls


def as_matrix(x, dtype=None, name: str = "x") -> np.ndarray:
    """Validate a 2-D finite array."""
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of n/2 disjoint pairs covering every (p, q) once.
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def eigh_symmetric(
    a,
    tol: float = JACOBI_TOL,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
    method: str = "auto",
) -> EighResult:
    """Eigendecomposition of a real symmetric matrix.

    The built-in solver is a cyclic Jacobi method in round-robin (parallel)
    order: every sweep visits each off-diagonal pair once, applying the n/2
    disjoint plane rotations of a round simultaneously. Iteration stops once
    the off-diagonal Frobenius norm drops below ``tol * ||A||_F``.

    Args:
        a: square symmetric matrix (symmetric within 1e-8 relative).
        tol: relative convergence threshold on the off-diagonal norm.
        max_sweeps: sweep cap; exceeding it raises ``ConvergenceError``.
        method: ``"jacobi"``, ``"lapack"`` (numpy's ``eigh``) or ``"auto"``
            (Jacobi up to ``JACOBI_AUTO_MAX_DIM``, LAPACK above).

    Returns:
        EighResult with ascending eigenvalues and matching unit eigenvector
        columns. Ties keep the solver's output order (stable sort).
    """
    a = as_matrix(a, dtype=np.float64, name="a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"matrix must be square, got {a.shape}")
    scale = np.linalg.norm(a)
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > 1e-8 * max(scale, np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)

    if method == "auto":
        method = "jacobi" if n <= JACOBI_AUTO_MAX_DIM else "lapack"
    if method == "lapack":
        w, v = np.linalg.eigh(a)
        order = np.argsort(w, kind="stable")
        return EighResult(w[order], v[:, order], 0)
    if method != "jacobi":
        raise ValueError(f"unknown method {method!r}")

    if n == 1:
        return EighResult(a[0].copy(), np.ones((1, 1)), 0)

    # pad odd sizes with a decoupled zero row/column
    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = a
    v = np.eye(m)
    rounds = _round_robin_pairs(m)
    threshold = tol * scale

    sweeps = 0
    while _off(work) > threshold:
        if sweeps >= max_sweeps:
            res = _off(work)
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal norm {res:.3e} > {threshold:.3e})",
                res,
            )
        for p, q in rounds:
            apq = work[p, q]
            app = work[p, p]
            aqq = work[q, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            cols_p = work[:, p].copy()
            cols_q = work[:, q]
            work[:, p] = c * cols_p - s * cols_q
            work[:, q] = s * cols_p + c * cols_q
            rows_p = work[p, :].copy()
            rows_q = work[q, :]
            work[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            work[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        sweeps += 1

    w = np.diag(work)[:n].copy()
    vecs = v[:n, :n].copy()
    order = np.argsort(w, kind="stable")
    return EighResult(w[order], vecs[:, order], sweeps)


def random_orthogonal(dim: int, seed=0, dtype=np.float64) -> np.ndarray:
    """Haar-distributed orthogonal matrix.

    QR of a standard Gaussian matrix with each column of Q multiplied by the
    sign of the matching diagonal entry of R. ``seed`` may be anything
    ``np.random.default_rng`` accepts; equal seeds give equal matrices.
    """
    if int(dim) < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray((q * signs).astype(dtype))


def _paley(q: int) -> np.ndarray:
    # Paley construction I, valid for primes q = 3 (mod 4); returns an unnormalized order q+1 matrix.
    residues = {(i * i) % q for i in range(1, q)}
    chi = np.array([0] + [1 if i in residues else -1 for i in range(1, q)])
    jac = np.array([[chi[(j - i) % q] for j in range(q)] for i in range(q)])
    s = np.zeros((q + 1, q + 1), dtype=np.int64)
    s[0, 1:] = 1
    s[1:, 0] = -1
    s[1:, 1:] = jac
    return s + np.eye(q + 1, dtype=np.int64)


_BASE_SIZES = {12: 11, 20: 19}


def _split_size(dim: int):
    for base in (1, 12, 20):
        if dim % base:
            continue
        rest = dim // base
        if rest & (rest - 1) == 0:
            return base, rest
    return None


def is_hadamard_size(dim: int) -> bool:
    return dim >= 1 and _split_size(dim) is not None


@lru_cache(maxsize=32)
def _hadamard_int(dim: int) -> np.ndarray:
    base, pow2 = _split_size(dim)
    h = np.ones((1, 1), dtype=np.int64) if base == 1 else _paley(_BASE_SIZES[base])
    sylv = np.ones((1, 1), dtype=np.int64)
    while sylv.shape[0] < pow2:
        sylv = np.block([[sylv, sylv], [sylv, -sylv]])
    out = np.kron(sylv, h)
    out.setflags(write=False)
    return out


def hadamard(dim: int, dtype=np.float64, normalized: bool = True) -> np.ndarray:
    """Hadamard matrix of order 2^k, 12*2^k or 20*2^k.

    Powers of two use the Sylvester construction (symmetric); the other
    orders are Kronecker products with Paley base matrices. With
    ``normalized`` the entries are +-1/sqrt(dim), so the result is orthogonal.
    """
    if not is_hadamard_size(int(dim)):
        raise ValueError(
            f"no Hadamard matrix available for dim={dim}; "
            "use random_orthogonal(dim, seed) instead"
        )
    h = _hadamard_int(int(dim)).astype(np.float64)
    if normalized:
        h = h / np.sqrt(dim)
    return h.astype(dtype)


def fast_hadamard_transform(
    x,
    axis: int = -1,
    normalize: bool = True,
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Multiply by the Sylvester Hadamard matrix along one axis in O(d log d).

    Equivalent to ``x @ hadamard(d)`` along ``axis`` (the matrix is
    symmetric). With ``normalize=False`` the 1/sqrt(d) factor is left for the
    caller to fold elsewhere, and only the log2(d) butterfly stages run.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    d = x.shape[axis]
    if d < 1 or d & (d - 1):
        raise ValueError(f"axis length {d} is not a power of two; use the dense path")
    y = np.moveaxis(x, axis, -1)
    lead = y.shape[:-1]
    y = np.array(y.reshape(-1, d), copy=True)
    rows = y.shape[0]
    h = 1
    while h < d:
        blocks = y.reshape(rows, d // (2 * h), 2, h)
        a = blocks[:, :, 0, :]
        b = blocks[:, :, 1, :]
        y = np.concatenate([a + b, a - b], axis=2).reshape(rows, d)
        if counter is not None:
            counter.adds += rows * d
        h *= 2
    if normalize:
        y *= 1.0 / np.sqrt(d)
        if counter is not None:
            counter.muls += rows * d
    return np.moveaxis(y.reshape(*lead, d), -1, axis)


def fro_norm(x) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def max_abs(x) -> float:
    a = np.asarray(x)
    return float(np.max(np.abs(a))) if a.size else 0.0
