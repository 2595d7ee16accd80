"""Orthogonal bases for mixed-precision quantization.

A basis ``U`` (d x d, orthogonal) splits the projected channels ``X @ U`` in
two groups by position: the first ``d - r`` columns are quantized at low
precision, the last ``r`` at high precision. The ResQ basis is

    U = P @ blockdiag(R_l, R_h)

where ``P`` holds the eigenvectors of the calibration second moment
``X^T X`` in ascending eigenvalue order (so the last ``r`` columns are the
principal directions) and ``R_l``, ``R_h`` are random rotations that spread
outliers inside each group.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import (
    as_matrix,
    eigh_symmetric,
    hadamard,
    is_hadamard_size,
    random_orthogonal,
)
from .quant import PER_TOKEN, QuantConfig, fake_quant, lemma_coefficient

__all__ = [
    "KINDS",
    "CalibStats",
    "ProjectionBasis",
    "accumulate",
    "merge",
    "build_resq_basis",
    "build_baseline_basis",
    "theorem1_bound",
    "mixed_fake_quant",
    "default_rank",
    "LayerProjections",
    "ProjectionSet",
]

RESQ = "resq"
IDENTITY = "identity"
ROTATION = "rotation-only"
OUTLIER = "outlier-linf"
PCA = "pca-only"
KINDS = (RESQ, IDENTITY, ROTATION, OUTLIER, PCA)

ORTHO_TOL = 1e-5


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class CalibStats:
    """Streaming second-moment accumulator ``sum_outer = sum_t x_t^T x_t``.

    ``max_abs`` keeps the running per-channel maximum magnitude, which the
    outlier baseline ranks channels by.
    """

    dim: int
    sum_outer: np.ndarray = None
    max_abs: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.sum_outer is None:
            self.sum_outer = np.zeros((self.dim, self.dim))
        if self.max_abs is None:
            self.max_abs = np.zeros(self.dim)

    @property
    def second_moment(self) -> np.ndarray:
        if self.count < 1:
            raise ValueError("no calibration rows accumulated")
        return self.sum_outer / self.count

    def copy(self) -> "CalibStats":
        return CalibStats(self.dim, self.sum_outer.copy(), self.max_abs.copy(), self.count)


def accumulate(stats: CalibStats, x) -> CalibStats:
    """Add the rows of ``x`` (any leading shape, last axis = dim) to ``stats``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ValueError(f"expected last dimension {stats.dim}, got {x.shape[-1]}")
    rows = x.reshape(-1, stats.dim)
    if not np.all(np.isfinite(rows)):
        raise ValueError("calibration batch contains NaN or Inf")
    out = stats.copy()
    out.sum_outer += rows.T @ rows
    if rows.shape[0]:
        out.max_abs = np.maximum(out.max_abs, np.max(np.abs(rows), axis=0))
    out.count += rows.shape[0]
    return out


def merge(a: CalibStats, b: CalibStats) -> CalibStats:
    if a.dim != b.dim:
        raise ValueError(f"cannot merge stats of dim {a.dim} and {b.dim}")
    return CalibStats(a.dim, a.sum_outer + b.sum_outer, np.maximum(a.max_abs, b.max_abs), a.count + b.count)


@dataclass
class ProjectionBasis:
    u: np.ndarray
    rank_high: int
    kind: str = RESQ
    is_hadamard: bool = False
    eigenvalues: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        d = self.u.shape[0]
        if self.u.shape != (d, d):
            raise ValueError(f"basis must be square, got {self.u.shape}")
        if not 0 <= self.rank_high < d:
            raise ValueError(f"rank_high={self.rank_high} out of range for dim {d}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @property
    def u_low(self) -> np.ndarray:
        return self.u[:, : self.dim - self.rank_high]

    @property
    def u_high(self) -> np.ndarray:
        return self.u[:, self.dim - self.rank_high :]

    def orthogonality_error(self) -> float:
        u = self.u.astype(np.float64)
        return float(np.max(np.abs(u.T @ u - np.eye(self.dim))))

    def check(self, tol: float = ORTHO_TOL) -> "ProjectionBasis":
        err = self.orthogonality_error()
        if err > tol:
            raise ValueError(f"basis is not orthogonal (max |U^T U - I| = {err:.2e})")
        return self


def default_rank(dim: int, frac: float = 0.125) -> int:
    return max(1, int(round(dim * frac)))


def _block_rotation(n: int, seed, use_hadamard: bool) -> np.ndarray:
    if use_hadamard and n > 1 and is_hadamard_size(n):
        return hadamard(n)
    return random_orthogonal(n, seed)


def _rotations(d: int, r: int, seed, use_hadamard: bool) -> tuple[np.ndarray, np.ndarray]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    low_seed, high_seed = ss.spawn(2)
    r_low = _block_rotation(d - r, low_seed, use_hadamard)
    r_high = _block_rotation(r, high_seed, use_hadamard)
    return r_low, r_high


def _blockdiag_apply(p: np.ndarray, r_low: np.ndarray, r_high: np.ndarray) -> np.ndarray:
    k = r_low.shape[0]
    u = np.empty_like(p)
    u[:, :k] = p[:, :k] @ r_low
    u[:, k:] = p[:, k:] @ r_high
    return u


def build_resq_basis(
    stats: CalibStats,
    r: int,
    seed=0,
    identity_rotation: bool = False,
    use_hadamard: bool = False,
    eig_method: str = "auto",
) -> ProjectionBasis:
    """PCA subspace split plus per-group random rotations.

    Args:
        stats: accumulated calibration second moments.
        r: number of high-precision directions, ``1 <= r < d``.
        seed: seed for the two random rotation blocks.
        identity_rotation: use ``R = I`` (PCA-only ablation).
        use_hadamard: use Hadamard blocks where the block size allows.
        eig_method: eigensolver passed to ``eigh_symmetric``.
    """
    d = stats.dim
    if not 1 <= r < d:
        raise ValueError(f"rank r={r} must satisfy 1 <= r < {d}")
    if stats.count < 1:
        raise ValueError("no calibration rows accumulated")
    if stats.count < d:
        warnings.warn(
            f"only {stats.count} calibration rows for dimension {d}; covariance is rank deficient",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    eig = eigh_symmetric(stats.second_moment, method=eig_method)
    p = eig.eigenvectors
    if identity_rotation:
        u = p.copy()
        kind = PCA
    else:
        r_low, r_high = _rotations(d, r, seed, use_hadamard)
        u = _blockdiag_apply(p, r_low, r_high)
        kind = RESQ
    return ProjectionBasis(u, r, kind, eigenvalues=eig.eigenvalues)


def build_baseline_basis(
    kind: str,
    stats: CalibStats | None,
    dim: int,
    r: int,
    seed=0,
    use_hadamard: bool = True,
) -> ProjectionBasis:
    """Comparison bases sharing the position convention of ResQ.

    ``identity`` leaves channels in place; ``rotation-only`` is a single
    full-space rotation (Hadamard when ``dim`` allows it); ``outlier-linf``
    permutes the ``r`` channels with the largest max-abs into the
    high-precision slots and rotates within each group; ``pca-only`` is the
    ResQ basis without rotations.
    """
    if kind == IDENTITY:
        return ProjectionBasis(np.eye(dim), r, IDENTITY)
    if kind == ROTATION:
        if use_hadamard and is_hadamard_size(dim) and dim > 1:
            return ProjectionBasis(hadamard(dim), r, ROTATION, is_hadamard=(dim & (dim - 1)) == 0)
        return ProjectionBasis(random_orthogonal(dim, seed), r, ROTATION)
    if kind == OUTLIER:
        if stats is None:
            raise ValueError("outlier-linf basis needs calibration stats")
        if stats.dim != dim:
            raise ValueError(f"stats dim {stats.dim} != {dim}")
        if not 1 <= r < dim:
            raise ValueError(f"rank r={r} must satisfy 1 <= r < {dim}")
        # stable ranking; the top-r channels keep their relative order in the high slots
        ranked = np.argsort(-stats.max_abs, kind="stable")
        high = np.sort(ranked[:r])
        low = np.setdiff1d(np.arange(dim), high)
        perm = np.zeros((dim, dim))
        perm[np.concatenate([low, high]), np.arange(dim)] = 1.0
        r_low, r_high = _rotations(dim, r, seed, use_hadamard=False)
        return ProjectionBasis(_blockdiag_apply(perm, r_low, r_high), r, OUTLIER)
    if kind == PCA:
        if stats is None:
            raise ValueError("pca-only basis needs calibration stats")
        return build_resq_basis(stats, r, seed, identity_rotation=True)
    if kind == RESQ:
        if stats is None:
            raise ValueError("resq basis needs calibration stats")
        return build_resq_basis(stats, r, seed)
    raise ValueError(f"unknown basis kind {kind!r}; expected one of {KINDS}")


def theorem1_bound(x, basis: ProjectionBasis, bits_low: int, bits_high: int) -> float:
    """Upper bound on the mixed-precision Frobenius quantization error.

    ``c_L ||X|| - (c_L - c_H) ||X U_h||`` with ``c_L = sqrt(pi ln(d-r)) /
    (2^(L-1) - 1)`` and ``c_H = sqrt(pi ln r) / (2^(H-1) - 1)``.
    ``||X U_h|| = ||X P_h||`` because the rotation block is orthogonal.
    """
    x = as_matrix(x, dtype=np.float64)
    d, r = basis.dim, basis.rank_high
    if x.shape[1] != d:
        raise ValueError(f"x has {x.shape[1]} columns, basis dim is {d}")
    if r < 2 or d - r < 2:
        raise ValueError(
            f"bound needs r >= 2 and d - r >= 2 (got r={r}, d={d}): log(1) = 0 makes a group term vanish"
        )
    if bits_low >= bits_high:
        raise ValueError("bits_low must be smaller than bits_high")
    c_low = lemma_coefficient(d - r, bits_low)
    c_high = lemma_coefficient(r, bits_high)
    x_norm = np.linalg.norm(x)
    xh_norm = np.linalg.norm(x @ basis.u_high.astype(np.float64))
    return float(c_low * x_norm - (c_low - c_high) * xh_norm)


def split_fake_quant(xu: np.ndarray, r: int, bits_low: int, bits_high: int, cfg: QuantConfig) -> np.ndarray:
    """Quantize the first ``cols - r`` columns at ``bits_low`` and the rest at ``bits_high``."""
    k = xu.shape[1] - r
    out = np.empty_like(xu)
    if k:
        out[:, :k] = fake_quant(xu[:, :k], cfg.with_bits(bits_low))
    if r:
        out[:, k:] = fake_quant(xu[:, k:], cfg.with_bits(bits_high))
    return out


def mixed_fake_quant(
    x,
    basis: ProjectionBasis,
    bits_low: int,
    bits_high: int,
    cfg: QuantConfig | None = None,
) -> np.ndarray:
    """``[Q_L(X U_l) | Q_H(X U_h)]`` in the projected domain.

    ``cfg`` supplies symmetry and granularity; its bit width is ignored.
    """
    x = as_matrix(x)
    if x.shape[1] != basis.dim:
        raise ValueError(f"x has {x.shape[1]} columns, basis dim is {basis.dim}")
    cfg = cfg or QuantConfig(bits_low, symmetric=False, granularity=PER_TOKEN)
    xu = x @ basis.u.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    return split_fake_quant(xu, basis.rank_high, bits_low, bits_high, cfg)


def with_rank(basis: ProjectionBasis, r: int) -> ProjectionBasis:
    return replace(basis, rank_high=r)


@dataclass
class LayerProjections:
    u_b: ProjectionBasis
    u_c: ProjectionBasis
    u_d: ProjectionBasis


@dataclass
class ProjectionSet:
    """One shared block-boundary basis plus per-layer attention/FFN bases."""

    u_a: ProjectionBasis
    layers: list[LayerProjections]

    def bases(self):
        yield "U_A", self.u_a
        for i, lp in enumerate(self.layers):
            yield f"layer.{i}.U_B", lp.u_b
            yield f"layer.{i}.U_C", lp.u_c
            yield f"layer.{i}.U_D", lp.u_d

    def check(self, tol: float = ORTHO_TOL) -> "ProjectionSet":
        for name, b in self.bases():
            err = b.orthogonality_error()
            if err > tol:
                raise ValueError(f"{name} is not orthogonal (max |U^T U - I| = {err:.2e})")
        return self

    def replace_sites(self, **kinds) -> "ProjectionSet":
        """Swap selected sites (``u_a``, ``u_b``, ``u_c``, ``u_d``) for identity bases, keeping ranks."""
        def ident(b):
            return ProjectionBasis(np.eye(b.dim), b.rank_high, IDENTITY)

        u_a = ident(self.u_a) if kinds.get("u_a") else self.u_a
        layers = [
            LayerProjections(
                ident(lp.u_b) if kinds.get("u_b") else lp.u_b,
                ident(lp.u_c) if kinds.get("u_c") else lp.u_c,
                ident(lp.u_d) if kinds.get("u_d") else lp.u_d,
            )
            for lp in self.layers
        ]
        return ProjectionSet(u_a, layers)
