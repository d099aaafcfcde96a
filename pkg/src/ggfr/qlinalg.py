"""Dense complex Hermitian linear algebra.

Immutable operator wrappers plus the three spectral operations the rest of
the package is built on: eigendecomposition with a deterministic eigenvector
phase/order convention, spectral propagators for piecewise-constant drives,
and commutator norms.  Every decomposition is verified against the
reconstruction and unitarity tolerances in :mod:`ggfr.constants` before it is
returned, so downstream modules can treat spectral data as trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants
from .errors import EigensolverError


def max_norm(a: np.ndarray) -> float:
    """Entrywise max-abs norm; the norm used by all tolerance checks."""
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class HermitianOperator:
    """Dense Hermitian matrix (energy units of eps, or dimensionless charges).

    Hermiticity is enforced at construction within an absolute entrywise
    tolerance of 1e-12.  A matrix whose imaginary part is exactly zero is
    stored as float64 so the real-symmetric eigensolver path applies; callers
    never see the difference.
    """

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise ValueError(f"expected a square matrix with dim >= 1, got shape {m.shape}")
        deviation = max_norm(m - m.conj().T)
        if deviation > constants.HERMITICITY_ATOL:
            raise ValueError(f"matrix is not Hermitian: max |A - A^H| = {deviation:.3e}")
        if np.iscomplexobj(m) and max_norm(m.imag) == 0.0:
            m = m.real
        object.__setattr__(self, "entries", _frozen(m))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def norm(self) -> float:
        return max_norm(self.entries)


@dataclass(frozen=True)
class UnitaryOperator:
    """Dense unitary matrix, validated via max |U^H U - I| < 1e-10."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise ValueError(f"expected a square matrix with dim >= 1, got shape {m.shape}")
        deviation = max_norm(m.conj().T @ m - np.eye(m.shape[0]))
        if deviation > constants.UNITARITY_TOL:
            raise ValueError(f"matrix is not unitary: max |U^H U - I| = {deviation:.3e}")
        object.__setattr__(self, "entries", _frozen(m))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def adjoint(self) -> "UnitaryOperator":
        return UnitaryOperator(self.entries.conj().T)


@dataclass(frozen=True)
class SpectralData:
    """Eigendecomposition of a Hermitian operator.

    ``eigenvalues`` is real and ascending; column k of ``eigenvectors`` is the
    eigenvector of eigenvalue k under the package phase convention (first
    significant component real-positive).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.eigenvalues, dtype=float)
        v = np.asarray(self.eigenvectors)
        if w.ndim != 1 or v.shape != (w.size, w.size):
            raise ValueError("eigenvalues/eigenvectors shapes are inconsistent")
        if np.any(np.diff(w) < 0):
            raise ValueError("eigenvalues must be ascending")
        deviation = max_norm(v.conj().T @ v - np.eye(w.size))
        if deviation > constants.UNITARITY_TOL:
            raise ValueError(f"eigenvector matrix not unitary: {deviation:.3e}")
        object.__setattr__(self, "eigenvalues", _frozen(w))
        object.__setattr__(self, "eigenvectors", _frozen(v))

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T


def _fix_phases_and_ties(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the deterministic phase and degenerate-order convention in place.

    Each column is rotated so its first component with modulus above
    PHASE_SIGNIFICANT_RTOL * max|column| is real-positive.  Columns sharing an
    exactly equal eigenvalue are then ordered by (index of first significant
    component, componentwise (re, im)), which keeps eigh(I) = (1..., I).
    """
    dim = w.size
    lead = np.empty(dim, dtype=int)
    for k in range(dim):
        col = v[:, k]
        mags = np.abs(col)
        idx = int(np.argmax(mags > constants.PHASE_SIGNIFICANT_RTOL * mags.max()))
        lead[k] = idx
        pivot = col[idx]
        if np.iscomplexobj(col):
            v[:, k] = col * (np.conj(pivot) / abs(pivot))
        elif pivot < 0:
            v[:, k] = -col
    # reorder inside runs of exactly equal eigenvalues
    start = 0
    while start < dim:
        stop = start + 1
        while stop < dim and w[stop] == w[start]:
            stop += 1
        if stop - start > 1:
            cols = range(start, stop)

            def key(k: int):
                col = v[:, k]
                comps = [(float(np.real(c)), float(np.imag(c))) for c in col]
                return (int(lead[k]), comps)

            order = sorted(cols, key=key)
            v[:, start:stop] = v[:, order]
        start = stop
    return v


def eigh(a: HermitianOperator) -> SpectralData:
    """Eigendecompose a Hermitian operator.

    Returns verified :class:`SpectralData`; degenerate eigenvalues come back
    in a deterministic order so repeated calls on identical input are
    bit-for-bit identical.  Raises :class:`EigensolverError` carrying the
    reconstruction residual if the solver fails or the result does not verify.
    """
    try:
        w, v = np.linalg.eigh(a.entries)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge: {exc}") from exc
    v = np.array(v)  # writable copy for the phase fix
    _fix_phases_and_ties(w, v)
    residual = max_norm((v * w) @ v.conj().T - a.entries)
    limit = constants.RECONSTRUCTION_RTOL * max(a.norm(), np.finfo(float).tiny)
    if residual > limit:
        raise EigensolverError("spectral reconstruction check failed", residual=residual)
    return SpectralData(w, v)


def propagator(spec: SpectralData, t: float) -> UnitaryOperator:
    """Spectral propagator U(t) = V diag(exp(-i w t)) V^H for constant H.

    Negative t gives the inverse evolution; propagator(spec, -t) equals
    propagator(spec, t) adjoint exactly.
    """
    if not np.isfinite(t):
        raise ValueError(f"propagation time must be finite, got {t!r}")
    v = spec.eigenvectors
    phases = np.exp(-1j * spec.eigenvalues * float(t))
    return UnitaryOperator((v * phases) @ v.conj().T)


def commutator_norm(a: HermitianOperator, b: HermitianOperator) -> float:
    """Max-norm of [A, B] = AB - BA; zero (at numerical scale) iff they commute."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return max_norm(a.entries @ b.entries - b.entries @ a.entries)
