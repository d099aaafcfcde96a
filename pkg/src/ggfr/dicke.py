"""Dicke-model construction: parameters, truncated basis, Hamiltonian, charges.

The model couples N two-level ions (collective pseudo-spin J = N/2) to one
bosonic mode:

    H/eps = omega_com * b^dag b + omega_at * Jz
            + (2 g / sqrt(N)) [ (1 - alpha) (J+ b + J- b^dag)
                                +     alpha (J+ b^dag + J- b) ]

on the product basis |J, Jz, n>, with a hard phonon cutoff n <= n_max.
alpha = 0 is the Tavis-Cummings point with conserved charge Q = J + Jz + n;
alpha = 1 conserves Qprime = J + Jz - n; intermediate alpha has no charge
beyond parity.  Energies are in units of eps, times in tau = hbar/eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .qlinalg import HermitianOperator

CHARGE_Q = "Q"
CHARGE_QPRIME = "Qprime"
CHARGE_PARITY = "parity"


@dataclass(frozen=True)
class DickeParams:
    """Physical parameters of one (piecewise-constant) Dicke Hamiltonian."""

    n_ions: int
    omega_com: float   # eps
    omega_at: float    # eps
    g: float           # eps
    alpha: float       # in [0, 1]
    n_max: int         # phonon cutoff, >= 1

    def __post_init__(self):
        if not isinstance(self.n_ions, int) or self.n_ions < 1:
            raise ValueError(f"n_ions must be a positive integer, got {self.n_ions!r}")
        if not isinstance(self.n_max, int) or self.n_max < 1:
            raise ValueError(f"n_max must be a positive integer, got {self.n_max!r}")
        if not (self.omega_com > 0 and math.isfinite(self.omega_com)):
            raise ValueError(f"omega_com must be > 0, got {self.omega_com!r}")
        if not (self.omega_at > 0 and math.isfinite(self.omega_at)):
            raise ValueError(f"omega_at must be > 0, got {self.omega_at!r}")
        if not (self.g >= 0 and math.isfinite(self.g)):
            raise ValueError(f"g must be >= 0, got {self.g!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha!r}")

    @property
    def j(self) -> float:
        return self.n_ions / 2.0

    def replace(self, **kwargs) -> "DickeParams":
        fields = dict(
            n_ions=self.n_ions, omega_com=self.omega_com, omega_at=self.omega_at,
            g=self.g, alpha=self.alpha, n_max=self.n_max,
        )
        fields.update(kwargs)
        return DickeParams(**fields)


@dataclass(frozen=True)
class DickeBasis:
    """Ordered product basis |J, Jz, n>, lexicographic in (jz, n).

    State index = (jz + J) * (n_max + 1) + n, so jz runs from -J to +J and the
    phonon number is the fast index.
    """

    n_ions: int
    n_max: int

    def __post_init__(self):
        if self.n_ions < 1 or self.n_max < 1:
            raise ValueError("n_ions and n_max must be positive")

    @property
    def j(self) -> float:
        return self.n_ions / 2.0

    @property
    def size(self) -> int:
        return (self.n_ions + 1) * (self.n_max + 1)

    @property
    def states(self) -> tuple[tuple[float, int], ...]:
        return tuple((jz, n)
                     for jz in (-self.j + k for k in range(self.n_ions + 1))
                     for n in range(self.n_max + 1))

    @property
    def jz_values(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_ions + 1) - self.j, self.n_max + 1)

    @property
    def phonon_numbers(self) -> np.ndarray:
        return np.tile(np.arange(self.n_max + 1), self.n_ions + 1)

    def index_of(self, jz: float, n: int) -> int:
        k = round(jz + self.j)
        if not (0 <= k <= self.n_ions and abs(jz + self.j - k) < 1e-9):
            raise ValueError(f"jz = {jz!r} is not a valid half-integer in [-J, J]")
        if not (0 <= n <= self.n_max):
            raise ValueError(f"n = {n!r} outside [0, {self.n_max}]")
        return int(k) * (self.n_max + 1) + int(n)

    def state_at(self, index: int) -> tuple[float, int]:
        if not (0 <= index < self.size):
            raise IndexError(index)
        k, n = divmod(index, self.n_max + 1)
        return (k - self.j, n)


def basis_for(params: DickeParams) -> DickeBasis:
    return DickeBasis(params.n_ions, params.n_max)


def _ladder_matrices(n_ions: int, n_max: int):
    """Spin (jp, jm, jz) and phonon (b, bdag, num) matrices in the subspaces."""
    j = n_ions / 2.0
    ns, nb = n_ions + 1, n_max + 1
    jz = np.arange(ns) - j
    amp = np.sqrt(j * (j + 1) - jz[:-1] * (jz[:-1] + 1))  # <jz+1| J+ |jz>
    jp = np.zeros((ns, ns))
    jp[np.arange(1, ns), np.arange(ns - 1)] = amp
    b = np.zeros((nb, nb))
    b[np.arange(nb - 1), np.arange(1, nb)] = np.sqrt(np.arange(1, nb))  # <n-1| b |n>
    num = np.diag(np.arange(nb, dtype=float))
    return jp, jp.T, np.diag(jz), b, b.T, num


def build_hamiltonian(params: DickeParams) -> HermitianOperator:
    """Dense Dicke Hamiltonian on the truncated product basis (units of eps).

    Block-diagonal in q = J + Jz + n when alpha = 0 and in q' = J + Jz - n
    when alpha = 1.  Real symmetric in this basis.
    """
    jp, jm, jz, b, bdag, num = _ladder_matrices(params.n_ions, params.n_max)
    ident_s = np.eye(params.n_ions + 1)
    ident_b = np.eye(params.n_max + 1)
    h = params.omega_com * np.kron(ident_s, num)
    h += params.omega_at * np.kron(jz, ident_b)
    coupling = params.g * 2.0 / math.sqrt(params.n_ions)
    co_rotating = np.kron(jp, b) + np.kron(jm, bdag)
    counter_rotating = np.kron(jp, bdag) + np.kron(jm, b)
    h += coupling * ((1.0 - params.alpha) * co_rotating + params.alpha * counter_rotating)
    return HermitianOperator(h)


def build_charge_q(basis: DickeBasis) -> HermitianOperator:
    """Q = J + Jz + b^dag b, diagonal with nonnegative integer eigenvalues."""
    return HermitianOperator(np.diag(basis.j + basis.jz_values + basis.phonon_numbers))


def build_charge_qprime(basis: DickeBasis) -> HermitianOperator:
    """Qprime = J + Jz - b^dag b (eigenvalues can be negative)."""
    return HermitianOperator(np.diag(basis.j + basis.jz_values - basis.phonon_numbers))


def build_parity(basis: DickeBasis) -> HermitianOperator:
    """Diagnostic parity (-1)^(J + Jz + n); conserved by H at every alpha.

    Exposed for diagnostics only; the revealing protocols never include it.
    """
    exponent = np.rint(basis.j + basis.jz_values + basis.phonon_numbers).astype(int)
    return HermitianOperator(np.diag(np.where(exponent % 2 == 0, 1.0, -1.0)))


def critical_coupling(params: DickeParams) -> float:
    """Normal/super-radiant critical coupling sqrt(omega_com * omega_at) / 2."""
    return math.sqrt(params.omega_com * params.omega_at) / 2.0


def endpoint_charges(params: DickeParams) -> tuple[tuple[str, HermitianOperator], ...]:
    """Charges beyond H conserved by the given Hamiltonian: Q at alpha = 0,
    Qprime at alpha = 1, none in between (parity stays diagnostic-only)."""
    basis = basis_for(params)
    if params.alpha == 0.0:
        return ((CHARGE_Q, build_charge_q(basis)),)
    if params.alpha == 1.0:
        return ((CHARGE_QPRIME, build_charge_qprime(basis)),)
    return ()


# d(eigenvalue)/dn for the diagonal charges; used by the truncation guard
CHARGE_PHONON_SLOPES = {CHARGE_Q: 1.0, CHARGE_QPRIME: -1.0, CHARGE_PARITY: 0.0}
