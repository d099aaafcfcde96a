"""Brute-force reference implementations for tests.

Everything here is deliberately naive: direct double sums over state pairs,
plain (non-log) partition sums, explicit element loops, no parallelism, no
block structure.  The engine modules must agree with these on tiny Hilbert
spaces; because the oracles share none of the engine's optimisations, that
agreement is evidence rather than circularity.
"""

from __future__ import annotations

import math

import numpy as np

from .gge import BetaVector, JointEigenbasis
from .qlinalg import UnitaryOperator
from .tpm import JointOutcomeDistribution

DIM_GUARD = 64


def _guard(dim: int) -> None:
    if dim > DIM_GUARD:
        raise ValueError(f"oracle is restricted to dim <= {DIM_GUARD}, got {dim}")


def naive_action(basis: JointEigenbasis, beta_vec: BetaVector, i: int) -> float:
    a = beta_vec.beta * float(basis.energies[i])
    for k, (_, bk) in enumerate(beta_vec.charge_betas):
        a += bk * float(basis.charge_values[k, i])
    return a


def naive_partition_sum(basis: JointEigenbasis, beta_vec: BetaVector) -> float:
    """Z as a plain sum of exponentials, no shift tricks."""
    _guard(basis.dim)
    z = 0.0
    for i in range(basis.dim):
        z += math.exp(-naive_action(basis, beta_vec, i))
    return z


def brute_force_tpm(ini: JointEigenbasis, fin: JointEigenbasis,
                    u: UnitaryOperator, beta_vec: BetaVector) -> JointOutcomeDistribution:
    """Literal double sum over (initial, final) eigenstate pairs.

    p_i from a direct partition sum, pi_{i->f} = |<f|U|i>|^2 with the matrix
    element accumulated component by component.  No merging, nothing pruned.
    """
    _guard(ini.dim)
    if fin.dim != ini.dim or u.dim != ini.dim:
        raise ValueError("dimension mismatch")
    dim = ini.dim
    z = naive_partition_sum(ini, beta_vec)
    p = np.zeros(dim)
    for i in range(dim):
        p[i] = math.exp(-naive_action(ini, beta_vec, i)) / z

    u_ini = u.entries @ ini.vectors
    prob = np.zeros((dim, dim))
    for i in range(dim):
        for f in range(dim):
            amp = 0.0 + 0.0j
            for m in range(dim):
                amp += np.conj(fin.vectors[m, f]) * u_ini[m, i]
            prob[i, f] = p[i] * (abs(amp) ** 2)

    return JointOutcomeDistribution(
        initial_energies=ini.energies,
        initial_charge_ids=ini.charge_ids,
        initial_charge_values=ini.charge_values,
        final_energies=fin.energies,
        final_charge_ids=fin.charge_ids,
        final_charge_values=fin.charge_values,
        prob=prob / prob.sum(),
        protocol_fingerprint="brute-force-oracle",
        beta_ini=beta_vec,
    )


def brute_force_qje(jd: JointOutcomeDistribution, beta_ini: BetaVector,
                    beta_fin: BetaVector, z_ini: float, z_fin: float) -> tuple[float, float]:
    """(lhs, rhs) of the integral relation, term by term in the linear domain.

    lhs = sum over records of prob * e^{-W}; rhs = Z'/Z.  Equality to ~1e-12
    on tiny instances certifies the engine's log-domain path.
    """
    _guard(jd.prob.shape[0])
    lhs = 0.0
    for e_i, q_i, e_f, q_f, p in jd.iter_records():
        a_ini = beta_ini.beta * e_i
        for k, (_, bk) in enumerate(beta_ini.charge_betas):
            a_ini += bk * q_i[k]
        a_fin = beta_fin.beta * e_f
        for k, (_, bk) in enumerate(beta_fin.charge_betas):
            a_fin += bk * q_f[k]
        lhs += p * math.exp(-(a_fin - a_ini))
    return lhs, z_fin / z_ini
