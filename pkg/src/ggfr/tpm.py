"""Two-projective-measurement protocol engine.

A quench protocol is an ordered list of piecewise-constant Dicke stages.  The
engine composes the exact spectral propagators, evaluates every transition
probability pi_{i->f} = |<f|U|i>|^2 between the initial and final joint
eigenbases, and turns the resulting joint outcome distribution into exact
discrete work distributions:

    generalised   W = beta' E'_fin + sum_l beta'_l Q'_l,fin
                      - (beta E_ini + sum_k beta_k Q_k,ini)
    standard      w = E'_fin - E_ini
    marginal      W_m = as W but omitting charge m on both ends

Work values are exactly discrete; distributions are stored as weighted atoms
(never binned), with atoms closer than the merge tolerance combined by
probability-weighted mean.  Finite-shot emulation uses a counter-based Philox
stream keyed by (seed, protocol fingerprint) so every shot is reproducible
independently of execution order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import constants
from .dicke import DickeParams, build_hamiltonian
from .gge import BetaVector, GgeEnsemble, JointEigenbasis, joint_eigenbasis
from .qlinalg import HermitianOperator, SpectralData, UnitaryOperator, eigh, max_norm, propagator, _frozen

FORWARD = "FW"
BACKWARD = "BW"


@dataclass(frozen=True)
class ProtocolStage:
    """One piecewise-constant stage: Hamiltonian parameters plus dwell time (tau)."""

    params: DickeParams
    duration: float

    def __post_init__(self):
        if not (self.duration >= 0 and math.isfinite(self.duration)):
            raise ValueError(f"stage duration must be finite and >= 0, got {self.duration!r}")


@dataclass(frozen=True)
class QuenchProtocol:
    """Ordered quench schedule; BW protocols are stage-reversed FW protocols.

    All stages must share (n_ions, n_max) so they act on a common basis.
    """

    stages: tuple[ProtocolStage, ...]
    direction: str = FORWARD

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a protocol needs at least one stage")
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"direction must be 'FW' or 'BW', got {self.direction!r}")
        shape = (stages[0].params.n_ions, stages[0].params.n_max)
        for st in stages:
            if (st.params.n_ions, st.params.n_max) != shape:
                raise ValueError("all stages must share (n_ions, n_max); basis mismatch")
        object.__setattr__(self, "stages", stages)

    @property
    def n_ions(self) -> int:
        return self.stages[0].params.n_ions

    @property
    def n_max(self) -> int:
        return self.stages[0].params.n_max

    @property
    def dim(self) -> int:
        return (self.n_ions + 1) * (self.n_max + 1)

    def reversed(self) -> "QuenchProtocol":
        """The time-reversed twin: reversed stage order, same durations."""
        other = BACKWARD if self.direction == FORWARD else FORWARD
        return QuenchProtocol(self.stages[::-1], other)

    def fingerprint(self) -> str:
        parts = [self.direction]
        for st in self.stages:
            p = st.params
            parts.append(f"{p.n_ions}|{p.omega_com!r}|{p.omega_at!r}|{p.g!r}|"
                         f"{p.alpha!r}|{p.n_max}|{st.duration!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()


def stage_spectra(prot: QuenchProtocol) -> tuple[SpectralData, ...]:
    """Eigendecompositions of every stage Hamiltonian (cacheable by callers)."""
    return tuple(eigh(build_hamiltonian(st.params)) for st in prot.stages)


def protocol_unitary(prot: QuenchProtocol, *,
                     spectra: tuple[SpectralData, ...] | None = None) -> UnitaryOperator:
    """Exact propagator of the whole schedule.

    FW composes forward spectral propagators stage by stage; a BW protocol
    (already stage-reversed) composes inverse propagators, which makes it
    exactly the adjoint of its FW twin.
    """
    if spectra is None:
        spectra = stage_spectra(prot)
    if len(spectra) != len(prot.stages):
        raise ValueError("one spectral decomposition per stage is required")
    sign = -1.0 if prot.direction == BACKWARD else 1.0
    u = np.eye(prot.dim, dtype=complex)
    for spec, st in zip(spectra, prot.stages):
        if spec.dim != prot.dim:
            raise ValueError("stage spectrum dimension does not match the protocol basis")
        if st.duration == 0.0:
            continue
        u = propagator(spec, sign * st.duration).entries @ u
    return UnitaryOperator(u)


# ---------------------------------------------------------------------------
# joint outcome distributions

@dataclass(frozen=True)
class JointOutcomeDistribution:
    """Exact (or empirical) distribution over TPM outcome pairs.

    ``prob[i, f]`` is the probability of measuring initial joint eigenstate i
    and final joint eigenstate f; labels for both sides are stored alongside.
    ``n_shots`` is None for exact distributions.
    """

    initial_energies: np.ndarray
    initial_charge_ids: tuple[str, ...]
    initial_charge_values: np.ndarray
    final_energies: np.ndarray
    final_charge_ids: tuple[str, ...]
    final_charge_values: np.ndarray
    prob: np.ndarray
    protocol_fingerprint: str
    beta_ini: BetaVector
    n_shots: int | None = None

    def __post_init__(self):
        e_i = np.asarray(self.initial_energies, dtype=float)
        e_f = np.asarray(self.final_energies, dtype=float)
        q_i = np.asarray(self.initial_charge_values, dtype=float)
        q_f = np.asarray(self.final_charge_values, dtype=float)
        p = np.asarray(self.prob, dtype=float)
        if q_i.shape != (len(self.initial_charge_ids), e_i.size):
            raise ValueError("initial charge table shape mismatch")
        if q_f.shape != (len(self.final_charge_ids), e_f.size):
            raise ValueError("final charge table shape mismatch")
        if p.shape != (e_i.size, e_f.size):
            raise ValueError("probability matrix shape mismatch")
        if p.size and float(p.min()) < 0:
            raise ValueError("negative outcome probability")
        total = float(p.sum())
        if abs(total - 1.0) > constants.JOINT_PROB_SUM_TOL:
            raise ValueError(f"outcome probabilities sum to {total!r}, not 1")
        for name, arr in (("initial_energies", e_i), ("final_energies", e_f),
                          ("initial_charge_values", q_i), ("final_charge_values", q_f),
                          ("prob", p)):
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "initial_charge_ids", tuple(self.initial_charge_ids))
        object.__setattr__(self, "final_charge_ids", tuple(self.final_charge_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.prob.shape

    def total_probability(self) -> float:
        return float(self.prob.sum())

    def iter_records(self, prune_below: float = 0.0):
        """Yield (E_ini, q_ini tuple, E_fin, q_fin tuple, prob) row by row.

        Every record is kept by default (sub-1e-16 probabilities included);
        pruning happens only when a positive ``prune_below`` is passed
        explicitly, as at serialisation time.
        """
        n_i, n_f = self.prob.shape
        for i in range(n_i):
            row = self.prob[i]
            for f in range(n_f):
                p = row[f]
                if prune_below > 0.0 and p < prune_below:
                    continue
                yield (self.initial_energies[i],
                       tuple(self.initial_charge_values[:, i]),
                       self.final_energies[f],
                       tuple(self.final_charge_values[:, f]),
                       p)


def _check_doubly_stochastic(pi: np.ndarray) -> None:
    rows = max_norm(pi.sum(axis=1) - 1.0)
    cols = max_norm(pi.sum(axis=0) - 1.0)
    if max(rows, cols) > constants.JOINT_PROB_SUM_TOL:
        raise ValueError(
            f"transition matrix is not doubly stochastic (row dev {rows:.3e}, "
            f"column dev {cols:.3e})")


def transition_matrix(ens: GgeEnsemble, u: UnitaryOperator,
                      final_basis: JointEigenbasis) -> np.ndarray:
    """pi[i, f] = |<f|U|i>|^2; verified doubly stochastic to 1e-10."""
    if u.dim != ens.dim or final_basis.dim != ens.dim:
        raise ValueError("basis mismatch between ensemble, unitary, and final basis")
    amplitudes = final_basis.vectors.conj().T @ u.entries @ ens.basis.vectors
    pi = np.abs(amplitudes.T) ** 2
    _check_doubly_stochastic(pi)
    return pi


def _resolve_final_basis(ens, final_h, final_charges, final_charge_ids, final_basis):
    if final_basis is not None:
        return final_basis
    if final_h is None:
        raise ValueError("either final_h or final_basis must be given")
    return joint_eigenbasis(final_h, tuple(final_charges), tuple(final_charge_ids))


def tpm_exact(ens: GgeEnsemble, prot: QuenchProtocol,
              final_h: HermitianOperator | None = None,
              final_charges: tuple[HermitianOperator, ...] = (),
              final_charge_ids: tuple[str, ...] = (), *,
              final_basis: JointEigenbasis | None = None,
              spectra: tuple[SpectralData, ...] | None = None) -> JointOutcomeDistribution:
    """Exact TPM statistics: record probabilities p_i |<f|U|i>|^2.

    ``final_charges`` may be empty (protocols ending where no charge commutes
    with the final Hamiltonian).  A precomputed ``final_basis`` or stage
    ``spectra`` avoid re-diagonalisation inside parameter sweeps.
    """
    final_basis = _resolve_final_basis(ens, final_h, final_charges,
                                       final_charge_ids, final_basis)
    u = protocol_unitary(prot, spectra=spectra)
    pi = transition_matrix(ens, u, final_basis)
    joint = ens.probabilities[:, None] * pi
    return JointOutcomeDistribution(
        initial_energies=ens.basis.energies,
        initial_charge_ids=ens.basis.charge_ids,
        initial_charge_values=ens.basis.charge_values,
        final_energies=final_basis.energies,
        final_charge_ids=final_basis.charge_ids,
        final_charge_values=final_basis.charge_values,
        prob=joint,
        protocol_fingerprint=prot.fingerprint(),
        beta_ini=ens.beta_vec,
    )


def tpm_sample(ens: GgeEnsemble, prot: QuenchProtocol,
               final_h: HermitianOperator | None = None,
               final_charges: tuple[HermitianOperator, ...] = (),
               final_charge_ids: tuple[str, ...] = (), *,
               n_shots: int, seed: int,
               final_basis: JointEigenbasis | None = None,
               spectra: tuple[SpectralData, ...] | None = None) -> JointOutcomeDistribution:
    """Finite-shot TPM emulation (first measurement ~ GGE, second ~ pi row).

    Uses one Philox counter-based stream per (seed, protocol): shot j always
    consumes uniforms (2j, 2j+1), so results are reproducible bit for bit and
    independent of execution order.
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    final_basis = _resolve_final_basis(ens, final_h, final_charges,
                                       final_charge_ids, final_basis)
    u = protocol_unitary(prot, spectra=spectra)
    pi = transition_matrix(ens, u, final_basis)

    key = (int(seed) & (2 ** 64 - 1)) | (int(prot.fingerprint()[:16], 16) << 64)
    rng = np.random.Generator(np.random.Philox(key=key))
    draws = rng.random((n_shots, 2))

    cum_p = np.cumsum(ens.probabilities)
    idx_i = np.searchsorted(cum_p, draws[:, 0] * cum_p[-1], side="right")
    idx_i = np.minimum(idx_i, ens.dim - 1)
    cum_pi = np.cumsum(pi, axis=1)
    idx_f = np.empty(n_shots, dtype=np.intp)
    for i in np.unique(idx_i):
        mask = idx_i == i
        row = cum_pi[i]
        idx_f[mask] = np.minimum(
            np.searchsorted(row, draws[mask, 1] * row[-1], side="right"), ens.dim - 1)

    counts = np.zeros(pi.shape)
    np.add.at(counts, (idx_i, idx_f), 1.0)
    return JointOutcomeDistribution(
        initial_energies=ens.basis.energies,
        initial_charge_ids=ens.basis.charge_ids,
        initial_charge_values=ens.basis.charge_values,
        final_energies=final_basis.energies,
        final_charge_ids=final_basis.charge_ids,
        final_charge_values=final_basis.charge_values,
        prob=counts / n_shots,
        protocol_fingerprint=prot.fingerprint(),
        beta_ini=ens.beta_vec,
        n_shots=int(n_shots),
    )


# ---------------------------------------------------------------------------
# discrete work distributions

@dataclass(frozen=True)
class DiscreteDistribution:
    """Weighted atoms of an exactly discrete work distribution.

    Values are strictly increasing after merging; probabilities sum to one.
    """

    values: np.ndarray
    probs: np.ndarray
    merge_tol: float = constants.ATOM_MERGE_TOL

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if v.shape != p.shape or v.ndim != 1 or v.size == 0:
            raise ValueError("values/probs must be equal-length nonempty 1-d arrays")
        if np.any(np.diff(v) <= 0):
            raise ValueError("atom values must be strictly increasing")
        if float(p.min()) < 0:
            raise ValueError("negative atom probability")
        total = float(p.sum())
        if abs(total - 1.0) > constants.JOINT_PROB_SUM_TOL:
            raise ValueError(f"atom probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def n_atoms(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(self.probs @ self.values)

    def log_mean_exp_neg(self) -> float:
        """ln <e^{-value}> evaluated by log-sum-exp over the atoms."""
        mask = self.probs > 0
        return float(logsumexp(np.log(self.probs[mask]) - self.values[mask]))

    def scaled(self, factor: float) -> "DiscreteDistribution":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return DiscreteDistribution(self.values * factor, self.probs,
                                    self.merge_tol * factor)


def merge_atoms(values: np.ndarray, weights: np.ndarray,
                tol: float = constants.ATOM_MERGE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Combine atoms closer than ``tol`` by probability-weighted mean.

    Zero-weight entries are dropped first; total probability is preserved
    exactly (same-order summation of the sorted weights).
    """
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    keep = w > 0
    v, w = v[keep], w[keep]
    if v.size == 0:
        raise ValueError("no atoms with positive weight")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    boundary = np.empty(v.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = np.diff(v) > tol
    cluster = np.cumsum(boundary) - 1
    n = int(cluster[-1]) + 1
    wsum = np.bincount(cluster, weights=w, minlength=n)
    centre = np.bincount(cluster, weights=w * v, minlength=n) / wsum
    return centre, wsum


def _work_distribution(jd: JointOutcomeDistribution, a_ini: np.ndarray,
                       a_fin: np.ndarray, merge_tol: float) -> DiscreteDistribution:
    values = a_fin[None, :] - a_ini[:, None]
    centre, wsum = merge_atoms(values, jd.prob, merge_tol)
    # renormalise the merge round-off only (bounded by n_atoms * eps)
    return DiscreteDistribution(centre, wsum / wsum.sum(), merge_tol)


def _action_for(energies: np.ndarray, charge_values: np.ndarray,
                charge_ids: tuple[str, ...], beta_vec: BetaVector,
                exclude: tuple[str, ...] = ()) -> np.ndarray:
    if beta_vec.charge_ids != tuple(charge_ids):
        raise ValueError(
            f"beta vector charges {beta_vec.charge_ids} do not match recorded "
            f"charges {tuple(charge_ids)}")
    a = beta_vec.beta * energies
    for k, (cid, bk) in enumerate(beta_vec.charge_betas):
        if cid in exclude:
            continue
        a = a + bk * charge_values[k]
    return a


def generalised_work_pdf(jd: JointOutcomeDistribution, beta_ini: BetaVector,
                         beta_fin: BetaVector, *,
                         merge_tol: float = constants.ATOM_MERGE_TOL) -> DiscreteDistribution:
    """PDF of dimensionless generalised work for the recorded outcomes.

    ``beta_ini``/``beta_fin`` must cover exactly the charges recorded on the
    respective side of the distribution.
    """
    a_i = _action_for(jd.initial_energies, jd.initial_charge_values,
                      jd.initial_charge_ids, beta_ini)
    a_f = _action_for(jd.final_energies, jd.final_charge_values,
                      jd.final_charge_ids, beta_fin)
    return _work_distribution(jd, a_i, a_f, merge_tol)


def standard_work_pdf(jd: JointOutcomeDistribution, *,
                      merge_tol: float = constants.ATOM_MERGE_TOL) -> DiscreteDistribution:
    """PDF of standard (dimensionful) work w = E'_fin - E_ini, in eps."""
    return _work_distribution(jd, jd.initial_energies, jd.final_energies, merge_tol)


def marginal_work_pdf(jd: JointOutcomeDistribution, excluded_charge: str,
                      beta_ini: BetaVector, beta_fin: BetaVector, *,
                      merge_tol: float = constants.ATOM_MERGE_TOL) -> DiscreteDistribution:
    """Marginal generalised work: charge ``excluded_charge`` omitted on both ends."""
    if excluded_charge not in jd.initial_charge_ids:
        raise KeyError(f"charge {excluded_charge!r} not recorded on the initial side")
    a_i = _action_for(jd.initial_energies, jd.initial_charge_values,
                      jd.initial_charge_ids, beta_ini, exclude=(excluded_charge,))
    a_f = _action_for(jd.final_energies, jd.final_charge_values,
                      jd.final_charge_ids, beta_fin, exclude=(excluded_charge,))
    return _work_distribution(jd, a_i, a_f, merge_tol)


# ---------------------------------------------------------------------------
# direct log-domain moments (no atomisation; used by sweeps)

def _log_bilinear(prob: np.ndarray, a_ini: np.ndarray, a_fin: np.ndarray) -> float:
    """ln sum_{i,f} P_if exp(a_ini_i - a_fin_f), evaluated with max shifts."""
    s1 = float(a_ini.max())
    s2 = float(a_fin.min())
    u = np.exp(a_ini - s1)
    v = np.exp(-(a_fin - s2))
    total = float(u @ prob @ v)
    if total > 0.0:
        return (s1 - s2) + math.log(total)
    log_terms = np.log(prob, out=np.full(prob.shape, -np.inf), where=prob > 0)
    return float(logsumexp((log_terms + a_ini[:, None]) - a_fin[None, :]))


def log_mean_exp_neg_generalised(jd: JointOutcomeDistribution, beta_ini: BetaVector,
                                 beta_fin: BetaVector) -> float:
    """ln <e^{-W}> over the joint records, without building the atom list."""
    a_i = _action_for(jd.initial_energies, jd.initial_charge_values,
                      jd.initial_charge_ids, beta_ini)
    a_f = _action_for(jd.final_energies, jd.final_charge_values,
                      jd.final_charge_ids, beta_fin)
    return _log_bilinear(jd.prob, a_i, a_f)


def log_mean_exp_neg_standard(jd: JointOutcomeDistribution, beta: float) -> float:
    """ln <e^{-beta w}> over the joint records."""
    return _log_bilinear(jd.prob, beta * jd.initial_energies, beta * jd.final_energies)


def default_tfin_grid_us(start_us: float = 1e-3, stop_us: float = 1e2,
                         points_per_decade: int = 11) -> np.ndarray:
    """Logarithmic dwell-time grid in microseconds (default 1 ns .. 100 us)."""
    if not (stop_us > start_us > 0):
        raise ValueError("need 0 < start < stop")
    decades = math.log10(stop_us / start_us)
    n = max(int(round(decades * points_per_decade)) + 1, 2)
    return np.logspace(math.log10(start_us), math.log10(stop_us), n)
