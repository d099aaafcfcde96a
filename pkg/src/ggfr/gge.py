"""Generalised Gibbs ensembles on finite joint spectra.

An ensemble is defined by generalised inverse temperatures (beta, {beta_k})
conjugate to the Hamiltonian and a commuting set of charges:

    p_i = exp(-beta E_i - sum_k beta_k q_{k,i}) / Z .

The module builds the simultaneous eigenbasis of (H, {Q_k}) by splitting the
space into charge sectors and diagonalising H inside each sector, evaluates
log Z and occupation probabilities in the log domain, checks phonon-cutoff
convergence, and inverts target averages to betas by damped Newton on the
strictly convex log-partition function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import constants, dicke
from .errors import (
    EigensolverError,
    MaxIterationsExceeded,
    NonCommutingCharge,
    TargetOutsideSpectrum,
    TruncationUnconverged,
)
from .qlinalg import HermitianOperator, commutator_norm, eigh, max_norm, _frozen


@dataclass(frozen=True)
class BetaVector:
    """Generalised inverse temperatures: beta (1/eps) plus one entry per charge.

    ``charge_betas`` is an ordered tuple of (charge_id, beta_k) pairs; negative
    beta_k is legitimate (validity on the untruncated ladder is governed by
    the phonon convergence guard, not by sign).
    """

    beta: float
    charge_betas: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "charge_betas",
                           tuple((str(k), float(v)) for k, v in self.charge_betas))
        object.__setattr__(self, "beta", float(self.beta))
        values = [self.beta] + [v for _, v in self.charge_betas]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"beta vector has non-finite entries: {values}")
        ids = [k for k, _ in self.charge_betas]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate charge ids in beta vector: {ids}")

    @property
    def charge_ids(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.charge_betas)

    @property
    def charge_values(self) -> np.ndarray:
        return np.array([v for _, v in self.charge_betas])

    def as_array(self) -> np.ndarray:
        return np.concatenate(([self.beta], self.charge_values))

    def value_of(self, charge_id: str) -> float:
        for k, v in self.charge_betas:
            if k == charge_id:
                return v
        raise KeyError(charge_id)

    def scaled(self, factor: float) -> "BetaVector":
        return BetaVector(self.beta * factor,
                          tuple((k, v * factor) for k, v in self.charge_betas))


@dataclass(frozen=True)
class JointEigenbasis:
    """Simultaneous eigenbasis of H and a commuting charge set.

    ``energies`` ascending; row k of ``charge_values`` holds the eigenvalue of
    charge ``charge_ids[k]`` on each joint eigenstate; column i of ``vectors``
    is the eigenstate in the product basis.
    """

    energies: np.ndarray
    charge_ids: tuple[str, ...]
    charge_values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        q = np.asarray(self.charge_values, dtype=float)
        v = np.asarray(self.vectors)
        ids = tuple(self.charge_ids)
        if q.shape != (len(ids), e.size) or v.shape != (e.size, e.size):
            raise ValueError("inconsistent joint-basis shapes")
        object.__setattr__(self, "energies", _frozen(e))
        object.__setattr__(self, "charge_ids", ids)
        object.__setattr__(self, "charge_values", _frozen(q))
        object.__setattr__(self, "vectors", _frozen(v))

    @property
    def dim(self) -> int:
        return self.energies.size

    def action(self, beta_vec: BetaVector, exclude: tuple[str, ...] = ()) -> np.ndarray:
        """A_i = beta E_i + sum_k beta_k q_{k,i}, optionally omitting charges.

        The beta vector must cover exactly this basis's charges.
        """
        if beta_vec.charge_ids != self.charge_ids:
            raise ValueError(
                f"beta vector charges {beta_vec.charge_ids} do not match basis "
                f"charges {self.charge_ids}")
        a = beta_vec.beta * self.energies
        for k, (cid, bk) in enumerate(beta_vec.charge_betas):
            if cid in exclude:
                continue
            a = a + bk * self.charge_values[k]
        return a


def _split_sectors(blocks, op: np.ndarray):
    """Refine coordinate/rotated sectors by one commuting Hermitian operator.

    Each block is (basis_matrix or index_array, charge_label_list).  Diagonal
    restrictions keep their coordinate representation so Dicke charges never
    force a rotation; otherwise the restriction is diagonalised and the block
    rotated.  Sectors split where eigenvalues jump by more than the cluster
    tolerance.
    """
    scale = max(max_norm(op), 1.0)
    tol = constants.CHARGE_CLUSTER_TOL * scale
    out = []
    for basis, labels in blocks:
        if basis.ndim == 1:  # coordinate subspace: indices into the product basis
            sub = op[np.ix_(basis, basis)]
        else:
            sub = basis.conj().T @ op @ basis
        off = sub - np.diag(np.diagonal(sub))
        if max_norm(off) <= tol:
            vals = np.real(np.diagonal(sub)).copy()
            order = np.argsort(vals, kind="stable")
            basis = basis[order] if basis.ndim == 1 else basis[:, order]
            vals = vals[order]
        else:
            vals, rot = np.linalg.eigh(sub)
            if basis.ndim == 1:
                basis = np.eye(op.shape[0])[:, basis]
            basis = basis @ rot
        # split into clusters separated by > tol
        start = 0
        m = vals.size
        for k in range(1, m + 1):
            if k == m or vals[k] - vals[k - 1] > tol:
                chunk = basis[start:k] if basis.ndim == 1 else basis[:, start:k]
                label = float(np.mean(vals[start:k]))
                out.append((chunk, labels + [label]))
                start = k
    return out


def joint_eigenbasis(h: HermitianOperator,
                     charges: tuple[HermitianOperator, ...] = (),
                     charge_ids: tuple[str, ...] = (),
                     *, validate: bool = True) -> JointEigenbasis:
    """Simultaneous eigenbasis of H and pairwise-commuting charges.

    Charges are admitted only if every commutator max-norm (with H and with
    each other) is below CHARGE_ADMISSION_RTOL times the max-norm product;
    violations raise :class:`NonCommutingCharge` naming the offending pair.
    States are sorted by (E, q_1, ..., q_K) ascending.
    """
    charges = tuple(charges)
    charge_ids = tuple(charge_ids)
    if len(charges) != len(charge_ids):
        raise ValueError("charges and charge_ids must have equal length")
    named = list(zip(("H",) + charge_ids, (h,) + charges))
    for a in range(len(named)):
        for b in range(a + 1, len(named)):
            na, oa = named[a]
            nb, ob = named[b]
            limit = constants.CHARGE_ADMISSION_RTOL * max(
                oa.norm() * ob.norm(), np.finfo(float).tiny)
            norm = commutator_norm(oa, ob)
            if norm > limit:
                raise NonCommutingCharge(na, nb, norm, limit)

    dim = h.dim
    if not charges:
        spec = eigh(h)
        return JointEigenbasis(spec.eigenvalues, (), np.zeros((0, dim)),
                               spec.eigenvectors)

    blocks = [(np.arange(dim), [])]
    for op in charges:
        blocks = _split_sectors(blocks, op.entries)

    energies, vectors, labels = [], [], []
    for basis, charge_labels in blocks:
        if basis.ndim == 1:
            sub = h.entries[np.ix_(basis, basis)]
        else:
            sub = basis.conj().T @ h.entries @ basis
        spec = eigh(HermitianOperator(_symmetrize(sub)))
        if basis.ndim == 1:
            full = np.zeros((dim, basis.size), dtype=spec.eigenvectors.dtype)
            full[basis, :] = spec.eigenvectors
        else:
            full = basis @ spec.eigenvectors
        block_dim = basis.size if basis.ndim == 1 else basis.shape[1]
        energies.append(spec.eigenvalues)
        vectors.append(full)
        labels.append(np.tile(np.asarray(charge_labels)[:, None], (1, block_dim)))

    e = np.concatenate(energies)
    v = np.concatenate(vectors, axis=1)
    q = np.concatenate(labels, axis=1)
    order = np.lexsort(tuple(q[k] for k in range(q.shape[0] - 1, -1, -1)) + (e,))
    e, q, v = e[order], q[:, order], v[:, order]

    if validate:
        dev = max_norm(v.conj().T @ v - np.eye(dim))
        if dev > constants.UNITARITY_TOL:
            raise EigensolverError("assembled joint basis is not unitary",
                                   residual=dev)
        recon = max_norm((v * e) @ v.conj().T - h.entries)
        if recon > constants.RECONSTRUCTION_RTOL * max(h.norm(), np.finfo(float).tiny):
            raise EigensolverError("joint basis does not reconstruct H",
                                   residual=recon)
        for k, op in enumerate(charges):
            recon = max_norm((v * q[k]) @ v.conj().T - op.entries)
            if recon > constants.RECONSTRUCTION_RTOL * max(op.norm(), 1.0):
                raise EigensolverError(
                    f"joint basis does not reconstruct charge {charge_ids[k]!r}",
                    residual=recon)
    return JointEigenbasis(e, charge_ids, q, v)


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)


@dataclass(frozen=True)
class GgeEnsemble:
    """A generalised Gibbs state over a joint eigenbasis.

    Stores per-state probabilities consistent with log_z; the generalised
    free energy is F = -ln Z.
    """

    beta_vec: BetaVector
    basis: JointEigenbasis
    probabilities: np.ndarray
    log_z: float

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (self.basis.dim,):
            raise ValueError("probability vector shape mismatch")
        total = float(p.sum())
        if abs(total - 1.0) > constants.ENSEMBLE_PROB_SUM_TOL * max(1.0, self.basis.dim / 1e3):
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        a = self.basis.action(self.beta_vec)
        dev = max_norm(p - np.exp(-a - self.log_z))
        if dev > 1e-12:
            raise ValueError(f"probabilities inconsistent with log_z (max dev {dev:.3e})")
        object.__setattr__(self, "probabilities", _frozen(p))

    @property
    def gen_free_energy(self) -> float:
        return -self.log_z

    @property
    def dim(self) -> int:
        return self.basis.dim


def phonon_marginal(ens: GgeEnsemble, phonon_numbers: np.ndarray) -> np.ndarray:
    """Distribution of the phonon quantum number under the GGE.

    ``phonon_numbers`` gives n for each product-basis state; the marginal is
    P(n) = sum_jz <jz,n| rho |jz,n> with rho = V diag(p) V^H.
    """
    nvec = np.asarray(phonon_numbers, dtype=int)
    if nvec.shape != (ens.dim,):
        raise ValueError("phonon_numbers length mismatch")
    site_prob = np.abs(ens.basis.vectors) ** 2 @ ens.probabilities
    return np.bincount(nvec, weights=site_prob, minlength=int(nvec.max()) + 1)


def truncation_leakage(ens: GgeEnsemble, phonon_numbers: np.ndarray,
                       tail_fraction: float = constants.TRUNCATION_TAIL_FRACTION) -> float:
    """GGE probability carried by the top ``tail_fraction`` of phonon quanta."""
    marginal = phonon_marginal(ens, phonon_numbers)
    n_max = marginal.size - 1
    threshold = int(math.floor((1.0 - tail_fraction) * n_max))
    return float(marginal[threshold + 1:].sum())


def _suggest_n_max(marginal: np.ndarray, leakage: float, tol: float) -> int:
    n_max = marginal.size - 1
    tail = marginal[max(1, int(0.8 * n_max)):]
    positive = tail[tail > 0]
    if positive.size >= 2:
        slope = (math.log(positive[-1]) - math.log(positive[0])) / max(positive.size - 1, 1)
        if slope < -1e-12:
            extra = int(math.ceil((math.log(leakage) - math.log(0.5 * tol)) / (-slope)))
            return n_max + max(extra, 1)
    return max(int(math.ceil(1.5 * n_max)), n_max + 8)


def build_gge_from_basis(beta_vec: BetaVector, basis: JointEigenbasis, *,
                         phonon_numbers: np.ndarray | None = None,
                         leakage_tol: float = constants.TRUNCATION_LEAKAGE_TOL) -> GgeEnsemble:
    """GGE over a prebuilt joint eigenbasis.

    log Z is evaluated by log-sum-exp with max shift.  When per-basis-state
    phonon numbers are supplied the phonon-cutoff convergence criterion is
    enforced: the GGE weight in the top 5% of quanta must stay below
    ``leakage_tol`` or :class:`TruncationUnconverged` is raised with a
    suggested n_max.
    """
    a = basis.action(beta_vec)
    log_z = float(logsumexp(-a))
    p = np.exp(-a - log_z)
    ens = GgeEnsemble(beta_vec, basis, p, log_z)
    if phonon_numbers is not None:
        marginal = phonon_marginal(ens, phonon_numbers)
        n_max = marginal.size - 1
        threshold = int(math.floor((1.0 - constants.TRUNCATION_TAIL_FRACTION) * n_max))
        leakage = float(marginal[threshold + 1:].sum())
        if leakage >= leakage_tol:
            raise TruncationUnconverged(leakage, leakage_tol,
                                        _suggest_n_max(marginal, leakage, leakage_tol))
    return ens


def build_gge(beta_vec: BetaVector, h: HermitianOperator,
              charges: tuple[HermitianOperator, ...] = (), *,
              phonon_numbers: np.ndarray | None = None,
              leakage_tol: float = constants.TRUNCATION_LEAKAGE_TOL) -> GgeEnsemble:
    """GGE of H with the charges named by the beta vector.

    ``charges`` must align one-to-one with ``beta_vec.charge_betas``.  All
    charges must commute with H and pairwise (NonCommutingCharge otherwise).
    """
    if len(charges) != len(beta_vec.charge_betas):
        raise ValueError(
            f"{len(charges)} charge operators for {len(beta_vec.charge_betas)} charge betas")
    basis = joint_eigenbasis(h, tuple(charges), beta_vec.charge_ids)
    return build_gge_from_basis(beta_vec, basis, phonon_numbers=phonon_numbers,
                                leakage_tol=leakage_tol)


def gge_average(ens: GgeEnsemble, obs_diagonal: np.ndarray) -> float:
    """Ensemble average of an observable given in the joint eigenbasis."""
    o = np.asarray(obs_diagonal, dtype=float)
    if o.shape != (ens.dim,):
        raise ValueError(f"observable length {o.shape} does not match dim {ens.dim}")
    return float(ens.probabilities @ o)


def _spectrum_matrix(basis: JointEigenbasis) -> np.ndarray:
    """Rows (E_i, q_1i, ..., q_Ki) stacked as a (dim, 1+K) matrix."""
    return np.column_stack([basis.energies] + [basis.charge_values[k]
                                               for k in range(len(basis.charge_ids))])


def moments(ens: GgeEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix of (H, Q_1, ..., Q_K) under the GGE.

    The covariance is the Hessian of ln Z in the betas (positive semidefinite
    by convexity).
    """
    cols = _spectrum_matrix(ens.basis)
    p = ens.probabilities
    mean = p @ cols
    centred = cols - mean
    cov = (centred * p[:, None]).T @ centred
    return mean, cov


def solve_betas_from_averages(targets: tuple[float, tuple[float, ...]],
                              h: HermitianOperator,
                              charges: tuple[HermitianOperator, ...],
                              initial_guess: BetaVector, *,
                              basis: JointEigenbasis | None = None,
                              rtol: float = constants.SOLVE_BETAS_RTOL,
                              max_iter: int = 200) -> BetaVector:
    """Invert target averages (E, {M_k}) to generalised inverse temperatures.

    Damped Newton on the convex objective ln Z(x) + x . t, whose gradient is
    t - <(H, Q)> and whose Hessian is the covariance of (H, Q).  Targets must
    lie strictly inside the achievable range of each spectrum column, else
    :class:`TargetOutsideSpectrum`.  On stall the best iterate is attached to
    :class:`MaxIterationsExceeded`.
    """
    e_target, charge_targets = targets
    t = np.concatenate(([float(e_target)], np.asarray(charge_targets, dtype=float)))
    if t.size != 1 + len(initial_guess.charge_betas):
        raise ValueError("target vector does not match the beta vector layout")
    if basis is None:
        basis = joint_eigenbasis(h, tuple(charges), initial_guess.charge_ids)
    cols = _spectrum_matrix(basis)
    lo, hi = cols.min(axis=0), cols.max(axis=0)
    width = np.maximum(hi - lo, np.finfo(float).tiny)
    inside = (t > lo) & (t < hi)
    constant = width <= 1e-12 * np.maximum(np.abs(hi), 1.0)
    on_constant = constant & np.isclose(t, lo, rtol=1e-9, atol=1e-12)
    if not np.all(inside | on_constant):
        bad = int(np.argmin(inside | on_constant))
        raise TargetOutsideSpectrum(
            f"target component {bad} = {t[bad]!r} is not strictly inside "
            f"({lo[bad]!r}, {hi[bad]!r})")

    def state(x: np.ndarray):
        a = cols @ x
        shift = a.min()
        weights = np.exp(-(a - shift))
        z = weights.sum()
        log_z = math.log(z) - shift
        p = weights / z
        mean = p @ cols
        centred = cols - mean
        cov = (centred * p[:, None]).T @ centred
        objective = log_z + float(x @ t)
        return objective, mean, cov

    def residual_scale(mean: np.ndarray) -> float:
        return float(np.max(np.abs(mean - t) / np.maximum(np.abs(t), width)))

    x = initial_guess.as_array()
    best_x, best_res = x.copy(), math.inf
    objective, mean, cov = state(x)
    for _ in range(max_iter):
        res = residual_scale(mean)
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res < rtol:
            ids = initial_guess.charge_ids
            return BetaVector(x[0], tuple(zip(ids, x[1:])))
        grad = t - mean
        ridge = 1e-14 * max(np.trace(cov), 1.0)
        try:
            step = np.linalg.solve(cov + ridge * np.eye(cov.shape[0]), -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(cov, -grad, rcond=None)[0]
        damping = 1.0
        for _ in range(60):
            cand = x + damping * step
            cand_obj, cand_mean, cand_cov = state(cand)
            if cand_obj <= objective + 1e-4 * damping * float(grad @ step):
                x, objective, mean, cov = cand, cand_obj, cand_mean, cand_cov
                break
            damping *= 0.5
        else:
            break
    ids = initial_guess.charge_ids
    best = BetaVector(best_x[0], tuple(zip(ids, best_x[1:])))
    raise MaxIterationsExceeded(
        f"beta solver stalled at relative residual {best_res:.3e} after {max_iter} "
        f"iterations", best=best, residual=best_res)


def phonon_decay_coefficient(beta_vec: BetaVector, omega_com: float) -> float:
    """Asymptotic decay rate of the phonon ladder weight under the GGE.

    beta * omega_com + sum_k beta_k * (dq_k/dn) using the known slopes of the
    diagonal Dicke charges; must be positive for the untruncated ensemble to
    normalise.
    """
    coeff = beta_vec.beta * omega_com
    for cid, bk in beta_vec.charge_betas:
        try:
            coeff += bk * dicke.CHARGE_PHONON_SLOPES[cid]
        except KeyError:
            raise KeyError(f"no phonon slope known for charge id {cid!r}") from None
    return coeff


def auto_n_max(params: dicke.DickeParams, beta_vec: BetaVector, *,
               leakage_tol: float = constants.TRUNCATION_LEAKAGE_TOL,
               start: int = 48, growth: float = 1.5, cap: int = 4096) -> int:
    """Smallest tested phonon cutoff whose GGE passes the leakage criterion.

    Seeds the search with the analytic decay estimate, then verifies with the
    exact marginal and grows geometrically up to ``cap``.
    """
    kappa = phonon_decay_coefficient(beta_vec, params.omega_com)
    if kappa <= 0:
        raise ValueError(
            f"phonon decay coefficient {kappa:.3e} is not positive; the untruncated "
            f"ensemble does not normalise for beta vector {beta_vec}")
    # e^{-kappa * 0.95 n} < tol  up to prefactors; pad by 25% for coupling spread
    estimate = int(math.ceil(1.25 * (-math.log(leakage_tol) + 4.0)
                             / (kappa * (1.0 - constants.TRUNCATION_TAIL_FRACTION))))
    n_try = max(start, estimate, 8)
    while True:
        if n_try > cap:
            raise TruncationUnconverged(math.nan, leakage_tol, n_try)
        trial = params.replace(n_max=int(n_try))
        basis = dicke.basis_for(trial)
        h = dicke.build_hamiltonian(trial)
        charges = dicke.endpoint_charges(trial)
        ops = tuple(op for _, op in charges)
        ids = tuple(cid for cid, _ in charges)
        if set(ids) != set(beta_vec.charge_ids):
            raise ValueError(
                f"beta vector charges {beta_vec.charge_ids} do not match the "
                f"endpoint charges {ids} of alpha = {params.alpha}")
        ordered = tuple(ops[ids.index(cid)] for cid in beta_vec.charge_ids)
        try:
            build_gge(beta_vec, h, ordered, phonon_numbers=basis.phonon_numbers,
                      leakage_tol=leakage_tol)
            return int(n_try)
        except TruncationUnconverged as exc:
            n_try = max(int(math.ceil(growth * n_try)), exc.suggested_n_max)
