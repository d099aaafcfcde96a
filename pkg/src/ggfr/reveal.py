"""Revealing missing charges from non-equilibrium work statistics.

Each of the N_P protocol datasets must satisfy the integral fluctuation
relation with one shared set of generalised inverse temperatures:

    r_j(beta) = ln <e^{-W(beta)}>_j + dF(beta) = 0,   j = 1..N_P,

where W is recomputed from the raw (E, q) records of dataset j with the trial
betas (beta' tied to beta) and dF comes from the known model pair's joint
spectra restricted to the hypothesised charge set.  A residual vector that no
admissible beta can flatten signals a missing charge.

The bare system above has an exact spurious root at beta = 0 (every record
reweighted by 1, both partition functions equal the dimension), so the fit is
augmented with the ensemble's defining moment conditions: the first
measurement's marginal must reproduce the trial GGE's averages of H and the
hypothesised charges.  The report still carries the fluctuation-relation
residuals; the moment conditions only steer the fit off the trivial root.

The companion constancy test asks whether the marginal TCR is satisfiable for
*some* constant on the right-hand side: records are grouped into classes by
their work-determining label differences (a trial-independent partition), and
the class log-ratios must be an affine function of the trial betas.  That is
an exact weighted linear regression; residual spread marks the excluded
charge as dynamical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import constants
from .gge import BetaVector, JointEigenbasis
from .tpm import JointOutcomeDistribution

VERDICT_COMPLETE = "Complete"
VERDICT_INCOMPLETE = "Incomplete"
VERDICT_INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class RevealThresholds:
    """Exact-data verdict thresholds (rms of the residual vector)."""

    pass_rms: float = constants.REVEAL_PASS_RMS
    fail_rms: float = constants.REVEAL_FAIL_RMS


@dataclass(frozen=True)
class RevealInput:
    """Datasets plus the known model pair used for dF evaluation.

    ``hypothesis_ids`` is the charge set under test (possibly empty: standard
    work only).  ``bw_datasets``, aligned with ``datasets``, are required only
    by the charge-constancy test.
    """

    datasets: tuple[JointOutcomeDistribution, ...]
    hypothesis_ids: tuple[str, ...]
    initial_spectrum: JointEigenbasis
    final_spectrum: JointEigenbasis
    bw_datasets: tuple[JointOutcomeDistribution, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "hypothesis_ids", tuple(self.hypothesis_ids))
        if not self.datasets:
            raise ValueError("at least one protocol dataset is required")
        for cid in self.hypothesis_ids:
            if cid not in self.initial_spectrum.charge_ids:
                raise ValueError(
                    f"hypothesised charge {cid!r} missing from the initial spectrum")
            for jd in self.datasets:
                if cid not in jd.initial_charge_ids:
                    raise ValueError(f"dataset records lack charge column {cid!r}")
        if self.bw_datasets is not None:
            bw = tuple(self.bw_datasets)
            if len(bw) != len(self.datasets):
                raise ValueError("bw_datasets must align one-to-one with datasets")
            object.__setattr__(self, "bw_datasets", bw)

    @property
    def n_protocols(self) -> int:
        return len(self.datasets)


@dataclass(frozen=True)
class RevealReport:
    """Fit outcome: betas, per-protocol residuals, and the completeness verdict."""

    fitted_betas: BetaVector
    residuals: np.ndarray
    rms_residual: float
    verdict: str
    converged: bool
    iterations: int
    message: str
    thresholds: RevealThresholds = field(default_factory=RevealThresholds)

    def to_dict(self) -> dict:
        return {
            "fitted_beta": self.fitted_betas.beta,
            "fitted_charge_betas": dict(self.fitted_betas.charge_betas),
            "residuals": [float(r) for r in self.residuals],
            "rms_residual": self.rms_residual,
            "verdict": self.verdict,
            "converged": self.converged,
            "iterations": self.iterations,
            "message": self.message,
        }


# ---------------------------------------------------------------------------
# compiled residual machinery

def _spectrum_terms(basis: JointEigenbasis, ids: tuple[str, ...]) -> np.ndarray:
    """(1+K, dim) rows: E then hypothesised charge values (zero row if the
    charge does not exist on this side, i.e. it drops out of that Z)."""
    rows = [basis.energies]
    for cid in ids:
        if cid in basis.charge_ids:
            rows.append(basis.charge_values[basis.charge_ids.index(cid)])
        else:
            rows.append(np.zeros(basis.dim))
    return np.vstack(rows)


def _dataset_terms(jd: JointOutcomeDistribution, ids: tuple[str, ...]):
    """Per-side label tables plus compressed positive-probability records."""
    t_ini = [jd.initial_energies]
    for cid in ids:
        t_ini.append(jd.initial_charge_values[jd.initial_charge_ids.index(cid)])
    t_fin = [jd.final_energies]
    for cid in ids:
        if cid in jd.final_charge_ids:
            t_fin.append(jd.final_charge_values[jd.final_charge_ids.index(cid)])
        else:
            t_fin.append(np.zeros(jd.final_energies.size))
    ii, ff = np.nonzero(jd.prob)
    w = jd.prob[ii, ff]
    return np.vstack(t_ini), np.vstack(t_fin), ii, ff, np.log(w), w


class _Compiled:
    """Residual/Jacobian evaluator over compressed records and model spectra.

    ``residuals``/``jacobian`` implement the bare fluctuation-relation system;
    the ``augmented_*`` variants append the pooled moment-matching conditions
    (observed first-measurement averages vs trial-GGE averages, scaled by the
    spectral width per component) that remove the trivial beta = 0 root.
    """

    def __init__(self, inp: RevealInput):
        self.ids = inp.hypothesis_ids
        self.spec_ini = _spectrum_terms(inp.initial_spectrum, self.ids)
        self.spec_fin = _spectrum_terms(inp.final_spectrum, self.ids)
        self.sets = [_dataset_terms(jd, self.ids) for jd in inp.datasets]
        self.widths = np.maximum(self.spec_ini.max(axis=1) - self.spec_ini.min(axis=1),
                                 np.finfo(float).tiny)
        self.refresh_observed_moments()

    def refresh_observed_moments(self) -> None:
        """Pooled data averages of (E, q) from the first measurement marginals."""
        totals = np.zeros(self.spec_ini.shape[0])
        for t_i, _, ii, _, _, w in self.sets:
            marginal = np.bincount(ii, weights=w, minlength=t_i.shape[1])
            totals += t_i @ marginal
        self.observed_moments = totals / len(self.sets)

    def delta_f(self, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
        """dF(x) = ln Z - ln Z', its gradient, and the trial-GGE moments."""
        grad = np.zeros(x.size)
        logs, means, covs = [], [], []
        for sign, terms in ((-1.0, self.spec_ini), (+1.0, self.spec_fin)):
            a = x @ terms
            shift = a.min()
            weights = np.exp(-(a - shift))
            z = weights.sum()
            p = weights / z
            mean = terms @ p
            logs.append(math.log(z) - shift)
            means.append(mean)
            centred = terms - mean[:, None]
            covs.append((centred * p) @ centred.T)
            grad += sign * mean
        return logs[0] - logs[1], grad, means[0], covs[0]

    def residuals(self, x: np.ndarray) -> np.ndarray:
        df = self.delta_f(x)[0]
        out = np.empty(len(self.sets))
        for j, (t_i, t_f, ii, ff, logw, _) in enumerate(self.sets):
            expo = logw + (x @ t_i)[ii] - (x @ t_f)[ff]
            m = expo.max()
            out[j] = m + math.log(np.exp(expo - m).sum()) + df
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        _, dgrad, _, _ = self.delta_f(x)
        jac = np.empty((len(self.sets), x.size))
        for j, (t_i, t_f, ii, ff, logw, _) in enumerate(self.sets):
            expo = logw + (x @ t_i)[ii] - (x @ t_f)[ff]
            weights = np.exp(expo - expo.max())
            total = weights.sum()
            for c in range(x.size):
                num = weights @ (t_f[c][ff] - t_i[c][ii])
                jac[j, c] = -num / total + dgrad[c]
        return jac

    def augmented_residuals(self, x: np.ndarray) -> np.ndarray:
        _, _, mean_ini, _ = self.delta_f(x)
        moment = (mean_ini - self.observed_moments) / self.widths
        return np.concatenate([self.residuals(x), moment])

    def augmented_jacobian(self, x: np.ndarray) -> np.ndarray:
        _, _, _, cov_ini = self.delta_f(x)
        moment_jac = -cov_ini / self.widths[:, None]
        return np.vstack([self.jacobian(x), moment_jac])

    def moment_newton(self, x0: np.ndarray, *, max_iter: int = 100,
                      rtol: float = 1e-12) -> tuple[np.ndarray, int]:
        """Damped Newton on the strictly convex moment-matching conditions.

        Globally convergent start for the augmented fit; on failure the best
        iterate is returned (the trust-region stage takes over from there).
        """
        target = self.observed_moments
        x = np.array(x0, dtype=float)
        iters = 0
        for iters in range(1, max_iter + 1):
            a = x @ self.spec_ini
            shift = a.min()
            weights = np.exp(-(a - shift))
            p = weights / weights.sum()
            mean = self.spec_ini @ p
            gap = (mean - target) / self.widths
            if np.max(np.abs(gap)) < rtol:
                break
            centred = self.spec_ini - mean[:, None]
            cov = (centred * p) @ centred.T
            ridge = 1e-14 * max(float(np.trace(cov)), 1.0)
            try:
                step = np.linalg.solve(cov + ridge * np.eye(cov.shape[0]),
                                       mean - target)
            except np.linalg.LinAlgError:
                break
            damping = 1.0
            base = float(gap @ gap)
            for _ in range(50):
                cand = x + damping * step
                a_c = cand @ self.spec_ini
                w_c = np.exp(-(a_c - a_c.min()))
                mean_c = self.spec_ini @ (w_c / w_c.sum())
                gap_c = (mean_c - target) / self.widths
                if float(gap_c @ gap_c) < base:
                    x = cand
                    break
                damping *= 0.5
            else:
                break
        return x, iters


def _x_of(beta_vec: BetaVector, ids: tuple[str, ...]) -> np.ndarray:
    if beta_vec.charge_ids != ids:
        raise ValueError(
            f"beta vector covers {beta_vec.charge_ids}, expected exactly {ids}")
    return beta_vec.as_array()


def _beta_of(x: np.ndarray, ids: tuple[str, ...]) -> BetaVector:
    return BetaVector(float(x[0]), tuple(zip(ids, (float(v) for v in x[1:]))))


def residuals(beta_trial: BetaVector, inp: RevealInput) -> np.ndarray:
    """r_j = ln <e^{-W(beta_trial)}>_j + dF(beta_trial), one entry per protocol."""
    compiled = _Compiled(inp)
    return compiled.residuals(_x_of(beta_trial, inp.hypothesis_ids))


def residual_gradient(beta_trial: BetaVector, inp: RevealInput) -> np.ndarray:
    """Analytic gradient of sum_j r_j^2; target of the finite-difference
    gradient-check invariant."""
    compiled = _Compiled(inp)
    x = _x_of(beta_trial, inp.hypothesis_ids)
    return 2.0 * compiled.jacobian(x).T @ compiled.residuals(x)


def _verdict(rms: float, converged: bool, thresholds: RevealThresholds) -> str:
    if not converged:
        return VERDICT_INCONCLUSIVE
    if rms < thresholds.pass_rms:
        return VERDICT_COMPLETE
    if rms > thresholds.fail_rms:
        return VERDICT_INCOMPLETE
    return VERDICT_INCONCLUSIVE


def fit_betas(inp: RevealInput, initial_guess: BetaVector, *,
              thresholds: RevealThresholds | None = None,
              max_evals: int = constants.REVEAL_MAX_EVALS) -> RevealReport:
    """Least-squares fit of the trial betas to all protocol datasets.

    Trust-region (scipy TRF) with the analytic Jacobian on the augmented
    system; deterministic given the guess and the data, iteration count
    bounded by ``max_evals``.  The reported residuals and the verdict use the
    fluctuation-relation residuals only.  Solver divergence yields an
    Inconclusive verdict, never a silent pass.
    """
    thresholds = thresholds or RevealThresholds()
    if inp.n_protocols < len(inp.hypothesis_ids) + 2:
        raise ValueError(
            f"need at least {len(inp.hypothesis_ids) + 2} protocols to "
            f"overdetermine {len(inp.hypothesis_ids)} charges, got {inp.n_protocols}")
    compiled = _Compiled(inp)
    x0 = _x_of(initial_guess, inp.hypothesis_ids)
    x1, newton_iters = compiled.moment_newton(x0)
    result = least_squares(compiled.augmented_residuals, x1,
                           jac=compiled.augmented_jacobian, method="trf",
                           max_nfev=max_evals, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    r = compiled.residuals(result.x)
    rms = float(np.sqrt(np.mean(r ** 2)))
    converged = bool(result.status > 0)
    return RevealReport(
        fitted_betas=_beta_of(result.x, inp.hypothesis_ids),
        residuals=r, rms_residual=rms,
        verdict=_verdict(rms, converged, thresholds),
        converged=converged, iterations=newton_iters + int(result.nfev),
        message=str(result.message), thresholds=thresholds)


# ---------------------------------------------------------------------------
# bootstrap verdicts and parameter bands for sampled data

@dataclass(frozen=True)
class BootstrapReport:
    """Resampling summary for finite-shot datasets.

    The null band is the centered lack-of-fit band: rms of (r_b - r_obs)
    evaluated at the observed fit, so sampling noise alone sets the scale and
    a genuine misfit still gets rejected.
    """

    observed: RevealReport
    fitted_samples: np.ndarray       # (B, 1+K) refitted betas
    param_low: np.ndarray            # 2.5th percentile per parameter
    param_high: np.ndarray           # 97.5th percentile per parameter
    rms_null_95: float
    verdict: str

    def covers(self, truth: BetaVector) -> bool:
        t = truth.as_array()
        return bool(np.all((self.param_low <= t) & (t <= self.param_high)))


def _resample_weights(jd: JointOutcomeDistribution, rng) -> np.ndarray:
    """Multinomial resample of the positive-probability cells, as weights."""
    if jd.n_shots is None:
        raise ValueError("bootstrap requires sampled datasets (n_shots set)")
    p = jd.prob[jd.prob > 0]
    counts = rng.multinomial(jd.n_shots, p / p.sum())
    return counts / jd.n_shots


def bootstrap_fit(inp: RevealInput, initial_guess: BetaVector, *,
                  n_resamples: int = 1000, seed: int = 0,
                  thresholds: RevealThresholds | None = None) -> BootstrapReport:
    """Refit every multinomial resample of the shot records (warm-started).

    Verdict: Complete if the observed rms sits inside the 95% null band;
    Incomplete if it clearly exceeds both the band and the exact-data fail
    threshold; Inconclusive otherwise.
    """
    thresholds = thresholds or RevealThresholds()
    observed = fit_betas(inp, initial_guess, thresholds=thresholds)
    compiled = _Compiled(inp)
    x_hat = observed.fitted_betas.as_array()
    r_obs = compiled.residuals(x_hat)

    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2 ** 64 - 1)))
    fitted = np.empty((n_resamples, x_hat.size))
    null_rms = np.empty(n_resamples)
    base_sets = list(compiled.sets)
    for b in range(n_resamples):
        sets = []
        for jd, (t_i, t_f, ii, ff, _, _) in zip(inp.datasets, base_sets):
            w = _resample_weights(jd, rng)
            keep = w > 0
            sets.append((t_i, t_f, ii[keep], ff[keep], np.log(w[keep]), w[keep]))
        compiled.sets = sets
        compiled.refresh_observed_moments()
        r_b = compiled.residuals(x_hat)
        null_rms[b] = float(np.sqrt(np.mean((r_b - r_obs) ** 2)))
        result = least_squares(compiled.augmented_residuals, x_hat,
                               jac=compiled.augmented_jacobian, method="trf",
                               max_nfev=100, xtol=1e-12, ftol=1e-12, gtol=1e-12)
        fitted[b] = result.x
    compiled.sets = base_sets
    compiled.refresh_observed_moments()

    rms_null_95 = float(np.percentile(null_rms, 95.0))
    if observed.rms_residual <= rms_null_95:
        verdict = VERDICT_COMPLETE
    elif observed.rms_residual > max(2.0 * rms_null_95, thresholds.fail_rms):
        verdict = VERDICT_INCOMPLETE
    else:
        verdict = VERDICT_INCONCLUSIVE
    return BootstrapReport(
        observed=observed, fitted_samples=fitted,
        param_low=np.percentile(fitted, 2.5, axis=0),
        param_high=np.percentile(fitted, 97.5, axis=0),
        rms_null_95=rms_null_95, verdict=verdict)


# ---------------------------------------------------------------------------
# charge-constancy test (marginal TCR satisfiability)

def _difference_classes(jd: JointOutcomeDistribution, ids: tuple[str, ...],
                        excluded: str):
    """Group records by the label differences entering the marginal work.

    The partition is trial-independent: records sharing the difference vector
    d = (E'_f - E_i, {q'_k,f - q_k,i}, k in ids) always share one marginal
    work atom.  Returns (class difference rows, class probabilities).
    """
    if excluded in ids:
        raise ValueError("the excluded charge cannot be part of the trial set")
    t_i, t_f, ii, ff, _, w = _dataset_terms(jd, ids)
    d = (t_f[:, ff] - t_i[:, ii]).T          # (n_records, 1+K)
    rows, inverse = np.unique(d, axis=0, return_inverse=True)
    probs = np.bincount(inverse, weights=w, minlength=rows.shape[0])
    return rows, probs


def _ratio_classes(fw: JointOutcomeDistribution, bw: JointOutcomeDistribution,
                   ids: tuple[str, ...], excluded: str, floor: float):
    """Matched FW/BW classes: difference rows d, log-ratio offsets a, weights,
    plus the unmatched probability mass."""
    rows_fw, p_fw = _difference_classes(fw, ids, excluded)
    rows_bw, p_bw = _difference_classes(bw, ids, excluded)
    bw_index = {tuple(row): k for k, row in enumerate(-rows_bw)}
    matched_bw = np.zeros(rows_bw.shape[0], dtype=bool)
    d_rows, offsets, weights = [], [], []
    mass = 0.0
    for c, row in enumerate(rows_fw):
        k = bw_index.get(tuple(row))
        if k is None:
            if p_fw[c] > floor:
                mass += float(p_fw[c])
            continue
        matched_bw[k] = True
        pf, pb = float(p_fw[c]), float(p_bw[k])
        if min(pf, pb) <= floor:
            if max(pf, pb) > floor:
                mass += max(pf, pb)
            continue
        d_rows.append(row)
        offsets.append(math.log(pf) - math.log(pb))
        weights.append(0.5 * (pf + pb))
    mass += float(p_bw[(~matched_bw) & (p_bw > floor)].sum())
    return (np.asarray(d_rows, dtype=float).reshape(len(d_rows), len(ids) + 1),
            np.asarray(offsets), np.asarray(weights), mass)


def charge_constancy_test(inp: RevealInput, excluded_charge: str,
                          initial_guess: BetaVector, *,
                          thresholds: RevealThresholds | None = None,
                          floor: float = constants.PROB_FLOOR) -> RevealReport:
    """Decide whether the excluded charge stays constant over the protocol class.

    The marginal TCR with a free right-hand constant demands that the class
    log-ratios ln P_FW(c) - ln P_BW(c-bar) be affine in the trial betas:
    a_c = d_c . x + const.  Fitting x is an exact weighted linear regression
    (per-protocol intercepts); its residual spread plus any unmatched support
    mass gives the per-protocol residuals.  Verdict Complete = conserved over
    the protocol class; Incomplete = dynamical.  Requires paired FW/BW
    datasets.  ``initial_guess`` fixes the trial charge layout.
    """
    thresholds = thresholds or RevealThresholds()
    if inp.bw_datasets is None:
        raise ValueError("charge_constancy_test needs paired bw_datasets")
    ids = inp.hypothesis_ids
    _x_of(initial_guess, ids)  # layout check
    for jd in inp.datasets:
        if excluded_charge not in jd.initial_charge_ids:
            raise KeyError(f"charge {excluded_charge!r} not recorded in a FW dataset")

    classes = [_ratio_classes(fw, bw, ids, excluded_charge, floor)
               for fw, bw in zip(inp.datasets, inp.bw_datasets)]

    # weighted regression a_c ~ d_c . x + intercept_j, centered per protocol
    design, target, weight = [], [], []
    for d_rows, offsets, weights, _ in classes:
        if d_rows.shape[0] == 0:
            continue
        wn = weights / weights.sum()
        d_centred = d_rows - wn @ d_rows
        a_centred = offsets - wn @ offsets
        sw = np.sqrt(wn)
        design.append(d_centred * sw[:, None])
        target.append(a_centred * sw)
    if design:
        x, *_ = np.linalg.lstsq(np.vstack(design), np.concatenate(target), rcond=None)
    else:
        x = initial_guess.as_array()

    def spread(d_rows, offsets, weights, mass) -> float:
        if d_rows.shape[0] == 0:
            return mass
        wn = weights / weights.sum()
        rho = offsets - d_rows @ x
        mean = float(wn @ rho)
        return float(np.sqrt(wn @ (rho - mean) ** 2)) + mass

    r = np.array([spread(*cls) for cls in classes])
    rms = float(np.sqrt(np.mean(r ** 2)))
    return RevealReport(
        fitted_betas=_beta_of(x, ids),
        residuals=r, rms_residual=rms,
        verdict=_verdict(rms, True, thresholds),
        converged=True, iterations=1,
        message="closed-form weighted regression over label-difference classes",
        thresholds=thresholds)
