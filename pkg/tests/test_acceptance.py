"""Acceptance criteria, one test per criterion, one pass line each.

Run with ``pytest tests/test_acceptance.py -v -s``.  Criterion 6 (full-scale
reference reproduction) is resource-guarded: set GGFR_FULL_SCALE=1 to run it
(several GB of memory, tens of minutes).
"""

import json
import math
import os

import numpy as np
import pytest

import support
from ggfr import constants, tpm
from ggfr.cli import main as cli_main
from ggfr.dicke import DickeParams
from ggfr.gge import (
    BetaVector, auto_n_max, build_gge_from_basis, truncation_leakage,
)
from ggfr.oracle import brute_force_tpm
from ggfr.qfr import (
    check_marginal_tcr, check_qje, check_tcr, delta_standard_free_energy,
    standard_tcr_report,
)
from ggfr.qlinalg import max_norm
from ggfr.reveal import (
    RevealInput, VERDICT_COMPLETE, VERDICT_INCOMPLETE, bootstrap_fit, fit_betas,
)
from ggfr.tpm import (
    generalised_work_pdf, log_mean_exp_neg_generalised, log_mean_exp_neg_standard,
    marginal_work_pdf, protocol_unitary, standard_work_pdf, tpm_exact,
    tpm_sample, transition_matrix,
)

US = constants.TAU_PER_MICROSECOND


def _pass(criterion, detail: str) -> None:
    print(f"[criterion {criterion}] PASS: {detail}")


def test_criterion_1_qje_identity():
    """|<e^-W> e^dF - 1| < 1e-9 over 50 seeded instances x 5 beta' values."""
    worst = 0.0
    instances = support.screened_instances(50, start_seed=1000)
    for inst in instances:
        jd = inst.jd_fw()
        for factor in (0.5, 0.8, 1.0, 1.25, 1.6):
            beta_fin = inst.beta_fin.scaled(factor)
            pdf = generalised_work_pdf(jd, inst.beta_ini, beta_fin)
            ens_fin = build_gge_from_basis(beta_fin, inst.basis_fin)
            df = ens_fin.gen_free_energy - inst.ens_fw.gen_free_energy
            err = check_qje(pdf, df).relative_error
            worst = max(worst, err)
            assert err < 1e-9
    _pass(1, f"50 instances x 5 beta' grids, worst |lhs/rhs - 1| = {worst:.2e}")


def test_criterion_2_generalised_tcr():
    """Per-atom TCR residual < 1e-8 with zero support mismatches."""
    worst = 0.0
    instances = support.screened_instances(50, start_seed=3000, require_gaps=True)
    for inst in instances:
        pdf_fw = generalised_work_pdf(inst.jd_fw(), inst.beta_ini, inst.beta_fin)
        pdf_bw = generalised_work_pdf(inst.jd_bw(), inst.beta_fin, inst.beta_ini)
        report = check_tcr(pdf_fw, pdf_bw, inst.delta_f())
        assert not report.support_mismatch
        assert report.max_residual < 1e-8
        worst = max(worst, report.max_residual)
    _pass(2, f"50 instances, worst per-atom residual = {worst:.2e}, 0 mismatches")


def test_criterion_3_oracle_equivalence():
    """tpm_exact vs brute-force double sum, atom for atom, 100 tiny cases."""
    worst = 0.0
    instances = support.screened_instances(100, start_seed=5000, n_ions_max=1,
                                           n_max_hi=5)
    for inst in instances:
        u = protocol_unitary(inst.protocol)
        engine = tpm_exact(inst.ens_fw, inst.protocol, final_basis=inst.basis_fin)
        oracle = brute_force_tpm(inst.basis_ini, inst.basis_fin, u, inst.beta_ini)
        assert np.array_equal(engine.initial_energies, oracle.initial_energies)
        assert np.array_equal(engine.final_energies, oracle.final_energies)
        assert np.array_equal(engine.initial_charge_values,
                              oracle.initial_charge_values)
        gap = float(np.max(np.abs(engine.prob - oracle.prob)))
        worst = max(worst, gap)
        assert gap < 1e-10
    _pass(3, f"100 tiny cases, worst record-probability gap = {worst:.2e}")


def test_criterion_4_double_stochasticity_and_unitarity():
    """Protocol unitaries and transition matrices meet their 1e-10 invariants."""
    worst_u, worst_pi = 0.0, 0.0
    for inst in support.screened_instances(20, start_seed=7000):
        u = protocol_unitary(inst.protocol)
        dev_u = max_norm(u.entries.conj().T @ u.entries - np.eye(u.dim))
        pi = transition_matrix(inst.ens_fw, u, inst.basis_fin)
        dev_pi = max(max_norm(pi.sum(axis=0) - 1.0), max_norm(pi.sum(axis=1) - 1.0))
        assert dev_u < constants.UNITARITY_TOL
        assert dev_pi < constants.JOINT_PROB_SUM_TOL
        worst_u, worst_pi = max(worst_u, dev_u), max(worst_pi, dev_pi)
    _pass(4, f"20 instances, worst |U^H U - I| = {worst_u:.2e}, "
             f"worst stochasticity deviation = {worst_pi:.2e}")


def _reduced_sweep(beta_q: float):
    """Reduced-scale reference sweep (N = 3), n_max via the convergence guard."""
    bv = BetaVector(0.1, (("Q", beta_q),))
    n_max = max(auto_n_max(DickeParams(3, 3.0, 10.0, 2.0, 0.0, 1), bv),
                auto_n_max(DickeParams(3, 3.0, 10.0, 1.0, 0.0, 1), bv))
    setup = support.fig_setup(3, n_max, beta_q=beta_q)
    phonons = setup["basis"].phonon_numbers
    assert truncation_leakage(setup["ens_fw"], phonons) < constants.TRUNCATION_LEAKAGE_TOL
    assert truncation_leakage(setup["ens_bw"], phonons) < constants.TRUNCATION_LEAKAGE_TOL

    df_gen = setup["ens_bw"].gen_free_energy - setup["ens_fw"].gen_free_energy
    log_rhs_std = -0.1 * delta_standard_free_energy(
        setup["basis_ini"].energies, setup["basis_fin"].energies, 0.1)
    grid_us = tpm.default_tfin_grid_us(points_per_decade=5)
    gen_errs, std_devs = [], []
    for t_us in grid_us:
        prot = support.fig_protocol(setup, t_us * US)
        jd = tpm_exact(setup["ens_fw"], prot, final_basis=setup["basis_fin"],
                       spectra=setup["spectra"])
        log_gen = log_mean_exp_neg_generalised(jd, setup["beta_ini"],
                                               setup["beta_fin"])
        gen_errs.append(abs(math.expm1(log_gen + df_gen)))
        log_std = log_mean_exp_neg_standard(jd, 0.1)
        std_devs.append((t_us, abs(math.expm1(log_std - log_rhs_std))))
    return n_max, gen_errs, std_devs


def test_criterion_5_reduced_scale_reference_sweep():
    """Generalised average constant and equal to exp(-dF) to 1e-8; standard
    average off by > 5% somewhere at t_fin >~ 0.1 us."""
    for beta_q in (0.3, -0.1):
        n_max, gen_errs, std_devs = _reduced_sweep(beta_q)
        assert max(gen_errs) < 1e-8
        late = [dev for t_us, dev in std_devs if t_us >= 0.1]
        assert max(late) > 0.05
        _pass(5, f"beta_q = {beta_q}: n_max(guard) = {n_max}, "
                 f"max |gen avg * e^dF - 1| = {max(gen_errs):.2e}, "
                 f"max standard deviation (t >= 0.1 us) = {max(late) * 100:.1f}%")


@pytest.mark.skipif(not os.environ.get("GGFR_FULL_SCALE"),
                    reason="full-scale run (N = 7, n_max = 800) is opt-in: "
                           "set GGFR_FULL_SCALE=1; needs several GB and tens "
                           "of minutes")
def test_criterion_6_full_scale_reference_sweep():
    """Full-scale sweep: generalised average constant to 1e-6; standard-work
    deviation peaks inside [10%, 60%] for t_fin >~ 0.1 us."""
    setup = support.fig_setup(7, 800)
    df_gen = setup["ens_bw"].gen_free_energy - setup["ens_fw"].gen_free_energy
    log_rhs_std = -0.1 * delta_standard_free_energy(
        setup["basis_ini"].energies, setup["basis_fin"].energies, 0.1)
    grid_us = tpm.default_tfin_grid_us(points_per_decade=4)
    gen_errs, late_devs = [], []
    for t_us in grid_us:
        prot = support.fig_protocol(setup, t_us * US)
        jd = tpm_exact(setup["ens_fw"], prot, final_basis=setup["basis_fin"],
                       spectra=setup["spectra"])
        log_gen = log_mean_exp_neg_generalised(jd, setup["beta_ini"],
                                               setup["beta_fin"])
        gen_errs.append(abs(math.expm1(log_gen + df_gen)))
        if t_us >= 0.1:
            log_std = log_mean_exp_neg_standard(jd, 0.1)
            late_devs.append(abs(math.expm1(log_std - log_rhs_std)))
    assert max(gen_errs) < 1e-6
    assert 0.10 <= max(late_devs) <= 0.60
    _pass(6, f"max gen deviation {max(gen_errs):.2e}, "
             f"peak standard deviation {max(late_devs) * 100:.1f}%")


def test_criterion_7_marginal_tcr():
    """Marginal TCR: conserving protocols pass < 1e-9; the reference protocol
    at 10 us fails > 1e-3; zero dwell passes."""
    def report_for(alpha_stages, t_us):
        setup = support.fig_setup(2, 64, alpha_stages=alpha_stages)
        jd_fw, jd_bw = support.fig_jds(setup, t_us * US)
        df = setup["ens_bw"].gen_free_energy - setup["ens_fw"].gen_free_energy
        pdf_fw = marginal_work_pdf(jd_fw, "Q", setup["beta_ini"], setup["beta_fin"])
        pdf_bw = marginal_work_pdf(jd_bw, "Q", setup["beta_fin"], setup["beta_ini"])
        return check_marginal_tcr(pdf_fw, pdf_bw, df, excluded_charge="Q")

    conserving = report_for((0.0, 0.0, 0.0), 10.0)
    assert conserving.max_residual < 1e-9 and conserving.passed
    zero_dwell = report_for((0.0, 0.5, 0.0), 0.0)
    assert zero_dwell.max_residual < 1e-9 and zero_dwell.passed
    dynamical = report_for((0.0, 0.5, 0.0), 10.0)
    assert dynamical.max_residual > 1e-3 and not dynamical.passed
    _pass(7, f"conserving residual = {conserving.max_residual:.2e}, zero-dwell "
             f"= {zero_dwell.max_residual:.2e}, dynamical = "
             f"{dynamical.max_residual:.2e}")


def test_criterion_8_reveal_round_trip():
    """Exact data recovers (0.1, 0.3) to 1e-4 relative (Complete); omitting Q
    is Incomplete; the sampled fit's bootstrap band covers the truth."""
    bv = BetaVector(0.1, (("Q", 0.3),))
    n_max = auto_n_max(DickeParams(3, 3.0, 10.0, 2.0, 0.0, 1), bv)
    setup = support.fig_setup(3, n_max)
    t_grid_us = (0.02, 0.08, 0.3, 1.024, 4.0)
    exact, sampled = [], []
    for t_us in t_grid_us:
        prot = support.fig_protocol(setup, t_us * US)
        exact.append(tpm_exact(setup["ens_fw"], prot, final_basis=setup["basis_fin"],
                               spectra=setup["spectra"]))
        sampled.append(tpm_sample(setup["ens_fw"], prot,
                                  final_basis=setup["basis_fin"],
                                  spectra=setup["spectra"],
                                  n_shots=10 ** 5, seed=2024))
    inp = RevealInput(tuple(exact), ("Q",), setup["basis_ini"], setup["basis_fin"])
    report = fit_betas(inp, BetaVector(0.0, (("Q", 0.0),)))
    assert report.verdict == VERDICT_COMPLETE
    assert abs(report.fitted_betas.beta - 0.1) <= 1e-4 * 0.1
    assert abs(report.fitted_betas.value_of("Q") - 0.3) <= 1e-4 * 0.3

    no_q = RevealInput(tuple(exact), (), setup["basis_ini"], setup["basis_fin"])
    incomplete = fit_betas(no_q, BetaVector(0.0))
    assert incomplete.verdict == VERDICT_INCOMPLETE
    # the long-dwell protocols carry the signal: |r_j| > 0.05 for t >~ 0.1 us
    long_dwell = np.abs(incomplete.residuals[np.asarray(t_grid_us) >= 0.1])
    assert long_dwell.max() > 0.05

    inp_sampled = RevealInput(tuple(sampled), ("Q",), setup["basis_ini"],
                              setup["basis_fin"])
    boot = bootstrap_fit(inp_sampled, BetaVector(0.0, (("Q", 0.0),)),
                         n_resamples=1000, seed=77)
    assert boot.covers(bv)
    assert boot.verdict == VERDICT_COMPLETE
    _pass(8, f"exact fit ({report.fitted_betas.beta:.6f}, "
             f"{report.fitted_betas.value_of('Q'):.6f}) Complete; omit-Q rms = "
             f"{incomplete.rms_residual:.2e} Incomplete; bootstrap band "
             f"[{boot.param_low[0]:.4f}, {boot.param_high[0]:.4f}] x "
             f"[{boot.param_low[1]:.4f}, {boot.param_high[1]:.4f}] covers truth")


def test_criterion_9_varying_charge_count():
    """Quench ending at alpha = 1/2 (no final charges): generalised TCR passes
    at criterion-2 thresholds; standard TCR has an atom residual > 1e-2."""
    bv = BetaVector(0.1, (("Q", 0.3),))
    n_max = max(auto_n_max(DickeParams(2, 3.0, 10.0, 2.0, 0.0, 1), bv),
                auto_n_max(DickeParams(2, 3.0, 10.0, 1.0, 0.5, 1), BetaVector(0.1)))
    setup = support.fig_setup(2, n_max, g_stages=(2.0, 1.0),
                              alpha_stages=(0.0, 0.5))
    assert setup["beta_fin"].charge_ids == ()  # K' = 0 endpoint
    t_tau = 1.024 * US
    jd_fw, jd_bw = support.fig_jds(setup, t_tau)
    df = setup["ens_bw"].gen_free_energy - setup["ens_fw"].gen_free_energy
    pdf_fw = generalised_work_pdf(jd_fw, setup["beta_ini"], setup["beta_fin"])
    pdf_bw = generalised_work_pdf(jd_bw, setup["beta_fin"], setup["beta_ini"])
    gen = check_tcr(pdf_fw, pdf_bw, df)
    assert gen.max_residual < 1e-8
    assert not gen.support_mismatch

    df_std = delta_standard_free_energy(setup["basis_ini"].energies,
                                        setup["basis_fin"].energies, 0.1)
    std = standard_tcr_report(standard_work_pdf(jd_fw), standard_work_pdf(jd_bw),
                              0.1, df_std)
    assert std.max_residual > 1e-2
    _pass(9, f"generalised max residual = {gen.max_residual:.2e} (0 mismatches), "
             f"standard max residual = {std.max_residual:.2e}")


DETERMINISM_CONFIG = """
n_ions = 1
omega_com = 3.0
omega_at = 10.0
n_max = 48
stages = 2.0 0.0 0.0 ; 3.0 0.5 {dwell} ; 1.0 0.0 0.0
beta = 0.1
beta_q = 0.3
t_grid_start_us = 0.01
t_grid_stop_us = 1.0
t_points_per_decade = 2
t_list_us = 0.02, 0.3, 1.024
shots = 2000
seed = 31
bootstrap_resamples = 25
reveal_mode = {reveal_mode}
n_max_sweep = 16, 24, 32
"""


def test_criterion_10_determinism(tmp_path):
    """Every scenario re-run with a fixed seed is byte-identical (manifests
    excluded)."""
    checked = []
    for scenario, dwell, mode in (
            ("qje-sweep", "var", "exact"), ("tcr-panels", "1.024", "exact"),
            ("marginal-tcr", "var", "exact"), ("reveal", "var", "exact"),
            ("reveal", "var", "sampled"), ("convergence-sweep", "var", "exact"),
            ("sample", "1.024", "exact")):
        tag = f"{scenario}-{mode}"
        cfg_path = tmp_path / f"{tag}.cfg"
        cfg_path.write_text(
            DETERMINISM_CONFIG.format(dwell=dwell, reveal_mode=mode),
            encoding="utf-8")
        out1 = tmp_path / f"{tag}-1"
        out2 = tmp_path / f"{tag}-2"
        for out in (out1, out2):
            code = cli_main([scenario, "--config", str(cfg_path), "--out", str(out)])
            assert code == 0
        names = sorted(p.name for p in out1.iterdir() if p.name != "manifest.json")
        assert names
        for name in names:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), \
                f"{tag}/{name} differs between identical runs"
        manifest1 = json.loads((out1 / "manifest.json").read_text())
        manifest2 = json.loads((out2 / "manifest.json").read_text())
        assert manifest1["files"] == manifest2["files"]
        checked.append(tag)
    _pass(10, f"byte-identical reruns for {', '.join(checked)}")
