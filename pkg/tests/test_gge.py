import numpy as np
import pytest

import support
from ggfr import constants
from ggfr.dicke import DickeParams, basis_for, build_charge_q, build_hamiltonian
from ggfr.errors import (
    MaxIterationsExceeded, NonCommutingCharge, TargetOutsideSpectrum,
    TruncationUnconverged,
)
from ggfr.gge import (
    BetaVector, auto_n_max, build_gge, build_gge_from_basis, gge_average,
    joint_eigenbasis, moments, phonon_decay_coefficient, phonon_marginal,
    solve_betas_from_averages, truncation_leakage,
)
from ggfr.qlinalg import HermitianOperator


def toy_model(g=0.0, n_max=1):
    p = DickeParams(1, 3.0, 10.0, g, 0.0, n_max)
    basis = basis_for(p)
    return build_hamiltonian(p), build_charge_q(basis), basis


def test_beta_vector_validation():
    bv = BetaVector(0.1, (("Q", 0.3),))
    assert bv.charge_ids == ("Q",)
    assert np.array_equal(bv.as_array(), [0.1, 0.3])
    assert bv.value_of("Q") == 0.3
    with pytest.raises(KeyError):
        bv.value_of("missing")
    with pytest.raises(ValueError, match="duplicate"):
        BetaVector(0.1, (("Q", 0.1), ("Q", 0.2)))
    with pytest.raises(ValueError, match="finite"):
        BetaVector(float("nan"))


def test_infinite_temperature_uniform():
    h, q, _ = toy_model()
    ens = build_gge(BetaVector(0.0, (("Q", 0.0),)), h, (q,))
    assert np.allclose(ens.probabilities, 0.25)
    assert np.isclose(np.exp(ens.log_z), 4.0)
    assert np.isclose(ens.gen_free_energy, -np.log(4.0))


def test_four_term_direct_sum_oracle():
    h, q, _ = toy_model()
    beta, beta_q = 0.1, 0.3
    energies = np.array([-5.0, -2.0, 5.0, 8.0])
    charges = np.array([0.0, 1.0, 1.0, 2.0])
    z = np.exp(-beta * energies - beta_q * charges).sum()
    ens = build_gge(BetaVector(beta, (("Q", beta_q),)), h, (q,))
    assert np.isclose(ens.log_z, np.log(z), rtol=1e-14)
    expected_p = np.exp(-beta * energies - beta_q * charges) / z
    assert np.allclose(ens.probabilities, expected_p, rtol=1e-13)


@pytest.mark.parametrize("beta_q, n_max", [(0.3, 80), (-0.1, 210)])
def test_reference_initial_states_build(beta_q, n_max):
    # the two N = 7 initial-state parameter pairs used throughout the figures
    p = DickeParams(7, 3.0, 10.0, 2.0, 0.0, n_max)
    basis = basis_for(p)
    h = build_hamiltonian(p)
    q = build_charge_q(basis)
    ens = build_gge(BetaVector(0.1, (("Q", beta_q),)), h, (q,),
                    phonon_numbers=basis.phonon_numbers)
    assert np.isclose(ens.probabilities.sum(), 1.0, atol=1e-12)


def test_gge_average_basics():
    h, q, _ = toy_model()
    bv = BetaVector(0.0, (("Q", 0.0),))
    ens = build_gge(bv, h, (q,))
    assert np.isclose(gge_average(ens, np.full(4, 3.7)), 3.7)
    assert np.isclose(gge_average(ens, ens.basis.charge_values[0]), 1.0)
    with pytest.raises(ValueError, match="length"):
        gge_average(ens, np.ones(3))


def test_low_temperature_limit_projects_ground_state():
    h, q, _ = toy_model(g=2.0, n_max=3)
    ens = build_gge(BetaVector(50.0, (("Q", 0.0),)), h, (q,))
    ground = ens.basis.energies[0]
    assert np.isclose(gge_average(ens, ens.basis.energies), ground, atol=1e-10)


def test_non_commuting_charge_rejected():
    p = DickeParams(1, 3.0, 10.0, 2.0, 0.5, 2)
    h = build_hamiltonian(p)
    q = build_charge_q(basis_for(p))
    with pytest.raises(NonCommutingCharge) as err:
        build_gge(BetaVector(0.1, (("Q", 0.3),)), h, (q,))
    assert err.value.pair == ("H", "Q")
    assert err.value.norm > err.value.limit


def test_charge_count_mismatch():
    h, q, _ = toy_model()
    with pytest.raises(ValueError, match="charge"):
        build_gge(BetaVector(0.1, (("Q", 0.3),)), h, ())


def test_partition_function_convexity():
    h, q, _ = toy_model(g=2.0, n_max=6)
    basis = joint_eigenbasis(h, (q,), ("Q",))
    rng = np.random.default_rng(4)
    for _ in range(10):
        bv = BetaVector(rng.uniform(-0.3, 0.5), (("Q", rng.uniform(-0.3, 0.5)),))
        ens = build_gge_from_basis(bv, basis)
        _, cov = moments(ens)
        eigs = np.linalg.eigvalsh(cov)
        assert eigs.min() > -1e-10


def test_free_energy_additivity_two_blocks():
    # block-diagonal H with sector-constant charge: Z = Z1 + Z2 with each
    # block weighted by its charge value
    h1 = np.diag([0.0, 1.0])
    h2 = np.diag([2.0, 3.5])
    h = HermitianOperator(np.block([[h1, np.zeros((2, 2))],
                                    [np.zeros((2, 2)), h2]]))
    q = HermitianOperator(np.diag([1.0, 1.0, 4.0, 4.0]))
    beta, bq = 0.7, 0.2
    ens = build_gge(BetaVector(beta, (("Q", bq),)), h, (q,))
    z1 = np.exp(-beta * np.diagonal(h1) - bq * 1.0).sum()
    z2 = np.exp(-beta * np.diagonal(h2) - bq * 4.0).sum()
    assert np.isclose(np.exp(ens.log_z), z1 + z2, rtol=1e-13)


def test_monotone_truncation():
    beta_vec = BetaVector(0.12, (("Q", 0.25),))
    zs = []
    for n_max in (6, 10, 14, 18, 22):
        p = DickeParams(1, 3.0, 10.0, 2.0, 0.0, n_max)
        ens = build_gge(beta_vec, build_hamiltonian(p),
                        (build_charge_q(basis_for(p)),))
        zs.append(np.exp(ens.log_z))
    diffs = np.diff(zs)
    assert np.all(diffs > -1e-12)
    assert diffs[-1] < diffs[0]  # Cauchy-style shrinking increments


def test_truncation_guard_raises_and_suggests():
    p = DickeParams(1, 3.0, 10.0, 2.0, 0.0, 8)
    basis = basis_for(p)
    with pytest.raises(TruncationUnconverged) as err:
        build_gge(BetaVector(0.05, (("Q", -0.05),)),
                  build_hamiltonian(p), (build_charge_q(basis),),
                  phonon_numbers=basis.phonon_numbers)
    assert err.value.leakage > constants.TRUNCATION_LEAKAGE_TOL
    assert err.value.suggested_n_max > 8


def test_phonon_marginal_and_leakage():
    p = DickeParams(1, 3.0, 10.0, 0.0, 0.0, 30)
    basis = basis_for(p)
    ens = build_gge(BetaVector(0.4, (("Q", 0.0),)),
                    build_hamiltonian(p), (build_charge_q(basis),),
                    phonon_numbers=basis.phonon_numbers)
    marginal = phonon_marginal(ens, basis.phonon_numbers)
    assert np.isclose(marginal.sum(), 1.0, atol=1e-12)
    # decoupled model: marginal is geometric with ratio exp(-beta*omega_com)
    ratio = marginal[1:6] / marginal[0:5]
    assert np.allclose(ratio, np.exp(-0.4 * 3.0), rtol=1e-10)
    assert truncation_leakage(ens, basis.phonon_numbers) < 1e-12


def test_phonon_decay_coefficient_and_auto_n_max():
    assert np.isclose(
        phonon_decay_coefficient(BetaVector(0.1, (("Q", 0.3),)), 3.0), 0.6)
    assert np.isclose(
        phonon_decay_coefficient(BetaVector(0.1, (("Qprime", 0.1),)), 3.0), 0.2)
    with pytest.raises(ValueError, match="not positive"):
        auto_n_max(DickeParams(1, 3.0, 10.0, 1.0, 0.5, 1), BetaVector(0.0))
    p = DickeParams(1, 3.0, 10.0, 2.0, 0.0, 1)
    bv = BetaVector(0.1, (("Q", 0.3),))
    n = auto_n_max(p, bv)
    basis = basis_for(p.replace(n_max=n))
    ens = build_gge(bv, build_hamiltonian(p.replace(n_max=n)),
                    (build_charge_q(basis),), phonon_numbers=basis.phonon_numbers)
    assert truncation_leakage(ens, basis.phonon_numbers) < constants.TRUNCATION_LEAKAGE_TOL


def test_solver_round_trip():
    h, q, _ = toy_model(g=2.0, n_max=8)
    truth = BetaVector(0.17, (("Q", 0.21),))
    ens = build_gge(truth, h, (q,))
    targets = (gge_average(ens, ens.basis.energies),
               (gge_average(ens, ens.basis.charge_values[0]),))
    fitted = solve_betas_from_averages(targets, h, (q,),
                                       BetaVector(0.0, (("Q", 0.0),)))
    assert abs(fitted.beta - truth.beta) < 1e-8 * max(1, abs(truth.beta))
    assert abs(fitted.value_of("Q") - truth.value_of("Q")) < 1e-7


def test_solver_infinite_temperature_fixed_point():
    h, q, _ = toy_model(g=1.0, n_max=4)
    dim = h.dim
    targets = (float(np.trace(h.entries).real) / dim,
               (float(np.trace(q.entries).real) / dim,))
    fitted = solve_betas_from_averages(targets, h, (q,),
                                       BetaVector(0.05, (("Q", -0.03),)))
    assert abs(fitted.beta) < 1e-8
    assert abs(fitted.value_of("Q")) < 1e-7


def test_solver_rejects_boundary_targets():
    h, q, _ = toy_model(g=2.0, n_max=4)
    basis = joint_eigenbasis(h, (q,), ("Q",))
    ground = (float(basis.energies[0]), (float(basis.charge_values[0][0]),))
    with pytest.raises(TargetOutsideSpectrum):
        solve_betas_from_averages(ground, h, (q,), BetaVector(0.0, (("Q", 0.0),)))


def test_solver_max_iterations_carries_best():
    h, q, _ = toy_model(g=2.0, n_max=4)
    truth = BetaVector(0.4, (("Q", 0.2),))
    ens = build_gge(truth, h, (q,))
    targets = (gge_average(ens, ens.basis.energies),
               (gge_average(ens, ens.basis.charge_values[0]),))
    with pytest.raises(MaxIterationsExceeded) as err:
        solve_betas_from_averages(targets, h, (q,), BetaVector(0.0, (("Q", 0.0),)),
                                  max_iter=1)
    assert err.value.best is not None
    assert err.value.residual > 0


def test_random_instances_probability_sums():
    for inst in support.screened_instances(5, start_seed=40):
        assert np.isclose(inst.ens_fw.probabilities.sum(), 1.0, atol=1e-12)
        assert np.isclose(inst.ens_bw.probabilities.sum(), 1.0, atol=1e-12)
