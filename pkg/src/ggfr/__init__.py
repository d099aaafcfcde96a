"""Generalised Gibbs ensembles, quantum work statistics, and fluctuation
relations for the driven Dicke model, at exact-diagonalization scale.

Subpackages
-----------
qlinalg   dense Hermitian eigendecomposition, spectral propagators
dicke     Hamiltonian, charges, and truncated |J, Jz, n> basis
gge       generalised Gibbs ensembles and beta inversion
tpm       two-projective-measurement protocol engine and work PDFs
qfr       Tasaki-Crooks / Jarzynski relation checks (incl. marginal forms)
reveal    fitting betas to many protocols to expose missing charges
oracle    brute-force references used by the test suite
cli       config-driven batch scenarios with CSV/JSON outputs
"""

from .qlinalg import (
    HermitianOperator, SpectralData, UnitaryOperator,
    commutator_norm, eigh, max_norm, propagator,
)
from .dicke import (
    CHARGE_PARITY, CHARGE_Q, CHARGE_QPRIME, DickeBasis, DickeParams,
    basis_for, build_charge_q, build_charge_qprime, build_hamiltonian,
    build_parity, critical_coupling, endpoint_charges,
)
from .gge import (
    BetaVector, GgeEnsemble, JointEigenbasis, auto_n_max, build_gge,
    build_gge_from_basis, gge_average, joint_eigenbasis, moments,
    phonon_decay_coefficient, phonon_marginal, solve_betas_from_averages,
    truncation_leakage,
)
from .tpm import (
    BACKWARD, FORWARD, DiscreteDistribution, JointOutcomeDistribution,
    ProtocolStage, QuenchProtocol, default_tfin_grid_us, generalised_work_pdf,
    log_mean_exp_neg_generalised, log_mean_exp_neg_standard, marginal_work_pdf,
    merge_atoms, protocol_unitary, stage_spectra, standard_work_pdf,
    tpm_exact, tpm_sample, transition_matrix,
)
from .qfr import (
    QjeReport, TcrReport, check_marginal_tcr, check_qje, check_tcr,
    delta_gen_free_energy, delta_standard_free_energy, standard_tcr_report,
)
from .reveal import (
    BootstrapReport, RevealInput, RevealReport, RevealThresholds,
    bootstrap_fit, charge_constancy_test, fit_betas, residual_gradient,
    residuals,
)
from .errors import (
    ConfigError, EigensolverError, GgfrError, MaxIterationsExceeded,
    MemoryCapExceeded, NonCommutingCharge, TargetOutsideSpectrum,
    TruncationUnconverged,
)

__version__ = "0.1.0"
