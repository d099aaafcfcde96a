"""Shared numerical tolerances.

Every threshold used by both the library and its test suite lives here so the
two cannot drift apart.  The linear-algebra tolerances are roughly 1e3 times
double-precision epsilon, scaled up where dimension growth accumulates
rounding.
"""

import math

# qlinalg
HERMITICITY_ATOL = 1e-12        # max |A - A^H| admitted at construction
UNITARITY_TOL = 1e-10           # max |U^H U - I|
RECONSTRUCTION_RTOL = 1e-9      # max |V diag(w) V^H - A| relative to max|A|
COMMUTATOR_RTOL = 1e-10         # "commutes numerically" scale
PHASE_SIGNIFICANT_RTOL = 1e-8   # first eigenvector component counted as nonzero

# gge
CHARGE_ADMISSION_RTOL = 1e-9    # commutator norm per max-norm product
CHARGE_CLUSTER_TOL = 1e-8       # eigenvalue gap that separates charge sectors
ENSEMBLE_PROB_SUM_TOL = 1e-12
TRUNCATION_LEAKAGE_TOL = 1e-10  # GGE weight allowed in the top phonon band
TRUNCATION_TAIL_FRACTION = 0.05
SOLVE_BETAS_RTOL = 1e-8

# tpm
JOINT_PROB_SUM_TOL = 1e-10
ATOM_MERGE_TOL = 1e-9           # work values closer than this merge into one atom
ATOM_MATCH_TOL = 5e-9           # FW/BW atom pairing tolerance in TCR checks

# qfr
PROB_FLOOR = 1e-14              # below this an atom is support noise, not a ratio
TCR_PASS_RESIDUAL = 1e-8

# reveal
REVEAL_PASS_RMS = 1e-6
REVEAL_FAIL_RMS = 1e-3
REVEAL_MAX_EVALS = 500

# units: energies in eps = hbar * 2pi MHz, times in tau = hbar/eps
TAU_PER_MICROSECOND = math.tau
