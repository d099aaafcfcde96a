"""Run configuration: a flat UTF-8 "key = value" document.

Lines are ``key = value`` with ``#`` comments; unknown or duplicate keys are
errors (no silent typo absorption) and every key carries a unit annotation
that shows up in error messages.  Stage lists are semicolon-separated
``g alpha duration`` triples; exactly one duration may be the placeholder
``var`` in sweep scenarios, substituted by the dwell-time grid.  Omitted keys
fall back to the reference parameter block (N = 7, omega_com = 3, omega_at =
10, g = 2/3/1, alpha = 0/0.5/0, beta = 0.1, beta_q = 0.3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import constants
from .errors import ConfigError

SCENARIOS = ("qje_sweep", "tcr_panels", "marginal_tcr", "reveal",
             "convergence_sweep", "sample")
SWEEP_SCENARIOS = ("qje_sweep", "marginal_tcr", "reveal")

_DEFAULT_TEXT = {
    "n_ions": "7",
    "omega_com": "3.0",
    "omega_at": "10.0",
    "n_max": "auto",
    "stages": "2.0 0.0 0.0 ; 3.0 0.5 var ; 1.0 0.0 0.0",
    "duration_unit": "us",
    "beta": "0.1",
    "beta_q": "0.3",
    "beta_prime": "",
    "beta_prime_q": "",
    "beta_qprime": "",
    "beta_prime_qprime": "",
    "t_grid_start_us": "1e-3",
    "t_grid_stop_us": "1e2",
    "t_points_per_decade": "11",
    "t_list_us": "",
    "seed": "0",
    "shots": "100000",
    "excluded_charge": "Q",
    "reveal_hypothesis": "Q",
    "reveal_mode": "exact",
    "bootstrap_resamples": "1000",
    "mem_cap_gb": "4.0",
    "prune_below": "0.0",
    "n_max_sweep": "16, 24, 32, 48, 64",
    "scenario": "",
}

# key -> (unit, short description); doubles as the unknown-key gate
KEY_UNITS = {
    "scenario": ("-", f"one of {', '.join(SCENARIOS)}"),
    "n_ions": ("-", "number of ions N"),
    "omega_com": ("eps", "COM phonon frequency"),
    "omega_at": ("eps", "atomic splitting"),
    "n_max": ("-", "phonon cutoff, integer or 'auto'"),
    "stages": ("eps, -, us|tau", "semicolon-separated 'g alpha duration' triples"),
    "duration_unit": ("-", "'us' or 'tau' for stage durations"),
    "beta": ("1/eps", "inverse temperature of the FW initial state"),
    "beta_q": ("1/eps", "beta conjugate to Q (first stage must have alpha=0)"),
    "beta_qprime": ("1/eps", "beta conjugate to Qprime (first stage alpha=1)"),
    "beta_prime": ("1/eps", "BW-side beta (default: beta)"),
    "beta_prime_q": ("1/eps", "BW-side beta for Q (default: matches beta_q)"),
    "beta_prime_qprime": ("1/eps", "BW-side beta for Qprime"),
    "t_grid_start_us": ("us", "sweep grid start"),
    "t_grid_stop_us": ("us", "sweep grid stop"),
    "t_points_per_decade": ("-", "log-grid density"),
    "t_list_us": ("us", "explicit dwell times (overrides the grid)"),
    "seed": ("-", "64-bit RNG seed"),
    "shots": ("-", "shots per protocol for sampling"),
    "excluded_charge": ("-", "charge omitted by marginal_tcr"),
    "reveal_hypothesis": ("-", "'none' or comma-separated charge ids"),
    "reveal_mode": ("-", "'exact' or 'sampled'"),
    "bootstrap_resamples": ("-", "bootstrap resamples for sampled reveal"),
    "mem_cap_gb": ("GB", "refuse runs whose estimate exceeds this"),
    "prune_below": ("-", "serialization-only probability pruning threshold"),
    "n_max_sweep": ("-", "cutoffs for convergence_sweep"),
}


@dataclass(frozen=True)
class StageSpec:
    g: float
    alpha: float
    duration_tau: float | None  # None marks the 'var' placeholder


@dataclass(frozen=True)
class RunConfig:
    """Validated scenario configuration (durations already in tau)."""

    scenario: str
    n_ions: int
    omega_com: float
    omega_at: float
    n_max: int | None            # None = choose by the convergence guard
    stages: tuple[StageSpec, ...]
    beta: float
    charge_betas_ini: tuple[tuple[str, float], ...]
    beta_prime: float
    charge_betas_fin: tuple[tuple[str, float], ...]
    t_grid_start_us: float
    t_grid_stop_us: float
    t_points_per_decade: int
    t_list_us: tuple[float, ...]
    seed: int
    shots: int
    excluded_charge: str
    reveal_hypothesis: tuple[str, ...]
    reveal_mode: str
    bootstrap_resamples: int
    mem_cap_gb: float
    prune_below: float
    n_max_sweep: tuple[int, ...]

    @property
    def var_index(self) -> int | None:
        for k, st in enumerate(self.stages):
            if st.duration_tau is None:
                return k
        return None

    @property
    def alpha_ini(self) -> float:
        return self.stages[0].alpha

    @property
    def alpha_fin(self) -> float:
        return self.stages[-1].alpha


def _fail(message: str, key: str | None = None, line: int | None = None):
    raise ConfigError(message, key=key, line=line)


def _parse_float(raw: str, key: str, line=None) -> float:
    try:
        value = float(raw)
    except ValueError:
        _fail(f"expected a number ({KEY_UNITS[key][0]}), got {raw!r}", key, line)
    if not math.isfinite(value):
        _fail(f"value must be finite, got {raw!r}", key, line)
    return value


def _parse_int(raw: str, key: str, line=None) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        _fail(f"expected an integer, got {raw!r}", key, line)


def _split_list(raw: str) -> list[str]:
    return [tok for tok in (t.strip() for t in raw.split(",")) if tok]


def read_key_values(text: str) -> dict[str, tuple[str, int]]:
    """Raw key -> (value, line) mapping with unknown/duplicate/format errors."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            _fail(f"expected 'key = value', got {stripped!r}", line=lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        key = key.lower()
        if key not in KEY_UNITS:
            _fail(f"unknown key (units are annotated per key; see documented keys)",
                  key=key, line=lineno)
        if key in out:
            _fail("duplicate key", key=key, line=lineno)
        out[key] = (value, lineno)
    return out


def _parse_stages(raw: str, unit: str, line=None) -> tuple[StageSpec, ...]:
    factor = constants.TAU_PER_MICROSECOND if unit == "us" else 1.0
    stages = []
    for part in raw.split(";"):
        tokens = part.split()
        if len(tokens) != 3:
            _fail(f"each stage needs 'g alpha duration', got {part.strip()!r}",
                  key="stages", line=line)
        g = _parse_float(tokens[0], "stages", line)
        alpha = _parse_float(tokens[1], "stages", line)
        if tokens[2].lower() == "var":
            duration = None
        else:
            duration = _parse_float(tokens[2], "stages", line)
            if duration < 0:
                _fail("stage durations must be >= 0", key="stages", line=line)
            duration *= factor
        if g < 0:
            _fail("stage couplings g must be >= 0", key="stages", line=line)
        if not (0.0 <= alpha <= 1.0):
            _fail(f"alpha must lie in [0, 1], got {alpha!r}", key="stages", line=line)
        stages.append(StageSpec(g, alpha, duration))
    if not stages:
        _fail("at least one stage is required", key="stages", line=line)
    return tuple(stages)


def _endpoint_charge(alpha: float) -> str | None:
    if alpha == 0.0:
        return "Q"
    if alpha == 1.0:
        return "Qprime"
    return None


def parse_config(text: str, scenario: str | None = None) -> RunConfig:
    """Parse and validate a configuration document.

    ``scenario`` (from the CLI subcommand) overrides an absent config key and
    must agree with a present one.
    """
    provided = read_key_values(text)
    merged = {k: provided.get(k, (v, None)) for k, v in _DEFAULT_TEXT.items()}

    def val(key: str) -> str:
        return merged[key][0]

    def lineno(key: str):
        return merged[key][1]

    cfg_scenario = val("scenario").strip()
    if scenario is not None and cfg_scenario and cfg_scenario != scenario:
        _fail(f"config says scenario {cfg_scenario!r} but the subcommand is "
              f"{scenario!r}", key="scenario", line=lineno("scenario"))
    final_scenario = scenario or cfg_scenario
    if not final_scenario:
        _fail("no scenario given (config key or subcommand)", key="scenario")
    if final_scenario not in SCENARIOS:
        _fail(f"unknown scenario {final_scenario!r}; expected one of {SCENARIOS}",
              key="scenario", line=lineno("scenario"))

    n_ions = _parse_int(val("n_ions"), "n_ions", lineno("n_ions"))
    if n_ions < 1:
        _fail("n_ions must be >= 1", "n_ions", lineno("n_ions"))
    omega_com = _parse_float(val("omega_com"), "omega_com", lineno("omega_com"))
    omega_at = _parse_float(val("omega_at"), "omega_at", lineno("omega_at"))
    for key, value in (("omega_com", omega_com), ("omega_at", omega_at)):
        if value <= 0:
            _fail(f"{key} must be > 0 (units {KEY_UNITS[key][0]})", key, lineno(key))

    raw_n_max = val("n_max").strip().lower()
    if raw_n_max == "auto":
        n_max = None
    else:
        n_max = _parse_int(raw_n_max, "n_max", lineno("n_max"))
        if n_max < 1:
            _fail("n_max must be >= 1 or 'auto'", "n_max", lineno("n_max"))

    unit = val("duration_unit").strip().lower()
    if unit not in ("us", "tau"):
        _fail(f"duration_unit must be 'us' or 'tau', got {unit!r}",
              "duration_unit", lineno("duration_unit"))
    stages = _parse_stages(val("stages"), unit, lineno("stages"))
    n_var = sum(1 for st in stages if st.duration_tau is None)
    if final_scenario in SWEEP_SCENARIOS:
        if n_var != 1:
            _fail(f"scenario {final_scenario!r} sweeps one stage duration; mark "
                  f"exactly one stage duration as 'var' (found {n_var})",
                  "stages", lineno("stages"))
    elif final_scenario in ("tcr_panels", "sample") and n_var != 0:
        _fail(f"scenario {final_scenario!r} needs fixed durations; found 'var'",
              "stages", lineno("stages"))

    beta = _parse_float(val("beta"), "beta", lineno("beta"))

    # endpoint charges and their betas
    charge_ini = _endpoint_charge(stages[0].alpha)
    charge_fin = _endpoint_charge(stages[-1].alpha)
    charge_betas_ini: list[tuple[str, float]] = []
    for key, cid in (("beta_q", "Q"), ("beta_qprime", "Qprime")):
        raw = val(key).strip()
        explicit = key in provided
        if not raw:
            continue
        if cid != charge_ini:
            if explicit:
                _fail(f"{key} given but the first stage (alpha = "
                      f"{stages[0].alpha!r}) does not conserve {cid}", key, lineno(key))
            continue  # default block entry that does not apply
        charge_betas_ini.append((cid, _parse_float(raw, key, lineno(key))))
    if charge_ini is not None and not charge_betas_ini:
        charge_betas_ini.append((charge_ini, 0.0))

    raw_bp = val("beta_prime").strip()
    beta_prime = _parse_float(raw_bp, "beta_prime", lineno("beta_prime")) if raw_bp else beta
    charge_betas_fin: list[tuple[str, float]] = []
    if charge_fin is not None:
        for key, cid in (("beta_prime_q", "Q"), ("beta_prime_qprime", "Qprime")):
            raw = val(key).strip()
            if not raw:
                continue
            if cid != charge_fin:
                if key in provided:
                    _fail(f"{key} given but the last stage (alpha = "
                          f"{stages[-1].alpha!r}) does not conserve {cid}",
                          key, lineno(key))
                continue
            charge_betas_fin.append((cid, _parse_float(raw, key, lineno(key))))
        if not charge_betas_fin:
            matched = dict(charge_betas_ini).get(charge_fin, 0.0)
            charge_betas_fin.append((charge_fin, matched))
    else:
        for key in ("beta_prime_q", "beta_prime_qprime"):
            if key in provided and val(key).strip():
                _fail(f"{key} given but the last stage (alpha = "
                      f"{stages[-1].alpha!r}) conserves no charge", key, lineno(key))

    t_start = _parse_float(val("t_grid_start_us"), "t_grid_start_us",
                           lineno("t_grid_start_us"))
    t_stop = _parse_float(val("t_grid_stop_us"), "t_grid_stop_us",
                          lineno("t_grid_stop_us"))
    ppd = _parse_int(val("t_points_per_decade"), "t_points_per_decade",
                     lineno("t_points_per_decade"))
    if not (0 < t_start < t_stop):
        _fail("need 0 < t_grid_start_us < t_grid_stop_us", "t_grid_start_us",
              lineno("t_grid_start_us"))
    if ppd < 1:
        _fail("t_points_per_decade must be >= 1", "t_points_per_decade",
              lineno("t_points_per_decade"))
    t_list = tuple(_parse_float(tok, "t_list_us", lineno("t_list_us"))
                   for tok in _split_list(val("t_list_us")))
    if any(t < 0 for t in t_list):
        _fail("t_list_us entries must be >= 0", "t_list_us", lineno("t_list_us"))

    seed = _parse_int(val("seed"), "seed", lineno("seed"))
    if not (0 <= seed < 2 ** 64):
        _fail("seed must fit in 64 bits", "seed", lineno("seed"))
    shots = _parse_int(val("shots"), "shots", lineno("shots"))
    if shots < 1:
        _fail("shots must be >= 1", "shots", lineno("shots"))

    excluded = val("excluded_charge").strip()
    hyp_raw = val("reveal_hypothesis").strip()
    hypothesis: tuple[str, ...]
    if hyp_raw.lower() == "none":
        hypothesis = ()
    else:
        hypothesis = tuple(_split_list(hyp_raw))
    mode = val("reveal_mode").strip().lower()
    if mode not in ("exact", "sampled"):
        _fail(f"reveal_mode must be 'exact' or 'sampled', got {mode!r}",
              "reveal_mode", lineno("reveal_mode"))
    resamples = _parse_int(val("bootstrap_resamples"), "bootstrap_resamples",
                           lineno("bootstrap_resamples"))
    if resamples < 1:
        _fail("bootstrap_resamples must be >= 1", "bootstrap_resamples",
              lineno("bootstrap_resamples"))

    mem_cap = _parse_float(val("mem_cap_gb"), "mem_cap_gb", lineno("mem_cap_gb"))
    if mem_cap <= 0:
        _fail("mem_cap_gb must be > 0", "mem_cap_gb", lineno("mem_cap_gb"))
    prune = _parse_float(val("prune_below"), "prune_below", lineno("prune_below"))
    if prune < 0:
        _fail("prune_below must be >= 0", "prune_below", lineno("prune_below"))
    sweep_cutoffs = tuple(_parse_int(tok, "n_max_sweep", lineno("n_max_sweep"))
                          for tok in _split_list(val("n_max_sweep")))
    if any(n < 1 for n in sweep_cutoffs):
        _fail("n_max_sweep entries must be >= 1", "n_max_sweep", lineno("n_max_sweep"))

    return RunConfig(
        scenario=final_scenario, n_ions=n_ions, omega_com=omega_com,
        omega_at=omega_at, n_max=n_max, stages=stages, beta=beta,
        charge_betas_ini=tuple(charge_betas_ini), beta_prime=beta_prime,
        charge_betas_fin=tuple(charge_betas_fin), t_grid_start_us=t_start,
        t_grid_stop_us=t_stop, t_points_per_decade=ppd, t_list_us=t_list,
        seed=seed, shots=shots, excluded_charge=excluded,
        reveal_hypothesis=hypothesis, reveal_mode=mode,
        bootstrap_resamples=resamples, mem_cap_gb=mem_cap, prune_below=prune,
        n_max_sweep=sweep_cutoffs)
