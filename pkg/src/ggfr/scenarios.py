"""Scenario pipelines behind the CLI: build the model pair, run the protocol
engine over the configured dwell times, and emit plot-ready CSV plus JSON
reports and a run manifest.

Outputs are deterministic for a fixed config and seed: distributions are
written as ``value,prob`` CSV with 17 significant digits (round-trippable),
reports as sorted JSON with a schema version.  The manifest records the config
echo, library versions, file hashes, and wall time; it is the only
non-reproducible file (timing).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, constants, dicke, gge, qfr, reveal, tpm
from .config import RunConfig
from .errors import GgfrError, MemoryCapExceeded

SCHEMA_VERSION = 1
MEMORY_COEFF = 8           # working set ~ COEFF * dim^2 * 16 bytes
FULL_SCALE_DIM_GUARD = 3200


class FullScaleRefusal(GgfrError):
    """Run would enter the guarded full-scale regime without --full-scale."""


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{x:.16e}"
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_json(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_distribution(path: Path, dist: tpm.DiscreteDistribution,
                       prune_below: float = 0.0) -> None:
    rows = [(v, p) for v, p in zip(dist.values, dist.probs)
            if not (prune_below > 0.0 and p < prune_below)]
    total = sum(p for _, p in rows)
    if abs(total - 1.0) > 1e-9 and prune_below == 0.0:
        raise AssertionError(f"distribution column sums to {total!r}")
    write_csv(path, ["value", "prob"], rows)


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# model preparation

@dataclass
class Prepared:
    cfg: RunConfig
    n_max: int
    basis: dicke.DickeBasis
    stage_params: list[dicke.DickeParams]
    spectra: tuple
    basis_ini: gge.JointEigenbasis
    basis_fin: gge.JointEigenbasis
    beta_ini: gge.BetaVector
    beta_fin: gge.BetaVector
    ens_fw: gge.GgeEnsemble
    ens_bw: gge.GgeEnsemble

    @property
    def dim(self) -> int:
        return self.basis.size

    def protocol(self, durations_tau: list[float]) -> tpm.QuenchProtocol:
        stages = tuple(tpm.ProtocolStage(p, t)
                       for p, t in zip(self.stage_params, durations_tau))
        return tpm.QuenchProtocol(stages)

    def durations_with_var(self, t_var_tau: float) -> list[float]:
        return [t_var_tau if st.duration_tau is None else st.duration_tau
                for st in self.cfg.stages]

    def delta_f_gen(self) -> float:
        return self.ens_bw.gen_free_energy - self.ens_fw.gen_free_energy

    def log_rhs_standard(self) -> float:
        """ln of exp(-beta dF_std) = ln Z'_std - ln Z_std at the FW beta."""
        beta = self.cfg.beta
        return (-beta * qfr.delta_standard_free_energy(
            self.basis_ini.energies, self.basis_fin.energies, beta))


def estimate_gb(dim: int) -> float:
    return MEMORY_COEFF * (dim ** 2) * 16 / 2 ** 30


def check_resources(dim: int, mem_cap_gb: float, full_scale: bool) -> None:
    est = estimate_gb(dim)
    if est > mem_cap_gb:
        raise MemoryCapExceeded(est, mem_cap_gb)
    if dim > FULL_SCALE_DIM_GUARD and not full_scale:
        raise FullScaleRefusal(
            f"dim = {dim} enters the full-scale regime (> {FULL_SCALE_DIM_GUARD}); "
            f"estimated {est:.1f} GB and tens of minutes; re-run with --full-scale")


def _params_for(cfg: RunConfig, stage: int, n_max: int) -> dicke.DickeParams:
    st = cfg.stages[stage]
    return dicke.DickeParams(cfg.n_ions, cfg.omega_com, cfg.omega_at,
                             st.g, st.alpha, n_max)


def resolve_n_max(cfg: RunConfig, full_scale: bool) -> int:
    if cfg.n_max is not None:
        return cfg.n_max
    beta_ini = gge.BetaVector(cfg.beta, cfg.charge_betas_ini)
    beta_fin = gge.BetaVector(cfg.beta_prime, cfg.charge_betas_fin)
    chosen = 1
    for stage, beta_vec in ((0, beta_ini), (len(cfg.stages) - 1, beta_fin)):
        params = _params_for(cfg, stage, 1)
        cap_dim = FULL_SCALE_DIM_GUARD if not full_scale else 100000
        cap = max(cap_dim // (cfg.n_ions + 1) - 1, 8)
        chosen = max(chosen, gge.auto_n_max(params, beta_vec, cap=cap))
    return chosen


def prepare(cfg: RunConfig, *, mem_cap_gb: float | None = None,
            full_scale: bool = False) -> Prepared:
    """Diagonalise every stage once and build the FW/BW initial ensembles."""
    n_max = resolve_n_max(cfg, full_scale)
    cap = mem_cap_gb if mem_cap_gb is not None else cfg.mem_cap_gb
    dim = (cfg.n_ions + 1) * (n_max + 1)
    check_resources(dim, cap, full_scale)

    stage_params = [_params_for(cfg, k, n_max) for k in range(len(cfg.stages))]
    basis = dicke.basis_for(stage_params[0])
    hs = [dicke.build_hamiltonian(p) for p in stage_params]
    beta_ini = gge.BetaVector(cfg.beta, cfg.charge_betas_ini)
    beta_fin = gge.BetaVector(cfg.beta_prime, cfg.charge_betas_fin)

    def joint_basis_for(stage: int, beta_vec: gge.BetaVector) -> gge.JointEigenbasis:
        named = dict(dicke.endpoint_charges(stage_params[stage]))
        ops = tuple(named[cid] for cid in beta_vec.charge_ids)
        return gge.joint_eigenbasis(hs[stage], ops, beta_vec.charge_ids)

    basis_ini = joint_basis_for(0, beta_ini)
    basis_fin = joint_basis_for(len(cfg.stages) - 1, beta_fin)
    phonons = basis.phonon_numbers
    ens_fw = gge.build_gge_from_basis(beta_ini, basis_ini, phonon_numbers=phonons)
    ens_bw = gge.build_gge_from_basis(beta_fin, basis_fin, phonon_numbers=phonons)
    spectra = tuple(tpm.eigh(h) for h in hs)
    return Prepared(cfg, n_max, basis, stage_params, spectra, basis_ini,
                    basis_fin, beta_ini, beta_fin, ens_fw, ens_bw)


def _grid_us(cfg: RunConfig) -> np.ndarray:
    if cfg.t_list_us:
        return np.asarray(cfg.t_list_us, dtype=float)
    return tpm.default_tfin_grid_us(cfg.t_grid_start_us, cfg.t_grid_stop_us,
                                    cfg.t_points_per_decade)


def _fw_jd(prep: Prepared, durations: list[float]) -> tpm.JointOutcomeDistribution:
    prot = prep.protocol(durations)
    return tpm.tpm_exact(prep.ens_fw, prot, final_basis=prep.basis_fin,
                         spectra=prep.spectra)


def _bw_jd(prep: Prepared, durations: list[float]) -> tpm.JointOutcomeDistribution:
    prot = prep.protocol(durations).reversed()
    return tpm.tpm_exact(prep.ens_bw, prot, final_basis=prep.basis_ini,
                         spectra=prep.spectra[::-1])


# ---------------------------------------------------------------------------
# scenarios

def run_qje_sweep(prep: Prepared, out: Path) -> list[Path]:
    cfg = prep.cfg
    grid = _grid_us(cfg)
    df_gen = prep.delta_f_gen()
    log_rhs_std = prep.log_rhs_standard()
    rows = []
    for t_us in grid:
        durations = prep.durations_with_var(t_us * constants.TAU_PER_MICROSECOND)
        jd = _fw_jd(prep, durations)
        gen_avg = math.exp(tpm.log_mean_exp_neg_generalised(jd, prep.beta_ini,
                                                            prep.beta_fin))
        std_avg = math.exp(tpm.log_mean_exp_neg_standard(jd, cfg.beta))
        rows.append((t_us, t_us * constants.TAU_PER_MICROSECOND, gen_avg,
                     std_avg, math.exp(-df_gen), math.exp(log_rhs_std)))
    path = out / "qje_sweep.csv"
    write_csv(path, ["t_fin_us", "t_fin_tau", "avg_exp_neg_gen_work",
                     "avg_exp_neg_beta_std_work", "exp_neg_delta_f_gen",
                     "exp_neg_beta_delta_f_std"], rows)
    return [path]


def _tcr_report_dict(report: qfr.TcrReport) -> dict:
    return {
        "delta_f": report.delta_f,
        "max_residual": report.max_residual,
        "passed": report.passed,
        "floor": report.floor,
        "pass_threshold": report.pass_threshold,
        "n_matched_atoms": int(report.work_values.size),
        "support_mismatch": [
            {"side": side, "value": value, "prob": prob}
            for side, value, prob in report.support_mismatch],
    }


def run_tcr_panels(prep: Prepared, out: Path) -> list[Path]:
    cfg = prep.cfg
    durations = [st.duration_tau for st in cfg.stages]
    jd_fw = _fw_jd(prep, durations)
    jd_bw = _bw_jd(prep, durations)

    pdf_fw_gen = tpm.generalised_work_pdf(jd_fw, prep.beta_ini, prep.beta_fin)
    pdf_bw_gen = tpm.generalised_work_pdf(jd_bw, prep.beta_fin, prep.beta_ini)
    pdf_fw_std = tpm.standard_work_pdf(jd_fw)
    pdf_bw_std = tpm.standard_work_pdf(jd_bw)

    df_gen = prep.delta_f_gen()
    df_std = qfr.delta_standard_free_energy(prep.basis_ini.energies,
                                            prep.basis_fin.energies, cfg.beta)
    gen_report = qfr.check_tcr(pdf_fw_gen, pdf_bw_gen, df_gen)
    std_report = qfr.standard_tcr_report(pdf_fw_std, pdf_bw_std, cfg.beta, df_std)

    files = []
    for name, dist in (("fw_gen_pdf.csv", pdf_fw_gen), ("bw_gen_pdf.csv", pdf_bw_gen),
                       ("fw_std_pdf.csv", pdf_fw_std), ("bw_std_pdf.csv", pdf_bw_std)):
        path = out / name
        write_distribution(path, dist, cfg.prune_below)
        files.append(path)
    report_path = out / "tcr_report.json"
    write_json(report_path, {
        "generalised": _tcr_report_dict(gen_report),
        "standard_scaled_by_beta": _tcr_report_dict(std_report),
        "delta_f_gen": df_gen,
        "delta_f_std_eps": df_std,
        "beta": cfg.beta,
    })
    files.append(report_path)
    return files


def run_marginal_tcr(prep: Prepared, out: Path) -> list[Path]:
    cfg = prep.cfg
    grid = _grid_us(cfg)
    df_gen = prep.delta_f_gen()
    rows = []
    last_report = None
    for t_us in grid:
        durations = prep.durations_with_var(t_us * constants.TAU_PER_MICROSECOND)
        jd_fw = _fw_jd(prep, durations)
        jd_bw = _bw_jd(prep, durations)
        pdf_fw = tpm.marginal_work_pdf(jd_fw, cfg.excluded_charge,
                                       prep.beta_ini, prep.beta_fin)
        pdf_bw = tpm.marginal_work_pdf(jd_bw, cfg.excluded_charge,
                                       prep.beta_fin, prep.beta_ini)
        report = qfr.check_marginal_tcr(pdf_fw, pdf_bw, df_gen,
                                        excluded_charge=cfg.excluded_charge)
        rows.append((t_us, t_us * constants.TAU_PER_MICROSECOND,
                     report.max_residual, len(report.support_mismatch),
                     int(report.passed)))
        last_report = report
    path = out / "marginal_tcr.csv"
    write_csv(path, ["t_fin_us", "t_fin_tau", "max_residual",
                     "n_support_mismatch", "passed"], rows)
    report_path = out / "marginal_tcr_report.json"
    write_json(report_path, {
        "excluded_charge": cfg.excluded_charge,
        "delta_f_gen": df_gen,
        "last_point": _tcr_report_dict(last_report),
    })
    return [path, report_path]


def run_reveal(prep: Prepared, out: Path, seed: int) -> list[Path]:
    cfg = prep.cfg
    grid = _grid_us(cfg)
    datasets = []
    for t_us in grid:
        durations = prep.durations_with_var(t_us * constants.TAU_PER_MICROSECOND)
        if cfg.reveal_mode == "sampled":
            prot = prep.protocol(durations)
            datasets.append(tpm.tpm_sample(
                prep.ens_fw, prot, final_basis=prep.basis_fin,
                spectra=prep.spectra, n_shots=cfg.shots, seed=seed))
        else:
            datasets.append(_fw_jd(prep, durations))
    inp = reveal.RevealInput(tuple(datasets), cfg.reveal_hypothesis,
                             prep.basis_ini, prep.basis_fin)
    guess = gge.BetaVector(0.0, tuple((cid, 0.0) for cid in cfg.reveal_hypothesis))
    payload: dict = {
        "mode": cfg.reveal_mode,
        "hypothesis": list(cfg.reveal_hypothesis),
        "t_fin_us": [float(t) for t in grid],
        "true_beta": prep.beta_ini.beta,
        "true_charge_betas": dict(prep.beta_ini.charge_betas),
    }
    if cfg.reveal_mode == "sampled":
        boot = reveal.bootstrap_fit(inp, guess, n_resamples=cfg.bootstrap_resamples,
                                    seed=seed)
        payload["report"] = boot.observed.to_dict()
        payload["bootstrap"] = {
            "n_resamples": cfg.bootstrap_resamples,
            "rms_null_95": boot.rms_null_95,
            "param_low": [float(v) for v in boot.param_low],
            "param_high": [float(v) for v in boot.param_high],
            "verdict": boot.verdict,
        }
    else:
        report = reveal.fit_betas(inp, guess)
        payload["report"] = report.to_dict()
    path = out / "reveal_report.json"
    write_json(path, payload)
    return [path]


def run_convergence_sweep(prep: Prepared, out: Path) -> list[Path]:
    cfg = prep.cfg
    rows = []
    for n in cfg.n_max_sweep:
        params = _params_for(cfg, 0, n)
        basis = dicke.basis_for(params)
        h = dicke.build_hamiltonian(params)
        named = dict(dicke.endpoint_charges(params))
        ops = tuple(named[cid] for cid in prep.beta_ini.charge_ids)
        ens = gge.build_gge(prep.beta_ini, h, ops)  # leakage reported, not enforced
        leak = gge.truncation_leakage(ens, basis.phonon_numbers)
        rows.append((n, ens.log_z, math.exp(ens.log_z), leak))
    path = out / "convergence.csv"
    write_csv(path, ["n_max", "log_z", "z", "top_band_leakage"], rows)
    return [path]


def run_sample(prep: Prepared, out: Path, seed: int) -> list[Path]:
    cfg = prep.cfg
    durations = [st.duration_tau for st in cfg.stages]
    prot = prep.protocol(durations)
    jd = tpm.tpm_sample(prep.ens_fw, prot, final_basis=prep.basis_fin,
                        spectra=prep.spectra, n_shots=cfg.shots, seed=seed)
    path = out / "sample_joint.csv"
    header = (["E_ini"] + [f"q_ini:{cid}" for cid in jd.initial_charge_ids]
              + ["E_fin"] + [f"q_fin:{cid}" for cid in jd.final_charge_ids]
              + ["prob"])
    rows = ((e_i, *q_i, e_f, *q_f, p)
            for e_i, q_i, e_f, q_f, p in jd.iter_records(cfg.prune_below))
    write_csv(path, header, rows)
    return [path]


_RUNNERS = {
    "qje_sweep": lambda prep, out, seed: run_qje_sweep(prep, out),
    "tcr_panels": lambda prep, out, seed: run_tcr_panels(prep, out),
    "marginal_tcr": lambda prep, out, seed: run_marginal_tcr(prep, out),
    "reveal": run_reveal,
    "convergence_sweep": lambda prep, out, seed: run_convergence_sweep(prep, out),
    "sample": run_sample,
}


def run_scenario(cfg: RunConfig, out_dir: str | Path, *, seed: int | None = None,
                 config_text: str = "", mem_cap_gb: float | None = None,
                 full_scale: bool = False) -> list[Path]:
    """Execute one scenario and write its artifact files plus a manifest."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    prep = prepare(cfg, mem_cap_gb=mem_cap_gb, full_scale=full_scale)
    files = _RUNNERS[cfg.scenario](prep, out, seed)
    manifest = {
        "scenario": cfg.scenario,
        "seed": seed,
        "n_max_resolved": prep.n_max,
        "dim": prep.dim,
        "config_echo": config_text,
        "versions": {
            "ggfr": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "files": {p.name: sha256_of(p) for p in files},
        "wall_time_s": time.time() - started,
    }
    manifest_path = out / "manifest.json"
    write_json(manifest_path, manifest)
    return files + [manifest_path]
