"""Exception types shared across the package."""

from __future__ import annotations


class GgfrError(Exception):
    """Base class for all package errors."""


class EigensolverError(GgfrError):
    """Eigendecomposition failed to converge or to verify.

    Carries the reconstruction residual (max-norm) when available.
    """

    def __init__(self, message: str, residual: float | None = None):
        if residual is not None:
            message = f"{message} (residual max-norm {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class NonCommutingCharge(GgfrError):
    """A proposed charge fails the commutation admission test."""

    def __init__(self, first: str, second: str, norm: float, limit: float):
        super().__init__(
            f"[{first}, {second}] has max-norm {norm:.3e}, above the admission "
            f"limit {limit:.3e}"
        )
        self.pair = (first, second)
        self.norm = norm
        self.limit = limit


class TruncationUnconverged(GgfrError):
    """The GGE carries too much weight near the phonon cutoff."""

    def __init__(self, leakage: float, tol: float, suggested_n_max: int):
        super().__init__(
            f"GGE weight {leakage:.3e} in the top phonon band exceeds {tol:.1e}; "
            f"try n_max >= {suggested_n_max}"
        )
        self.leakage = leakage
        self.tol = tol
        self.suggested_n_max = suggested_n_max


class TargetOutsideSpectrum(GgfrError):
    """Requested averages are not strictly inside the achievable range."""


class MaxIterationsExceeded(GgfrError):
    """Iterative solver ran out of iterations; carries the best iterate."""

    def __init__(self, message: str, best=None, residual: float | None = None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class MemoryCapExceeded(GgfrError):
    """A run would exceed the configured memory cap."""

    def __init__(self, estimate_gb: float, cap_gb: float):
        super().__init__(
            f"estimated working set {estimate_gb:.2f} GB exceeds the cap "
            f"{cap_gb:.2f} GB; raise --mem-cap-gb or reduce n_max/N"
        )
        self.estimate_gb = estimate_gb
        self.cap_gb = cap_gb


class ConfigError(GgfrError):
    """Invalid run configuration; names the offending key/line when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"key '{key}': "
        super().__init__(prefix + message)
        self.key = key
        self.line = line
