"""SDR / SIR by orthogonal projection onto delayed copies of a reference.

The reference ``s`` (length ``T``) and its delays ``0..G-1`` form the columns
of a ``(T+G, G)`` Toeplitz matrix ``A``.  An estimate is zero-padded to
``T+G`` samples and split into its projection onto ``range(A)`` and the
orthogonal residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import toeplitz

__all__ = [
    "DB_CAP",
    "Decomposition",
    "EvalReport",
    "fixed6",
    "ToeplitzProjector",
    "build_projector",
    "project",
    "safe_db",
    "sdr",
    "sir",
    "sdr_gamma",
    "sdr_gamma_curve",
]

log = logging.getLogger(__name__)

DB_CAP = 200.0
RCOND = 1e-10


@dataclass(frozen=True)
class ToeplitzProjector:
    reference: np.ndarray
    max_delay: int
    gram: np.ndarray
    gram_pinv: np.ndarray
    rank: int

    @property
    def T(self) -> int:
        return self.reference.size

    @property
    def padded_len(self) -> int:
        return self.T + self.max_delay

    @cached_property
    def A(self) -> np.ndarray:
        """Dense ``(T+G, G)`` matrix of delayed, zero-padded references."""
        T, G = self.T, self.max_delay
        A = np.zeros((T + G, G))
        for g in range(G):
            A[g : g + T, g] = self.reference
        return A

    def coefficients(self, padded: np.ndarray) -> np.ndarray:
        """Least-squares filter taps for a padded estimate (or stack of them)."""
        return (padded @ self.A) @ self.gram_pinv

    def apply(self, padded: np.ndarray) -> np.ndarray:
        """Project padded vector(s) of length ``T+G`` onto ``range(A)``."""
        return self.coefficients(padded) @ self.A.T

    def pad(self, est) -> np.ndarray:
        est = np.asarray(est, dtype=np.float64)
        if est.shape[-1] != self.T:
            raise ValueError(f"estimate has length {est.shape[-1]}, projector expects {self.T}")
        widths = [(0, 0)] * (est.ndim - 1) + [(0, self.max_delay)]
        return np.pad(est, widths)

    @cached_property
    def target_map(self) -> np.ndarray:
        """``(T+G, T)`` matrix taking an unpadded estimate to ``s_target``."""
        A = self.A
        return A @ self.gram_pinv @ A[: self.T].T

    @cached_property
    def residual_map(self) -> np.ndarray:
        """``(T+G, T)`` matrix taking an unpadded estimate to the residual."""
        embed = np.eye(self.padded_len, self.T)
        return embed - self.target_map


@dataclass(frozen=True)
class Decomposition:
    s_target: np.ndarray
    residual: np.ndarray
    e_interf: np.ndarray | None = None


@dataclass
class EvalReport:
    loss: str
    snr_in_db: float
    seed: int
    sdr_db: float
    sir_db: float
    runtime_s: float
    status: str = "ok"

    CSV_HEADER = ("loss", "snr_in_db", "seed", "sdr_db", "sir_db", "runtime_s")

    def csv_row(self) -> list[str]:
        return [
            self.loss,
            fixed6(self.snr_in_db),
            str(self.seed),
            fixed6(self.sdr_db),
            fixed6(self.sir_db),
            fixed6(self.runtime_s),
        ]


def fixed6(v: float) -> str:
    """6-decimal fixed notation without a negative zero."""
    out = f"{v:.6f}"
    return "0.000000" if out == "-0.000000" else out


def _autocorr(s: np.ndarray, G: int) -> np.ndarray:
    T = s.size
    return np.array([np.dot(s[: T - k], s[k:]) if k < T else 0.0 for k in range(G)])


def _pinv_sym(m: np.ndarray, rcond: float) -> tuple[np.ndarray, int]:
    w, v = np.linalg.eigh(m)
    cutoff = rcond * max(w.max(), 0.0)
    keep = w > cutoff
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T, int(keep.sum())


def build_projector(reference, G: int, rcond: float = RCOND) -> ToeplitzProjector:
    """Precompute the Gram matrix of ``G`` delayed copies and its pseudo-inverse."""
    s = np.asarray(reference, dtype=np.float64).copy()
    if s.ndim != 1 or s.size < 1:
        raise ValueError("reference must be a non-empty 1-D signal")
    if G < 1:
        raise ValueError("max delay G must be >= 1")
    if not np.any(s):
        raise ValueError("reference signal is identically zero")
    r = _autocorr(s, G)
    gram = toeplitz(r)
    gram_pinv, rank = _pinv_sym(gram, rcond)
    s.setflags(write=False)
    return ToeplitzProjector(s, G, gram, gram_pinv, rank)


def project(projector: ToeplitzProjector, est, noise_projector: ToeplitzProjector | None = None):
    """Split an estimate into ``s_target`` and residual (both length ``T+G``)."""
    padded = projector.pad(est)
    s_target = projector.apply(padded)
    e_interf = None
    if noise_projector is not None:
        e_interf = noise_projector.apply(noise_projector.pad(est))
    return Decomposition(s_target, padded - s_target, e_interf)


def safe_db(num: float, den: float) -> float:
    """``10*log10(num/den)`` clipped to ``[-DB_CAP, DB_CAP]``."""
    if num <= 0.0:
        return -DB_CAP
    if den <= 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def sdr(clean, est, G: int = 32, projector: ToeplitzProjector | None = None) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if clean.shape != est.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {est.shape}")
    if not np.any(est):
        log.warning("sdr: estimate is identically zero, reporting %s dB", -DB_CAP)
        return -DB_CAP
    proj = projector or build_projector(clean, G)
    d = project(proj, est)
    return safe_db(d.s_target @ d.s_target, d.residual @ d.residual)


def sir(
    clean,
    noise,
    est,
    G: int = 32,
    projector: ToeplitzProjector | None = None,
    noise_projector: ToeplitzProjector | None = None,
) -> float:
    """Energy of the clean-span projection over the noise-span projection, in dB."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if not (clean.shape == noise.shape == est.shape):
        raise ValueError("clean, noise and estimate must have equal lengths")
    if not np.any(noise):
        raise ValueError("noise reference is identically zero")
    proj = projector or build_projector(clean, G)
    nproj = noise_projector or build_projector(noise, G)
    d = project(proj, est, nproj)
    return safe_db(d.s_target @ d.s_target, d.e_interf @ d.e_interf)


def sdr_gamma(gamma) -> np.ndarray:
    """SDR of ``sqrt(1-g^2)*s_target + g*s_other`` for unit, orthogonal parts."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any((g <= 0) | (g >= 1)) or not np.all(np.isfinite(g)):
        raise ValueError("gamma must lie strictly inside (0, 1)")
    return 10.0 * np.log10((1.0 - g * g) / (g * g))


def sdr_gamma_curve(gammas) -> list[tuple[float, float]]:
    gammas = np.asarray(gammas, dtype=np.float64)
    return list(zip(gammas.tolist(), sdr_gamma(gammas).tolist()))
