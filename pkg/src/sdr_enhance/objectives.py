"""Differentiable training objectives: L1, L2, Itakura-Saito, negative STOI, negative SDR.

Every loss maps an estimate Var of shape ``(..., n)`` (or ``(..., K, M)`` for
spectral losses) to per-item losses of shape ``(...)``; a single window gives
a scalar Var.  Targets are constants.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .bss import ToeplitzProjector, build_projector
from .dsp import BandPartition, band_matrix, hann, n_frames, third_octave_edges, _check_frame

__all__ = [
    "LOSS_KINDS",
    "LossSpec",
    "SdrLossConfig",
    "StoiConfig",
    "SpectralConfig",
    "loss_l1",
    "loss_l2",
    "loss_is",
    "loss_neg_stoi",
    "loss_neg_sdr",
    "stft_power_var",
    "stft_mag_var",
    "sdr_maps",
    "window_loss",
]

LOSS_KINDS = ("l1", "l2", "is", "neg_stoi", "neg_sdr")
FLOOR = 1e-12


@dataclass(frozen=True)
class SpectralConfig:
    """Framing used to turn a time-domain window into a spectrogram."""

    frame_size: int = 32
    hop: int = 4


@dataclass(frozen=True)
class StoiConfig:
    analysis_len: int = 30
    zeta_db: float = -15.0
    bands: BandPartition = field(default_factory=third_octave_edges)
    frame_size: int = 512
    hop: int = 256

    def __post_init__(self):
        if self.analysis_len < 1:
            raise ValueError("analysis length N must be >= 1")
        if self.bands.n_bins != self.frame_size // 2 + 1:
            raise ValueError("band partition does not match frame_size")

    @classmethod
    def for_window(cls) -> "StoiConfig":
        """Small-frame setup that fits a 100-sample training window.

        32-sample frames with hop 4 give 18 frames; six one-third octave
        bands from bin 4 up to Nyquist (fs taken as 10 kHz); 8-frame segments.
        """
        bands = third_octave_edges(fs=10000.0, frame_size=32, J=6, f_min=1250.0)
        return cls(analysis_len=8, zeta_db=-15.0, bands=bands, frame_size=32, hop=4)


@dataclass(frozen=True)
class SdrLossConfig:
    max_delay: int = 1
    floor: float = 1e-12  # relative to the clean window energy

    def __post_init__(self):
        if self.max_delay < 1:
            raise ValueError("max_delay must be >= 1")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    stoi: StoiConfig | None = None
    sdr: SdrLossConfig | None = None
    spectral: SpectralConfig | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if (self.stoi is not None) != (self.kind == "neg_stoi"):
            raise ValueError("stoi config is required for, and only for, neg_stoi")
        if (self.sdr is not None) != (self.kind == "neg_sdr"):
            raise ValueError("sdr config is required for, and only for, neg_sdr")
        if (self.spectral is not None) != (self.kind == "is"):
            raise ValueError("spectral config is required for, and only for, is")

    @classmethod
    def make(cls, kind: str) -> "LossSpec":
        """Spec with default hyperparameters for ``kind``."""
        if kind == "neg_stoi":
            return cls(kind, stoi=StoiConfig.for_window())
        if kind == "neg_sdr":
            return cls(kind, sdr=SdrLossConfig())
        if kind == "is":
            return cls(kind, spectral=SpectralConfig())
        return cls(kind)


def _check_same(est: Var, target) -> np.ndarray:
    # the target may be a single item shared by a batched estimate
    target = np.asarray(target, dtype=np.float64)
    if target.ndim > len(est.shape) or est.shape[len(est.shape) - target.ndim :] != target.shape:
        raise ad.ShapeError(f"estimate {est.shape} and target {target.shape} differ")
    return target


def loss_l2(est: Var, target) -> Var:
    """Sum of squared differences over the last axis."""
    target = _check_same(est, target)
    return ad.sq_norm(est - target, axis=-1)


def loss_l1(est: Var, target) -> Var:
    """Sum of absolute differences over the last axis."""
    target = _check_same(est, target)
    return ad.sum(ad.abs(est - target), axis=-1)


def loss_is(est_pow: Var, target_pow, diagnostics: Counter | None = None) -> Var:
    """Itakura-Saito divergence ``sum y/x - ln(y/x) - 1`` with ``x`` the estimate.

    Both spectrograms are floored at 1e-12; entries that were nonpositive
    before flooring are counted under ``diagnostics["is_nonpositive"]``.
    """
    y = _check_same(est_pow, target_pow)
    if diagnostics is not None:
        bad = int(np.sum(est_pow.value <= 0) + np.sum(y <= 0))
        if bad:
            diagnostics["is_nonpositive"] += bad
    x = ad.maximum(est_pow, FLOOR)
    y = np.maximum(y, FLOOR)
    ratio = y / x
    per_bin = ratio - ad.log(ratio) - 1.0
    return ad.sum(ad.sum(per_bin, axis=-1), axis=-1)


@lru_cache(maxsize=32)
def _dft_maps(length: int, frame_size: int, hop: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Constant matrices ``(K*M, length)`` giving real and imaginary STFT parts.

    Rows are ordered bin-major so the product reshapes to ``(K, M)``.
    """
    _check_frame(frame_size, hop)
    M = n_frames(length, frame_size, hop)
    K = frame_size // 2 + 1
    win = hann(frame_size)
    n = np.arange(frame_size)
    k = np.arange(K)[:, None]
    cos = np.cos(2 * np.pi * k * n / frame_size) * win
    sin = -np.sin(2 * np.pi * k * n / frame_size) * win
    re = np.zeros((K, M, length))
    im = np.zeros((K, M, length))
    for m in range(M):
        re[:, m, m * hop : m * hop + frame_size] = cos
        im[:, m, m * hop : m * hop + frame_size] = sin
    re = re.reshape(K * M, length)
    im = im.reshape(K * M, length)
    re.setflags(write=False)
    im.setflags(write=False)
    return re, im, M


def stft_power_var(x: Var, frame_size: int, hop: int) -> Var:
    """Hann-windowed power spectrogram of the last axis, shape ``(..., K, M)``."""
    re_map, im_map, M = _dft_maps(x.shape[-1], frame_size, hop)
    K = frame_size // 2 + 1
    re = ad.matvec(re_map, x)
    im = ad.matvec(im_map, x)
    pw = ad.square(re) + ad.square(im)
    return ad.reshape(pw, x.shape[:-1] + (K, M))


def stft_mag_var(x: Var, frame_size: int, hop: int) -> Var:
    """Magnitude spectrogram; the power is floored so the sqrt stays differentiable."""
    return ad.sqrt(ad.maximum(stft_power_var(x, frame_size, hop), FLOOR))


def loss_neg_stoi(
    est_mag: Var, target_mag, cfg: StoiConfig, diagnostics: Counter | None = None
) -> Var:
    """Negative mean short-time correlation of clipped one-third octave envelopes.

    ``est_mag`` and ``target_mag`` are magnitude spectrograms ``(..., K, M)``.
    Segments where either centered envelope has zero norm contribute 0 and
    are counted under ``diagnostics["stoi_degenerate"]``.
    """
    y_mag = _check_same(est_mag, target_mag)
    K, M = y_mag.shape[-2:]
    N = cfg.analysis_len
    if cfg.bands.n_bins != K:
        raise ad.ShapeError(f"band partition expects {cfg.bands.n_bins} bins, got {K}")
    if M < N:
        raise ad.ShapeError(f"need at least N={N} frames, got {M}")
    bm = band_matrix(cfg.bands)

    # band envelopes alpha (estimate) and beta (clean), shape (..., J, M)
    alpha = ad.sqrt(ad.maximum(ad.matmul(bm, ad.square(est_mag)), FLOOR))
    beta = np.sqrt(bm @ (y_mag * y_mag))

    # length-N segments ending at frames N-1..M-1, shape (..., J, M', N)
    seg = np.arange(M - N + 1)[:, None] + np.arange(N)[None, :]
    x_seg = alpha[..., seg]
    y_seg = beta[..., seg]

    x_norm = ad.sqrt(ad.sum(ad.square(x_seg), axis=-1, keepdims=True))
    y_norm = np.sqrt(np.sum(y_seg * y_seg, axis=-1, keepdims=True))
    scaled = x_seg * (y_norm / x_norm)
    clip = (1.0 + 10.0 ** (-cfg.zeta_db / 20.0)) * y_seg
    x_hat = ad.minimum(scaled, clip)

    xc = x_hat - ad.mean(x_hat, axis=-1, keepdims=True)
    yc = y_seg - y_seg.mean(axis=-1, keepdims=True)
    xc_norm2 = ad.sum(ad.square(xc), axis=-1)
    yc_norm2 = np.sum(yc * yc, axis=-1)
    valid = (xc_norm2.value > FLOOR * FLOOR) & (yc_norm2 > FLOOR * FLOOR)
    if diagnostics is not None:
        n_bad = int(valid.size - valid.sum())
        if n_bad:
            diagnostics["stoi_degenerate"] += n_bad
    num = ad.dot(xc, yc)
    den = ad.sqrt(ad.maximum(xc_norm2, FLOOR)) * np.sqrt(np.maximum(yc_norm2, FLOOR))
    d = (num / den) * valid.astype(np.float64)
    per_item = ad.sum(ad.sum(d, axis=-1), axis=-1)
    return -per_item / float(cfg.bands.n_bands * (M - N + 1))


def sdr_maps(projectors: ToeplitzProjector | Sequence[ToeplitzProjector]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked target/residual maps for one projector or a batch of them."""
    if isinstance(projectors, ToeplitzProjector):
        return projectors.target_map, projectors.residual_map
    tm = np.stack([p.target_map for p in projectors])
    rm = np.stack([p.residual_map for p in projectors])
    return tm, rm


def loss_neg_sdr(
    est: Var,
    projector,
    cfg: SdrLossConfig = SdrLossConfig(),
    diagnostics: Counter | None = None,
    maps: tuple[np.ndarray, np.ndarray] | None = None,
) -> Var:
    """``-10*log10(|P s|^2 / |s_pad - P s|^2)`` with an additive energy floor.

    ``projector`` is built from the clean window (or a sequence of projectors
    matching a batched estimate).  The projection only depends on the clean
    reference, so it enters the tape as a constant linear map.  ``maps`` may
    carry precomputed ``sdr_maps`` for the batch.
    """
    if maps is None:
        maps = sdr_maps(projector)
    target_map, residual_map = maps
    if est.shape[-1] != target_map.shape[-1]:
        raise ad.ShapeError(
            f"estimate length {est.shape[-1]} does not match projector length {target_map.shape[-1]}"
        )
    if isinstance(projector, ToeplitzProjector):
        ref_energy = float(projector.reference @ projector.reference)
    else:
        ref_energy = np.array([p.reference @ p.reference for p in projector])
    eps = cfg.floor * ref_energy
    if diagnostics is not None:
        zero = np.all(est.value == 0, axis=-1)
        if np.any(zero):
            diagnostics["sdr_zero_estimate"] += int(np.sum(zero))
    s_target = ad.matvec(target_map, est)
    residual = ad.matvec(residual_map, est)
    num = ad.sq_norm(s_target, axis=-1) + eps
    den = ad.sq_norm(residual, axis=-1) + eps
    return -10.0 * ad.log10(num / den)


def window_projectors(clean_windows: np.ndarray, G: int) -> list[ToeplitzProjector]:
    return [build_projector(w, G) for w in np.atleast_2d(clean_windows)]


def window_loss(
    spec: LossSpec,
    est: Var,
    target: np.ndarray,
    projectors=None,
    maps=None,
    diagnostics: Counter | None = None,
) -> Var:
    """Per-window losses for time-domain estimates ``(..., W)`` under ``spec``."""
    if spec.kind == "l2":
        return loss_l2(est, target)
    if spec.kind == "l1":
        return loss_l1(est, target)
    if spec.kind == "is":
        sc = spec.spectral
        est_pow = stft_power_var(est, sc.frame_size, sc.hop)
        re, im, M = _dft_maps(target.shape[-1], sc.frame_size, sc.hop)
        K = sc.frame_size // 2 + 1
        tgt_pow = ((target @ re.T) ** 2 + (target @ im.T) ** 2).reshape(target.shape[:-1] + (K, M))
        return loss_is(est_pow, tgt_pow, diagnostics)
    if spec.kind == "neg_stoi":
        sc = spec.stoi
        est_mag = stft_mag_var(est, sc.frame_size, sc.hop)
        re, im, M = _dft_maps(target.shape[-1], sc.frame_size, sc.hop)
        K = sc.frame_size // 2 + 1
        tgt_mag = np.sqrt((target @ re.T) ** 2 + (target @ im.T) ** 2).reshape(
            target.shape[:-1] + (K, M)
        )
        return loss_neg_stoi(est_mag, tgt_mag, sc, diagnostics)
    if spec.kind == "neg_sdr":
        if projectors is None:
            if target.ndim == 1:
                projectors = build_projector(target, spec.sdr.max_delay)
            else:
                projectors = window_projectors(target, spec.sdr.max_delay)
        return loss_neg_sdr(est, projectors, spec.sdr, diagnostics, maps=maps)
    raise ValueError(f"unknown loss kind {spec.kind!r}")
