"""Signal generation, SNR mixing, windowing, STFT and one-third octave bands."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

__all__ = [
    "BandPartition",
    "MixtureSpec",
    "Spectrogram",
    "gen_sine",
    "gen_uniform_noise",
    "mix_at_snr",
    "power",
    "snr_db",
    "sliding_windows",
    "overlap_average",
    "stft_mag",
    "third_octave_edges",
    "band_matrix",
    "read_signal_csv",
    "write_signal_csv",
]


@dataclass(frozen=True)
class MixtureSpec:
    snr_db: float
    seed: int
    noise_kind: str = "uniform"

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if self.noise_kind != "uniform":
            raise ValueError(f"unsupported noise kind {self.noise_kind!r}")


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # (K, M)
    frame_size: int
    hop: int

    @property
    def n_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass(frozen=True)
class BandPartition:
    """Half-open bin ranges ``[p_j, q_j)`` for ``J`` ascending bands."""

    edges: tuple[tuple[int, int], ...]
    n_bins: int

    def __post_init__(self):
        prev = 0
        for p, q in self.edges:
            if not (0 <= p < q <= self.n_bins):
                raise ValueError(f"invalid band [{p}, {q}) for {self.n_bins} bins")
            if p < prev:
                raise ValueError("bands must be ascending and non-overlapping")
            prev = q

    @property
    def n_bands(self) -> int:
        return len(self.edges)


def gen_sine(T: int) -> np.ndarray:
    """Clean reference ``sin(12*pi*t/T)`` for ``t = 0..T-1`` (six periods)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T, dtype=np.float64)
    return np.sin(12.0 * np.pi * t / T)


def gen_uniform_noise(T: int, seed: int) -> np.ndarray:
    """I.i.d. samples on [-1, 1] from a seeded PCG64 generator."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=T)


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x) / x.size)


def snr_db(clean, noise) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


def mix_at_snr(clean, noise, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``noise`` so that ``clean + noise`` has the requested SNR.

    Returns ``(mixture, scaled_noise)``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {noise.shape}")
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0 or p_noise == 0:
        raise ValueError("clean and noise must both have nonzero power")
    c = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = c * noise
    return clean + scaled, scaled


def sliding_windows(x, width: int, shift: int = 1) -> np.ndarray:
    """Windows ``x[i:i+width]`` at offsets ``0, shift, 2*shift, ...`` as rows."""
    x = np.asarray(x, dtype=np.float64)
    if shift < 1:
        raise ValueError("shift must be >= 1")
    if width < 1 or width > x.size:
        raise ValueError(f"window width {width} does not fit a signal of length {x.size}")
    view = np.lib.stride_tricks.sliding_window_view(x, width)[::shift]
    return np.ascontiguousarray(view)


def overlap_average(windows, shift: int, T: int) -> np.ndarray:
    """Inverse of :func:`sliding_windows`: average every window covering a sample."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    n, width = windows.shape
    acc = np.zeros(T)
    count = np.zeros(T)
    for i in range(n):
        start = i * shift
        stop = start + width
        if stop > T:
            raise ValueError(f"window {i} runs past the end of a length-{T} signal")
        acc[start:stop] += windows[i]
        count[start:stop] += 1
    if np.any(count == 0):
        first = int(np.flatnonzero(count == 0)[0])
        raise ValueError(f"sample {first} is not covered by any window")
    return acc / count


def hann(frame_size: int) -> np.ndarray:
    return get_window("hann", frame_size, fftbins=True)


def _check_frame(frame_size: int, hop: int) -> None:
    if frame_size < 1 or frame_size & (frame_size - 1):
        raise ValueError(f"frame_size must be a power of two, got {frame_size}")
    if hop < 1:
        raise ValueError("hop must be >= 1")


def n_frames(length: int, frame_size: int, hop: int) -> int:
    if length < frame_size:
        raise ValueError(f"signal of length {length} is shorter than one frame ({frame_size})")
    return (length - frame_size) // hop + 1


def stft_mag(x, frame_size: int = 512, hop: int = 256) -> Spectrogram:
    """Hann-windowed one-sided DFT magnitudes, shape ``(frame_size//2+1, M)``."""
    _check_frame(frame_size, hop)
    x = np.asarray(x, dtype=np.float64)
    n_frames(x.size, frame_size, hop)
    frames = sliding_windows(x, frame_size, hop) * hann(frame_size)
    mags = np.abs(np.fft.rfft(frames, axis=-1)).T
    return Spectrogram(mags, frame_size, hop)


def third_octave_edges(
    fs: float = 10000.0, frame_size: int = 512, J: int = 15, f_min: float = 150.0
) -> BandPartition:
    """One-third octave bands ``[f_min*2^(j/3), f_min*2^((j+1)/3))`` as bin ranges.

    Edge frequencies are rounded to the nearest DFT bin.
    """
    if f_min <= 0:
        raise ValueError("f_min must be positive")
    if J < 1:
        raise ValueError("J must be >= 1")
    n_bins = frame_size // 2 + 1
    nyquist = fs / 2.0
    f_edges = f_min * 2.0 ** (np.arange(J + 1) / 3.0)
    if f_edges[-1] > nyquist * (1 + 1e-12):
        raise ValueError(
            f"top band edge {f_edges[-1]:.1f} Hz exceeds the Nyquist frequency {nyquist:.1f} Hz"
        )
    bins = np.rint(f_edges * frame_size / fs).astype(int)
    edges = []
    for j in range(J):
        p, q = int(bins[j]), int(bins[j + 1])
        if q <= p:
            raise ValueError(f"band {j} collapses to zero bins at frame_size={frame_size}")
        edges.append((p, min(q, n_bins)))
    return BandPartition(tuple(edges), n_bins)


def band_matrix(bands: BandPartition) -> np.ndarray:
    """0/1 matrix ``(J, K)`` summing bins into bands."""
    m = np.zeros((bands.n_bands, bands.n_bins))
    for j, (p, q) in enumerate(bands.edges):
        m[j, p:q] = 1.0
    return m


def write_signal_csv(path, x) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "value"])
        for i, v in enumerate(x):
            w.writerow([i, repr(float(v))])


def read_signal_csv(path) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["index", "value"]:
            raise ValueError(f"{path}: expected header 'index,value', got {header}")
        values = [float(row[1]) for row in r if row]
    out = np.array(values, dtype=np.float64)
    if out.size == 0 or not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: signal must be non-empty and finite")
    return out
