"""Morlet continuous wavelet transform as two crossbar matrix products."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .. import dpe
from ..numerics import stream

OMEGA0 = 6.0
TRUNCATE = 4.0      # kernel support in envelope standard deviations


@dataclass(frozen=True)
class MorletKernelBank:
    scales: np.ndarray
    length: int
    real: np.ndarray      # (n_scales, length)
    imag: np.ndarray
    omega0: float = OMEGA0

    @property
    def frequencies(self) -> np.ndarray:
        """Approximate centre frequency (cycles/sample) of each scale."""
        return self.omega0 / (2 * np.pi * self.scales)


def morlet(t, omega0: float = OMEGA0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.pi ** -0.25 * np.exp(1j * omega0 * t) * np.exp(-t ** 2 / 2)


def morlet_bank(scales, omega0: float = OMEGA0, length: int | None = None) -> MorletKernelBank:
    """One kernel row per scale, psi(t/s) sampled on a shared odd-length grid,
    zeroed beyond +-TRUNCATE*s and normalized to unit L2 norm."""
    scales = np.asarray(scales, dtype=np.float64).ravel()
    if scales.size == 0:
        raise ValueError("need at least one scale")
    if np.any(scales <= 0):
        raise ValueError("scales must be positive")
    if length is None:
        length = 2 * int(np.ceil(TRUNCATE * scales.max())) + 1
    half = (length - 1) / 2
    t = np.arange(length) - half
    rows = np.empty((scales.size, length), dtype=np.complex128)
    for i, s in enumerate(scales):
        k = morlet(t / s, omega0)
        k[np.abs(t) > TRUNCATE * s] = 0
        rows[i] = k / np.linalg.norm(k)
    return MorletKernelBank(scales, length, rows.real.copy(), rows.imag.copy(), omega0)


def parse_scales(text: str) -> np.ndarray:
    """``a:b:steps`` -> ``steps`` geometrically spaced scales from a to b."""
    try:
        a, b, n = text.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError:
        raise ValueError(f"scales must look like a:b:steps, got {text!r}") from None
    if n < 1 or a <= 0 or b <= 0:
        raise ValueError(f"bad scale range {text!r}")
    return np.geomspace(a, b, n)


def windows(signal, length: int, mode: str = "same") -> np.ndarray:
    """Sliding windows of the signal, one per output time step (T, length)."""
    x = np.asarray(signal, dtype=np.float64).ravel()
    if mode not in ("same", "valid"):
        raise ValueError(f"mode must be 'same' or 'valid', got {mode!r}")
    if length > x.size:
        raise ValueError(f"kernel length {length} exceeds signal length {x.size}")
    if mode == "same":
        left = (length - 1) // 2
        x = np.pad(x, (left, length - 1 - left))
    return np.lib.stride_tricks.sliding_window_view(x, length).copy()


def cwt_reference(signal, bank: MorletKernelBank, mode: str = "same") -> np.ndarray:
    """Full-precision power spectrum (scales x time)."""
    w = windows(signal, bank.length, mode)
    re = w @ bank.real.T
    im = w @ bank.imag.T
    return (re ** 2 + im ** 2).T


def cwt_hw(signal, bank: MorletKernelBank, engine: dpe.EngineConfig, mode: str = "same",
           cycle: int = 0) -> np.ndarray:
    """Power spectrum with the real and imaginary kernel matrices programmed on
    separate arrays (as weights, using the engine's weight scheme)."""
    w = windows(signal, bank.length, mode)
    parts = []
    for tag, k in ((0, bank.real), (1, bank.imag)):
        cfg = engine.replace(stream_tag=engine.stream_tag * 2 + tag)
        pw = dpe.program_weights(k.T, cfg, cycle)
        parts.append(dpe.matmul(w, pw, cfg).result)
    return (parts[0] ** 2 + parts[1] ** 2).T


def normalized_correlation(a, b) -> float:
    """Pearson correlation of the flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0:
        raise ZeroDivisionError("constant input has no correlation")
    return float(a @ b / den)


def synthetic_chirp(n: int = 512, f0: float = 0.02, f1: float = 0.15, tone: float = 0.06,
                    tone_amp: float = 0.5, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """Linear chirp from f0 to f1 (cycles/sample) plus a steady tone."""
    t = np.arange(n, dtype=np.float64)
    x = np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * n)))
    x += tone_amp * np.sin(2 * np.pi * tone * t)
    if noise:
        x += noise * stream(seed, "signal", 1).standard_normal(n)
    return x


def load_series(path) -> np.ndarray:
    """Single-column CSV; a non-numeric first row is treated as a header."""
    vals = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            if len(row) != 1:
                raise ValueError(f"{path}:{i + 1}: expected one column, got {len(row)}")
            try:
                vals.append(float(row[0]))
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}:{i + 1}: not a number: {row[0]!r}") from None
    if not vals:
        raise ValueError(f"{path}: no samples")
    return np.array(vals)
