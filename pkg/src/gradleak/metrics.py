"""Reconstruction quality metrics: MSE, SSIM and attack success rate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SUCCESS_THRESHOLD = 0.9


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(img, win.shape), win, axes=([2, 3], [0, 1]))


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray, c1: float, c2: float) -> float:
    mu_a = _filter(a, win)
    mu_b = _filter(b, win)
    saa = _filter(a * a, win) - mu_a * mu_a
    sbb = _filter(b * b, win) - mu_b * mu_b
    sab = _filter(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid window positions.

    Inputs are (H, W) or (C, H, W); multi-channel SSIM is the mean of the
    per-channel values.  Images smaller than the window fall back to a
    uniform window of side ``min(H, W)``.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    h, w = a.shape[-2:]
    if min(h, w) < win_size:
        k = min(h, w)
        win = np.full((k, k), 1.0 / (k * k))
    else:
        win = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return float(np.mean([_ssim_channel(a[c], b[c], win, c1, c2) for c in range(a.shape[0])]))


def asr(ssim_values: Sequence[float], threshold: float = SUCCESS_THRESHOLD) -> float:
    """Fraction of reconstructions whose SSIM reaches ``threshold`` (inclusive)."""
    vals = list(ssim_values)
    if not vals:
        raise ValueError("asr of an empty list is undefined")
    return sum(1 for s in vals if s is not None and s >= threshold) / len(vals)


@dataclass(frozen=True)
class SuccessSummary:
    asr: float
    mean_ssim: float | None  # None when nothing succeeded
    mean_mse: float | None
    n: int
    n_success: int


def summarize_successful(results: Iterable, threshold: float = SUCCESS_THRESHOLD) -> SuccessSummary:
    """ASR plus SSIM/MSE averaged over the successful attacks only.

    ``results`` items expose ``ssim`` and ``mse`` as attributes or keys; a
    missing SSIM (failed attack) counts as unsuccessful.
    """
    rows = [(_get(r, "ssim"), _get(r, "mse")) for r in results]
    if not rows:
        return SuccessSummary(0.0, None, None, 0, 0)
    ok = [(s, m) for s, m in rows if s is not None and s >= threshold]
    if not ok:
        return SuccessSummary(0.0, None, None, len(rows), 0)
    return SuccessSummary(
        len(ok) / len(rows),
        float(np.mean([s for s, _ in ok])),
        float(np.mean([m for _, m in ok])),
        len(rows),
        len(ok),
    )


def _get(r, key):
    return r.get(key) if isinstance(r, dict) else getattr(r, key)
