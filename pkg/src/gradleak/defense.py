"""Gradient perturbation and compression applied before a client transmits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .federation import ClientUpdate

MECHANISMS = ("none", "laplace", "gaussian", "compress")


@dataclass(frozen=True)
class DefenseConfig:
    mechanism: str = "none"
    level: float = 0.0
    base_unit: float = 1e-4  # noise scale per unit of level
    keep_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown defense mechanism {self.mechanism!r}")
        if self.level < 0 or self.base_unit < 0:
            raise ValueError("noise level and base unit must be non-negative")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must lie in (0, 1]")

    @property
    def scale(self) -> float:
        """Laplace scale b (or Gaussian sigma) for this level."""
        return self.level * self.base_unit


def perturb(update: ClientUpdate, cfg: DefenseConfig) -> ClientUpdate:
    """Add zero-mean noise to every gradient entry (or compress).

    Noise is drawn as a unit-scale sample multiplied by ``cfg.scale``, so for
    a fixed seed the realisations at different levels are proportional.
    """
    if cfg.mechanism == "compress":
        return compress(update, cfg.keep_ratio)
    b = cfg.scale
    if cfg.mechanism == "none" or b == 0:
        return update
    rng = np.random.default_rng(cfg.seed)
    noisy = []
    for g in update.grads:
        if cfg.mechanism == "laplace":
            unit = rng.laplace(0.0, 1.0, size=g.shape)
        else:
            unit = rng.standard_normal(size=g.shape)
        noisy.append(g + b * unit)
    return update.replace_grads(noisy)


def compress(update: ClientUpdate, keep_ratio: float) -> ClientUpdate:
    """Keep the ceil(r*d) largest-magnitude entries over all tensors, zero the rest."""
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must lie in (0, 1]")
    flat = update.flat()
    keep = math.ceil(keep_ratio * flat.size)
    if keep >= flat.size:
        return update
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    out, pos = [], 0
    for g in update.grads:
        n = g.size
        out.append(np.where(mask[pos:pos + n].reshape(g.shape), g, 0.0))
        pos += n
    return update.replace_grads(out)
