"""AWGN training-set augmentation.

For each perturbation coefficient phi, every slice gets an independent
noisy copy: zero-mean Gaussian noise with per-column standard deviation
phi * mean(|column|) is added to the real and imaginary columns. The
augmented set is the union of the originals and all per-phi copies.

The noise scale uses the mean absolute value of each column rather than
the raw signed mean, which for I/Q data is near zero and can be negative;
this keeps the noise power proportional to the signal level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datapipe import SliceExample

DEFAULT_PHI = (0.20, 0.10, 0.05, 0.01)


@dataclass(frozen=True)
class AugmentConfig:
    phi: tuple[float, ...] = DEFAULT_PHI
    seed: int = 0

    def __post_init__(self):
        if any(p < 0 for p in self.phi):
            raise ValueError(f"perturbation coefficients must be >= 0, got {self.phi}")


def augment_slices(slices: list[SliceExample], cfg: AugmentConfig) -> list[SliceExample]:
    """Return originals followed by one noisy copy per (phi, slice)."""
    if not cfg.phi:
        return list(slices)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA46]))
    out = list(slices)
    for phi in cfg.phi:
        for s in slices:
            scale = np.mean(np.abs(s.data), axis=0)  # per-column signal level
            noise = rng.normal(0.0, 1.0, size=s.data.shape) * (phi * scale)
            out.append(
                SliceExample(
                    (s.data + noise).astype(np.float32),
                    s.label,
                    s.scenario_name,
                    s.comm_id,
                )
            )
    return out
