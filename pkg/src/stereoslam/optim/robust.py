from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 95% chi-square quantiles for 2 and 3 degrees of freedom.
CHI2_MONO = 5.991
CHI2_STEREO = 7.815
# 99.9% quantiles: gate for deleting map observations, which are re-tested by
# every overlapping local BA window.
CHI2_MONO_GROSS = 13.816
CHI2_STEREO_GROSS = 16.266


@dataclass(frozen=True)
class HuberKernel:
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")

    def cost(self, r2):
        return huber_cost(r2, self.delta)

    def weight(self, r2):
        return huber_weight(r2, self.delta)


def huber_cost(r2, delta):
    """Huber cost of a squared normalized residual: r2 inside, 2*d*sqrt(r2) - d^2 beyond."""
    r2 = np.asarray(r2, dtype=float)
    d2 = np.asarray(delta, dtype=float) ** 2
    out = np.where(r2 <= d2, r2, 2.0 * np.asarray(delta) * np.sqrt(np.maximum(r2, 0.0)) - d2)
    return out if out.ndim else float(out)


def huber_weight(r2, delta):
    """Derivative of huber_cost with respect to r2 (the IRLS weight)."""
    r2 = np.asarray(r2, dtype=float)
    d = np.asarray(delta, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(r2 <= d * d, 1.0, d / np.sqrt(np.maximum(r2, 1e-300)))
    return out if out.ndim else float(out)
