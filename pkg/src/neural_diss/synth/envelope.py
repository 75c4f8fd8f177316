from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KlEnvelope:
    """Comparison functions implied by a certified CLF with power-law bounds.

    beta(s, t)  = (2 k2 s^g2 exp(-kappa t) / k1)^(1/g1)
    gamma(r)    = (2 kw r^gw / (kappa k1))^(1/g1)
    """

    k1: float
    gamma1: float
    k2: float
    gamma2: float
    kw: float
    gamma_w: float
    kappa: float

    def beta(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        inner = 2.0 * self.k2 * s**self.gamma2 * np.exp(-self.kappa * t) / self.k1
        return inner ** (1.0 / self.gamma1)

    def gamma(self, r):
        r = np.asarray(r, dtype=float)
        return (2.0 * self.kw * r**self.gamma_w / (self.kappa * self.k1)) ** (1.0 / self.gamma1)

    def bound(self, s, t, r):
        return self.beta(s, t) + self.gamma(r)


def kl_envelope(hp, kappa: float | None = None) -> KlEnvelope:
    kappa = hp.kappa if kappa is None else kappa
    if kappa <= 0 or hp.k1 <= 0:
        raise ValueError("envelope needs kappa > 0 and k1 > 0")
    return KlEnvelope(hp.k1, hp.gamma1, hp.k2, hp.gamma2, hp.kw, hp.gamma_w, kappa)
