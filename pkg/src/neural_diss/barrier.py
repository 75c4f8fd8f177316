"""Product-form control barrier function for box state spaces.

    h(x) = s * prod_i (x_i - lo_i)(hi_i - x_i),   s = 1 / prod_i (w_i / 2)^2

vanishes on every face, is positive inside and equals 1 at the center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import minimize

from .sampling import BoxDomain

HEADROOM = 1.1


@dataclass(frozen=True)
class BarrierConstants:
    lip_h: float  # Lipschitz constant of h (also the gradient bound M_h)
    lip_dh: float  # Lipschitz constant of grad h
    grad_bound: float

    def scaled(self, k: float) -> "BarrierConstants":
        return BarrierConstants(k * self.lip_h, k * self.lip_dh, k * self.grad_bound)


@dataclass(frozen=True)
class BoxBarrier:
    domain: BoxDomain
    scale: float = field(default=float("nan"))

    def __post_init__(self):
        if not np.isfinite(self.scale):
            half = 0.5 * (self.domain.hi - self.domain.lo)
            object.__setattr__(self, "scale", float(1.0 / np.prod(half**2)))

    def _factors(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain.lo, self.domain.hi
        p = (x - lo) * (hi - x)
        dp = (hi - x) - (x - lo)
        return p, dp

    def value(self, x) -> np.ndarray:
        p, _ = self._factors(x)
        return self.scale * np.prod(p, axis=-1)

    def gradient(self, x) -> np.ndarray:
        p, dp = self._factors(x)
        n = p.shape[-1]
        out = np.empty(np.broadcast_shapes(p.shape))
        for i in range(n):
            others = np.prod(np.delete(p, i, axis=-1), axis=-1)
            out[..., i] = self.scale * dp[..., i] * others
        return out

    def hessian(self, x) -> np.ndarray:
        p, dp = self._factors(x)
        n = p.shape[-1]
        H = np.empty(p.shape + (n,))
        for i in range(n):
            for j in range(n):
                if i == j:
                    H[..., i, i] = -2.0 * self.scale * np.prod(np.delete(p, i, axis=-1), axis=-1)
                else:
                    rest = np.prod(np.delete(p, [i, j], axis=-1), axis=-1)
                    H[..., i, j] = self.scale * dp[..., i] * dp[..., j] * rest
        return H

    @cached_property
    def constants(self) -> BarrierConstants:
        return barrier_constants(self)


def barrier_value(b: BoxBarrier, x):
    return b.value(x)


def barrier_gradient(b: BoxBarrier, x):
    return b.gradient(x)


def _grid(domain: BoxDomain, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(domain.lo, domain.hi)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def _polish(fun, x0, domain: BoxDomain) -> float:
    res = minimize(lambda z: -fun(z), x0, method="L-BFGS-B", bounds=list(zip(domain.lo, domain.hi)))
    return max(-float(res.fun), fun(x0))


def _sup(fun_batch, fun_one, domain: BoxDomain, per_axis: int, n_starts: int = 5) -> float:
    pts = _grid(domain, per_axis)
    vals = fun_batch(pts)
    best = float(vals.max())
    for i in np.argsort(vals)[-n_starts:]:
        best = max(best, _polish(fun_one, pts[i], domain))
    return best


def barrier_constants(b: BoxBarrier) -> BarrierConstants:
    """``(L_h, L_dh, M_h)`` with 10% headroom.

    1-D boxes use the closed forms ``|h'| <= s (hi - lo)`` and ``|h''| = 2 s``;
    higher dimensions maximize over a dense grid and polish the best grid
    points with a bounded quasi-Newton search.
    """
    d = b.domain.dim
    if d == 1:
        width = float(b.domain.hi[0] - b.domain.lo[0])
        lip_h, lip_dh = b.scale * width, 2.0 * b.scale
    else:
        per_axis = {2: 401, 3: 61}.get(d, max(5, int(round(2e5 ** (1.0 / d)))))
        lip_h = _sup(
            lambda X: np.linalg.norm(b.gradient(X), axis=1),
            lambda z: float(np.linalg.norm(b.gradient(z))),
            b.domain,
            per_axis,
        )
        lip_dh = _sup(
            lambda X: np.abs(np.linalg.eigvalsh(b.hessian(X))).max(axis=1),
            lambda z: float(np.abs(np.linalg.eigvalsh(b.hessian(z))).max()),
            b.domain,
            per_axis,
        )
    return BarrierConstants(HEADROOM * lip_h, HEADROOM * lip_dh, HEADROOM * lip_h)
