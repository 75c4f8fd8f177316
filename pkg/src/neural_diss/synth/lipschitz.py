"""Log-det Lipschitz penalties on the CLF, its derivative network and the controller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lipcert import (
    LipVerdict,
    NotPositiveDefinite,
    build_lipsdp_matrix,
    certify_derivative_lipschitz,
    certify_network_lipschitz,
    lipsdp_vjp,
    logdet_psd,
    problem_for,
)
from ..net import FeedforwardNet, Grads, derivative_network, derivative_network_vjp
from .params import HyperParams

# non-PD branch: c * (PENALTY + PENALTY_SLOPE * (-lambda_min))
PENALTY = 1e3
PENALTY_SLOPE = 1e3


@dataclass
class Multipliers:
    """Per-neuron multipliers of the three certificates."""

    lam_L: np.ndarray
    lam_dL: np.ndarray
    lam_C: np.ndarray

    @classmethod
    def ones_for(cls, V: FeedforwardNet, g: FeedforwardNet) -> "Multipliers":
        nv = sum(V.hidden_widths)
        return cls(np.ones(nv), np.ones(nv), np.ones(sum(g.hidden_widths)))

    def as_list(self) -> list[np.ndarray]:
        return [self.lam_L, self.lam_dL, self.lam_C]

    def to_dict(self) -> dict:
        return {k: [float(x) for x in v] for k, v in zip(("lam_L", "lam_dL", "lam_C"), self.as_list())}

    @classmethod
    def from_dict(cls, d: dict) -> "Multipliers":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("lam_L", "lam_dL", "lam_C")))


@dataclass
class LipLossResult:
    value: float
    terms: tuple[float, float, float]
    pd: tuple[bool, bool, bool]
    grad_V: Grads
    grad_g: Grads
    grad_lam: list[np.ndarray]


def _term(problem, weight: float) -> tuple[float, bool, np.ndarray]:
    """Value, PD flag and ``d value / d M`` of ``-weight * logdet M`` (or its penalty)."""
    M = build_lipsdp_matrix(problem)
    try:
        ld = logdet_psd(M)
        return -weight * ld, True, -weight * np.linalg.inv(M)
    except NotPositiveDefinite:
        evals, evecs = np.linalg.eigh(M)
        v = evecs[:, 0]
        value = weight * (PENALTY + PENALTY_SLOPE * max(0.0, -float(evals[0])))
        return value, False, -weight * PENALTY_SLOPE * np.outer(v, v)


def loss_lipschitz(V: FeedforwardNet, g: FeedforwardNet, lambdas: Multipliers, hp: HyperParams) -> LipLossResult:
    """Negated weighted log-det of the three certificate matrices.

    Never raises on a non-PD matrix: that term becomes a large finite penalty
    growing with the most negative eigenvalue.
    """
    gV, gg = Grads.zeros_like(V), Grads.zeros_like(g)
    grad_lam = [np.zeros_like(l) for l in lambdas.as_list()]
    terms, pd = [], []
    if hp.cl[0] > 0:
        p = problem_for(V, hp.lip_L, lambdas.lam_L)
        val, ok, m_bar = _term(p, hp.cl[0])
        w_bar, grad_lam[0] = lipsdp_vjp(p, m_bar)
        for a, b in zip(gV.weights, w_bar):
            a += b
    else:
        val, ok = 0.0, True
    terms.append(val)
    pd.append(ok)

    if hp.cl[1] > 0:
        dV = derivative_network(V)
        p = problem_for(dV, hp.lip_dL, lambdas.lam_dL)
        val, ok, m_bar = _term(p, hp.cl[1])
        w_hat_bar, grad_lam[1] = lipsdp_vjp(p, m_bar)
        for a, b in zip(gV.weights, derivative_network_vjp(V, w_hat_bar)):
            a += b
    else:
        val, ok = 0.0, True
    terms.append(val)
    pd.append(ok)

    if hp.cl[2] > 0:
        p = problem_for(g, hp.lip_C, lambdas.lam_C)
        val, ok, m_bar = _term(p, hp.cl[2])
        w_bar, grad_lam[2] = lipsdp_vjp(p, m_bar)
        for a, b in zip(gg.weights, w_bar):
            a += b
    else:
        val, ok = 0.0, True
    terms.append(val)
    pd.append(ok)
    return LipLossResult(float(sum(terms)), tuple(terms), tuple(pd), gV, gg, grad_lam)


def lipschitz_verdicts(V: FeedforwardNet, g: FeedforwardNet, lambdas: Multipliers, hp: HyperParams) -> list[LipVerdict]:
    """Strict re-check of all three bounds (independent of the loss weights)."""
    return [
        certify_network_lipschitz(V, hp.lip_L, lambdas.lam_L, "L_L"),
        certify_derivative_lipschitz(V, hp.lip_dL, lambdas.lam_dL, "L_dL"),
        certify_network_lipschitz(g, hp.lip_C, lambdas.lam_C, "L_C"),
    ]
