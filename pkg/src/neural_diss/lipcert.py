"""Semidefinite Lipschitz certificates for feedforward networks and a
reverse-Weibull Lipschitz estimator for black-box maps.

The matrix for a network with weights ``W_0..W_N``, slope-restricted
activations in ``[a, b]`` and multipliers ``lam >= 0`` (one per hidden
neuron) is

    [A; B]^T [[2ab Lam, -(a+b) Lam], [-(a+b) Lam, 2 Lam]] [A; B]
        + [[L^2 I, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, -W_N^T], [0, 0, -W_N, I]]

laid out over the blocks (input, hidden 1..N-1, hidden N, output). It is PSD
only if the network is ``L``-Lipschitz.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .net import ACTIVATIONS, ContractViolation, FeedforwardNet, derivative_network

log = logging.getLogger(__name__)

PSD_TOL = -1e-12


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, pivot_index: int, pivot: float = float("nan")):
        super().__init__(f"matrix not positive definite (pivot {pivot_index} = {pivot:.3g})")
        self.pivot_index = pivot_index
        self.pivot = pivot


@dataclass
class LipSdpProblem:
    weights: list[np.ndarray]
    lam: np.ndarray
    slope_min: float
    slope_max: float
    lip_bound: float

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if np.any(self.lam < 0):
            raise ContractViolation("multipliers must be nonnegative")
        n_hidden = sum(w.shape[0] for w in self.weights[:-1])
        if self.lam.size != n_hidden:
            raise ContractViolation(f"need {n_hidden} multipliers, got {self.lam.size}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"weight {i} not conformant with weight {i - 1}")


def slope_bounds(tags: Sequence[str]) -> tuple[float, float]:
    """Loosest slope interval enclosing all listed activations."""
    if not tags:
        return 0.0, 1.0
    return (min(ACTIVATIONS[t].slope_min for t in tags), max(ACTIVATIONS[t].slope_max for t in tags))


def problem_for(net: FeedforwardNet, lip_bound: float, lam) -> LipSdpProblem:
    a, b = slope_bounds(net.activations)
    return LipSdpProblem(net.weights, lam, a, b, lip_bound)


def _layout(weights):
    n0 = weights[0].shape[1]
    widths = [w.shape[0] for w in weights[:-1]]
    nh = sum(widths)
    m = weights[-1].shape[0]
    return n0, widths, nh, m


def _stack_a(weights, n0, widths, nh):
    """``C = [A; B]`` over the (input, hidden) columns."""
    a = np.zeros((nh, n0 + nh))
    row, col = 0, 0
    for i, w in enumerate(weights[:-1]):
        cols_in = n0 if i == 0 else widths[i - 1]
        a[row : row + w.shape[0], col : col + cols_in] = w
        col += cols_in
        row += w.shape[0]
    b = np.zeros((nh, n0 + nh))
    b[:, n0:] = np.eye(nh)
    return np.vstack([a, b])


def _q_matrix(lam, alpha, beta):
    L = np.diag(lam)
    return np.block([[2 * alpha * beta * L, -(alpha + beta) * L], [-(alpha + beta) * L, 2 * L]])


def build_lipsdp_matrix(p: LipSdpProblem) -> np.ndarray:
    ws = p.weights
    n0, widths, nh, m = _layout(ws)
    dim = n0 + nh + m
    M = np.zeros((dim, dim))
    if nh:
        C = _stack_a(ws, n0, widths, nh)
        M[: n0 + nh, : n0 + nh] = C.T @ _q_matrix(p.lam, p.slope_min, p.slope_max) @ C
    M[:n0, :n0] += p.lip_bound**2 * np.eye(n0)
    last = slice(n0 + nh - (widths[-1] if widths else n0), n0 + nh)
    out = slice(n0 + nh, dim)
    M[last, out] -= ws[-1].T
    M[out, last] -= ws[-1]
    M[out, out] += np.eye(m)
    return 0.5 * (M + M.T)


def lipsdp_vjp(p: LipSdpProblem, m_bar: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Given ``m_bar = d loss / d M`` (symmetric), return gradients on the
    weights and on the multipliers."""
    ws = p.weights
    n0, widths, nh, m = _layout(ws)
    G = 0.5 * (m_bar + m_bar.T)
    grads = [np.zeros_like(w) for w in ws]
    lam_bar = np.zeros(nh)
    if nh:
        C = _stack_a(ws, n0, widths, nh)
        Q = _q_matrix(p.lam, p.slope_min, p.slope_max)
        Gs = G[: n0 + nh, : n0 + nh]
        c_bar = 2.0 * Q @ C @ Gs
        row, col = 0, 0
        for i, w in enumerate(ws[:-1]):
            cols_in = n0 if i == 0 else widths[i - 1]
            grads[i] += c_bar[row : row + w.shape[0], col : col + cols_in]
            col += cols_in
            row += w.shape[0]
        P = C @ Gs @ C.T
        a, b = p.slope_min, p.slope_max
        d11 = np.diag(P[:nh, :nh])
        d12 = np.diag(P[:nh, nh:])
        d22 = np.diag(P[nh:, nh:])
        lam_bar = 2 * a * b * d11 - 2 * (a + b) * d12 + 2 * d22
    last = slice(n0 + nh - (widths[-1] if widths else n0), n0 + nh)
    out = slice(n0 + nh, n0 + nh + m)
    grads[-1] += -2.0 * G[out, last]
    return grads, lam_bar


def logdet_psd(m: np.ndarray) -> float:
    """``log det`` through a Cholesky factorization."""
    m = np.asarray(m, dtype=float)
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ContractViolation("logdet_psd needs a symmetric matrix")
    c, info = lapack.dpotrf(m, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1, float(c[info - 1, info - 1]) if info - 1 < len(c) else float("nan"))
    if info < 0:
        raise ContractViolation(f"dpotrf argument {-info} invalid")
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def pivoted_ldl_pivots(m: np.ndarray, zero_tol: float = 1e-13) -> np.ndarray:
    """Diagonal pivots of an LDL^T factorization with symmetric (largest
    diagonal first) pivoting. A matrix is PSD iff no pivot is negative and
    the factorization does not stall on a zero pivot with nonzero coupling;
    a stall is reported as the pivot ``-max|coupling|``."""
    A = np.array(m, dtype=float)
    n = A.shape[0]
    scale = max(1.0, float(np.abs(A).max()) if n else 1.0)
    pivots = []
    for k in range(n):
        j = k + int(np.argmax(np.diag(A)[k:]))
        if j != k:
            A[[k, j], :] = A[[j, k], :]
            A[:, [k, j]] = A[:, [j, k]]
        d = A[k, k]
        if d <= zero_tol * scale:
            rest = A[k:, k:]
            coupling = np.abs(rest - np.diag(np.diag(rest))).max() if rest.shape[0] > 1 else 0.0
            pivots.append(d)
            if coupling > zero_tol * scale:
                pivots.append(-coupling)
            pivots.extend(np.diag(rest)[1:])
            break
        pivots.append(d)
        col = A[k + 1 :, k].copy()
        A[k + 1 :, k + 1 :] -= np.outer(col, col) / d
    return np.asarray(pivots)


@dataclass
class LipVerdict:
    """Certification report fragment for one Lipschitz bound."""

    bound_name: str
    bound_value: float
    certified: bool
    min_pivot: float
    lambda_hash: str
    diagnostics: str = ""

    def to_dict(self) -> dict:
        return {
            "bound_name": self.bound_name,
            "bound_value": self.bound_value,
            "certified": self.certified,
            "psd_margin": self.min_pivot,
            "lambda_hash": self.lambda_hash,
            "diagnostics": self.diagnostics,
        }


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()[:16]


def certify_matrix(p: LipSdpProblem, name: str) -> LipVerdict:
    M = build_lipsdp_matrix(p)
    pivots = pivoted_ldl_pivots(M)
    min_pivot = float(pivots.min()) if pivots.size else 0.0
    ok = bool(min_pivot >= PSD_TOL)
    diag = "" if ok else f"negative pivot {min_pivot:.3e} in {M.shape[0]}x{M.shape[0]} matrix"
    return LipVerdict(name, float(p.lip_bound), ok, min_pivot, array_hash(p.lam), diag)


def certify_network_lipschitz(net: FeedforwardNet, lip_bound: float, lam, name: str = "L") -> LipVerdict:
    """Certified iff the LipSDP matrix is PSD (all pivots >= -1e-12)."""
    return certify_matrix(problem_for(net, lip_bound, lam), name)


def certify_derivative_lipschitz(net: FeedforwardNet, lip_bound: float, lam, name: str = "L_dL") -> LipVerdict:
    """Same check applied to the derivative network of a scalar network.

    Exact for one hidden layer; for deeper nets the derivative network is
    only the surrogate bound described in :func:`net.derivative_network`.
    """
    verdict = certify_network_lipschitz(derivative_network(net), lip_bound, lam, name)
    if net.depth > 1:
        verdict.diagnostics = (verdict.diagnostics + "; " if verdict.diagnostics else "") + (
            "surrogate derivative network (depth > 1)"
        )
    return verdict


# ---------------------------------------------------------------------------
# black-box Lipschitz estimation


@dataclass
class WeibullFitConfig:
    n_batches: int = 30
    pairs_per_batch: int = 1000
    pair_radius: float = 0.1
    fit_grid: int = 60

    def __post_init__(self):
        if min(self.n_batches, self.pairs_per_batch, self.fit_grid) < 1:
            raise ContractViolation("Weibull config counts must be >= 1")
        if self.pair_radius <= 0:
            raise ContractViolation("pair_radius must be positive")


@dataclass
class LipschitzEstimate:
    value: float
    sample_max: float
    batch_maxima: np.ndarray
    shape: float = float("nan")
    scale: float = float("nan")
    fallback: bool = False

    def __float__(self):
        return self.value


def sample_slopes(
    query: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    n_pairs: int,
    radius: float,
    rng: np.random.Generator,
    mask=None,
) -> np.ndarray:
    """Slopes ``|f(a)-f(b)| / |a-b|`` over random pairs with ``|a-b| <= radius``.

    Only coordinates where ``mask`` is true are perturbed. ``query`` takes a
    batch of points (rows) and returns a batch of outputs."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dim = lo.size
    mask = np.ones(dim, bool) if mask is None else np.asarray(mask, bool)
    k = int(mask.sum())
    a = rng.uniform(lo, hi, size=(n_pairs, dim))
    b = a.copy()
    todo = np.arange(n_pairs)
    while todo.size:
        # uniform direction, radius ~ U(ball)
        v = rng.normal(size=(todo.size, k))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = radius * rng.uniform(size=(todo.size, 1)) ** (1.0 / k)
        cand = a[todo].copy()
        cand[:, mask] = np.clip(cand[:, mask] + r * v, lo[mask], hi[mask])
        b[todo] = cand
        sep = np.linalg.norm(a[todo] - b[todo], axis=1)
        todo = todo[sep < 1e-12]
    fa = np.asarray(query(a), dtype=float).reshape(n_pairs, -1)
    fb = np.asarray(query(b), dtype=float).reshape(n_pairs, -1)
    return np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(a - b, axis=1)


def _weibull_profile_loglik(x: np.ndarray, loc: float, shape: float) -> tuple[float, float]:
    """Log-likelihood of a reverse Weibull with the scale at its profile MLE."""
    y = loc - x
    if np.any(y <= 0):
        return -np.inf, np.nan
    scale = float(np.mean(y**shape)) ** (1.0 / shape)
    if not np.isfinite(scale) or scale <= 0:
        return -np.inf, np.nan
    z = y / scale
    ll = x.size * (np.log(shape) - np.log(scale)) + (shape - 1) * np.sum(np.log(z)) - np.sum(z**shape)
    return float(ll), scale


def fit_reverse_weibull(maxima: np.ndarray, grid: int = 60) -> tuple[float, float, float]:
    """Coarse-to-fine likelihood search over (location, shape); the scale is
    profiled out in closed form. Shapes are restricted to ``[1, 50]`` where
    the likelihood has an interior maximum."""
    x = np.asarray(maxima, dtype=float)
    top = float(x.max())
    spread = float(x.max() - x.min())
    loc_lo, loc_hi = top + 1e-6 * spread, top + 2.0 * spread
    shp_lo, shp_hi = np.log(1.0), np.log(50.0)
    best = (-np.inf, top, 1.0, np.nan)
    for _ in range(6):
        locs = np.linspace(loc_lo, loc_hi, grid)
        shapes = np.exp(np.linspace(shp_lo, shp_hi, grid))
        for loc in locs:
            for shp in shapes:
                ll, sc = _weibull_profile_loglik(x, loc, shp)
                if ll > best[0]:
                    best = (ll, loc, shp, sc)
        dl = (loc_hi - loc_lo) / (grid - 1)
        ds = (shp_hi - shp_lo) / (grid - 1)
        loc_lo, loc_hi = max(top + 1e-9 * spread, best[1] - 2 * dl), best[1] + 2 * dl
        shp_lo, shp_hi = max(0.0, np.log(best[2]) - 2 * ds), min(np.log(50.0), np.log(best[2]) + 2 * ds)
    if not np.isfinite(best[0]):
        raise RuntimeError("reverse Weibull fit failed")
    return best[1], best[3], best[2]


def estimate_lipschitz_black_box(
    query: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    cfg: WeibullFitConfig = WeibullFitConfig(),
    seed: int = 0,
    mask=None,
) -> LipschitzEstimate:
    """Extreme-value Lipschitz estimate: per-batch maximum slopes, a reverse
    Weibull fit to the maxima, and its location (upper endpoint)."""
    rng = np.random.default_rng(seed)
    maxima = np.array(
        [
            sample_slopes(query, lo, hi, cfg.pairs_per_batch, cfg.pair_radius, rng, mask).max()
            for _ in range(cfg.n_batches)
        ]
    )
    top = float(maxima.max())
    if top - float(maxima.min()) <= 1e-12 * max(1.0, top):
        # every batch hit the same slope: degenerate fit, location is the max
        return LipschitzEstimate(top, top, maxima)
    try:
        loc, scale, shape = fit_reverse_weibull(maxima, cfg.fit_grid)
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        log.warning("reverse Weibull fit failed (%s); falling back to 1.1 x sample max", exc)
        return LipschitzEstimate(1.1 * top, top, maxima, fallback=True)
    return LipschitzEstimate(max(loc, top), top, maxima, shape=shape, scale=scale)
