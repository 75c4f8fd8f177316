"""Scenario residuals, hinge losses and their exact full-dataset maxima."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..barrier import BoxBarrier
from ..net import FeedforwardNet, LossTrace, PlantNode, SaturationBox, forward, forward_cached, input_gradient
from ..plant import BlackBoxSystem, eval_dynamics, jacobian_u_fd
from ..sampling import PairBatch, SampleCover
from .params import HyperParams

FAMILIES = ("a", "b", "c", "d")


# ---------------------------------------------------------------------------
# model adapters: networks or hand-written callables


def clf_value(V, P: np.ndarray) -> np.ndarray:
    if isinstance(V, FeedforwardNet):
        return forward(V, P)[:, 0]
    return np.asarray(V.value(P), dtype=float).reshape(-1)


def clf_gradient(V, P: np.ndarray) -> np.ndarray:
    if isinstance(V, FeedforwardNet):
        return input_gradient(V, P)
    return np.asarray(V.gradient(P), dtype=float).reshape(P.shape)


def control_raw(g, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    if isinstance(g, FeedforwardNet):
        return forward(g, np.concatenate([X, W], axis=1))
    return np.asarray(g(X, W), dtype=float).reshape(X.shape[0], -1)


def saturation_for(sys_: BlackBoxSystem) -> Optional[SaturationBox]:
    if sys_.input_box is None:
        return None
    return SaturationBox(sys_.input_box.lo, sys_.input_box.hi)


def closed_loop_inputs(g, sys_: BlackBoxSystem, X, W) -> np.ndarray:
    raw = control_raw(g, X, W)
    box = saturation_for(sys_)
    return raw if box is None else box.clamp(raw)


# ---------------------------------------------------------------------------
# batch residuals


@dataclass
class ResidualBundle:
    r_a: np.ndarray
    r_b: np.ndarray
    r_c: np.ndarray
    r_d: np.ndarray
    separated: np.ndarray
    # kept for the reverse pass
    pairs: np.ndarray = field(repr=False, default=None)
    X2: np.ndarray = field(repr=False, default=None)
    W2: np.ndarray = field(repr=False, default=None)
    raw_u: np.ndarray = field(repr=False, default=None)
    F2: np.ndarray = field(repr=False, default=None)
    grad_h: np.ndarray = field(repr=False, default=None)

    def families(self) -> dict[str, np.ndarray]:
        """Residual vectors restricted to the tuples they apply to."""
        s = self.separated
        return {"a": self.r_a[s], "b": self.r_b[s], "c": self.r_c[s], "d": self.r_d}

    def eta_star(self) -> float:
        return max((float(v.max()) for v in self.families().values() if v.size), default=-np.inf)


def _dist(a, b):
    return np.linalg.norm(np.atleast_2d(a) - np.atleast_2d(b), axis=1)


def scp_residuals(V, g, sys_: BlackBoxSystem, bar: BoxBarrier, batch: PairBatch, hp: HyperParams) -> ResidualBundle:
    """Residuals of the four sampled conditions for every tuple in ``batch``.

    ``separated`` flags the tuples whose (a), (b) and (c) residuals count;
    (d) only involves ``x_q`` and always counts.
    """
    B = len(batch)
    X2 = np.concatenate([batch.xq, batch.xr])
    W2 = np.concatenate([batch.wq, batch.wr])
    raw = control_raw(g, X2, W2)
    box = saturation_for(sys_)
    F2 = eval_dynamics(sys_, X2, raw if box is None else box.clamp(raw))
    if not np.all(np.isfinite(F2)):
        raise FloatingPointError(f"{sys_.name}: non-finite dynamics inside the sample set")
    P = np.concatenate([batch.xq, batch.xr], axis=1)
    v = clf_value(V, P)
    dv = clf_gradient(V, P)
    n = X2.shape[1]
    lie = np.sum(dv[:, :n] * F2[:B], axis=1) + np.sum(dv[:, n:] * F2[B:], axis=1)
    dx = _dist(batch.xq, batch.xr)
    dw = _dist(batch.wq, batch.wr)
    r_a = -v + hp.k1 * dx**hp.gamma1
    r_b = v - hp.k2 * dx**hp.gamma2
    r_c = lie + hp.kappa * v - hp.kw * dw**hp.gamma_w
    gh = bar.gradient(batch.xq)
    r_d = -np.sum(gh * F2[:B], axis=1) - hp.mu_h * bar.value(batch.xq)
    return ResidualBundle(r_a, r_b, r_c, r_d, np.asarray(batch.separated, bool), P, X2, W2, raw, F2, gh)


# ---------------------------------------------------------------------------
# hinge loss


def _active(res: ResidualBundle, eta: float) -> dict[str, np.ndarray]:
    s = res.separated
    return {
        "a": s & (res.r_a > eta),
        "b": s & (res.r_b > eta),
        "c": s & (res.r_c > eta),
        "d": res.r_d > eta,
    }


def loss_main(res: ResidualBundle, eta: float, hp: HyperParams) -> float:
    act = _active(res, eta)
    total = 0.0
    for c, fam in zip(hp.c, FAMILIES):
        r = getattr(res, "r_" + fam)
        total += c * float(np.sum(r[act[fam]] - eta))
    return total


def loss_main_eta_grad(res: ResidualBundle, eta: float, hp: HyperParams) -> float:
    """Subgradient in ``eta``: minus the weighted count of active hinges."""
    act = _active(res, eta)
    return -sum(c * int(act[f].sum()) for c, f in zip(hp.c, FAMILIES))


def loss_main_trace(
    res: ResidualBundle, eta: float, hp: HyperParams, sys_: BlackBoxSystem, fd_jacobian: bool = True
) -> LossTrace:
    """Active-set seeds of the hinge loss for :func:`net.parameter_gradient`."""
    act = _active(res, eta)
    c0, c1, c2, c3 = hp.c
    B = res.r_a.size
    value_seed = -c0 * act["a"] + c1 * act["b"] + c2 * hp.kappa * act["c"]
    dir_seed = c2 * act["c"].astype(float)
    f_seed = np.zeros_like(res.F2)
    f_seed[:B] = -c3 * act["d"][:, None] * res.grad_h
    box = saturation_for(sys_)
    U2 = res.raw_u if box is None else box.clamp(res.raw_u)
    jac = jacobian_u_fd(sys_, res.X2, U2) if fd_jacobian else None
    plant = PlantNode(res.X2, res.W2, res.raw_u, res.F2, jac, box, f_seed)
    rows = np.stack([np.arange(B), np.arange(B) + B], axis=1)
    return LossTrace(
        res.pairs, value_seed[:, None].astype(float), direction_seed=dir_seed[:, None], plant=plant,
        direction_rows=rows,
    )


# ---------------------------------------------------------------------------
# full-dataset evaluation


@dataclass
class DatasetEval:
    """Exact worst residuals over every tuple of the training sets."""

    eta_star: float
    worst: dict[str, float]
    loss: float  # main loss at the probed eta
    active: dict[str, int]
    n_tuples: dict[str, int]
    diag_max_abs_v: float
    eta: float


def evaluate_dataset(
    V,
    g,
    sys_: BlackBoxSystem,
    bar: BoxBarrier,
    xs: SampleCover,
    ws: SampleCover,
    hp: HyperParams,
    d_min: float,
    eta: Optional[float] = None,
    chunk: int = 2_000_000,
) -> DatasetEval:
    """Max residual per family over all of ``X x X x W x W``.

    For a fixed state pair the (c) residual splits as
    ``A_i + B_j + kappa V - k_w |w_i - w_j|^gw`` so V and its gradient are
    needed on state pairs only; the ``M^2`` input combinations are reduced by
    broadcasting in row chunks. ``eta`` (default: the computed max) is where
    the hinge loss and active counts are reported.
    """
    X, Wp = xs.points, ws.points
    N, M = len(xs), len(ws)
    n = X.shape[1]
    Xr = np.repeat(X, M, axis=0)
    Wr = np.tile(Wp, (N, 1))
    U = closed_loop_inputs(g, sys_, Xr, Wr)
    F = eval_dynamics(sys_, Xr, U).reshape(N, M, n)
    if not np.all(np.isfinite(F)):
        raise FloatingPointError(f"{sys_.name}: non-finite dynamics inside the sample set")

    h = bar.value(X)
    gh = bar.gradient(X)
    r_d = -np.einsum("sn,smn->sm", gh, F) - hp.mu_h * h[:, None]

    kw_mat = hp.kw * np.linalg.norm(Wp[:, None, :] - Wp[None, :, :], axis=2) ** hp.gamma_w  # M x M

    diag_P = np.concatenate([X, X], axis=1)
    diag_max = float(np.abs(clf_value(V, diag_P)).max())

    worst = {"a": -np.inf, "b": -np.inf, "c": -np.inf, "d": float(r_d.max())}
    rows_per = max(1, chunk // max(1, N * M * M))
    ab_vals = {"a": [], "b": []}
    c_blocks = []
    for q0 in range(0, N, rows_per):
        q1 = min(N, q0 + rows_per)
        Q = np.arange(q0, q1)
        iq = np.repeat(Q, N)
        ir = np.tile(np.arange(N), q1 - q0)
        P = np.concatenate([X[iq], X[ir]], axis=1)
        v = clf_value(V, P)
        dv = clf_gradient(V, P)
        dx = np.linalg.norm(X[iq] - X[ir], axis=1)
        sep = dx >= d_min
        if not sep.any():
            continue
        v, dv, dx, iq, ir = v[sep], dv[sep], dx[sep], iq[sep], ir[sep]
        ra = -v + hp.k1 * dx**hp.gamma1
        rb = v - hp.k2 * dx**hp.gamma2
        worst["a"] = max(worst["a"], float(ra.max()))
        worst["b"] = max(worst["b"], float(rb.max()))
        A = np.einsum("kn,kmn->km", dv[:, :n], F[iq])  # K x M
        Bv = np.einsum("kn,kmn->km", dv[:, n:], F[ir])
        rc = A[:, :, None] + Bv[:, None, :] + hp.kappa * v[:, None, None] - kw_mat[None]
        worst["c"] = max(worst["c"], float(rc.max()))
        ab_vals["a"].append(ra)
        ab_vals["b"].append(rb)
        if eta is not None:
            c_blocks.append((float(np.sum(np.maximum(rc - eta, 0.0))), int(np.sum(rc > eta)), rc.size))
        else:
            c_blocks.append((None, None, rc.size))
        del rc

    eta_star = max(worst.values())
    probe = eta_star if eta is None else float(eta)
    loss = 0.0
    active, counts = {}, {}
    for c, fam in zip(hp.c[:2], "ab"):
        r = np.concatenate(ab_vals[fam]) if ab_vals[fam] else np.empty(0)
        loss += c * float(np.sum(np.maximum(r - probe, 0.0)))
        active[fam] = int(np.sum(r > probe))
        counts[fam] = r.size
    if eta is None:
        # hinge at the exact max is zero everywhere
        active["c"] = 0
    else:
        loss += hp.c[2] * sum(b[0] for b in c_blocks)
        active["c"] = sum(b[1] for b in c_blocks)
    counts["c"] = sum(b[2] for b in c_blocks)
    loss += hp.c[3] * float(np.sum(np.maximum(r_d - probe, 0.0)))
    active["d"] = int(np.sum(r_d > probe))
    counts["d"] = r_d.size
    return DatasetEval(float(eta_star), {k: float(v) for k, v in worst.items()}, loss, active, counts, diag_max, probe)
