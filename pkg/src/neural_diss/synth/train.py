"""Joint training of the CLF, the controller, the slack eta and the certificate multipliers."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..net import FeedforwardNet, clf_net, init_net, parameter_gradient
from ..sampling import make_pair_batches
from .certify import Dataset, build_budget, loss_validity
from .lipschitz import Multipliers, lipschitz_verdicts, loss_lipschitz
from .params import compose_overall_L
from .scp import evaluate_dataset, loss_main, loss_main_eta_grad, loss_main_trace, scp_residuals

log = logging.getLogger(__name__)

HISTORY_FIELDS = (
    "epoch", "L", "L_M", "L_v", "eta", "eta_star", "worst_a", "worst_b", "worst_c", "worst_d",
    "L_total", "margin", "pd_L", "pd_dL", "pd_C",
)


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lrs: list[float], b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    V: FeedforwardNet
    g: FeedforwardNet
    lambdas: Multipliers
    eta: float
    history: list[dict]
    converged: bool
    epochs_run: int
    best_epoch: int = -1
    best_margin: float = math.inf
    seconds: float = 0.0
    initial: Optional[tuple] = field(default=None, repr=False)


def initial_networks(data: Dataset, seed: int) -> tuple[FeedforwardNet, FeedforwardNet]:
    hp, sys_ = data.hp, data.sys
    rng = np.random.default_rng(seed)
    V = clf_net(sys_.state_dim, hp.clf_hidden, hp.clf_activation, rng)
    g = init_net(sys_.state_dim + data.ws.domain.dim, hp.ctrl_hidden, sys_.input_dim, hp.ctrl_activation, rng)
    return V, g


def _snapshot(V, g, rho, eta):
    return V.copy(), g.copy(), [r.copy() for r in rho], float(eta)


def _multipliers(rho) -> Multipliers:
    return Multipliers(*(r * r for r in rho))


def train(
    data: Dataset,
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
    init: Optional[tuple[FeedforwardNet, FeedforwardNet]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    time_limit: Optional[float] = None,
) -> TrainResult:
    """Minimise hinge loss + log-det Lipschitz loss + validity loss with Adam.

    After every epoch the full dataset is re-evaluated; training stops as
    soon as all three matrices are PD and ``eta_S* + L eps <= 0`` (then the
    returned ``eta`` is the exact ``eta_S*``, at which the hinge loss
    vanishes). Otherwise the best state seen (PD first, then smallest
    margin) is returned with ``converged=False``.
    """
    hp = data.hp
    seed = hp.seed if seed is None else int(seed)
    epochs = hp.epochs if epochs is None else int(epochs)
    V, g = init if init is not None else initial_networks(data, seed)
    V, g = V.copy(), g.copy()
    nv, ng = sum(V.hidden_widths), sum(g.hidden_widths)
    rho = [np.ones(nv), np.ones(nv), np.ones(ng)]
    eta = np.zeros(1)
    eps = hp.eps_cert
    d_min = data.d_min

    net_params = V.params() + g.params()
    params = net_params + rho + [eta]
    lrs = [hp.lr_net] * len(net_params) + [hp.lr_aux] * (len(rho) + 1)
    opt = Adam(params, lrs)

    history: list[dict] = []
    best = None
    best_key = (True, math.inf)
    best_epoch = -1
    converged = False
    t0 = time.perf_counter()
    L_now = compose_overall_L(build_budget(data, g), hp.kappa, hp.mu_h)

    for epoch in range(1, epochs + 1):
        batches = make_pair_batches(data.xs, data.ws, hp.batch_size, hp.n_batches, d_min, seed=[seed, epoch])
        sums = {"L": 0.0, "L_M": 0.0, "L_v": 0.0}
        for batch in batches:
            res = scp_residuals(V, g, data.sys, data.bar, batch, hp)
            e = float(eta[0])
            lm = loss_main(res, e, hp)
            trace = loss_main_trace(res, e, hp, data.sys)
            gV, gg = parameter_gradient(V, g, trace)
            lip = loss_lipschitz(V, g, _multipliers(rho), hp)
            gV += lip.grad_V
            gg += lip.grad_g
            grads = gV.flat() + gg.flat()
            grads += [2.0 * r * gl for r, gl in zip(rho, lip.grad_lam)]
            grads.append(np.array([loss_main_eta_grad(res, e, hp) + 1.0]))
            opt.step(grads)
            sums["L"] += lm
            sums["L_M"] += lip.value
            sums["L_v"] += loss_validity(e, L_now, eps)

        # full-dataset convergence test
        L_now = compose_overall_L(build_budget(data, g), hp.kappa, hp.mu_h)
        e = float(eta[0])
        ev = evaluate_dataset(V, g, data.sys, data.bar, data.xs, data.ws, hp, d_min, eta=e)
        pd = [v.certified for v in lipschitz_verdicts(V, g, _multipliers(rho), hp)]
        margin = loss_validity(ev.eta_star, L_now, eps)
        row = {
            "epoch": epoch,
            "L": sums["L"] / len(batches),
            "L_M": sums["L_M"] / len(batches),
            "L_v": sums["L_v"] / len(batches),
            "eta": e,
            "eta_star": ev.eta_star,
            "worst_a": ev.worst["a"],
            "worst_b": ev.worst["b"],
            "worst_c": ev.worst["c"],
            "worst_d": ev.worst["d"],
            "L_total": L_now,
            "margin": margin,
            "pd_L": int(pd[0]),
            "pd_dL": int(pd[1]),
            "pd_C": int(pd[2]),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d eta=%.3g eta*=%.3g margin=%.3g pd=%s", epoch, e, ev.eta_star, margin, pd)

        key = (not all(pd), margin)
        if key < best_key:
            best_key = key
            best = _snapshot(V, g, rho, ev.eta_star if ev.loss > 0 else e)
            best_epoch = epoch
        if all(pd) and margin <= 0:
            converged = True
            break
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break

    if best is None:
        best = _snapshot(V, g, rho, float(eta[0]))
    Vb, gb, rb, eb = best
    return TrainResult(
        Vb, gb, _multipliers(rb), eb, history, converged, len(history), best_epoch, best_key[1],
        time.perf_counter() - t0,
    )


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_FIELDS)
        for row in history:
            wr.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in HISTORY_FIELDS])
