"""Certificate assembly: full-dataset worst residual, strict PSD checks and the validity margin."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..barrier import BoxBarrier
from ..lipcert import LipVerdict
from ..net import FeedforwardNet
from ..plant import BlackBoxSystem, estimate_dynamics_bound
from ..sampling import SampleCover
from .lipschitz import Multipliers, lipschitz_verdicts
from .params import HyperParams, LipschitzBudget, class_k_lipschitz, closed_loop_lipschitz, compose_overall_L
from .scp import closed_loop_inputs, evaluate_dataset

CERTIFICATE_VERSION = 1


def loss_validity(eta: float, lip: float, eps: float) -> float:
    """``lip * eps + eta``; nonpositive exactly when the sampled solution transfers to the box."""
    return lip * eps + eta


@dataclass
class Dataset:
    """Everything the certifier needs besides the networks."""

    sys: BlackBoxSystem
    bar: BoxBarrier
    xs: SampleCover
    ws: SampleCover
    hp: HyperParams
    lip_x: float
    lip_u: float

    @property
    def d_min(self) -> float:
        return self.hp.resolved_d_min()


def build_budget(data: Dataset, g) -> LipschitzBudget:
    """All constants of the composite margin; ``M_f`` is measured with ``g``."""
    hp = data.hp
    bc = data.bar.constants
    b = LipschitzBudget(
        lip_x=data.lip_x,
        lip_u=data.lip_u,
        lip_L=hp.lip_L,
        lip_dL=hp.lip_dL,
        lip_C=hp.lip_C,
        kL1=class_k_lipschitz(hp.k1, hp.gamma1, data.xs.domain.diameter),
        kL2=class_k_lipschitz(hp.k2, hp.gamma2, data.xs.domain.diameter),
        kLu=class_k_lipschitz(hp.kw, hp.gamma_w, data.ws.domain.diameter),
        lip_h=bc.lip_h,
        lip_dh=bc.lip_dh,
        M_h=bc.grad_bound,
        M_L=hp.lip_L,
    )
    b.M_f = estimate_dynamics_bound(
        data.sys, data.xs, lambda X, W: closed_loop_inputs(g, data.sys, X, W), data.ws, closed_loop_lipschitz(b)
    )
    return b


@dataclass
class Certificate:
    eta_star: float
    L: float
    eps: float
    margin: float
    verdict: str
    lipschitz_verdicts: list[dict]
    loss: dict
    provenance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)
    version: int = CERTIFICATE_VERSION

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls(**json.load(fh))


def _verdict_dict(v) -> dict:
    if isinstance(v, LipVerdict):
        return v.to_dict()
    if isinstance(v, dict):
        return dict(v)
    return {"bound_name": "", "bound_value": None, "certified": bool(v)}


def issue_certificate(
    eta_star: float,
    L: float,
    eps: float,
    lip_verdicts: Sequence,
    main_loss: float = 0.0,
    loss_extra: Optional[dict] = None,
    **extra,
) -> Certificate:
    """Certified iff the margin is nonpositive, every Lipschitz check passed
    and the main loss vanished. ``lip_verdicts`` may be verdict objects,
    dicts or plain booleans."""
    margin = loss_validity(eta_star, L, eps)
    vds = [_verdict_dict(v) for v in lip_verdicts]
    ok = margin <= 0 and all(v["certified"] for v in vds) and main_loss == 0 and math.isfinite(margin)
    loss = {"L": float(main_loss), "L_v": float(margin)}
    if loss_extra:
        loss.update(loss_extra)
    return Certificate(
        float(eta_star), float(L), float(eps), float(margin), "certified" if ok else "not-certified", vds, loss, **extra
    )


def certify(
    V: FeedforwardNet,
    g: FeedforwardNet,
    lambdas: Multipliers,
    eta: Optional[float],
    budget: Optional[LipschitzBudget],
    eps: Optional[float],
    dataset: Dataset,
    provenance: Optional[dict] = None,
) -> Certificate:
    """Recompute everything from scratch on the full dataset.

    ``eta`` (the trained scalar) is only reported; the margin uses the exact
    maximum residual. ``budget`` fields left ``None`` are filled in and
    ``M_f`` is always re-measured with ``g``.
    """
    hp = dataset.hp
    eps = hp.eps_cert if eps is None else float(eps)
    fresh = build_budget(dataset, g)
    if budget is not None:
        for k, v in budget.to_dict().items():
            if v is not None and k != "M_f":
                setattr(fresh, k, v)
    L = compose_overall_L(fresh, hp.kappa, hp.mu_h)
    ev = evaluate_dataset(V, g, dataset.sys, dataset.bar, dataset.xs, dataset.ws, hp, dataset.d_min)
    verdicts = lipschitz_verdicts(V, g, lambdas, hp)
    extra_loss = {"worst": ev.worst}
    if eta is not None:
        at_eta = evaluate_dataset(V, g, dataset.sys, dataset.bar, dataset.xs, dataset.ws, hp, dataset.d_min, eta=eta)
        extra_loss.update(eta_trained=float(eta), L_at_trained_eta=at_eta.loss, L_v_at_trained_eta=loss_validity(eta, L, eps))
    prov = {
        "hyperparams_digest": hp.digest(),
        "cover_x": dataset.xs.digest(),
        "cover_w": dataset.ws.digest(),
        "n_x": len(dataset.xs),
        "n_w": len(dataset.ws),
        "plant": dataset.sys.name,
    }
    if provenance:
        prov.update(provenance)
    diag = {
        "d_min": dataset.d_min,
        "diag_max_abs_V": ev.diag_max_abs_v,
        "n_tuples": ev.n_tuples,
    }
    return issue_certificate(
        ev.eta_star, L, eps, verdicts, ev.loss, extra_loss, provenance=prov, diagnostics=diag, budget=fresh.to_dict()
    )
