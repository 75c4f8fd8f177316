from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional


class IncompleteBudget(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__("Lipschitz budget is missing: " + ", ".join(missing))
        self.missing = missing


@dataclass
class HyperParams:
    # class-K gains and exponents: alpha_i(s) = k_i s^gamma_i, sigma(s) = k_w s^gamma_w
    k1: float = 1e-5
    k2: float = 1.0
    kw: float = 0.01
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma_w: float = 1.0
    kappa: float = 1e-4
    mu_h: float = 1e-4
    # sub-loss weights c0..c3 and Lipschitz-penalty weights cl1..cl3
    c: tuple = (1.0, 1.0, 1.0, 1.0)
    cl: tuple = (1e-3, 1e-3, 1e-3)
    # cover radii on X and W (eps_w None -> eps)
    eps: float = 0.02
    eps_w: Optional[float] = None
    # network Lipschitz budgets
    lip_L: float = 1.0
    lip_dL: float = 1.0
    lip_C: float = 5.0
    # architecture
    clf_hidden: tuple = (40,)
    clf_activation: str = "tanh"
    ctrl_hidden: tuple = (15,)
    ctrl_activation: str = "relu"
    # optimisation
    epochs: int = 200
    batch_size: int = 256
    n_batches: int = 8
    lr_net: float = 1e-3
    lr_aux: float = 1e-2
    d_min: Optional[float] = None  # None -> 2 * eps
    seed: int = 0

    def __post_init__(self):
        self.c = tuple(float(v) for v in self.c)
        self.cl = tuple(float(v) for v in self.cl)
        self.clf_hidden = tuple(int(v) for v in self.clf_hidden)
        self.ctrl_hidden = tuple(int(v) for v in self.ctrl_hidden)
        if len(self.c) != 4 or len(self.cl) != 3:
            raise ValueError("need four sub-loss weights and three Lipschitz-loss weights")
        for name in ("gamma1", "gamma2", "gamma_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("k1", "k2", "kw", "kappa", "mu_h", "lip_L", "lip_dL", "lip_C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.eps_w is not None and not self.eps_w > 0:
            raise ValueError(f"eps_w must be positive, got {self.eps_w}")
        if any(v < 0 for v in self.c + self.cl):
            raise ValueError("loss weights must be nonnegative")

    @property
    def eps_input(self) -> float:
        return self.eps if self.eps_w is None else self.eps_w

    @property
    def eps_cert(self) -> float:
        """Radius entering the validity margin: the coarser of the two covers."""
        return max(self.eps, self.eps_input)

    def resolved_d_min(self) -> float:
        return 2.0 * self.eps if self.d_min is None else float(self.d_min)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def class_k_lipschitz(k: float, gamma: float, diameter: float) -> float:
    """Lipschitz constant of ``s -> k s^gamma`` on ``[0, diameter]``."""
    return k * gamma * diameter ** (gamma - 1.0)


@dataclass
class LipschitzBudget:
    lip_x: Optional[float] = None
    lip_u: Optional[float] = None
    lip_L: Optional[float] = None
    lip_dL: Optional[float] = None
    lip_C: Optional[float] = None
    kL1: Optional[float] = None
    kL2: Optional[float] = None
    kLu: Optional[float] = None
    lip_h: Optional[float] = None
    lip_dh: Optional[float] = None
    M_h: Optional[float] = None
    M_L: Optional[float] = None
    M_f: Optional[float] = None

    def missing(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is None]

    def to_dict(self) -> dict:
        return asdict(self)


def closed_loop_lipschitz(b: LipschitzBudget) -> float:
    """Lipschitz constant of ``x -> f(x, g(x, w))`` jointly in ``(x, w)``."""
    return b.lip_x + math.sqrt(2.0) * b.lip_u * b.lip_C


def overall_terms(b: LipschitzBudget, kappa: float, mu_h: float) -> tuple[float, float, float, float]:
    missing = b.missing()
    if missing:
        raise IncompleteBudget(missing)
    r2 = math.sqrt(2.0)
    cl = closed_loop_lipschitz(b)
    return (
        r2 * b.lip_L + 2 * b.kL1,
        r2 * b.lip_L + 2 * b.kL2,
        r2 * kappa * b.lip_L + 2 * b.kLu + 2 * (b.M_f * b.lip_dL + b.M_L * cl),
        b.M_f * b.lip_dh + b.M_h * cl + mu_h * b.lip_h,
    )


def compose_overall_L(b: LipschitzBudget, kappa: float, mu_h: float) -> float:
    """The four-term maximum transferring sample feasibility to the box."""
    return max(overall_terms(b, kappa, mu_h))
