"""Black-box plants: oracle interface, benchmark systems, finite-difference
Jacobians, RK4 simulation and the dynamics bound used in the certificate."""

from __future__ import annotations

import csv
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lipcert import LipschitzEstimate, WeibullFitConfig, estimate_lipschitz_black_box
from .sampling import BoxDomain, SampleCover


class DimensionMismatch(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, t: float, last_state: np.ndarray):
        super().__init__(f"trajectory diverged after t = {t:g}; last finite state {last_state}")
        self.t = t
        self.last_state = last_state


class PlantProtocolError(RuntimeError):
    pass


@dataclass
class BlackBoxSystem:
    """Query-only access to ``xdot = f(x, u)``.

    ``oracle`` receives row batches ``(K, n)`` and ``(K, m)`` and returns
    ``(K, n)``. Nothing else about the plant is visible to training code.
    """

    name: str
    state_dim: int
    input_dim: int
    oracle: Callable[[np.ndarray, np.ndarray], np.ndarray]
    state_box: Optional[BoxDomain] = None
    input_box: Optional[BoxDomain] = None
    external_box: Optional[BoxDomain] = None
    concurrent_safe: bool = True

    def __call__(self, x, u):
        return eval_dynamics(self, x, u)


def eval_dynamics(sys_: BlackBoxSystem, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    xb, ub = np.atleast_2d(x), np.atleast_2d(u)
    if xb.shape[1] != sys_.state_dim or ub.shape[1] != sys_.input_dim or xb.shape[0] != ub.shape[0]:
        raise DimensionMismatch(
            f"{sys_.name}: got x {x.shape}, u {u.shape}; expected n={sys_.state_dim}, m={sys_.input_dim}"
        )
    out = np.asarray(sys_.oracle(xb, ub), dtype=float).reshape(xb.shape[0], sys_.state_dim)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# benchmarks


def scalar_nonaffine(a: float = 0.2) -> BlackBoxSystem:
    """``xdot = a (sin x + tan u)`` on ``[-pi/2, pi/2]``, ``W = [-0.5, 0.5]``.

    ``U = [-1, 1]``: holding the box invariant needs ``tan u <= -1`` on the
    upper face, so ``|u|`` must be able to exceed ``pi / 4``."""
    return BlackBoxSystem(
        "scalar",
        1,
        1,
        lambda x, u: a * (np.sin(x) + np.tan(u)),
        BoxDomain([-np.pi / 2], [np.pi / 2]),
        BoxDomain([-1.0], [1.0]),
        BoxDomain([-0.5], [0.5]),
    )


def manipulator(mass: float = 1.0, damping: float = 0.1) -> BlackBoxSystem:
    def f(x, u):
        return np.column_stack([x[:, 1], (u[:, 0] - damping * x[:, 1]) / mass])

    r = np.pi / 6
    return BlackBoxSystem(
        "manipulator", 2, 1, f, BoxDomain([-r, -r], [r, r]), BoxDomain([-1.0], [1.0]), BoxDomain([-0.5], [0.5])
    )


def jet_engine() -> BlackBoxSystem:
    def f(x, u):
        x1, x2 = x[:, 0], x[:, 1]
        return np.column_stack([-x2 - 1.5 * x1**2 - 0.5 * x1**3, u[:, 0]])

    return BlackBoxSystem(
        "jet_engine",
        2,
        1,
        f,
        BoxDomain([-0.25, -0.25], [0.25, 0.25]),
        BoxDomain([-1.0], [1.0]),
        BoxDomain([-0.25], [0.25]),
    )


SPACECRAFT_J = (200.0, 200.0, 100.0)


def spacecraft(J=SPACECRAFT_J) -> BlackBoxSystem:
    j1, j2, j3 = J

    def f(x, u):
        x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
        return np.column_stack(
            [
                (j2 - j3) / j1 * x2 * x3 + u[:, 0] / j1,
                (j3 - j1) / j2 * x1 * x3 + u[:, 1] / j2,
                (j1 - j2) / j3 * x1 * x2 + u[:, 2] / j3,
            ]
        )

    return BlackBoxSystem(
        "spacecraft",
        3,
        3,
        f,
        BoxDomain([-0.25] * 3, [0.25] * 3),
        BoxDomain([-10.0] * 3, [10.0] * 3),
        BoxDomain([-10.0], [10.0]),
    )


def linear_toy() -> BlackBoxSystem:
    """``xdot = -x + u``: the stabilizable scalar toy used for quick runs."""
    return BlackBoxSystem(
        "linear_toy", 1, 1, lambda x, u: -x + u, BoxDomain([-1.0], [1.0]), BoxDomain([-1.0], [1.0]),
        BoxDomain([-0.02], [0.02]),
    )


BENCHMARKS: dict[str, Callable[..., BlackBoxSystem]] = {
    "scalar": scalar_nonaffine,
    "manipulator": manipulator,
    "jet_engine": jet_engine,
    "spacecraft": spacecraft,
    "linear_toy": linear_toy,
}


# ---------------------------------------------------------------------------
# external plants over a line protocol


class SubprocessPlant:
    """Plant behind a child process speaking ``EVAL x.. u..`` / ``OK xdot..``."""

    def __init__(self, command: str | list[str], state_dim: int, input_dim: int):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self.n, self.m = state_dim, input_dim
        self._lock = threading.Lock()

    def query(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        line = "EVAL " + " ".join(repr(float(v)) for v in np.concatenate([x, u])) + "\n"
        with self._lock:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
            reply = self.proc.stdout.readline()
        parts = reply.split()
        if not parts or parts[0] != "OK" or len(parts) != self.n + 1:
            raise PlantProtocolError(f"bad plant reply {reply!r}")
        return np.array([float(v) for v in parts[1:]])

    def __call__(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.array([self.query(x, u) for x, u in zip(X, U)])

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)


def subprocess_system(command, state_dim: int, input_dim: int, **boxes) -> BlackBoxSystem:
    plant = SubprocessPlant(command, state_dim, input_dim)
    return BlackBoxSystem("subprocess", state_dim, input_dim, plant, concurrent_safe=False, **boxes)


def serve_plant(sys_: BlackBoxSystem, stdin=None, stdout=None) -> None:
    """Answer protocol requests on a stream pair until EOF (the plant side)."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    n, m = sys_.state_dim, sys_.input_dim
    for line in stdin:
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "EVAL" or len(parts) != 1 + n + m:
            stdout.write("ERR malformed request\n")
        else:
            vals = np.array([float(v) for v in parts[1:]])
            dx = eval_dynamics(sys_, vals[:n], vals[n:])
            stdout.write("OK " + " ".join(repr(float(v)) for v in dx) + "\n")
        stdout.flush()


# ---------------------------------------------------------------------------
# Jacobians


def default_fd_step(x) -> np.ndarray:
    return 1e-4 * (1.0 + np.max(np.abs(np.atleast_2d(x)), axis=1))


def jacobians_fd(sys_: BlackBoxSystem, x, u, step=None) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference ``df/dx`` and ``df/du``; batched over rows."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    X, U = np.atleast_2d(x), np.atleast_2d(u)
    K, n, m = X.shape[0], sys_.state_dim, sys_.input_dim
    h = default_fd_step(X) if step is None else np.broadcast_to(np.asarray(step, float), (K,))
    if np.any(h <= 0):
        raise ValueError("finite-difference step must be positive")
    jx = np.empty((K, n, n))
    ju = np.empty((K, n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        d = h[:, None] * e
        jx[:, :, i] = (eval_dynamics(sys_, X + d, U) - eval_dynamics(sys_, X - d, U)) / (2 * h[:, None])
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        d = h[:, None] * e
        ju[:, :, i] = (eval_dynamics(sys_, X, U + d) - eval_dynamics(sys_, X, U - d)) / (2 * h[:, None])
    return (jx[0], ju[0]) if single else (jx, ju)


def jacobian_u_fd(sys_: BlackBoxSystem, X, U, step=None) -> np.ndarray:
    """Only ``df/du`` (what gradient transport through the plant needs)."""
    K, m = X.shape[0], sys_.input_dim
    h = default_fd_step(X) if step is None else np.broadcast_to(np.asarray(step, float), (K,))
    ju = np.empty((K, sys_.state_dim, m))
    for i in range(m):
        d = np.zeros((K, m))
        d[:, i] = h
        ju[:, :, i] = (eval_dynamics(sys_, X, U + d) - eval_dynamics(sys_, X, U - d)) / (2 * h[:, None])
    return ju


# ---------------------------------------------------------------------------
# simulation


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs_internal: np.ndarray
    inputs_external: np.ndarray

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.inputs_internal.shape[1]
        p = self.inputs_external.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
        header += [f"w{i + 1}" for i in range(p)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for k, t in enumerate(self.times):
                row = [t, *self.states[k], *self.inputs_internal[k], *self.inputs_external[k]]
                wr.writerow([repr(float(v)) for v in row])


def integrate_rk4(
    sys_: BlackBoxSystem,
    controller: Callable[[np.ndarray, float], np.ndarray],
    x0,
    dt: float,
    t_end: float,
    external: Optional[Callable[[float], np.ndarray]] = None,
) -> Trajectory:
    """Classical RK4 with the control held constant over each step.

    ``controller(x, t)`` gives the internal input; ``external(t)`` is only
    recorded (closed-loop controllers already read it)."""
    if dt <= 0 or t_end < dt:
        raise ValueError("need dt > 0 and t_end >= dt")
    steps = int(round(t_end / dt))
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    times = dt * np.arange(steps + 1)
    states = np.empty((steps + 1, n))
    u0 = np.atleast_1d(np.asarray(controller(x, 0.0), dtype=float))
    us = np.empty((steps + 1, u0.size))
    p = 0 if external is None else np.atleast_1d(external(0.0)).size
    ws = np.empty((steps + 1, p))
    f = lambda z, u: eval_dynamics(sys_, z, u)  # noqa: E731
    for k in range(steps + 1):
        t = times[k]
        u = u0 if k == 0 else np.atleast_1d(np.asarray(controller(x, t), dtype=float))
        states[k], us[k] = x, u
        if p:
            ws[k] = np.atleast_1d(external(t))
        if k == steps:
            break
        k1 = f(x, u)
        k2 = f(x + 0.5 * dt * k1, u)
        k3 = f(x + 0.5 * dt * k2, u)
        k4 = f(x + dt * k3, u)
        nxt = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(float(t), x.copy())
        x = nxt
    return Trajectory(times, states, us, ws)


def estimate_dynamics_bound(
    sys_: BlackBoxSystem,
    xs: SampleCover,
    controller: Callable[[np.ndarray, np.ndarray], np.ndarray],
    ws: SampleCover,
    lip_margin: float,
) -> float:
    """``max |f(x_s, g(x_s, w_p))| + lip_margin * eps`` over all cover pairs.

    ``controller`` maps row batches ``(X, W)`` to internal inputs."""
    X = np.repeat(xs.points, len(ws), axis=0)
    W = np.tile(ws.points, (len(xs), 1))
    F = eval_dynamics(sys_, X, np.atleast_2d(controller(X, W)).reshape(X.shape[0], -1))
    eps = max(xs.eps, ws.eps)
    return float(np.linalg.norm(F, axis=1).max()) + lip_margin * eps


# ---------------------------------------------------------------------------
# Lipschitz constants from queries


def estimate_plant_lipschitz(
    sys_: BlackBoxSystem, cfg: Optional[WeibullFitConfig] = None, seed: int = 0
) -> tuple[LipschitzEstimate, LipschitzEstimate]:
    """Extreme-value estimates of the state and input Lipschitz constants of
    ``f`` over ``X x U``, perturbing one argument at a time."""
    if sys_.state_box is None or sys_.input_box is None:
        raise ValueError(f"{sys_.name}: state and input boxes are needed to estimate Lipschitz constants")
    cfg = WeibullFitConfig() if cfg is None else cfg
    n, m = sys_.state_dim, sys_.input_dim
    lo = np.concatenate([sys_.state_box.lo, sys_.input_box.lo])
    hi = np.concatenate([sys_.state_box.hi, sys_.input_box.hi])

    def query(z):
        return eval_dynamics(sys_, z[:, :n], z[:, n:])

    mask_x = np.arange(n + m) < n
    lx = estimate_lipschitz_black_box(query, lo, hi, cfg, seed, mask_x)
    lu = estimate_lipschitz_black_box(query, lo, hi, cfg, seed + 1, ~mask_x)
    return lx, lu
