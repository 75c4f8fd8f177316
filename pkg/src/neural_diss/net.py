"""Feedforward networks with analytic first- and second-order derivatives.

Everything is plain numpy in float64. A network evaluates

    t0 = input,  t_{i+1} = phi_i(W_i t_i + b_i),  y = W_N t_N + b_N

and the same layer caches drive three things: ordinary backprop, the exact
input gradient, and reverse-mode differentiation through a directional
derivative ``s = grad_x V(x) . v`` (the double-backward path needed when a
loss contains dV/dx terms).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1


class ContractViolation(ValueError):
    """Dimension or shape precondition failed."""


class UnsupportedForGradient(ValueError):
    """A non-smooth activation was asked for an analytic derivative."""


class MissingJacobianError(ValueError):
    """A plant node in a loss trace has no finite-difference Jacobian attached."""


# ---------------------------------------------------------------------------
# activations


@dataclass(frozen=True)
class Activation:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Optional[Callable[[np.ndarray], np.ndarray]]
    slope_min: float
    slope_max: float
    lipschitz: float
    smooth: bool
    derivative: Optional[str] = None  # tag of the activation's derivative


def _sech2(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


# extreme slope of sech^2 is reached where tanh^2 = 1/3
_SECH2_SLOPE = 4.0 / (3.0 * np.sqrt(3.0))

ACTIVATIONS: dict[str, Activation] = {
    "tanh": Activation(
        "tanh",
        np.tanh,
        _sech2,
        lambda z: -2.0 * np.tanh(z) * _sech2(z),
        0.0,
        1.0,
        1.0,
        True,
        derivative="tanh_prime",
    ),
    "softplus": Activation(
        "softplus",
        _softplus,
        _sigmoid,
        lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)),
        0.0,
        1.0,
        1.0,
        True,
        derivative="sigmoid",
    ),
    "relu": Activation(
        "relu",
        lambda z: np.maximum(z, 0.0),
        lambda z: (z > 0).astype(float),
        None,
        0.0,
        1.0,
        1.0,
        False,
    ),
    "hardtanh": Activation(
        "hardtanh",
        lambda z: np.clip(z, -1.0, 1.0),
        lambda z: (np.abs(z) < 1.0).astype(float),
        None,
        0.0,
        1.0,
        1.0,
        False,
    ),
    # derivative activations, only used inside derivative networks
    "tanh_prime": Activation(
        "tanh_prime",
        _sech2,
        lambda z: -2.0 * np.tanh(z) * _sech2(z),
        lambda z: _sech2(z) * (6.0 * np.tanh(z) ** 2 - 2.0),
        -_SECH2_SLOPE,
        _SECH2_SLOPE,
        _SECH2_SLOPE,
        True,
    ),
    "sigmoid": Activation(
        "sigmoid",
        _sigmoid,
        lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)),
        lambda z: _sigmoid(z) * (1.0 - _sigmoid(z)) * (1.0 - 2.0 * _sigmoid(z)),
        0.0,
        0.25,
        0.25,
        True,
    ),
}

CLF_ACTIVATIONS = ("tanh", "softplus")


def activation(tag: str) -> Activation:
    try:
        return ACTIVATIONS[tag]
    except KeyError:
        raise ContractViolation(f"unknown activation tag {tag!r}") from None


# ---------------------------------------------------------------------------
# network type


@dataclass
class FeedforwardNet:
    """Weights ``W_0..W_N`` (each ``out x in``), biases, and one activation
    tag per hidden layer (``len(activations) == len(weights) - 1``)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        self.activations = list(self.activations)
        if not self.weights:
            raise ContractViolation("network needs at least one layer")
        if len(self.biases) != len(self.weights):
            raise ContractViolation("one bias vector per layer required")
        if len(self.activations) != len(self.weights) - 1:
            raise ContractViolation("one activation per hidden layer required")
        for tag in self.activations:
            activation(tag)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape[0] != w.shape[0]:
                raise ContractViolation(f"layer {i}: bias length {b.shape[0]} != rows {w.shape[0]}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(
                    f"layer {i}: expects {w.shape[1]} inputs, previous layer gives "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.weights) - 1

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations)
        )

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W_0, b_0, W_1, b_1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def check_clf_role(self):
        if self.output_dim != 1:
            raise ContractViolation("CLF network must have scalar output")
        bad = [a for a in self.activations if a not in CLF_ACTIVATIONS]
        if bad:
            raise ContractViolation(f"CLF network needs smooth activations, got {bad}")


def init_net(
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int,
    act: str | Sequence[str],
    rng: np.random.Generator,
    scale: float = 0.1,
) -> FeedforwardNet:
    """Uniform init in ``[-s, s]`` with ``s = scale / sqrt(fan_in)``.

    Small weights keep the Lipschitz matrix inequalities feasible at the start
    of training."""
    dims = [input_dim, *hidden, output_dim]
    acts = [act] * len(hidden) if isinstance(act, str) else list(act)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = scale / np.sqrt(fan_in)
        ws.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        bs.append(rng.uniform(-s, s, size=fan_out))
    return FeedforwardNet(ws, bs, acts)


def clf_net(state_dim: int, hidden: Sequence[int], act: str, rng: np.random.Generator) -> FeedforwardNet:
    net = init_net(2 * state_dim, hidden, 1, act, rng)
    net.check_clf_role()
    return net


# ---------------------------------------------------------------------------
# evaluation


def _as_batch(net: FeedforwardNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ContractViolation(f"input has shape {x.shape}, network expects {net.input_dim} features")
    return xb, single


def forward(net: FeedforwardNet, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch (rows)."""
    a, single = _as_batch(net, x)
    for w, b, tag in zip(net.weights[:-1], net.biases[:-1], net.activations):
        a = ACTIVATIONS[tag].fn(a @ w.T + b)
    y = a @ net.weights[-1].T + net.biases[-1]
    return y[0] if single else y


def _require_smooth(net: FeedforwardNet):
    for tag in net.activations:
        if not ACTIVATIONS[tag].smooth:
            raise UnsupportedForGradient(f"activation {tag!r} has no analytic derivative")


def input_gradient(net: FeedforwardNet, x) -> np.ndarray:
    """Exact gradient of a scalar-output network w.r.t. its input."""
    if net.output_dim != 1:
        raise ContractViolation("input_gradient needs a scalar-output network")
    _require_smooth(net)
    a, single = _as_batch(net, x)
    zs = []
    for w, b, tag in zip(net.weights[:-1], net.biases[:-1], net.activations):
        z = a @ w.T + b
        zs.append(z)
        a = ACTIVATIONS[tag].fn(z)
    g = np.broadcast_to(net.weights[-1], (a.shape[0], net.weights[-1].shape[1]))
    for i in range(net.depth - 1, -1, -1):
        g = (g * ACTIVATIONS[net.activations[i]].d1(zs[i])) @ net.weights[i]
    return g[0] if single else g


@dataclass
class SaturationBox:
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        self.u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if self.u_min.shape != self.u_max.shape or np.any(self.u_min >= self.u_max):
            raise ContractViolation("saturation box needs u_min < u_max componentwise")

    def clamp(self, u):
        return np.clip(u, self.u_min, self.u_max)


def saturated_output(net: FeedforwardNet, x, w, box: Optional[SaturationBox]) -> np.ndarray:
    """Controller output ``clamp(net([x; w]), u_min, u_max)`` (HardTanh head)."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.ndim == 1 and w.ndim == 1:
        z = np.concatenate([x, w])
    else:
        z = np.concatenate([np.atleast_2d(x), np.atleast_2d(w)], axis=1)
    if z.shape[-1] != net.input_dim:
        raise ContractViolation(f"len(x)+len(w) = {z.shape[-1]} but network takes {net.input_dim}")
    raw = forward(net, z)
    return raw if box is None else box.clamp(raw)


# ---------------------------------------------------------------------------
# reverse mode


@dataclass
class Grads:
    """Gradient bundle shaped like a network's weights and biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: FeedforwardNet) -> "Grads":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __iadd__(self, other: "Grads"):
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    def scaled(self, k: float) -> "Grads":
        return Grads([k * w for w in self.weights], [k * b for b in self.biases])


@dataclass
class _Cache:
    inputs: np.ndarray
    zs: list[np.ndarray]
    acts: list[np.ndarray]  # acts[0] = inputs, acts[i] = phi(zs[i-1])
    dzs: Optional[list[np.ndarray]] = None  # tangents of pre-activations
    dacts: Optional[list[np.ndarray]] = None  # tangents of activations
    output: Optional[np.ndarray] = None
    tangent_out: Optional[np.ndarray] = None


def forward_cached(net: FeedforwardNet, x: np.ndarray, direction: Optional[np.ndarray] = None) -> _Cache:
    """Batched forward pass that keeps every layer; with ``direction`` also
    propagates the forward tangent so ``tangent_out = J(x) @ direction``."""
    a = np.asarray(x, dtype=float)
    cache = _Cache(inputs=a, zs=[], acts=[a])
    da = None
    if direction is not None:
        da = np.asarray(direction, dtype=float)
        cache.dzs, cache.dacts = [], [da]
    for w, b, tag in zip(net.weights[:-1], net.biases[:-1], net.activations):
        act = ACTIVATIONS[tag]
        z = a @ w.T + b
        cache.zs.append(z)
        a = act.fn(z)
        cache.acts.append(a)
        if da is not None:
            dz = da @ w.T
            da = act.d1(z) * dz
            cache.dzs.append(dz)
            cache.dacts.append(da)
    cache.output = a @ net.weights[-1].T + net.biases[-1]
    if da is not None:
        cache.tangent_out = da @ net.weights[-1].T
    return cache


def backward_cached(
    net: FeedforwardNet,
    cache: _Cache,
    out_seed: Optional[np.ndarray],
    tangent_seed: Optional[np.ndarray] = None,
) -> tuple[Grads, np.ndarray, Optional[np.ndarray]]:
    """Reverse sweep for ``sum(out_seed * y) + sum(tangent_seed * dy)``.

    Returns parameter gradients, the adjoint of the input, and the adjoint of
    the direction (``None`` when no tangent was propagated)."""
    grads = Grads.zeros_like(net)
    n_batch = cache.inputs.shape[0]
    w_out = net.weights[-1]
    abar = np.zeros((n_batch, w_out.shape[1]))
    dabar = None
    if out_seed is not None:
        out_seed = np.asarray(out_seed, dtype=float).reshape(n_batch, -1)
        grads.weights[-1] += out_seed.T @ cache.acts[-1]
        grads.biases[-1] += out_seed.sum(axis=0)
        abar = out_seed @ w_out
    if tangent_seed is not None:
        if cache.dacts is None:
            raise ContractViolation("tangent seed given but no tangent was propagated")
        tangent_seed = np.asarray(tangent_seed, dtype=float).reshape(n_batch, -1)
        grads.weights[-1] += tangent_seed.T @ cache.dacts[-1]
        dabar = tangent_seed @ w_out
    elif cache.dacts is not None:
        dabar = np.zeros_like(cache.dacts[-1])

    for i in range(net.depth - 1, -1, -1):
        act = ACTIVATIONS[net.activations[i]]
        z = cache.zs[i]
        d1 = act.d1(z)
        zbar = d1 * abar
        dzbar = None
        if dabar is not None:
            if act.d2 is None:
                raise UnsupportedForGradient(f"activation {act.name!r} has no second derivative")
            dzbar = d1 * dabar
            zbar = zbar + act.d2(z) * cache.dzs[i] * dabar
        w = net.weights[i]
        grads.weights[i] += zbar.T @ cache.acts[i]
        grads.biases[i] += zbar.sum(axis=0)
        abar = zbar @ w
        if dzbar is not None:
            grads.weights[i] += dzbar.T @ cache.dacts[i]
            dabar = dzbar @ w
    return grads, abar, dabar


# ---------------------------------------------------------------------------
# loss traces


@dataclass
class PlantNode:
    """Black-box dynamics evaluated at ``(x, sat(g([x; w])))``.

    ``jac_u`` holds the finite-difference ``df/du`` per row; it is the only
    route by which gradients cross the unknown plant."""

    x: np.ndarray
    w: np.ndarray
    raw_u: np.ndarray
    f: np.ndarray
    jac_u: Optional[np.ndarray]
    box: Optional[SaturationBox] = None
    f_seed: Optional[np.ndarray] = None  # direct adjoint on f (barrier terms)


@dataclass
class LossTrace:
    """Record of a scalar loss that is linear in the recorded node outputs.

    loss = sum(value_seed * V(clf_inputs)) + sum(direction_seed * dV(clf_inputs)[direction])
           + sum(plant.f_seed * f) + (terms without network parameters)

    The direction is either a fixed array or the plant rows
    ``[f[direction_rows[:, 0]], f[direction_rows[:, 1]]]``. Hinge losses are
    piecewise linear, so seeding with the active-set coefficients gives the
    exact (sub)gradient at the recorded point.
    """

    clf_inputs: np.ndarray
    value_seed: np.ndarray
    direction: Optional[np.ndarray] = None
    direction_seed: Optional[np.ndarray] = None
    plant: Optional[PlantNode] = None
    direction_rows: Optional[np.ndarray] = None


def parameter_gradient(
    net_v: FeedforwardNet, net_g: Optional[FeedforwardNet], trace: LossTrace
) -> tuple[Grads, Optional[Grads]]:
    """Reverse-mode gradient of a recorded loss w.r.t. both networks."""
    plant = trace.plant
    if plant is not None and plant.jac_u is None:
        raise MissingJacobianError("plant node has no finite-difference Jacobian attached")

    direction = trace.direction
    if trace.direction_rows is not None:
        if plant is None:
            raise ContractViolation("direction_rows given without a plant node")
        rows = np.asarray(trace.direction_rows)
        direction = np.concatenate([plant.f[rows[:, 0]], plant.f[rows[:, 1]]], axis=1)
    use_tangent = direction is not None and trace.direction_seed is not None

    cache = forward_cached(net_v, trace.clf_inputs, direction if use_tangent else None)
    gv, _, dir_bar = backward_cached(
        net_v, cache, trace.value_seed, trace.direction_seed if use_tangent else None
    )
    if plant is None or net_g is None:
        return gv, None

    n = plant.f.shape[1]
    f_bar = np.zeros_like(plant.f) if plant.f_seed is None else np.array(plant.f_seed, dtype=float)
    if use_tangent and trace.direction_rows is not None:
        np.add.at(f_bar, rows[:, 0], dir_bar[:, :n])
        np.add.at(f_bar, rows[:, 1], dir_bar[:, n:])
    u_bar = np.einsum("kn,knm->km", f_bar, plant.jac_u)
    if plant.box is not None:
        inside = (plant.raw_u >= plant.box.u_min) & (plant.raw_u <= plant.box.u_max)
        u_bar = u_bar * inside
    g_cache = forward_cached(net_g, np.concatenate([plant.x, plant.w], axis=1))
    gg, _, _ = backward_cached(net_g, g_cache, u_bar)
    return gv, gg


# ---------------------------------------------------------------------------
# derivative network


def derivative_network(net: FeedforwardNet) -> FeedforwardNet:
    """Network whose output upper-bounds the input gradient of ``net``.

    Keeps ``W_0..W_{N-1}`` and biases, swaps the last hidden activation for
    its derivative and replaces the output layer by
    ``L * W_0^T W_1^T ... W_{N-1}^T diag(W_N)`` with ``L`` the product of the
    activation Lipschitz constants of hidden layers ``1..N-1``. For a single
    hidden layer the output equals the gradient exactly.
    """
    if net.output_dim != 1:
        raise ContractViolation("derivative network needs a scalar-output network")
    if net.depth == 0:
        raise ContractViolation("derivative network needs at least one hidden layer")
    last = ACTIVATIONS[net.activations[-1]]
    if last.derivative is None:
        raise UnsupportedForGradient(f"activation {last.name!r} has no Lipschitz derivative")
    lip = float(np.prod([ACTIVATIONS[t].lipschitz for t in net.activations[:-1]]))
    w_hat = lip * _transpose_chain(net.weights[:-1]) * net.weights[-1][0][None, :]
    return FeedforwardNet(
        [w.copy() for w in net.weights[:-1]] + [w_hat],
        [b.copy() for b in net.biases[:-1]] + [np.zeros(net.input_dim)],
        net.activations[:-1] + [last.derivative],
    )


def _transpose_chain(ws: Sequence[np.ndarray]) -> np.ndarray:
    out = ws[0].T
    for w in ws[1:]:
        out = out @ w.T
    return out


def derivative_network_vjp(net: FeedforwardNet, grad_hat: list[np.ndarray]) -> list[np.ndarray]:
    """Pull gradients on the derivative network's weights back to ``net``'s
    weights (biases of the derivative net are copies and pass straight back,
    handled by the caller)."""
    n_hidden = net.depth
    ws = net.weights
    lip = float(np.prod([ACTIVATIONS[t].lipschitz for t in net.activations[:-1]]))
    out = [g.copy() for g in grad_hat[:n_hidden]] + [np.zeros_like(ws[-1])]
    gamma = grad_hat[-1]  # r x s
    chain = _transpose_chain(ws[:-1])
    wn = ws[-1][0]
    out[-1][0] += lip * np.sum(gamma * chain, axis=0)
    p_bar = lip * gamma * wn[None, :]
    for k in range(n_hidden):
        left = np.eye(ws[0].shape[1]) if k == 0 else _transpose_chain(ws[:k])
        right = np.eye(ws[k].shape[0]) if k == n_hidden - 1 else _transpose_chain(ws[k + 1 : n_hidden])
        # chain = left @ W_k^T @ right
        out[k] += (left.T @ p_bar @ right.T).T
    return out


# ---------------------------------------------------------------------------
# weight files


def save_net(net: FeedforwardNet, path, role: str = "") -> None:
    """Self-describing JSON weight file; float repr round-trips bit-exactly."""
    doc = {
        "format": "neural_diss.ffnet",
        "format_version": FORMAT_VERSION,
        "role": role,
        "n_layers": len(net.weights),
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "activation": net.activations[i] if i < net.depth else None,
                "weight": [float(v) for v in w.ravel(order="C")],
                "bias": [float(v) for v in b],
            }
            for i, (w, b) in enumerate(zip(net.weights, net.biases))
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_net(path) -> FeedforwardNet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "neural_diss.ffnet":
        raise ContractViolation(f"{path}: not a network weight file")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported format version {doc.get('format_version')}")
    layers = doc["layers"]
    if len(layers) != doc["n_layers"]:
        raise ContractViolation(f"{path}: layer count mismatch")
    ws = [np.array(l["weight"], dtype=float).reshape(l["rows"], l["cols"]) for l in layers]
    bs = [np.array(l["bias"], dtype=float) for l in layers]
    acts = [l["activation"] for l in layers[:-1]]
    return FeedforwardNet(ws, bs, acts)
