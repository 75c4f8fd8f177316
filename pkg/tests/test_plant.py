import sys

import numpy as np
import pytest

from neural_diss.plant import (
    BlackBoxSystem,
    DimensionMismatch,
    DivergenceError,
    estimate_dynamics_bound,
    estimate_plant_lipschitz,
    eval_dynamics,
    integrate_rk4,
    jacobians_fd,
    jet_engine,
    linear_toy,
    manipulator,
    scalar_nonaffine,
    spacecraft,
    subprocess_system,
)
from neural_diss.lipcert import WeibullFitConfig
from neural_diss.sampling import BoxDomain, build_cover


def test_equilibria():
    assert np.array_equal(eval_dynamics(scalar_nonaffine(), [0.0], [0.0]), [0.0])
    assert np.array_equal(eval_dynamics(jet_engine(), [0.0, 0.0], [0.0]), [0.0, 0.0])
    assert np.allclose(eval_dynamics(spacecraft(), np.zeros(3), np.zeros(3)), 0.0)


def test_manipulator_substitution():
    assert np.allclose(eval_dynamics(manipulator(1.0, 0.1), [0.0, 1.0], [0.0]), [1.0, -0.1])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        eval_dynamics(jet_engine(), [0.0], [0.0])


def test_batched_matches_single():
    sys_ = spacecraft()
    rng = np.random.default_rng(0)
    X, U = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    batch = eval_dynamics(sys_, X, U)
    for k in range(5):
        assert np.allclose(batch[k], eval_dynamics(sys_, X[k], U[k]))


def test_jacobians_linear_exact():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    sys_ = BlackBoxSystem("lin", 3, 2, lambda x, u: x @ A.T + u @ B.T)
    jx, ju = jacobians_fd(sys_, rng.normal(size=3), rng.normal(size=2), step=1e-4)
    assert np.allclose(jx, A, atol=1e-8) and np.allclose(ju, B, atol=1e-8)


def test_jacobians_second_order_convergence():
    sys_ = jet_engine()
    x, u = np.array([0.3, -0.2]), np.array([0.1])
    ref = jacobians_fd(sys_, x, u, step=1e-6)[0]
    e1 = np.abs(jacobians_fd(sys_, x, u, step=1e-2)[0] - ref).max()
    e2 = np.abs(jacobians_fd(sys_, x, u, step=5e-3)[0] - ref).max()
    assert 3.0 <= e1 / e2 <= 5.0


def test_scalar_plant_jacobians_at_origin():
    jx, ju = jacobians_fd(scalar_nonaffine(0.2), [0.0], [0.0])
    assert jx[0, 0] == pytest.approx(0.2, abs=1e-8)
    assert ju[0, 0] == pytest.approx(0.2, abs=1e-8)


def test_rk4_examples():
    zero = BlackBoxSystem("zero", 1, 1, lambda x, u: np.zeros_like(x))
    tr = integrate_rk4(zero, lambda x, t: [0.0], [0.7], 0.1, 2.0)
    assert np.all(tr.states == 0.7)
    decay = BlackBoxSystem("decay", 1, 1, lambda x, u: -x)
    tr = integrate_rk4(decay, lambda x, t: [0.0], [1.0], 1e-3, 1.0)
    assert tr.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-8)
    drift = BlackBoxSystem("drift", 1, 1, lambda x, u: np.ones_like(x))
    tr = integrate_rk4(drift, lambda x, t: [0.0], [0.25], 0.125, 1.0)
    assert np.allclose(tr.states[:, 0], 0.25 + tr.times, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rk4_divergence():
    blow = BlackBoxSystem("blow", 1, 1, lambda x, u: x**4)
    with pytest.raises(DivergenceError) as exc:
        integrate_rk4(blow, lambda x, t: [0.0], [10.0], 0.5, 100.0)
    assert np.all(np.isfinite(exc.value.last_state))


def test_dynamics_bound_examples():
    xs = build_cover(BoxDomain([-1.0], [1.0]), 0.05)
    ws = build_cover(BoxDomain([-0.1], [0.1]), 0.05)
    const = BlackBoxSystem("c", 1, 1, lambda x, u: np.full_like(x, -3.0))
    assert estimate_dynamics_bound(const, xs, lambda X, W: np.zeros_like(X), ws, 2.0) == pytest.approx(3.0 + 0.1)
    lin = BlackBoxSystem("l", 1, 1, lambda x, u: 2 * x)
    assert estimate_dynamics_bound(lin, xs, lambda X, W: np.zeros_like(X), ws, 1.0) == pytest.approx(2.0 + 0.05)
    one = build_cover(BoxDomain([0.0], [1.0]), 10.0)
    assert estimate_dynamics_bound(lin, one, lambda X, W: np.zeros_like(X), one, 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_plant_lipschitz_linear(c):
    sys_ = BlackBoxSystem("lin", 1, 1, lambda x, u: c * x + u, BoxDomain([-1.0], [1.0]), BoxDomain([-1.0], [1.0]))
    lx, lu = estimate_plant_lipschitz(sys_, WeibullFitConfig(), seed=0)
    assert c <= lx.value <= 1.1 * c
    assert 1.0 <= lu.value <= 1.1


def test_scalar_plant_state_lipschitz():
    lx, _ = estimate_plant_lipschitz(scalar_nonaffine(0.2), WeibullFitConfig(), seed=0)
    assert 0.18 <= lx.value <= 0.25


def test_subprocess_plant_round_trip():
    sys_ = subprocess_system(
        [sys.executable, "-c", "from neural_diss.plant import serve_plant, linear_toy; serve_plant(linear_toy())"], 1, 1
    )
    try:
        out = eval_dynamics(sys_, np.array([[0.5], [-0.25]]), np.array([[0.1], [0.0]]))
        assert np.allclose(out, [[-0.4], [0.25]])
    finally:
        sys_.oracle.close()


def test_linear_toy_boxes():
    t = linear_toy()
    assert t.state_box.dim == t.input_box.dim == t.external_box.dim == 1
